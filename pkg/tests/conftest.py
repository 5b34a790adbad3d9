import numpy as np
import pytest

from mmst.config import RunConfig
from mmst.fusion import MMST, FusionConfig
from mmst.structured import CONTINUOUS, StructuredBatch, StructuredConfig, StructuredRecord
from mmst.swin import SwinConfig
from mmst.synth import SynthSpec, synth_generate
from mmst.training import TrainConfig


def tiny_swin(**kw) -> SwinConfig:
    base = dict(image_size=16, patch_size=4, embed_dim=8, stage_depths=[2, 2],
                heads_per_stage=[2, 2], window_size=2, mlp_ratio=2.0, out_dim=8)
    base.update(kw)
    return SwinConfig(**base)


def tiny_structured(**kw) -> StructuredConfig:
    cfg = StructuredConfig(token_dim=10, heads=5, out_dim=8, **kw)
    cfg.means = [30.0, 2e5, 40.0, 90.0]
    cfg.stds = [15.0, 8e4, 20.0, 25.0]
    return cfg


def tiny_model(seed: int = 0, ratio: float = 0.8, mode: str = "fused") -> MMST:
    return MMST(tiny_swin(), tiny_structured(), FusionConfig(ratio=ratio, feature_dim=8, mode=mode),
                seed=seed)


def random_batch(rng: np.random.Generator, n: int, image_size: int = 16):
    images = rng.uniform(0.0, 1.0, (n, image_size, image_size, 3))
    values = np.column_stack([rng.uniform(0, 80, n), rng.uniform(5e4, 5e5, n),
                              rng.uniform(0, 100, n), rng.uniform(40, 150, n)])
    return images, StructuredBatch(rng.integers(0, 6, n), values)


def record(**kw) -> StructuredRecord:
    base = dict(evac_zone="A", building_age=30.0, building_value=2e5, dist_track=40.0,
                wind_speed=90.0)
    base.update(kw)
    return StructuredRecord(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    data, truth = synth_generate(SynthSpec(n_samples=60, seed=3, image_size=16))
    return data, truth


@pytest.fixture(scope="session")
def continuous_names():
    return CONTINUOUS


def tiny_run_config(seed: int = 0, **train) -> RunConfig:
    """A RunConfig small enough to train in well under a second per epoch."""
    cfg = RunConfig(seed=seed)
    cfg.swin = tiny_swin(weight_init="fan_in")
    cfg.structured = StructuredConfig(token_dim=10, heads=5, out_dim=8)
    cfg.fusion = FusionConfig(feature_dim=8)
    cfg.train = TrainConfig(learning_rate=1e-3, batch_size=16, epochs=1, folds=2)
    for key, value in train.items():
        setattr(cfg.train, key, value)
    cfg.synth = SynthSpec(n_samples=120, seed=3, image_size=16)
    return cfg


@pytest.fixture(scope="session")
def synth_120():
    data, _ = synth_generate(SynthSpec(n_samples=120, seed=3, image_size=16))
    return data
