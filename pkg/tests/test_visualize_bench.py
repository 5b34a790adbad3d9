import numpy as np
import pytest

from mmst import bench as B
from mmst import visualize as V
from mmst.swin import SwinImageExtractor
from mmst.tensor import DimensionError

from conftest import tiny_swin


# heatmaps

def test_token_heatmap_undoes_partition_and_shift():
    # one image, 4x4 map, 2x2 windows; every query attends fully to key 0 of its window
    probs = np.zeros((4, 1, 4, 4))
    probs[:, :, :, 0] = 1.0
    grid = V.token_heatmap(probs, 1, 4, 4, 2, 0)
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1.0
    np.testing.assert_array_equal(grid[0], expected)
    shifted = V.token_heatmap(probs, 1, 4, 4, 2, 1)
    np.testing.assert_array_equal(shifted[0], np.roll(expected, (1, 1), axis=(0, 1)))


def test_upsample_constant_and_identity(rng):
    const = np.full((2, 3, 3), 0.4)
    np.testing.assert_allclose(V.upsample_bilinear(const, 12), 0.4, atol=1e-15)
    grid = rng.uniform(size=(1, 4, 4))
    np.testing.assert_allclose(V.upsample_bilinear(grid, 4), grid, atol=1e-15)
    up = V.upsample_bilinear(grid, 16)
    assert up.shape == (1, 16, 16) and grid.min() - 1e-12 <= up.min() and up.max() <= grid.max() + 1e-12


def test_normalize_range_and_constant_map(rng):
    heat = V.normalize(rng.normal(size=(3, 8, 8)))
    assert heat.min() == 0.0 and heat.max() == 1.0
    assert np.all(V.normalize(np.ones((1, 4, 4))) == 0.0)


def test_attention_heatmap_extent_and_range(rng):
    model = SwinImageExtractor(tiny_swin(), rng)
    images = rng.uniform(size=(3, 16, 16, 3))
    heat = V.attention_heatmap(model, images)
    assert heat.shape == (3, 16, 16)
    assert heat.min() >= 0.0 and heat.max() <= 1.0
    assert not model.stages[-1].pairs[-1].shifted.attn.attn.keep_attention     # recording switched off again
    with pytest.raises(DimensionError):
        V.attention_heatmap(model, rng.uniform(size=(1, 8, 8, 3)))


def test_overlay_and_quadrant_mass():
    image = np.full((4, 4, 3), 0.5)
    heat = np.zeros((4, 4))
    heat[2:, 2:] = 1.0
    out = V.overlay(image, heat, strength=1.0)
    np.testing.assert_array_equal(out[3, 3], [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(out[0, 0], [0.5, 0.5, 0.5])
    assert V.quadrant_mass(heat, 3) == 1.0 and V.quadrant_mass(heat, 0) == 0.0
    assert V.quadrant_mass(np.zeros((4, 4)), 1) == 0.25


# attention cost

def test_bench_mac_growth():
    rows = B.bench_attention(sides=(8, 16), windows=(4,), repeats=1)
    wmsa, global_ = B.growth(rows, 8, 16, 4)
    assert wmsa == pytest.approx(4.0, abs=0.2)
    assert global_ == pytest.approx(16.0, abs=0.8)
    assert rows[1].tokens == 4 * rows[0].tokens


def test_bench_window_equal_to_side_matches_global():
    row = B.bench_one(4, 4, repeats=1)
    assert row.wmsa_core_macs == row.global_core_macs


def test_bench_rejects_bad_geometry():
    with pytest.raises(DimensionError):
        B.bench_one(10, 4, repeats=1)


def test_bench_table_header():
    text = B.table_tsv(B.bench_attention(sides=(8,), windows=(4,), repeats=1))
    assert text.splitlines()[0].split("\t")[:3] == ["side", "window", "tokens"]
    assert len(text.splitlines()) == 2
