import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmst import tensor as T
from mmst.training import (AdamState, StratificationError, TrainConfig, TrainingError, adam_step,
                           evaluate, focal_loss, forward_probs, inverse_frequency_alpha, kfold,
                           lr_at, stratified_split, to_arrays, train)

from conftest import tiny_model

FIXTURE = np.repeat([0, 1, 2], [70, 20, 10])


# focal loss

def test_focal_reduces_to_cross_entropy(rng):
    worst = 0.0
    for _ in range(1000):
        p = rng.dirichlet(np.ones(rng.integers(2, 6)))
        y = int(rng.integers(p.size))
        worst = max(worst, abs(focal_loss(p, [y], gamma=0.0).item() + math.log(p[y])))
    assert worst < 1e-12


def test_focal_examples():
    assert focal_loss([0.5, 0.5, 0.0], [0], gamma=2.0).item() == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert focal_loss([0.0, 1.0, 0.0], [1]).item() == 0.0
    batch = focal_loss([[0.5, 0.5, 0.0], [0.0, 1.0, 0.0]], [0, 1], gamma=2.0, alpha=[2.0, 1.0, 1.0])
    assert batch.item() == pytest.approx(0.25 * math.log(2), abs=1e-12)


def test_focal_floors_zero_probability():
    assert np.isfinite(focal_loss([1.0, 0.0, 0.0], [2]).item())


def test_focal_rejects_bad_labels():
    with pytest.raises(ValueError):
        focal_loss([0.2, 0.3, 0.5], [3])
    with pytest.raises(ValueError):
        focal_loss([[0.2, 0.3, 0.5]], [0, 1])


def test_inverse_frequency_alpha_has_mean_one():
    alpha = inverse_frequency_alpha(FIXTURE)
    assert np.mean(alpha) == pytest.approx(1.0, abs=1e-15)
    assert alpha[0] * 70 == pytest.approx(alpha[2] * 10)


# optimizer and schedule

def test_adam_zero_gradient_is_identity(rng):
    p = {"w": rng.standard_normal((3, 2))}
    before = p["w"].copy()
    state = AdamState()
    for _ in range(5):
        adam_step(p, {"w": np.zeros((3, 2))}, state, lr=1e-2)
    assert np.array_equal(p["w"], before)


def test_adam_first_step():
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), lr=1e-4)
    assert p["w"][0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)


def test_adam_decoupled_decay():
    p = {"w": np.array([2.0])}
    adam_step(p, {"w": np.array([0.0])}, AdamState(), lr=0.1, weight_decay=0.5)
    assert p["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-15)


def test_adam_is_deterministic(rng):
    grads = [rng.standard_normal(4) for _ in range(10)]
    runs = []
    for _ in range(2):
        p, s = {"w": np.ones(4)}, AdamState()
        for g in grads:
            adam_step(p, {"w": g}, s, lr=1e-3, weight_decay=1e-4)
        runs.append(p["w"])
    assert np.array_equal(*runs)


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.ones(3)}, {"w": np.ones(4)}, AdamState(), lr=1e-3)


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 1e-4 and lr_at(4, cfg) == 1e-4
    assert lr_at(12, cfg) == pytest.approx(7.225e-5, rel=1e-12)
    values = [lr_at(e, cfg) for e in range(60)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert all(len({values[e] for e in range(5 * k, 5 * k + 5)}) == 1 for k in range(12))


@pytest.mark.parametrize("kw", [dict(learning_rate=0.0), dict(batch_size=0), dict(lr_gamma=1.5),
                                dict(focal_gamma=-1.0), dict(folds=0)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw).validate()


# splitting

def test_stratified_split_fixture():
    train_idx, test = stratified_split(FIXTURE, 0.2, seed=0)
    assert np.bincount(FIXTURE[test]).tolist() == [14, 4, 2]
    assert sorted(np.concatenate([train_idx, test]).tolist()) == list(range(100))
    assert stratified_split(FIXTURE, 0.0)[1].size == 0


def test_stratified_split_determinism():
    a = stratified_split(FIXTURE, 0.2, seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, stratified_split(FIXTURE, 0.2, seed=3)))
    b = stratified_split(FIXTURE, 0.2, seed=4)
    assert not np.array_equal(a[1], b[1])
    assert np.bincount(FIXTURE[a[1]]).tolist() == np.bincount(FIXTURE[b[1]]).tolist()


def test_stratified_split_small_class_error():
    with pytest.raises(StratificationError, match="class 2"):
        stratified_split(np.repeat([0, 1, 2], [50, 20, 3]), 0.2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(10, 80), min_size=2, max_size=4), st.integers(0, 10 ** 6),
       st.sampled_from([0.1, 0.2, 0.25, 0.3]))
def test_stratified_split_proportions(counts, seed, fraction):
    labels = np.repeat(np.arange(len(counts)), counts)
    _, test = stratified_split(labels, fraction, seed)
    got = np.bincount(labels[test], minlength=len(counts))
    assert np.all(np.abs(got - np.array(counts) * fraction) <= 1)
    assert test.size == math.floor(len(labels) * fraction + 0.5)


def test_kfold_partition_and_sizes():
    labels = np.repeat([0, 1], [60, 40])
    folds = kfold(labels, 5, seed=1)
    assert [len(va) for _, va in folds] == [20] * 5
    vals = np.concatenate([va for _, va in folds])
    assert sorted(vals.tolist()) == list(range(100))
    for tr, va in folds:
        assert not set(tr) & set(va) and len(tr) + len(va) == 100


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(5, 60), min_size=2, max_size=4), st.integers(0, 10 ** 6))
def test_kfold_class_ratios_within_one(counts, seed):
    labels = np.repeat(np.arange(len(counts)), counts)
    for _, va in kfold(labels, 5, seed):
        got = np.bincount(labels[va], minlength=len(counts))
        assert np.all(np.abs(got - np.array(counts) / 5) <= 1)


def test_kfold_fixture_ratios():
    for _, va in kfold(FIXTURE, 5, seed=0):
        assert np.bincount(FIXTURE[va]).tolist() == [14, 4, 2]


def test_kfold_errors():
    with pytest.raises(StratificationError):
        kfold(np.repeat([0, 1], [20, 3]), 5)
    with pytest.raises(ValueError):
        kfold(FIXTURE, 1)


# training loop

def _split(data):
    tr, va = stratified_split(data.labels, 0.25, seed=0)
    return data.subset(tr), data.subset(va)


def test_one_step_reduces_batch_loss(small_synth):
    data, _ = small_synth
    train_data, _ = _split(data)
    batch_data = train_data.subset(np.arange(16))
    model = tiny_model(seed=0)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=16, epochs=0, focal_alpha=[1.0, 1.0, 1.0])
    train(model, batch_data, None, cfg)                # fits normalization only
    arrays = to_arrays(batch_data, model.structured.cfg.zone_vocab)
    before, _, _ = evaluate(model, arrays, alpha=cfg.focal_alpha)
    train(model, batch_data, None, TrainConfig(learning_rate=1e-3, batch_size=16, epochs=1,
                                               focal_alpha=[1.0, 1.0, 1.0]))
    after, _, _ = evaluate(model, arrays, alpha=cfg.focal_alpha)
    assert after < before


def test_zero_epochs_returns_initialization(small_synth):
    data, _ = small_synth
    model = tiny_model(seed=2)
    init = model.state_dict()
    result = train(model, *_split(data), TrainConfig(epochs=0))
    assert len(result.history) == 0 and result.best_epoch == -1
    for name, value in init.items():
        assert np.array_equal(result.final_state[name], value)


def test_training_is_bit_reproducible(small_synth):
    data, _ = small_synth
    runs = []
    for _ in range(2):
        model = tiny_model(seed=5)
        result = train(model, *_split(data), TrainConfig(learning_rate=1e-3, batch_size=8,
                                                         epochs=2, seed=11))
        runs.append((result.history.values(), result.final_state))
    assert runs[0][0] == runs[1][0]
    for name in runs[0][1]:
        assert np.array_equal(runs[0][1][name], runs[1][1][name])
    assert len(runs[0][0]["train_loss"]) == 2


def test_best_state_tracks_best_validation_mcc(small_synth):
    data, _ = small_synth
    result = train(tiny_model(seed=1), *_split(data),
                   TrainConfig(learning_rate=3e-3, batch_size=8, epochs=3))
    mccs = result.history.val_mcc
    assert result.best_val_mcc == max(mccs)
    assert result.best_epoch == mccs.index(max(mccs))
    assert result.history.to_tsv().count("\n") == 4


def test_non_finite_loss_aborts_with_step(small_synth):
    data, _ = small_synth
    model = tiny_model()
    model.classifier.bias.data[:] = np.nan
    with pytest.raises(TrainingError, match="epoch 0, step 0"):
        train(model, *_split(data), TrainConfig(epochs=1))


def test_forward_probs_are_distributions(small_synth):
    data, _ = small_synth
    model = tiny_model()
    train(model, data, None, TrainConfig(epochs=0))
    arrays = to_arrays(data, model.structured.cfg.zone_vocab)
    images, batch, _ = arrays.batch(np.arange(5))
    with T.no_grad():
        p = forward_probs(model, images, batch).data
    assert np.abs(p.sum(-1) - 1).max() < 1e-12
