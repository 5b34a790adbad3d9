import numpy as np
import pytest

from mmst import tensor as T
from mmst.nn import MultiHeadSelfAttention
from mmst.swin import (FeatureMap, PatchMerging, SwinBlockPair, SwinConfig, SwinImageExtractor,
                       WindowAttention, attention_mask, cyclic_shift, effective_window,
                       global_attention, partition_pixels, window_partition, window_reverse)
from mmst.tensor import DimensionError, Tensor

from conftest import tiny_swin


def make_map(rng, b=2, h=8, w=8, c=8):
    return Tensor(rng.standard_normal((b, h, w, c)))


# configuration

def test_config_defaults_and_presets():
    cfg = SwinConfig()
    assert (cfg.image_size, cfg.patch_size, cfg.embed_dim, cfg.window_size, cfg.out_dim) == (64, 4, 32, 4, 64)
    assert cfg.stage_depths == [2, 2, 2, 2] and cfg.heads_per_stage == [2, 4, 8, 8]
    cfg.validate()
    big = SwinConfig.full_scale()
    assert big.stage_depths == [2, 2, 18, 2]
    big.validate()
    SwinConfig.desk().validate()


@pytest.mark.parametrize("kw", [dict(image_size=66), dict(stage_depths=[2, 3, 2, 2]),
                                dict(heads_per_stage=[3, 4, 8, 8]), dict(weight_init="xavier")])
def test_config_rejects_invalid(kw):
    with pytest.raises((ValueError, DimensionError)):
        SwinConfig(**kw).validate()


# patch partition

def test_patch_partition_shapes(rng):
    images = rng.uniform(size=(1, 64, 64, 3))
    assert partition_pixels(images, 4).shape == (1, 16, 16, 48)
    assert partition_pixels(images, 64).shape == (1, 1, 1, 64 * 64 * 3)
    with pytest.raises(DimensionError):
        partition_pixels(rng.uniform(size=(1, 10, 10, 3)), 4)


def test_swapping_two_patches_swaps_their_tokens(rng):
    model = SwinImageExtractor(tiny_swin(), rng)
    images = rng.uniform(size=(1, 16, 16, 3))
    swapped = images.copy()
    swapped[:, 0:4, 0:4], swapped[:, 8:12, 4:8] = images[:, 8:12, 4:8], images[:, 0:4, 0:4]
    a = model.patch_partition(images).values.data
    b = model.patch_partition(swapped).values.data
    assert np.array_equal(a[0, 0, 0], b[0, 2, 1]) and np.array_equal(a[0, 2, 1], b[0, 0, 0])
    untouched = np.ones((4, 4), bool)
    untouched[0, 0] = untouched[2, 1] = False
    assert np.array_equal(a[0][untouched], b[0][untouched])


# windows

def test_window_partition_shapes_and_inverse(rng):
    x = make_map(rng, b=2, h=16, w=16, c=4)
    win = window_partition(x, 4)
    assert win.shape == (2 * 16, 16, 4)
    assert np.array_equal(window_reverse(win, 4, 16, 16).data, x.data)
    whole = window_partition(make_map(rng, b=1, h=4, w=4, c=3), 4)
    assert whole.shape == (1, 16, 3)


def test_window_partition_rejects_indivisible(rng):
    with pytest.raises(DimensionError):
        window_partition(make_map(rng, h=6, w=6), 4)


def test_window_contents_are_contiguous_blocks(rng):
    x = make_map(rng, b=1, h=8, w=8, c=2)
    win = window_partition(x, 4).data
    # window 1 is the top-right 4x4 block, read row-major
    np.testing.assert_array_equal(win[1], x.data[0, 0:4, 4:8].reshape(16, 2))


def test_cyclic_shift_identity_and_group_property(rng):
    x = make_map(rng, h=8, w=8)
    assert cyclic_shift(x, 0) is x
    back = cyclic_shift(cyclic_shift(x, 3), 8 - 3)
    assert np.array_equal(back.data, x.data)
    assert np.array_equal(attention_mask(8, 8, 4, 0), np.zeros((4, 16, 16)))


def test_effective_window_clamps_small_maps():
    assert effective_window(16, 16, 4, 2) == (4, 2)
    assert effective_window(4, 4, 4, 2) == (4, 0)
    assert effective_window(2, 2, 4, 2) == (2, 0)


# attention equivalences

def test_single_window_equals_global_attention(rng):
    x = make_map(rng, b=2, h=4, w=4, c=8)
    wa = WindowAttention(8, 2, 4, 0, np.random.default_rng(5))
    full = MultiHeadSelfAttention(8, 2, np.random.default_rng(5))
    diff = np.abs(wa(x).data - global_attention(full, x).data).max()
    assert diff < 1e-10


def test_shift_zero_equals_unshifted_exactly(rng):
    x = make_map(rng)
    a = WindowAttention(8, 2, 4, 0, np.random.default_rng(9))
    b = WindowAttention(8, 2, 4, 0, np.random.default_rng(9))
    b.shift = 0
    assert np.array_equal(a(x).data, b(x).data)


def test_equal_tokens_give_uniform_attention(rng):
    x = Tensor(np.tile(rng.standard_normal(8), (1, 8, 8, 1)))
    wa = WindowAttention(8, 2, 4, 0, rng)
    wa.attn.keep_attention = True
    wa(x)
    np.testing.assert_allclose(wa.attn.last_attention, 1.0 / 16, atol=1e-15)


def test_attention_rows_sum_to_one(rng):
    wa = WindowAttention(8, 2, 4, 2, rng)
    wa.attn.keep_attention = True
    wa(make_map(rng))
    p = wa.attn.last_attention
    assert np.abs(p.sum(axis=-1) - 1).max() < 1e-12
    assert p.min() >= 0


def _regions(h, w, m, s):
    """Region label of each shifted position (rows and columns split at h-m, h-s)."""
    def band(i, n):
        return 0 if i < n - m else (1 if i < n - s else 2)
    return {(i, j): (band(i, h), band(j, w)) for i in range(h) for j in range(w)}


def test_shifted_window_attention_matches_brute_force_regions(rng):
    h = w = 8
    m, s, c, heads = 4, 2, 8, 2
    x = rng.standard_normal((1, h, w, c))
    wa = WindowAttention(c, heads, m, s, rng)
    got = wa(Tensor(x)).data[0]

    att = wa.attn
    wq, wk, wv = att.w_q.data, att.w_k.data, att.w_v.data
    wo, bo = att.proj.weight.data, att.proj.bias.data
    dk = c // heads
    region = _regions(h, w, m, s)
    shifted = {(i, j): ((i - s) % h, (j - s) % w) for i in range(h) for j in range(w)}
    expected = np.zeros((h, w, c))
    for (i, j), (si, sj) in shifted.items():
        keys = [(a, b) for (a, b), (sa, sb) in shifted.items()
                if (sa // m, sb // m) == (si // m, sj // m) and region[(sa, sb)] == region[(si, sj)]]
        heads_out = []
        for hd in range(heads):
            cols = slice(hd * dk, (hd + 1) * dk)
            q = x[0, i, j] @ wq[:, cols]
            k = np.array([x[0, a, b] @ wk[:, cols] for a, b in keys])
            v = np.array([x[0, a, b] @ wv[:, cols] for a, b in keys])
            logits = k @ q / np.sqrt(dk)
            p = np.exp(logits - logits.max())
            heads_out.append((p / p.sum()) @ v)
        expected[i, j] = np.concatenate(heads_out) @ wo + bo
    assert np.abs(got - expected).max() < 1e-10


def test_mask_blocks_pairs_across_the_seam():
    mask = attention_mask(8, 8, 4, 2)
    assert mask.shape == (4, 16, 16)
    assert np.all(mask[0] == 0)                  # top-left window holds one region
    assert np.any(mask[3] < 0)                   # bottom-right window mixes four regions
    assert np.array_equal(mask, mask.transpose(0, 2, 1))


# blocks

def _zero_branches(pair: SwinBlockPair) -> None:
    for block in (pair.regular, pair.shifted):
        for lin in (block.attn.attn.proj, block.mlp.fc2):
            lin.weight.data[:] = 0.0
            lin.bias.data[:] = 0.0


def test_zero_residual_branches_give_identity(rng):
    pair = SwinBlockPair(8, 2, 4, 4.0, rng)
    _zero_branches(pair)
    fm = FeatureMap(make_map(rng))
    assert np.array_equal(pair(fm).values.data, fm.values.data)


def test_block_pair_preserves_shape_and_residuals_matter(rng):
    pair = SwinBlockPair(8, 2, 4, 4.0, np.random.default_rng(2))
    fm = FeatureMap(make_map(rng))
    with_res = pair(fm).values.data
    assert with_res.shape == fm.values.shape
    for block in (pair.regular, pair.shifted):
        block.residual = False
    assert not np.allclose(pair(fm).values.data, with_res)


def test_patch_merging_shapes(rng):
    merge = PatchMerging(32, rng)
    assert merge(FeatureMap(make_map(rng, b=1, h=16, w=16, c=32))).values.shape == (1, 8, 8, 64)
    assert PatchMerging(4, rng)(FeatureMap(make_map(rng, b=1, h=2, w=2, c=4))).values.shape == (1, 1, 1, 8)
    with pytest.raises(DimensionError):
        merge(FeatureMap(make_map(rng, b=1, h=3, w=4, c=32)))


def test_patch_merging_locality(rng):
    merge = PatchMerging(4, rng)
    x = make_map(rng, b=1, h=8, w=8, c=4)
    base = merge(FeatureMap(x)).values.data
    bumped = x.data.copy()
    bumped[0, 5, 2] += 1.0                        # lives in output token (2, 1)
    out = merge(FeatureMap(Tensor(bumped))).values.data
    changed = np.argwhere(np.abs(out - base).max(axis=-1)[0] > 0)
    assert changed.tolist() == [[2, 1]]


# whole branch

def test_image_features_shape_and_determinism(rng):
    cfg = SwinConfig()
    model = SwinImageExtractor(cfg, np.random.default_rng(0))
    images = rng.uniform(size=(1, 64, 64, 3))
    out = model(images)
    assert out.shape == (1, 64)
    assert np.array_equal(model(images).data, out.data)
    twin = SwinImageExtractor(SwinConfig(), np.random.default_rng(0))
    assert np.array_equal(twin(images).data, out.data)


def test_image_size_mismatch_raises(rng):
    model = SwinImageExtractor(tiny_swin(), rng)
    with pytest.raises(DimensionError):
        model(rng.uniform(size=(1, 32, 32, 3)))


def test_late_stage_uses_clamped_window(rng):
    model = SwinImageExtractor(tiny_swin(), rng)
    model.keep_attention(True)
    model(rng.uniform(size=(2, 16, 16, 3)))
    # stage 2 is a 2x2 map: one window of 4 tokens per image, no shift
    assert model.last_stage_attention().shape == (2, 2, 4, 4)


def test_weight_init_schemes_differ_in_scale():
    small = SwinImageExtractor(tiny_swin(), np.random.default_rng(0))
    wide = SwinImageExtractor(tiny_swin(weight_init="fan_in"), np.random.default_rng(0))
    assert np.abs(small.patch_embed.weight.data).max() <= 0.04 + 1e-12
    std = wide.patch_embed.weight.data.std()
    assert 0.5 / np.sqrt(48) < std < 1.5 / np.sqrt(48)


def test_branch_gradcheck_on_parameter_subset(rng):
    from mmst.gradcheck import gradcheck
    model = SwinImageExtractor(tiny_swin(weight_init="fan_in"), np.random.default_rng(4))
    images = rng.uniform(size=(1, 16, 16, 3))
    f = lambda _: T.sum(model(images))  # noqa: E731
    for p in (model.patch_embed.weight, model.stages[0].pairs[0].shifted.attn.attn.w_q,
              model.head.bias):
        coords = rng.choice(p.size, min(6, p.size), replace=False)
        assert gradcheck(f, p, coords=coords) < 1e-4
