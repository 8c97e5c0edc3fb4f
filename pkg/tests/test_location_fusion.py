import math

import numpy as np
import pytest

from harmonizer import tensor as T
from harmonizer.location_fusion import LocationFusion, split_tokens
from harmonizer.masks import MaskPair
from harmonizer.tensor import ParamStore, Tensor


def t64(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


def row_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def build_fusion(channels, seed=0, attn_scale=1.0):
    store = ParamStore()
    rng = np.random.default_rng(seed)
    layer = LocationFusion(channels, store, "fusion", rng, dtype=np.float64,
                           attn_scale=attn_scale)
    return layer, store


def fusion_oracle(x, mask, layer, eps=1e-5):
    """Straight-line recomputation: preamble attention + norm, then an
    explicit per-foreground-row loop over similarity, matching, and fusion."""
    _, c, h, w = x.shape
    tokens = x[0].reshape(c, h * w).T
    q = tokens @ layer.attention.query.weight.data.T + layer.attention.query.bias.data
    k = tokens @ layer.attention.key.weight.data.T + layer.attention.key.bias.data
    v = tokens @ layer.attention.value.weight.data.T + layer.attention.value.bias.data
    attn = row_softmax((q @ k.T) / math.sqrt(c))
    mixed = tokens + (attn @ v) @ layer.attention.out.weight.data.T + layer.attention.out.bias.data
    mean = mixed.mean(axis=0)
    var = mixed.var(axis=0)
    normed = (mixed - mean) / np.sqrt(var + eps)

    flat = mask.reshape(-1)
    fg = np.flatnonzero(flat == 1)
    bg = np.flatnonzero(flat == 0)
    out = normed.copy()
    fg_tok = normed[fg]
    bg_tok = normed[bg]
    if len(bg) == 0:
        return out.T.reshape(1, c, h, w), normed, np.zeros((0, c)), bg_tok
    wf = layer.fuse.weight.data
    bf = layer.fuse.bias.data
    matched_rows = []
    for r in range(len(fg)):
        sims = np.array([fg_tok[r] @ bg_tok[j] for j in range(len(bg))])
        weights = row_softmax(sims[None])[0]
        matched = np.zeros(c)
        for j in range(len(bg)):
            matched += weights[j] * bg_tok[j]
        matched_rows.append(matched)
        out[fg[r]] = wf @ np.concatenate([fg_tok[r], matched]) + bf
    return out.T.reshape(1, c, h, w), normed, np.array(matched_rows), bg_tok


class TestSplitTokens:
    def test_all_zero_mask(self):
        rng = np.random.default_rng(0)
        f = t64(rng.normal(size=(1, 3, 4, 4)))
        split = split_tokens(f, MaskPair(np.zeros((1, 1, 4, 4))))
        assert split.fg_count == 0
        assert split.bg_count == 16

    def test_checkerboard(self):
        mask = np.array([[1.0, 0.0], [0.0, 1.0]])
        f = t64(np.arange(8.0).reshape(1, 2, 2, 2))
        split = split_tokens(f, MaskPair(mask))
        assert split.fg_count == 2 and split.bg_count == 2
        np.testing.assert_array_equal(split.fg_index, [0, 3])
        np.testing.assert_array_equal(split.bg_index, [1, 2])

    def test_scatter_roundtrip_bit_exact(self):
        rng = np.random.default_rng(1)
        f = t64(rng.normal(size=(1, 3, 5, 5)))
        mask = (rng.uniform(size=(1, 1, 5, 5)) < 0.4).astype(float)
        split = split_tokens(f, MaskPair(mask))
        assert split.fg_count + split.bg_count == 25
        from harmonizer.layers import from_tokens, to_tokens

        tokens = to_tokens(f)
        rebuilt = T.scatter_rows(
            T.scatter_rows(tokens, split.fg_index, split.fg_tokens),
            split.bg_index,
            split.bg_tokens,
        )
        assert (from_tokens(rebuilt, f.shape).data == f.data).all()


class TestLocationFusion:
    def test_single_background_token(self):
        # with one key, every attention row is [1.0]
        layer, _ = build_fusion(3, seed=2)
        rng = np.random.default_rng(3)
        f = t64(rng.normal(size=(1, 3, 2, 2)))
        mask = np.ones((1, 1, 2, 2))
        mask[0, 0, 1, 1] = 0
        layer(f, MaskPair(mask))
        attn = layer.last_attention[0]
        assert attn.shape == (3, 1)
        np.testing.assert_allclose(attn, 1.0, atol=1e-12)

    def test_identical_background_tokens(self):
        # constant input gives identical background tokens after the preamble;
        # every matched row must equal that single token value
        layer, _ = build_fusion(2, seed=4)
        rng = np.random.default_rng(5)
        f_arr = rng.normal(size=(1, 2, 3, 3))
        # make the two background cells identical in the input
        f_arr[0, :, 2, 1] = f_arr[0, :, 2, 2]
        mask = np.ones((1, 1, 3, 3))
        mask[0, 0, 2, 1] = 0
        mask[0, 0, 2, 2] = 0
        # the preamble mixes tokens, so identical *inputs* are not enough for
        # exact equality; use the oracle's intermediates instead
        _, _, matched, bg_tok = fusion_oracle(f_arr, mask, layer)
        out = layer(t64(f_arr), MaskPair(mask))
        attn = layer.last_attention[0]
        expected = attn @ bg_tok
        hull_lo = bg_tok.min(axis=0) - 1e-12
        hull_hi = bg_tok.max(axis=0) + 1e-12
        assert (expected >= hull_lo).all() and (expected <= hull_hi).all()
        np.testing.assert_allclose(matched, expected, atol=1e-10)

    def test_matches_per_row_oracle(self):
        layer, _ = build_fusion(4, seed=6)
        rng = np.random.default_rng(7)
        f_arr = rng.normal(size=(1, 4, 8, 8))
        mask = (rng.uniform(size=(1, 1, 8, 8)) < 0.35).astype(float)
        out = layer(t64(f_arr), MaskPair(mask))
        expected, _, _, _ = fusion_oracle(f_arr, mask, layer)
        assert np.abs(out.data - expected).max() < 1e-6

    def test_background_rows_equal_post_preamble(self):
        layer, _ = build_fusion(3, seed=8)
        rng = np.random.default_rng(9)
        f_arr = rng.normal(size=(1, 3, 6, 6))
        mask = (rng.uniform(size=(1, 1, 6, 6)) < 0.3).astype(float)
        out = layer(t64(f_arr), MaskPair(mask)).data
        _, normed, _, _ = fusion_oracle(f_arr, mask, layer)
        post = normed.T.reshape(1, 3, 6, 6)
        bg = np.broadcast_to(mask == 0, out.shape)
        # oracle recomputes in the same dtype; agreement should be at rounding level
        assert np.abs(out[bg] - post[bg]).max() < 1e-12

    def test_attention_rows_sum_to_one(self):
        layer, _ = build_fusion(3, seed=10)
        rng = np.random.default_rng(11)
        f = t64(rng.normal(size=(1, 3, 5, 5)))
        mask = (rng.uniform(size=(1, 1, 5, 5)) < 0.5).astype(float)
        layer(f, MaskPair(mask))
        attn = layer.last_attention[0]
        l_f = int(mask.sum())
        assert attn.shape == (l_f, 25 - l_f)
        np.testing.assert_allclose(attn.sum(axis=1), 1.0, atol=1e-6)
        assert (attn >= 0).all()

    def test_empty_foreground_identity(self):
        layer, _ = build_fusion(2, seed=12)
        rng = np.random.default_rng(13)
        f_arr = rng.normal(size=(1, 2, 4, 4))
        out = layer(t64(f_arr), MaskPair(np.zeros((1, 1, 4, 4))))
        assert (out.data == f_arr).all()

    def test_empty_background_returns_post_norm(self):
        layer, _ = build_fusion(2, seed=14)
        rng = np.random.default_rng(15)
        f_arr = rng.normal(size=(1, 2, 4, 4))
        out = layer(t64(f_arr), MaskPair(np.ones((1, 1, 4, 4)))).data
        _, normed, _, _ = fusion_oracle(f_arr, np.ones((1, 1, 4, 4)), layer)
        np.testing.assert_allclose(out, normed.T.reshape(1, 2, 4, 4), atol=1e-12)

    def test_batched_matches_per_sample(self):
        layer, _ = build_fusion(3, seed=16)
        rng = np.random.default_rng(17)
        f_arr = rng.normal(size=(2, 3, 4, 4))
        mask = (rng.uniform(size=(2, 1, 4, 4)) < 0.4).astype(float)
        batched = layer(t64(f_arr), MaskPair(mask)).data
        for i in range(2):
            single = layer(t64(f_arr[i : i + 1]), MaskPair(mask[i : i + 1])).data
            np.testing.assert_array_equal(batched[i : i + 1], single)

    def test_full_module_gradient_with_foreground_loss(self):
        layer, store = build_fusion(4, seed=18)
        rng = np.random.default_rng(19)
        f = t64(rng.normal(size=(1, 4, 8, 8)))
        mask_arr = (rng.uniform(size=(1, 1, 8, 8)) < 0.35).astype(float)
        pair = MaskPair(mask_arr)
        target = rng.normal(size=(1, 4, 8, 8))
        denom = max(100.0, mask_arr.sum())

        def objective():
            out = layer(f, pair)
            diff = (out - target) * mask_arr
            return (diff * diff).sum() * (1.0 / denom)

        err = T.grad_check(objective, store)
        assert err < 1e-4
