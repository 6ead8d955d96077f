"""Attention blocks: mask semantics, zero-conv behavior, dense oracles, gradients."""

import math

import numpy as np
import pytest

from promptmatte.attention import (
    AttentionParams,
    export_attention_map,
    gather_params,
    init_cross_attention,
    init_self_attention,
    masked_self_attention,
    prompt_cross_attention,
)
from promptmatte.errors import DimensionError
from promptmatte.prompts import VisualPrompt, attention_mask_build
from promptmatte.tensor import Tensor, check_gradient


def make_self_params(channels, heads, seed=0, dtype=np.float64, scale=1.0):
    raw = init_self_attention(channels, heads, np.random.default_rng(seed), dtype=dtype)
    g = np.random.default_rng(seed + 1)
    for key in ("bq", "bk", "bv", "bo"):
        raw[key] = (g.normal(size=raw[key].shape) * 0.1 * scale).astype(dtype)
    tensors = {f"a.{k}": Tensor(v) for k, v in raw.items()}
    return gather_params(tensors, "a", heads)


def make_cross_params(channels, ctx, prompt_ch, heads, seed=0, dtype=np.float64):
    raw = init_cross_attention(channels, ctx, prompt_ch, heads,
                               np.random.default_rng(seed), dtype=dtype)
    g = np.random.default_rng(seed + 1)
    for key in ("bq", "bk", "bv", "bo"):
        raw[key] = (g.normal(size=raw[key].shape) * 0.1).astype(dtype)
    tensors = {f"c.{k}": Tensor(v) for k, v in raw.items()}
    return gather_params(tensors, "c", heads)


def dense_self_attention_oracle(x, p, mask=None, eps=1e-6):
    """Per-head attention computed with plain numpy loops."""
    n, l, c = x.shape
    heads, dk = p.heads, c // p.heads
    q = x @ p.wq.data.T + p.bq.data
    k = x @ p.wk.data.T + p.bk.data
    v = x @ p.wv.data.T + p.bv.data
    out = np.zeros_like(q)
    for b in range(n):
        merged = []
        for h in range(heads):
            sl = slice(h * dk, (h + 1) * dk)
            scores = q[b, :, sl] @ k[b, :, sl].T / math.sqrt(dk)
            if mask is not None:
                scores = scores + np.log(mask.reshape(-1) + eps)[None, :]
            e = np.exp(scores - scores.max(axis=-1, keepdims=True))
            probs = e / e.sum(axis=-1, keepdims=True)
            merged.append(probs @ v[b, :, sl])
        out[b] = np.concatenate(merged, axis=-1)
    return out @ p.wo.data.T + p.bo.data


class TestMaskedSelfAttention:
    def test_all_ones_mask_equals_unmasked(self):
        g = np.random.default_rng(2)
        x = Tensor(g.normal(size=(2, 9, 8)), dtype=np.float64)
        p = make_self_params(8, 2)
        masked = masked_self_attention(x, np.ones(9), p)
        plain = masked_self_attention(x, None, p)
        np.testing.assert_allclose(masked.data, plain.data, atol=1e-6)

    def test_zeroed_key_excluded(self):
        g = np.random.default_rng(3)
        x = Tensor(g.normal(size=(1, 2, 4)) * 0.5, dtype=np.float64)
        p = make_self_params(4, 1, seed=5)
        record = []
        masked_self_attention(x, np.array([1.0, 0.0]), p, record=record)
        probs = record[0]["probs"]
        assert probs[0, 0, :, 1].max() < 1e-5
        # with key 2 gone, the mix is essentially the projected first value row
        v1 = (x.data @ p.wv.data.T + p.bv.data)[0, 0]
        expected = v1 @ p.wo.data.T + p.bo.data
        out = masked_self_attention(x, np.array([1.0, 0.0]), p)
        np.testing.assert_allclose(out.data[0, 0], expected, atol=1e-4)

    def test_matches_dense_oracle_with_soft_mask(self):
        g = np.random.default_rng(4)
        x0 = g.normal(size=(1, 9, 8))
        p = make_self_params(8, 2, seed=7)
        mask = attention_mask_build(VisualPrompt.point([(0.4, 0.6)]), 3, 3).grid
        out = masked_self_attention(Tensor(x0, dtype=np.float64), mask, p)
        np.testing.assert_allclose(out.data, dense_self_attention_oracle(x0, p, mask),
                                   atol=1e-6)

    def test_matches_dense_oracle_unmasked(self):
        g = np.random.default_rng(5)
        x0 = g.normal(size=(2, 6, 12))
        p = make_self_params(12, 3, seed=9)
        out = masked_self_attention(Tensor(x0, dtype=np.float64), None, p)
        np.testing.assert_allclose(out.data, dense_self_attention_oracle(x0, p), atol=1e-6)

    def test_rows_sum_to_one(self):
        g = np.random.default_rng(6)
        x = Tensor(g.normal(size=(1, 16, 8)), dtype=np.float64)
        p = make_self_params(8, 4, seed=11)
        mask = attention_mask_build(VisualPrompt.box(0.1, 0.1, 0.6, 0.6), 4, 4).grid
        record = []
        masked_self_attention(x, mask, p, record=record)
        np.testing.assert_allclose(record[0]["probs"].sum(axis=-1), 1.0, atol=1e-6)

    def test_monotone_in_mask_value(self):
        g = np.random.default_rng(7)
        x = Tensor(g.normal(size=(1, 5, 4)), dtype=np.float64)
        p = make_self_params(4, 2, seed=13)
        weights = []
        for mj in (1.0, 0.7, 0.4, 0.1, 0.01):
            mask = np.ones(5)
            mask[2] = mj
            record = []
            masked_self_attention(x, mask, p, record=record)
            weights.append(record[0]["probs"][0, :, :, 2].copy())
        for prev, cur in zip(weights, weights[1:]):
            assert (cur <= prev + 1e-12).all()

    def test_neg_bias_mode_matches_log_on_hard_masks(self):
        g = np.random.default_rng(8)
        x = Tensor(g.normal(size=(1, 4, 4)) * 0.3, dtype=np.float64)
        p = make_self_params(4, 1, seed=15)
        mask = np.array([1.0, 0.0, 1.0, 0.0])
        a = masked_self_attention(x, mask, p, bias_mode="log")
        b = masked_self_attention(x, mask, p, bias_mode="neg")
        np.testing.assert_allclose(a.data, b.data, atol=1e-5)

    def test_mask_length_mismatch(self):
        x = Tensor(np.zeros((1, 6, 4)))
        p = make_self_params(4, 1)
        with pytest.raises(DimensionError):
            masked_self_attention(x, np.ones(5), p)

    def test_gradients_including_mask_path(self):
        g = np.random.default_rng(9)
        x0 = g.normal(size=(1, 4, 4)) * 0.5
        m0 = g.uniform(0.2, 1.0, size=4)
        p = make_self_params(4, 2, seed=17)
        xc = Tensor(x0, dtype=np.float64)
        assert check_gradient(lambda x: masked_self_attention(x, m0, p).sum(), x0)
        assert check_gradient(
            lambda m: masked_self_attention(xc, m, p).sum(), m0)
        assert check_gradient(
            lambda w: masked_self_attention(
                xc, m0,
                AttentionParams(wq=w, bq=p.bq, wk=p.wk, bk=p.bk, wv=p.wv,
                                bv=p.bv, wo=p.wo, bo=p.bo, heads=p.heads)).sum(),
            p.wq.data)


class TestPromptCrossAttention:
    def test_zero_conv_makes_prompt_irrelevant(self):
        g = np.random.default_rng(10)
        x = Tensor(g.normal(size=(1, 8, 6)), dtype=np.float64)
        p = make_cross_params(6, 5, 3, 2, seed=19)
        a = prompt_cross_attention(x, Tensor(g.normal(size=(1, 3, 4, 4)), dtype=np.float64), p)
        b = prompt_cross_attention(x, Tensor(g.normal(size=(1, 3, 4, 4)), dtype=np.float64), p)
        np.testing.assert_array_equal(a.data, b.data)

    def test_perturbed_zero_conv_sees_prompt(self):
        g = np.random.default_rng(11)
        x = Tensor(g.normal(size=(1, 8, 6)), dtype=np.float64)
        p = make_cross_params(6, 5, 3, 2, seed=21)
        p.zero_conv_w.data[:] = g.normal(size=p.zero_conv_w.shape) * 0.3
        a = prompt_cross_attention(x, Tensor(g.normal(size=(1, 3, 4, 4)), dtype=np.float64), p)
        b = prompt_cross_attention(x, Tensor(g.normal(size=(1, 3, 4, 4)), dtype=np.float64), p)
        assert np.abs(a.data - b.data).max() > 0

    def test_matches_dense_oracle(self):
        g = np.random.default_rng(12)
        x0 = g.normal(size=(1, 6, 8))
        lat0 = g.normal(size=(1, 3, 3, 3))
        p = make_cross_params(8, 4, 3, 2, seed=23)
        p.zero_conv_w.data[:] = g.normal(size=p.zero_conv_w.shape) * 0.2
        p.zero_conv_b.data[:] = g.normal(size=p.zero_conv_b.shape) * 0.2

        # context tokens, then plain per-head cross-attention
        ctx = np.einsum("oi,nihw->nohw", p.zero_conv_w.data[:, :, 0, 0], lat0)
        ctx = ctx + p.zero_conv_b.data[None, :, None, None]
        ctx = ctx.transpose(0, 2, 3, 1).reshape(1, 9, 4)
        q = x0 @ p.wq.data.T + p.bq.data
        k = ctx @ p.wk.data.T + p.bk.data
        v = ctx @ p.wv.data.T + p.bv.data
        heads, dk = 2, 4
        merged = []
        for h in range(heads):
            sl = slice(h * dk, (h + 1) * dk)
            scores = q[0, :, sl] @ k[0, :, sl].T / math.sqrt(dk)
            e = np.exp(scores - scores.max(axis=-1, keepdims=True))
            probs = e / e.sum(axis=-1, keepdims=True)
            merged.append(probs @ v[0, :, sl])
        expected = np.concatenate(merged, axis=-1) @ p.wo.data.T + p.bo.data

        out = prompt_cross_attention(Tensor(x0, dtype=np.float64),
                                     Tensor(lat0, dtype=np.float64), p)
        np.testing.assert_allclose(out.data[0], expected, atol=1e-6)

    def test_context_width_mismatch(self):
        p = make_cross_params(8, 4, 3, 2)
        p.zero_conv_w = Tensor(np.zeros((5, 3, 1, 1)), dtype=np.float64)
        p.zero_conv_b = Tensor(np.zeros(5), dtype=np.float64)
        with pytest.raises(DimensionError):
            prompt_cross_attention(Tensor(np.zeros((1, 4, 8)), dtype=np.float64),
                                   Tensor(np.zeros((1, 3, 2, 2)), dtype=np.float64), p)

    def test_gradients(self):
        g = np.random.default_rng(13)
        x0 = g.normal(size=(1, 4, 4)) * 0.5
        lat0 = g.normal(size=(1, 2, 2, 2)) * 0.5
        p = make_cross_params(4, 3, 2, 2, seed=25)
        p.zero_conv_w.data[:] = g.normal(size=p.zero_conv_w.shape) * 0.2
        latc = Tensor(lat0, dtype=np.float64)
        xc = Tensor(x0, dtype=np.float64)
        assert check_gradient(lambda x: prompt_cross_attention(x, latc, p).sum(), x0)
        assert check_gradient(lambda z: prompt_cross_attention(xc, latc, AttentionParams(
            wq=p.wq, bq=p.bq, wk=p.wk, bk=p.bk, wv=p.wv, bv=p.bv, wo=p.wo, bo=p.bo,
            heads=p.heads, zero_conv_w=z, zero_conv_b=p.zero_conv_b)).sum(),
            p.zero_conv_w.data)
        assert check_gradient(lambda lat: prompt_cross_attention(xc, lat, p).sum(), lat0)


class TestExportAttentionMap:
    def test_uniform_attention_degenerate(self):
        probs = np.full((1, 2, 4, 6), 1.0 / 6.0)
        grid, flag = export_attention_map(probs, (2, 3))
        assert flag
        np.testing.assert_array_equal(grid, np.zeros((2, 3)))

    def test_concentrated_scores_light_up_that_token(self):
        g = np.random.default_rng(15)
        lq, lk = 4, 6
        weights = g.uniform(0.6, 0.9, size=lq)
        probs = np.zeros((1, 1, lq, lk))
        probs[0, 0, :, 2] = weights               # most mass on token 2
        probs[0, 0, :, 0] = 1.0 - weights
        grid, flag = export_attention_map(probs, (2, 3))
        assert not flag
        assert grid.reshape(-1)[2] == 1.0          # the concentrated token peaks
        # received mass ordering survives normalization
        mass = probs[0].sum(axis=(0, 1))
        order = np.argsort(mass)
        assert (np.diff(grid.reshape(-1)[order]) >= 0).all()

    def test_map_lives_on_context_grid(self):
        probs = np.zeros((1, 1, 2, 6))
        probs[0, 0, :, 1] = 1.0
        grid, flag = export_attention_map(probs, (2, 3))
        assert grid.shape == (2, 3)
        assert not flag
        assert grid[0, 1] == 1.0

    def test_grid_mismatch(self):
        with pytest.raises(DimensionError):
            export_attention_map(np.zeros((1, 1, 5, 3)), (2, 2))
