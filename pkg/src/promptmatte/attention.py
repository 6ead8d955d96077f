"""Masked self-attention and visual prompt-driven cross-attention.

Masked self-attention adds a per-key spatial bias to the score matrix so
queries concentrate on prompt-indicated regions: ``log(M + eps)`` vanishes
for mask value 1, strongly suppresses 0, and grades soft point masks in
between.  The literal large-negative-constant form ``(M - 1) * 1e4`` is
available for hard masks via ``bias_mode="neg"``.

Cross-attention draws keys and values from prompt-latent context tokens
produced by a 1x1 zero convolution, so a freshly initialized layer ignores
the prompt entirely and only learns to use it during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import DimensionError
from .prompts import AttentionMask
from .tensor import (
    Tensor,
    add,
    conv2d,
    linear,
    matmul,
    mul,
    reshape,
    softmax_lastdim,
    tlog,
    transpose,
)

MASK_EPS = 1e-6
NEG_BIAS = 1.0e4


@dataclass
class AttentionParams:
    """Projection weights for one attention layer.

    ``wk``/``wv`` consume the layer width for self-attention and the
    context width for cross-attention; ``zero_conv_*`` is present only on
    cross-attention layers and starts at exactly zero.
    """

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int
    zero_conv_w: Tensor | None = None
    zero_conv_b: Tensor | None = None


def init_self_attention(channels: int, heads: int, rng: np.random.Generator,
                        dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh self-attention weights keyed by their parameter-path suffix."""
    if channels % heads:
        raise ValueError(f"{heads} heads do not divide {channels} channels")
    std = 1.0 / math.sqrt(channels)
    out = {}
    for name in ("wq", "wk", "wv", "wo"):
        out[name] = (rng.normal(size=(channels, channels)) * std).astype(dtype)
        out["b" + name[1]] = np.zeros(channels, dtype=dtype)
    return out


def init_cross_attention(channels: int, context_channels: int, prompt_channels: int,
                         heads: int, rng: np.random.Generator,
                         dtype=np.float32) -> dict[str, np.ndarray]:
    """Cross-attention weights; the zero convolution starts at exactly zero."""
    if channels % heads:
        raise ValueError(f"{heads} heads do not divide {channels} channels")
    std = 1.0 / math.sqrt(channels)
    cstd = 1.0 / math.sqrt(context_channels)
    out = {
        "wq": (rng.normal(size=(channels, channels)) * std).astype(dtype),
        "bq": np.zeros(channels, dtype=dtype),
        "wk": (rng.normal(size=(channels, context_channels)) * cstd).astype(dtype),
        "bk": np.zeros(channels, dtype=dtype),
        "wv": (rng.normal(size=(channels, context_channels)) * cstd).astype(dtype),
        "bv": np.zeros(channels, dtype=dtype),
        "wo": (rng.normal(size=(channels, channels)) * std).astype(dtype),
        "bo": np.zeros(channels, dtype=dtype),
        "zconv_w": np.zeros((context_channels, prompt_channels, 1, 1), dtype=dtype),
        "zconv_b": np.zeros(context_channels, dtype=dtype),
    }
    return out


def gather_params(params: Mapping[str, Tensor], prefix: str, heads: int) -> AttentionParams:
    """Collect one layer's tensors out of a flat path-keyed parameter dict."""
    def get(name):
        return params[f"{prefix}.{name}"]

    return AttentionParams(
        wq=get("wq"), bq=get("bq"), wk=get("wk"), bk=get("bk"),
        wv=get("wv"), bv=get("bv"), wo=get("wo"), bo=get("bo"),
        heads=heads,
        zero_conv_w=params.get(f"{prefix}.zconv_w"),
        zero_conv_b=params.get(f"{prefix}.zconv_b"),
    )


def _split_heads(t: Tensor, heads: int) -> Tensor:
    n, l, c = t.shape
    return transpose(reshape(t, (n, l, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(t: Tensor) -> Tensor:
    n, h, l, dk = t.shape
    return reshape(transpose(t, (0, 2, 1, 3)), (n, l, h * dk))


def _mask_bias(mask, length: int, bias_mode: str, dtype) -> Tensor:
    """Per-key additive score bias from a spatial mask, broadcast over queries."""
    if isinstance(mask, AttentionMask):
        mask = mask.grid
    if isinstance(mask, Tensor):
        m = mask if mask.ndim == 1 else reshape(mask, (mask.size,))
    else:
        m = Tensor(np.asarray(mask, dtype=dtype).reshape(-1))
    if m.size != length:
        raise DimensionError(f"mask has {m.size} cells, sequence length is {length}")
    if bias_mode == "log":
        return tlog(add(m, MASK_EPS))
    if bias_mode == "neg":
        return mul(add(m, -1.0), NEG_BIAS)
    raise ValueError(f"unknown bias_mode {bias_mode!r}")


def _attend(q: Tensor, k: Tensor, v: Tensor, p: AttentionParams,
            bias: Tensor | None, record: list | None) -> Tensor:
    qh = _split_heads(q, p.heads)
    kh = _split_heads(k, p.heads)
    vh = _split_heads(v, p.heads)
    dk = qh.shape[-1]
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    if bias is not None:
        scores = add(scores, bias)
    probs = softmax_lastdim(scores)
    if record is not None:
        record.append({"probs": probs.data.copy()})
    return linear(_merge_heads(matmul(probs, vh)), p.wo, p.bo)


def masked_self_attention(x: Tensor, mask, p: AttentionParams,
                          bias_mode: str = "log", record: list | None = None) -> Tensor:
    """Self-attention over (N, L, C) tokens with a per-key mask bias.

    With an all-ones mask the bias is a constant row offset, so softmax
    shift-invariance makes the result equal unmasked attention.
    """
    n, l, c = x.shape
    if c % p.heads:
        raise DimensionError(f"{p.heads} heads do not divide width {c}")
    bias = None if mask is None else _mask_bias(mask, l, bias_mode, x.dtype)
    q = linear(x, p.wq, p.bq)
    k = linear(x, p.wk, p.bk)
    v = linear(x, p.wv, p.bv)
    return _attend(q, k, v, p, bias, record)


def prompt_cross_attention(x: Tensor, prompt_latent: Tensor, p: AttentionParams,
                           record: list | None = None) -> Tensor:
    """Cross-attention from (N, L, C) queries onto prompt-latent context tokens.

    The context is ``flatten(zero_conv(prompt_latent))``; at initialization
    the zero convolution nullifies the prompt, so keys and values are
    bias-only and the output matches a null prompt.
    """
    if p.zero_conv_w is None or p.zero_conv_b is None:
        raise ValueError("cross-attention params carry no zero convolution")
    n, l, c = x.shape
    if c % p.heads:
        raise DimensionError(f"{p.heads} heads do not divide width {c}")
    if prompt_latent.ndim != 4 or prompt_latent.shape[0] != n:
        raise DimensionError(f"prompt latent must be (N, C, h, w), got {prompt_latent.shape}")
    ctx_maps = conv2d(prompt_latent, p.zero_conv_w, p.zero_conv_b)
    nc, cc, hh, ww = ctx_maps.shape
    if p.wk.shape[1] != cc:
        raise DimensionError(f"context width {cc} != key projection width {p.wk.shape[1]}")
    ctx = reshape(transpose(ctx_maps, (0, 2, 3, 1)), (n, hh * ww, cc))
    q = linear(x, p.wq, p.bq)
    k = linear(ctx, p.wk, p.bk)
    v = linear(ctx, p.wv, p.bv)
    if record is not None:
        record.append({"context": ctx.data.copy(), "context_grid": (hh, ww)})
        out = _attend(q, k, v, p, None, record)
        # fold the two entries pushed above into one record
        probs = record.pop()["probs"]
        record[-1]["probs"] = probs
        return out
    return _attend(q, k, v, p, None, record)


def export_attention_map(probs: np.ndarray, context_grid: tuple[int, int]) -> tuple[np.ndarray, bool]:
    """Aggregate recorded cross-attention into a map over the context grid.

    Each context token's received attention mass is summed over heads and
    queries, min-max normalized to [0,1] and reshaped to the prompt-latent
    grid the tokens came from: the map shows which prompt positions the
    layer reads.  A constant map (uniform attention, e.g. a zero-conv
    layer that has not trained yet) returns all zeros with the degenerate
    flag set.
    """
    h, w = context_grid
    if probs.ndim != 4:
        raise DimensionError(f"probs must be (N, heads, Lq, Lk), got {probs.shape}")
    if probs.shape[3] != h * w:
        raise DimensionError(f"grid {h}x{w} does not match {probs.shape[3]} context tokens")
    mass = probs[0].sum(axis=(0, 1))  # (Lk,)
    lo, hi = float(mass.min()), float(mass.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros((h, w)), True
    return ((mass - lo) / (hi - lo)).reshape(h, w), False
