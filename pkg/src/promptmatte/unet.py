"""Miniature encoder-bottleneck-decoder U-Net with prompt conditioning.

One deterministic forward pass: the image latent and the rasterized-prompt
latent are channel-concatenated through a widened first conv (built by
duplicating single-latent weights along the input-channel axis), every
residual block receives a per-channel shift derived from the conditioning
vector (the pathway a time embedding would normally feed), and masked
self-attention / prompt cross-attention run at configurable placements in
the down, mid and up block families.

All parameters live in a flat dict keyed by a stable path string, so
checkpoints are just one file per key.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .attention import (
    gather_params,
    init_cross_attention,
    init_self_attention,
    masked_self_attention,
    prompt_cross_attention,
)
from .codec import CodecConfig, init_codec_params
from .errors import DimensionError
from .prompts import AXIS_WIDTH, BOX_WIDTH, POINT_WIDTH, CondEmbedding
from .tensor import (
    Tensor,
    add_channel_bias,
    concat,
    conv2d,
    linear,
    norm_act,
    reshape,
    silu,
    transpose,
    upsample_nearest,
)

FAMILIES = ("down", "mid", "up")


@dataclass(frozen=True)
class AttentionPlacement:
    """Which block families carry each attention mechanism."""

    masked_self: frozenset = frozenset({"down", "mid", "up"})
    cross: frozenset = frozenset({"mid"})

    def __post_init__(self):
        object.__setattr__(self, "masked_self", frozenset(self.masked_self))
        object.__setattr__(self, "cross", frozenset(self.cross))
        for name, s in (("masked_self", self.masked_self), ("cross", self.cross)):
            bad = s - set(FAMILIES)
            if bad:
                raise ValueError(f"{name} placement {sorted(bad)} not in {FAMILIES}")


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    blocks_per_level: int = 2
    heads: int = 4
    d_cond: int = 256
    context_channels: int = 64
    norm_groups: int = 8
    mask_bias_mode: str = "log"
    placement: AttentionPlacement = field(default_factory=AttentionPlacement)

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        if not self.channel_mults:
            raise ValueError("need at least one level")
        for ch in self.channels:
            if ch % self.heads:
                raise ValueError(f"width {ch} not divisible by {self.heads} heads")
            if ch % self.norm_groups:
                raise ValueError(f"width {ch} not divisible by {self.norm_groups} norm groups")
        if self.mask_bias_mode not in ("log", "neg"):
            raise ValueError(f"mask_bias_mode must be 'log' or 'neg'")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mults)

    @property
    def levels(self) -> int:
        return len(self.channel_mults)


def duplicate_input_conv(weight):
    """Duplicate first-conv weights along the input-channel axis (verbatim copy)."""
    if isinstance(weight, Tensor):
        return concat([weight, weight], axis=1)
    arr = np.asarray(weight)
    return np.concatenate([arr, arr], axis=1)


def param_count(params: Mapping) -> int:
    """Total scalar parameter count of a path-keyed tensor dict."""
    return int(sum(t.size for t in params.values()))


# --- initialization -----------------------------------------------------


def _conv_init(rng, c_out, c_in, k, dtype, zero=False):
    if zero:
        return np.zeros((c_out, c_in, k, k), dtype=dtype)
    std = math.sqrt(2.0 / (c_in * k * k))
    return (rng.normal(size=(c_out, c_in, k, k)) * std).astype(dtype)


def _add_resblock(params, prefix, c_in, c_out, d_cond, rng, dtype):
    params[f"{prefix}.norm1.scale"] = np.ones(c_in, dtype=dtype)
    params[f"{prefix}.norm1.shift"] = np.zeros(c_in, dtype=dtype)
    params[f"{prefix}.conv1.weight"] = _conv_init(rng, c_out, c_in, 3, dtype)
    params[f"{prefix}.conv1.bias"] = np.zeros(c_out, dtype=dtype)
    std = math.sqrt(1.0 / d_cond)
    params[f"{prefix}.emb.weight"] = (rng.normal(size=(c_out, d_cond)) * std).astype(dtype)
    params[f"{prefix}.emb.bias"] = np.zeros(c_out, dtype=dtype)
    params[f"{prefix}.norm2.scale"] = np.ones(c_out, dtype=dtype)
    params[f"{prefix}.norm2.shift"] = np.zeros(c_out, dtype=dtype)
    params[f"{prefix}.conv2.weight"] = _conv_init(rng, c_out, c_out, 3, dtype)
    params[f"{prefix}.conv2.bias"] = np.zeros(c_out, dtype=dtype)
    if c_in != c_out:
        params[f"{prefix}.skip.weight"] = _conv_init(rng, c_out, c_in, 1, dtype)
        params[f"{prefix}.skip.bias"] = np.zeros(c_out, dtype=dtype)


def _add_attention_sites(params, prefix, ch, family, config, latent_channels, rng, dtype):
    if family in config.placement.masked_self:
        params[f"{prefix}.sattn.norm.scale"] = np.ones(ch, dtype=dtype)
        params[f"{prefix}.sattn.norm.shift"] = np.zeros(ch, dtype=dtype)
        for k, v in init_self_attention(ch, config.heads, rng, dtype).items():
            params[f"{prefix}.sattn.{k}"] = v
    if family in config.placement.cross:
        params[f"{prefix}.xattn.norm.scale"] = np.ones(ch, dtype=dtype)
        params[f"{prefix}.xattn.norm.shift"] = np.zeros(ch, dtype=dtype)
        for k, v in init_cross_attention(ch, config.context_channels, latent_channels,
                                         config.heads, rng, dtype).items():
            params[f"{prefix}.xattn.{k}"] = v


def init_unet_params(config: UNetConfig, latent_channels: int, rng: np.random.Generator,
                     dtype=np.float32) -> dict[str, np.ndarray]:
    """All U-Net parameters as numpy arrays keyed by path.

    The key set is a function of the config alone.  The stem conv is built
    for a single latent and duplicated to accept the concatenated pair; the
    final head conv starts at zero.
    """
    params: dict[str, np.ndarray] = {}
    chs = config.channels
    stem_half = _conv_init(rng, chs[0], latent_channels, 3, dtype)
    params["unet.stem.weight"] = duplicate_input_conv(stem_half)
    params["unet.stem.bias"] = np.zeros(chs[0], dtype=dtype)

    cur = chs[0]
    for i, ch in enumerate(chs):
        for b in range(config.blocks_per_level):
            _add_resblock(params, f"unet.down{i}.block{b}", cur, ch, config.d_cond, rng, dtype)
            cur = ch
        _add_attention_sites(params, f"unet.down{i}", ch, "down", config,
                             latent_channels, rng, dtype)
        if i < config.levels - 1:
            params[f"unet.down{i}.down.weight"] = _conv_init(rng, ch, ch, 3, dtype)
            params[f"unet.down{i}.down.bias"] = np.zeros(ch, dtype=dtype)

    _add_resblock(params, "unet.mid.block0", cur, cur, config.d_cond, rng, dtype)
    _add_attention_sites(params, "unet.mid", cur, "mid", config, latent_channels, rng, dtype)
    _add_resblock(params, "unet.mid.block1", cur, cur, config.d_cond, rng, dtype)

    for i in reversed(range(config.levels)):
        ch = chs[i]
        for b in range(config.blocks_per_level):
            c_in = (cur + ch) if b == 0 else ch
            _add_resblock(params, f"unet.up{i}.block{b}", c_in, ch, config.d_cond, rng, dtype)
        _add_attention_sites(params, f"unet.up{i}", ch, "up", config,
                             latent_channels, rng, dtype)
        if i > 0:
            params[f"unet.up{i}.up.weight"] = _conv_init(rng, chs[i - 1], ch, 3, dtype)
            params[f"unet.up{i}.up.bias"] = np.zeros(chs[i - 1], dtype=dtype)
            cur = chs[i - 1]
        else:
            cur = ch

    params["unet.head.norm.scale"] = np.ones(chs[0], dtype=dtype)
    params["unet.head.norm.shift"] = np.zeros(chs[0], dtype=dtype)
    params["unet.head.conv.weight"] = _conv_init(rng, latent_channels, chs[0], 3, dtype,
                                                 zero=True)
    params["unet.head.conv.bias"] = np.zeros(latent_channels, dtype=dtype)
    return params


def init_cond_params(config: UNetConfig, rng: np.random.Generator,
                     dtype=np.float32) -> dict[str, np.ndarray]:
    """The f1/f2 heads mixing opacity and coordinate embeddings."""
    params = {}
    for name, width in (("f1", AXIS_WIDTH), ("f2_point", POINT_WIDTH), ("f2_box", BOX_WIDTH)):
        std = math.sqrt(1.0 / width)
        params[f"cond.{name}.weight"] = (rng.normal(size=(config.d_cond, width)) * std).astype(dtype)
        params[f"cond.{name}.bias"] = np.zeros(config.d_cond, dtype=dtype)
    return params


def init_model(unet_config: UNetConfig, codec_config: CodecConfig, seed: int,
               dtype=np.float32) -> dict[str, Tensor]:
    """Fresh trainable parameters for U-Net + codec + conditioning heads."""
    from .seeding import STREAM_INIT, subrng

    rng = subrng(seed, STREAM_INIT)
    raw: dict[str, np.ndarray] = {}
    raw.update(init_unet_params(unet_config, codec_config.latent_channels, rng, dtype))
    raw.update(init_cond_params(unet_config, rng, dtype))
    raw.update(init_codec_params(codec_config, rng, dtype))
    return {k: Tensor(v, requires_grad=True) for k, v in raw.items()}


# --- forward ------------------------------------------------------------


def attention_resolutions(config: UNetConfig, latent_hw: tuple[int, int]) -> list[tuple[int, int]]:
    """Spatial grids at which attention layers run, one per level."""
    h, w = latent_hw
    out = []
    for i in range(config.levels):
        if h % (1 << i) or w % (1 << i):
            raise DimensionError(f"latent {h}x{w} not divisible across {config.levels} levels")
        out.append((h >> i, w >> i))
    return out


def _tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (n, h * w, c))


def _maps(t: Tensor, h: int, w: int) -> Tensor:
    n, l, c = t.shape
    return transpose(reshape(t, (n, h, w, c)), (0, 3, 1, 2))


def _resblock(params, prefix, x, cond, groups):
    h = norm_act(x, groups, params[f"{prefix}.norm1.scale"], params[f"{prefix}.norm1.shift"])
    h = conv2d(h, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"], 1, 1)
    shift = linear(silu(cond), params[f"{prefix}.emb.weight"], params[f"{prefix}.emb.bias"])
    h = add_channel_bias(h, shift)
    h = norm_act(h, groups, params[f"{prefix}.norm2.scale"], params[f"{prefix}.norm2.shift"])
    h = conv2d(h, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"], 1, 1)
    if f"{prefix}.skip.weight" in params:
        x = conv2d(x, params[f"{prefix}.skip.weight"], params[f"{prefix}.skip.bias"], 1, 0)
    return x + h


def _lookup_mask(masks, h, w):
    if masks is None:
        return None
    try:
        return masks[(h, w)]
    except KeyError:
        raise DimensionError(f"no attention mask supplied for resolution {h}x{w}") from None


def _attention_stage(params, prefix, family, x, config, masks, latent_prompt, record):
    n, c, h, w = x.shape
    if family in config.placement.masked_self:
        p = gather_params(params, f"{prefix}.sattn", config.heads)
        normed = norm_act(x, config.norm_groups, params[f"{prefix}.sattn.norm.scale"],
                          params[f"{prefix}.sattn.norm.shift"])
        out = masked_self_attention(_tokens(normed), _lookup_mask(masks, h, w), p,
                                    bias_mode=config.mask_bias_mode)
        x = x + _maps(out, h, w)
    if family in config.placement.cross:
        p = gather_params(params, f"{prefix}.xattn", config.heads)
        normed = norm_act(x, config.norm_groups, params[f"{prefix}.xattn.norm.scale"],
                          params[f"{prefix}.xattn.norm.shift"])
        rec = [] if record is not None else None
        out = prompt_cross_attention(_tokens(normed), latent_prompt, p, record=rec)
        if record is not None:
            rec[0]["query_grid"] = (h, w)
            rec[0]["layer"] = f"{prefix}.xattn"
            record.append(rec[0])
        x = x + _maps(out, h, w)
    return x


def unet_forward(params: Mapping[str, Tensor], config: UNetConfig, latent_img: Tensor,
                 latent_prompt: Tensor, cond, masks=None, record: list | None = None) -> Tensor:
    """One deterministic pass from concatenated latents to the alpha latent.

    ``masks`` maps (h, w) attention resolutions to AttentionMask instances;
    None disables mask biasing.  ``record``, when a list, collects per
    cross-attention layer the attention probabilities, context tokens and
    grid for visualization.
    """
    if latent_img.shape != latent_prompt.shape:
        raise DimensionError(
            f"latent shapes differ: {latent_img.shape} vs {latent_prompt.shape}")
    if isinstance(cond, CondEmbedding):
        cond = cond.vector
    if cond.ndim == 1:
        cond = reshape(cond, (1, cond.size))
    if cond.shape != (latent_img.shape[0], config.d_cond):
        raise DimensionError(
            f"cond shape {cond.shape} != ({latent_img.shape[0]}, {config.d_cond})")

    groups = config.norm_groups
    x = conv2d(concat([latent_img, latent_prompt], axis=1),
               params["unet.stem.weight"], params["unet.stem.bias"], 1, 1)

    skips = []
    for i in range(config.levels):
        for b in range(config.blocks_per_level):
            x = _resblock(params, f"unet.down{i}.block{b}", x, cond, groups)
        x = _attention_stage(params, f"unet.down{i}", "down", x, config, masks,
                             latent_prompt, record)
        skips.append(x)
        if i < config.levels - 1:
            x = conv2d(x, params[f"unet.down{i}.down.weight"],
                       params[f"unet.down{i}.down.bias"], 2, 1)

    x = _resblock(params, "unet.mid.block0", x, cond, groups)
    x = _attention_stage(params, "unet.mid", "mid", x, config, masks, latent_prompt, record)
    x = _resblock(params, "unet.mid.block1", x, cond, groups)

    for i in reversed(range(config.levels)):
        x = concat([x, skips[i]], axis=1)
        for b in range(config.blocks_per_level):
            x = _resblock(params, f"unet.up{i}.block{b}", x, cond, groups)
        x = _attention_stage(params, f"unet.up{i}", "up", x, config, masks,
                             latent_prompt, record)
        if i > 0:
            x = conv2d(upsample_nearest(x, 2), params[f"unet.up{i}.up.weight"],
                       params[f"unet.up{i}.up.bias"], 1, 1)

    x = norm_act(x, groups, params["unet.head.norm.scale"], params["unet.head.norm.shift"])
    return conv2d(x, params["unet.head.conv.weight"], params["unet.head.conv.bias"], 1, 1)
