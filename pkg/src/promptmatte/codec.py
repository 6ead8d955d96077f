"""Pixel/latent codec standing in for a pretrained VAE.

``fixed`` mode is deterministic and parameter-free on the encode side:
area-average pooling, cyclic channel replication up to the latent width,
then a fixed affine map.  ``learned`` mode uses a small strided conv stack
trained jointly with the matting loss.  Decoding is shared: nearest
upsampling by the downsample factor, a 3x3 conv head, and a sigmoid that
keeps the single-channel alpha output inside [0,1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import DimensionError
from .tensor import (
    Tensor,
    avg_pool2d,
    concat,
    conv2d,
    sigmoid,
    silu,
    slice_,
    upsample_nearest,
)

_VALID_FACTORS = (1, 2, 4, 8)
_HIDDEN = 16  # learned-encoder width


@dataclass
class CodecConfig:
    downsample_factor: int = 4
    latent_channels: int = 4
    mode: str = "fixed"  # "fixed" or "learned"
    fixed_scale: float = 2.0
    fixed_shift: float = -1.0

    def __post_init__(self):
        if self.downsample_factor not in _VALID_FACTORS:
            raise ValueError(f"downsample_factor must be one of {_VALID_FACTORS}")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be positive")
        if self.mode not in ("fixed", "learned"):
            raise ValueError(f"mode must be 'fixed' or 'learned', got {self.mode!r}")


def init_codec_params(config: CodecConfig, rng: np.random.Generator,
                      dtype=np.float32) -> dict[str, np.ndarray]:
    """Codec parameters keyed by path; fixed mode only owns the decode head."""
    params: dict[str, np.ndarray] = {}
    if config.mode == "learned":
        def conv_init(c_out, c_in, k):
            std = math.sqrt(2.0 / (c_in * k * k))
            return (rng.normal(size=(c_out, c_in, k, k)) * std).astype(dtype)

        params["codec.enc.conv_in.weight"] = conv_init(_HIDDEN, 3, 3)
        params["codec.enc.conv_in.bias"] = np.zeros(_HIDDEN, dtype=dtype)
        for i in range(int(math.log2(config.downsample_factor))):
            params[f"codec.enc.down{i}.weight"] = conv_init(_HIDDEN, _HIDDEN, 3)
            params[f"codec.enc.down{i}.bias"] = np.zeros(_HIDDEN, dtype=dtype)
        params["codec.enc.conv_out.weight"] = conv_init(config.latent_channels, _HIDDEN, 3)
        params["codec.enc.conv_out.bias"] = np.zeros(config.latent_channels, dtype=dtype)
    std = math.sqrt(2.0 / (config.latent_channels * 9))
    params["codec.dec.head.weight"] = (
        rng.normal(size=(1, config.latent_channels, 3, 3)) * std).astype(dtype)
    params["codec.dec.head.bias"] = np.zeros(1, dtype=dtype)
    return params


def _to_nchw(image, dtype) -> Tensor:
    """Accept (H, W, ch) arrays or ready (N, ch, H, W) tensors."""
    if isinstance(image, Tensor):
        if image.ndim != 4:
            raise DimensionError(f"expected (N, ch, H, W) tensor, got {image.shape}")
        return image
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise DimensionError(f"expected (H, W, ch) image, got {arr.shape}")
    return Tensor(arr.transpose(2, 0, 1)[None], dtype=dtype)


def _replicate_channels(x: Tensor, n_out: int) -> Tensor:
    chans = [x for _ in range(0, n_out, x.shape[1])]
    return concat(chans, axis=1) if len(chans) > 1 else x


def encode(params: Mapping[str, Tensor], config: CodecConfig, image,
           dtype=np.float32) -> Tensor:
    """Map a [0,1] image (1 or 3 channels) to the latent grid."""
    x = _to_nchw(image, dtype)
    n, ch, h, w = x.shape
    if ch not in (1, 3):
        raise DimensionError(f"encode expects 1 or 3 channels, got {ch}")
    f = config.downsample_factor
    if h % f or w % f:
        raise DimensionError(f"extents {h}x{w} not divisible by factor {f}; pad first")

    if config.mode == "fixed":
        pooled = avg_pool2d(x, f) if f > 1 else x
        reps = _replicate_channels(pooled, config.latent_channels * ch)
        body = slice_(reps, (slice(None), slice(0, config.latent_channels)))
        return body * config.fixed_scale + config.fixed_shift

    if ch == 1:
        x = _replicate_channels(x, 3)
    h0 = silu(conv2d(x, params["codec.enc.conv_in.weight"],
                     params["codec.enc.conv_in.bias"], 1, 1))
    for i in range(int(math.log2(f))):
        h0 = silu(conv2d(h0, params[f"codec.enc.down{i}.weight"],
                         params[f"codec.enc.down{i}.bias"], 2, 1))
    return conv2d(h0, params["codec.enc.conv_out.weight"],
                  params["codec.enc.conv_out.bias"], 1, 1)


def encode_fixed_body(config: CodecConfig, image, dtype=np.float64) -> Tensor:
    """The linear pre-affine part of fixed-mode encoding (pool + replicate)."""
    if config.mode != "fixed":
        raise ValueError("encode_fixed_body applies to fixed mode only")
    x = _to_nchw(image, dtype)
    f = config.downsample_factor
    pooled = avg_pool2d(x, f) if f > 1 else x
    reps = _replicate_channels(pooled, config.latent_channels * x.shape[1])
    return slice_(reps, (slice(None), slice(0, config.latent_channels)))


def decode(params: Mapping[str, Tensor], config: CodecConfig, latent: Tensor) -> Tensor:
    """Map a latent back to a single-channel alpha image in [0,1]."""
    if latent.ndim != 4:
        raise DimensionError(f"latent must be (N, C, h, w), got {latent.shape}")
    if latent.shape[1] != config.latent_channels:
        raise DimensionError(
            f"latent has {latent.shape[1]} channels, config says {config.latent_channels}")
    f = config.downsample_factor
    up = upsample_nearest(latent, f) if f > 1 else latent
    head = conv2d(up, params["codec.dec.head.weight"], params["codec.dec.head.bias"], 1, 1)
    return sigmoid(head)
