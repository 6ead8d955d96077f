"""Run configuration: one JSON document covering every tunable.

Every field is optional and defaults to the values the library modules
declare; unknown keys are rejected so typos cannot silently fall back to
defaults.  The document is echoed verbatim into checkpoints for
provenance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .codec import CodecConfig
from .metrics import CONN_DISCOUNT, CONN_STEP, GRAD_SIGMA
from .prompts import DEFAULT_SIGMA
from .training import TrainConfig
from .unet import AttentionPlacement, UNetConfig


@dataclass(frozen=True)
class MetricConventions:
    grad_sigma: float = GRAD_SIGMA
    conn_step: float = CONN_STEP
    conn_discount: float = CONN_DISCOUNT


@dataclass
class RunConfig:
    unet: UNetConfig = field(default_factory=UNetConfig)
    codec: CodecConfig = field(default_factory=lambda: CodecConfig(mode="learned"))
    train: TrainConfig = field(default_factory=TrainConfig)
    mask_sigma: float = DEFAULT_SIGMA
    metrics: MetricConventions = field(default_factory=MetricConventions)

    def to_dict(self) -> dict:
        u = self.unet
        return {
            "unet": {
                "base_channels": u.base_channels,
                "channel_mults": list(u.channel_mults),
                "blocks_per_level": u.blocks_per_level,
                "heads": u.heads,
                "d_cond": u.d_cond,
                "context_channels": u.context_channels,
                "norm_groups": u.norm_groups,
                "mask_bias_mode": u.mask_bias_mode,
                "masked_self_attn": sorted(u.placement.masked_self),
                "cross_attn": sorted(u.placement.cross),
            },
            "codec": {
                "downsample_factor": self.codec.downsample_factor,
                "latent_channels": self.codec.latent_channels,
                "mode": self.codec.mode,
                "fixed_scale": self.codec.fixed_scale,
                "fixed_shift": self.codec.fixed_shift,
            },
            "train": self.train.to_dict(),
            "mask_sigma": self.mask_sigma,
            "metrics": {
                "grad_sigma": self.metrics.grad_sigma,
                "conn_step": self.metrics.conn_step,
                "conn_discount": self.metrics.conn_discount,
            },
        }


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = set(given) - set(allowed)
    if unknown:
        raise ValueError(f"unknown {section} config keys: {sorted(unknown)}")


def run_config_from_dict(doc: dict) -> RunConfig:
    """Build a RunConfig from a (possibly partial) JSON document."""
    _check_keys("top-level", doc, {"unet", "codec", "train", "mask_sigma", "metrics"})

    unet_doc = dict(doc.get("unet", {}))
    allowed_unet = {"base_channels", "channel_mults", "blocks_per_level", "heads",
                    "d_cond", "context_channels", "norm_groups", "mask_bias_mode",
                    "masked_self_attn", "cross_attn"}
    _check_keys("unet", unet_doc, allowed_unet)
    placement = AttentionPlacement(
        masked_self=frozenset(unet_doc.pop("masked_self_attn",
                                           AttentionPlacement().masked_self)),
        cross=frozenset(unet_doc.pop("cross_attn", AttentionPlacement().cross)),
    )
    if "channel_mults" in unet_doc:
        unet_doc["channel_mults"] = tuple(unet_doc["channel_mults"])
    unet = UNetConfig(placement=placement, **unet_doc)

    codec_doc = dict(doc.get("codec", {}))
    _check_keys("codec", codec_doc,
                {"downsample_factor", "latent_channels", "mode", "fixed_scale", "fixed_shift"})
    codec = CodecConfig(mode="learned", **codec_doc) if "mode" not in codec_doc \
        else CodecConfig(**codec_doc)

    train_doc = dict(doc.get("train", {}))
    _check_keys("train", train_doc, {f.name for f in fields(TrainConfig)})
    if "prompt_mix" in train_doc:
        train_doc["prompt_mix"] = dict(train_doc["prompt_mix"])
    train = TrainConfig(**train_doc)

    metrics_doc = dict(doc.get("metrics", {}))
    _check_keys("metrics", metrics_doc, {"grad_sigma", "conn_step", "conn_discount"})
    return RunConfig(
        unet=unet,
        codec=codec,
        train=train,
        mask_sigma=float(doc.get("mask_sigma", DEFAULT_SIGMA)),
        metrics=MetricConventions(**metrics_doc),
    )


def load_run_config(path) -> RunConfig:
    with open(Path(path)) as fh:
        return run_config_from_dict(json.load(fh))
