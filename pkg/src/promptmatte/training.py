"""One-step training and evaluation: loss, optimizer, schedule, loops.

Training draws a fresh seeded scene per sample (or cycles a generated
dataset directory), picks a prompt kind from the configured mix, runs the
full pipeline (rasterize, encode, condition, U-Net, decode) and supervises
in pixel space with an L1 + gradient-L1 matting loss under AdamW and a
linear-warmup / exponential-decay schedule.  Everything is reproducible
from (seed, config): scenes and prompts come from per-index RNG streams.

Evaluation walks a dataset directory, regenerates a prompt of the
requested kind per scene, and aggregates the five matting metrics into a
report with optional relative improvement against a baseline row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import export_attention_map
from .codec import decode, encode
from .errors import DimensionError, GenerationError, TrainingError
from .metrics import MetricRow, all_metrics, impro
from .parallel import parallel_map
from .prompts import (
    build_attention_masks,
    cond_embedding,
    coord_embedding,
    opacity_embedding,
    rasterize_prompt,
)
from .seeding import STREAM_EVAL, STREAM_PROMPT, STREAM_SCENE, subrng
from .synth import PROMPT_KINDS, list_scene_dirs, load_scene, make_scene, sample_prompts
from .tensor import Tensor, backward, concat, slice_, tabs, tmean, zero_grads
from .unet import attention_resolutions, unet_forward

_SNAPSHOT_EVERY = 50


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    warmup_steps: int = 200
    decay_rate: float = 0.9995
    epochs: int = 3
    batch_size: int = 1
    scenes_per_epoch: int = 1000
    prompt_mix: dict = field(default_factory=lambda: {"point": 1 / 3, "box": 1 / 3,
                                                      "mask": 1 / 3})
    duplicate_prob: float = 0.5
    grad_loss_weight: float = 0.5
    seed: int = 0
    image_size: int = 64

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if set(self.prompt_mix) - set(PROMPT_KINDS):
            raise ValueError(f"prompt_mix keys must be among {PROMPT_KINDS}")
        total = sum(self.prompt_mix.values())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"prompt_mix probabilities sum to {total}, expected 1")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "weight_decay": self.weight_decay, "adam_eps": self.adam_eps,
            "warmup_steps": self.warmup_steps, "decay_rate": self.decay_rate,
            "epochs": self.epochs, "batch_size": self.batch_size,
            "scenes_per_epoch": self.scenes_per_epoch,
            "prompt_mix": dict(self.prompt_mix),
            "duplicate_prob": self.duplicate_prob,
            "grad_loss_weight": self.grad_loss_weight,
            "seed": self.seed, "image_size": self.image_size,
        }


# --- loss, schedule, optimizer -------------------------------------------


def matting_loss(pred: Tensor, gt, weight: float = 0.5) -> Tensor:
    """L1 alpha error plus weighted L1 of forward-difference gradients.

    The x- and y-difference maps have different extents, so each is
    averaged over its own cells before the two means are summed.
    """
    if not isinstance(gt, Tensor):
        gt = Tensor(np.asarray(gt), dtype=pred.dtype)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} vs gt {gt.shape}")
    diff = pred - gt
    loss = tmean(tabs(diff))
    if weight:
        dx = slice_(diff, (..., slice(None), slice(1, None))) \
            - slice_(diff, (..., slice(None), slice(0, -1)))
        dy = slice_(diff, (..., slice(1, None), slice(None))) \
            - slice_(diff, (..., slice(0, -1), slice(None)))
        loss = loss + (tmean(tabs(dx)) + tmean(tabs(dy))) * weight
    return loss


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup to the base rate, then per-step exponential decay."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < config.warmup_steps:
        return config.lr * (step + 1) / config.warmup_steps
    return config.lr * config.decay_rate ** (step - config.warmup_steps)


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, state: AdamWState, lr: float, config: TrainConfig) -> None:
    """Decoupled-weight-decay Adam update with bias correction, in place.

    Parameters whose grad is None (untouched by this step's graph) are
    skipped entirely, moments included.
    """
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    # bias correction folded into the step size:
    # lr * (m/c1) / (sqrt(v/c2) + eps) == (lr*sqrt(c2)/c1) * m / (sqrt(v) + eps*sqrt(c2))
    c1 = 1 - b1 ** t
    c2_sqrt = math.sqrt(1 - b2 ** t)
    step_size = lr * c2_sqrt / c1
    eps = config.adam_eps * c2_sqrt
    for key, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(np.sum(g)):
            raise TrainingError(f"non-finite gradient for {key!r}")
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if config.weight_decay:
            p.data -= lr * config.weight_decay * p.data
        denom = np.sqrt(v)
        denom += eps
        np.divide(m, denom, out=denom)
        denom *= step_size
        p.data -= denom


# --- the full pipeline ----------------------------------------------------


def predict_alpha(params: dict, run, image, prompt, opacity: int = 1,
                  record: list | None = None, dtype=np.float32) -> Tensor:
    """Image + prompt -> predicted alpha (1, 1, H, W), differentiable throughout."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    raster = rasterize_prompt(prompt, h, w)
    z_img = encode(params, run.codec, img, dtype=dtype)
    z_prompt = encode(params, run.codec, raster, dtype=dtype)

    e_coord, pad = coord_embedding(prompt)
    f2 = "cond.f2_point" if prompt.kind == "point" else "cond.f2_box"
    cond = cond_embedding(
        opacity_embedding(opacity), e_coord,
        params["cond.f1.weight"], params["cond.f1.bias"],
        params[f"{f2}.weight"], params[f"{f2}.bias"],
        padding=pad, opacity=opacity)

    masks = build_attention_masks(
        prompt, attention_resolutions(run.unet, z_img.shape[2:]), run.mask_sigma)
    z_out = unet_forward(params, run.unet, z_img, z_prompt, cond, masks, record=record)
    return decode(params, run.codec, z_out)


def scene_loss(params: dict, run, image, gt_alpha, prompt, opacity: int,
               dtype=np.float32) -> Tensor:
    pred = predict_alpha(params, run, image, prompt, opacity, dtype=dtype)
    gt = np.asarray(gt_alpha)[None].transpose(0, 3, 1, 2)
    return matting_loss(pred, Tensor(gt, dtype=dtype), weight=run.train.grad_loss_weight)


# --- training loop --------------------------------------------------------


def _choose_prompt_kind(mix: dict, rng: np.random.Generator) -> str:
    u = rng.random()
    acc = 0.0
    for kind in PROMPT_KINDS:
        acc += mix.get(kind, 0.0)
        if u < acc:
            return kind
    return PROMPT_KINDS[-1]


def _snapshot(params: dict) -> dict:
    return {k: t.data.copy() for k, t in params.items()}


def _restore(params: dict, snap: dict) -> None:
    for k, t in params.items():
        t.data = snap[k].copy()


def train_loop(params: dict, run, data_dir=None, out_dir=None,
               progress=None) -> list[tuple[int, float, float]]:
    """Train in place; returns the loss curve as (step, lr, loss) triples.

    Scenes stream from seeded generation, or cycle a dataset directory
    with prompts re-sampled per step from the stored alpha.  A non-finite
    loss aborts with the last-good parameters restored (and saved to
    ``out_dir`` when given).
    """
    tc = run.train
    state = AdamWState()
    steps_per_epoch = math.ceil(tc.scenes_per_epoch / tc.batch_size)
    total_steps = tc.epochs * steps_per_epoch
    dataset = [load_scene(d) for d in list_scene_dirs(data_dir)] if data_dir else None
    if dataset is not None and not dataset:
        raise TrainingError(f"no scenes found under {data_dir}")

    curve: list[tuple[int, float, float]] = []
    last_good = _snapshot(params)
    last_good_step = 0
    sample_index = 0
    for step in range(total_steps):
        lr = lr_schedule(step, tc)
        batch = []
        for _ in range(tc.batch_size):
            kind_rng = subrng(tc.seed, STREAM_PROMPT, sample_index)
            kind = _choose_prompt_kind(tc.prompt_mix, kind_rng)
            if dataset is None:
                scene = make_scene(subrng(tc.seed, STREAM_SCENE, sample_index),
                                   duplicate_prob=tc.duplicate_prob,
                                   size=tc.image_size, prompt_kind=kind)
                batch.append((scene.image, scene.gt_alpha, scene.prompt, scene.opacity))
            else:
                stored = dataset[sample_index % len(dataset)]
                try:
                    prompt = sample_prompts(stored.gt_alpha, kind, kind_rng)
                except GenerationError:
                    prompt = stored.prompt
                batch.append((stored.image, stored.gt_alpha, prompt, stored.opacity))
            sample_index += 1

        losses = [scene_loss(params, run, *item) for item in batch]
        loss = losses[0] if len(losses) == 1 else concat(
            [l.reshape((1,)) for l in losses], axis=0).mean()
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            _restore(params, last_good)
            if out_dir is not None:
                save_model(out_dir, params, run, step=last_good_step)
            raise TrainingError(
                f"loss diverged at step {step}; restored step-{last_good_step} parameters")
        backward(loss)
        adamw_step(params, state, lr, tc)
        zero_grads(params)
        curve.append((step, lr, loss_val))
        if (step + 1) % _SNAPSHOT_EVERY == 0:
            last_good = _snapshot(params)
            last_good_step = step + 1
        if progress is not None:
            progress(step, total_steps, loss_val)

    if out_dir is not None:
        save_model(out_dir, params, run, step=total_steps)
        write_loss_curve(Path(out_dir) / "loss.csv", curve)
    return curve


def save_model(out_dir, params: dict, run, step: int) -> None:
    from .serialization import save_checkpoint

    save_checkpoint(out_dir, params, manifest={
        "config": run.to_dict(), "step": step, "seed": run.train.seed})


def write_loss_curve(path, curve) -> None:
    lines = ["step,lr,loss"]
    lines += [f"{s},{lr!r},{loss!r}" for s, lr, loss in curve]
    Path(path).write_text("\n".join(lines) + "\n")


# --- evaluation -----------------------------------------------------------


@dataclass
class EvalReport:
    prompt_type: str
    scene_ids: list[str]
    rows: list[MetricRow]
    aggregate: MetricRow
    skipped: int = 0
    baseline: MetricRow | None = None
    impro_percent: float | None = None


def _mean_row(rows: list[MetricRow]) -> MetricRow:
    arr = np.array([r.values() for r in rows], dtype=np.float64)
    return MetricRow(*(float(v) for v in arr.mean(axis=0)))


def evaluate(params: dict, run, dataset_dir, prompt_type: str,
             baseline: MetricRow | None = None, eval_seed: int = 0,
             warn=None) -> EvalReport:
    """Run the model over a dataset directory and aggregate the five metrics.

    Prompts of the requested type are regenerated deterministically per
    scene; scenes that cannot produce one (or fail to load) are skipped
    and counted.
    """
    if prompt_type not in PROMPT_KINDS:
        raise ValueError(f"prompt_type must be one of {PROMPT_KINDS}")
    dirs = list_scene_dirs(dataset_dir)

    def run_scene(args):
        index, scene_dir = args
        try:
            scene = load_scene(scene_dir)
            rng = subrng(eval_seed, STREAM_EVAL, index)
            prompt = sample_prompts(scene.gt_alpha, prompt_type, rng)
            pred = predict_alpha(params, run, scene.image, prompt, scene.opacity)
            row = all_metrics(pred.data[0, 0], scene.gt_alpha[:, :, 0],
                              grad_sigma=run.metrics.grad_sigma,
                              conn_step=run.metrics.conn_step)
            return scene_dir.name, row, None
        except (GenerationError, OSError, ValueError) as exc:
            return scene_dir.name, None, exc

    results = parallel_map(run_scene, list(enumerate(dirs)))
    ids, rows, skipped = [], [], 0
    for name, row, exc in results:
        if row is None:
            skipped += 1
            if warn is not None:
                warn(f"skipping {name}: {exc}")
            continue
        ids.append(name)
        rows.append(row)
    if not rows:
        raise TrainingError(f"no usable scenes under {dataset_dir} ({skipped} skipped)")
    aggregate = _mean_row(rows)
    pct = impro(list(baseline.values()), list(aggregate.values())) if baseline else None
    return EvalReport(prompt_type=prompt_type, scene_ids=ids, rows=rows,
                      aggregate=aggregate, skipped=skipped, baseline=baseline,
                      impro_percent=pct)


def eval_report_to_csv(report: EvalReport) -> str:
    lines = [f"# prompt_type={report.prompt_type}", f"# skipped={report.skipped}"]
    if report.baseline is not None:
        lines.append("# baseline=" + ",".join(repr(v) for v in report.baseline.values()))
    if report.impro_percent is not None:
        lines.append(f"# impro_percent={report.impro_percent!r}")
    lines.append("scene,mse,mad,sad,grad,conn")
    for name, row in zip(report.scene_ids, report.rows):
        lines.append(name + "," + ",".join(repr(v) for v in row.values()))
    lines.append("aggregate," + ",".join(repr(v) for v in report.aggregate.values()))
    return "\n".join(lines) + "\n"


def eval_report_from_csv(text: str) -> EvalReport:
    meta: dict[str, str] = {}
    ids, rows = [], []
    aggregate = None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
            continue
        if line.startswith("scene,"):
            continue
        name, *values = line.split(",")
        row = MetricRow(*(float(v) for v in values))
        if name == "aggregate":
            aggregate = row
        else:
            ids.append(name)
            rows.append(row)
    baseline = None
    if "baseline" in meta:
        baseline = MetricRow(*(float(v) for v in meta["baseline"].split(",")))
    pct = float(meta["impro_percent"]) if "impro_percent" in meta else None
    return EvalReport(prompt_type=meta.get("prompt_type", "unknown"), scene_ids=ids,
                      rows=rows, aggregate=aggregate, skipped=int(meta.get("skipped", 0)),
                      baseline=baseline, impro_percent=pct)


def eval_report_table(report: EvalReport) -> str:
    """Aligned text table with the five metric columns plus optional Impro."""
    headers = ["", "MSE", "MAD", "SAD", "Grad", "Conn", "Impro"]
    rows = []
    if report.baseline is not None:
        rows.append(["baseline"] + [f"{v:.4f}" for v in report.baseline.values()] + ["-"])
    imp = f"{report.impro_percent:.2f}%" if report.impro_percent is not None else "-"
    rows.append([f"model ({report.prompt_type})"]
                + [f"{v:.4f}" for v in report.aggregate.values()] + [imp])
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(headers)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*headers)] + [fmt.format(*r) for r in rows]
    out.append(f"scenes: {len(report.rows)}   skipped: {report.skipped}")
    return "\n".join(out) + "\n"


# --- trained-behavior probes (prompt selection, attention focus) -----------


def attention_map_for_scene(params: dict, run, image, prompt, opacity: int = 1):
    """Cross-attention map of the final cross-attention layer for one input.

    Returns (grid, degenerate_flag, (h, w)) on the prompt-latent grid.
    Raises if the configured placement has no cross-attention at all.
    """
    record: list = []
    predict_alpha(params, run, image, prompt, opacity, record=record)
    if not record:
        raise ValueError("configuration has no cross-attention layer to visualize")
    last = record[-1]
    grid, degenerate = export_attention_map(last["probs"], last["context_grid"])
    return grid, degenerate, last["context_grid"]


def selection_rate(params: dict, run, scenes) -> float:
    """Fraction of duplication scenes whose mean predicted alpha is higher
    inside the prompted instance's support than inside the distractor's."""
    wins = 0
    total = 0
    for scene in scenes:
        if not scene.distractor_count:
            continue
        total += 1
        pred = predict_alpha(params, run, scene.image, scene.prompt,
                             scene.opacity).data[0, 0]
        gt = scene.gt_alpha[:, :, 0]
        distractor = scene.distractor_alpha[:, :, 0]
        inside = gt > 0.5 * gt.max()
        rival = distractor > 0.5 * distractor.max()
        if pred[inside].mean() > pred[rival].mean():
            wins += 1
    if total == 0:
        raise ValueError("no duplication scenes supplied")
    return wins / total


def attention_focus_rate(params: dict, run, scenes) -> float:
    """Fraction of scenes whose attention map averages higher inside the
    prompted object's support than outside (support weighted by the
    area-averaged ground-truth alpha at the map grid)."""
    from .prompts import _area_resample

    wins = 0
    total = 0
    for scene in scenes:
        grid, degenerate, (h, w) = attention_map_for_scene(
            params, run, scene.image, scene.prompt, scene.opacity)
        weight = _area_resample(scene.gt_alpha[:, :, 0], h, w)
        weight = weight / max(weight.max(), 1e-9)
        if weight.sum() <= 0 or (1 - weight).sum() <= 0:
            continue
        total += 1
        if degenerate:
            continue
        inside = float((grid * weight).sum() / weight.sum())
        outside = float((grid * (1 - weight)).sum() / (1 - weight).sum())
        if inside > outside:
            wins += 1
    if total == 0:
        raise ValueError("no scorable scenes supplied")
    return wins / total
