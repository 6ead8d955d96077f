"""Synthetic compositing scenes with exact ground-truth alpha.

Scenes are parametric shapes (anti-aliased disks, wobbly blobs, rings and
semi-transparent "glass" variants) composited over smooth gradient
backgrounds.  The three shape families exercise soft edges, instance
selection and transparency; glass shapes carry opacity label 0, everything
else 1.  With configurable probability an identical unprompted copy of the
foreground is placed at a non-overlapping location, so the model can only
resolve the target through the prompt.

Dataset directory layout (also accepted by the evaluation harness):
``scene_%06d/`` containing ``image.png`` (8-bit RGB), ``alpha.png`` (8-bit
gray), ``prompt.txt`` (textual prompt format), ``meta.txt`` (key=value
lines: seed, kind, opacity, distractor_count), plus ``prompt_mask.png``
for mask prompts; the root holds a ``manifest.json``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimensionError, GenerationError
from .images import load_gray, load_rgb, save_gray, save_rgb
from .prompts import VisualPrompt, format_prompt_lines, mask_bbox, parse_prompt_file
from .seeding import STREAM_SCENE, subrng

SHAPE_KINDS = ("disk", "blob", "ring", "glass")
PROMPT_KINDS = ("point", "box", "mask")

_NOISE_AMPLITUDE = 0.02
_MAX_PLACEMENTS = 20
_MAX_SCENE_ATTEMPTS = 20


@dataclass
class SynthScene:
    image: np.ndarray        # (H, W, 3) in [0,1]
    gt_alpha: np.ndarray     # (H, W, 1), prompted instance only
    prompt: VisualPrompt
    opacity: int
    distractor_count: int
    distractor_alpha: np.ndarray | None = None
    background: np.ndarray | None = None
    layers: list = field(default_factory=list)
    shape_kind: str = "unknown"


# --- shapes -------------------------------------------------------------


def _sample_shape(kind: str, rng: np.random.Generator, size: int,
                  radius: float | None = None) -> dict:
    if kind not in SHAPE_KINDS:
        raise ValueError(f"unknown shape kind {kind!r}")
    shape = {
        "kind": kind,
        "radius": float(radius) if radius is not None else float(rng.uniform(0.10, 0.16) * size),
        "edge": float(rng.uniform(1.0, 3.0)),
        "color": rng.uniform(0.05, 0.95, size=3),
    }
    base = kind
    if kind == "glass":
        base = "disk" if rng.random() < 0.5 else "blob"
        shape["alpha_scale"] = float(rng.uniform(0.2, 0.6))
    shape["base"] = base
    if base == "blob":
        ks = np.arange(2, 5)
        shape["blob_amps"] = rng.uniform(0.03, 0.10, size=ks.size) / np.sqrt(ks - 1)
        shape["blob_phases"] = rng.uniform(0.0, 2 * math.pi, size=ks.size)
    if base == "ring":
        shape["inner_frac"] = float(rng.uniform(0.45, 0.65))
    return shape


def _soft_disk(d: np.ndarray, radius: float, edge: float) -> np.ndarray:
    return np.clip((radius - d) / edge + 0.5, 0.0, 1.0)


def _render_alpha(shape: dict, size: int, center: tuple[float, float]) -> np.ndarray:
    cy, cx = center
    ys = np.arange(size)[:, None] + 0.5
    xs = np.arange(size)[None, :] + 0.5
    dy, dx = ys - cy, xs - cx
    d = np.hypot(dx, dy)
    r, edge = shape["radius"], shape["edge"]
    base = shape["base"]
    if base == "disk":
        alpha = _soft_disk(d, r, edge)
    elif base == "blob":
        theta = np.arctan2(dy, dx)
        mod = np.ones_like(d)
        for k, (a, p) in enumerate(zip(shape["blob_amps"], shape["blob_phases"]), start=2):
            mod = mod + a * np.cos(k * theta + p)
        alpha = np.clip((r * mod - d) / edge + 0.5, 0.0, 1.0)
    elif base == "ring":
        alpha = np.clip(_soft_disk(d, r, edge) - _soft_disk(d, r * shape["inner_frac"], edge),
                        0.0, 1.0)
    else:
        raise ValueError(f"unknown base shape {base!r}")
    if shape["kind"] == "glass":
        alpha = alpha * shape["alpha_scale"]
    return alpha[:, :, None]


def _margin(shape: dict) -> float:
    grow = 1.0 + (shape["blob_amps"].sum() if "blob_amps" in shape else 0.0)
    return shape["radius"] * grow + shape["edge"] + 1.0


def gen_foreground(kind: str, rng: np.random.Generator, size: int = 64,
                   radius: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """A centered foreground sprite: ((H,W,3) rgb, (H,W,1) alpha).

    Opaque kinds have soft 1-3 px edges; glass scales alpha into [0.2, 0.6]
    and is the transparent (opacity label 0) case.
    """
    shape = _sample_shape(kind, rng, size, radius=radius)
    alpha = _render_alpha(shape, size, (size / 2.0, size / 2.0))
    rgb = np.broadcast_to(shape["color"], (size, size, 3)).copy()
    return rgb, alpha


def composite(background: np.ndarray, foregrounds) -> np.ndarray:
    """Back-to-front alpha compositing: I = a*F + (1-a)*I per layer."""
    image = np.asarray(background, dtype=np.float64).copy()
    for rgb, alpha in foregrounds:
        rgb = np.asarray(rgb)
        alpha = np.asarray(alpha)
        if rgb.shape[:2] != image.shape[:2] or alpha.shape[:2] != image.shape[:2]:
            raise DimensionError(
                f"layer extents {rgb.shape[:2]}/{alpha.shape[:2]} != {image.shape[:2]}")
        image = alpha * rgb + (1.0 - alpha) * image
    return image


def _gen_background(rng: np.random.Generator, size: int) -> np.ndarray:
    c0, c1 = rng.uniform(0.0, 1.0, size=(2, 3))
    angle = rng.uniform(0.0, 2 * math.pi)
    ys = np.arange(size)[:, None] / max(size - 1, 1)
    xs = np.arange(size)[None, :] / max(size - 1, 1)
    t = xs * math.cos(angle) + ys * math.sin(angle)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    bg = c0[None, None, :] + t[:, :, None] * (c1 - c0)[None, None, :]
    bg = bg + rng.uniform(-_NOISE_AMPLITUDE, _NOISE_AMPLITUDE, size=(size, size, 3))
    return np.clip(bg, 0.0, 1.0)


# --- prompt sampling ----------------------------------------------------


def sample_prompts(gt_alpha: np.ndarray, kind: str, rng: np.random.Generator,
                   box_jitter: float = 0.05) -> VisualPrompt:
    """Randomly generate a prompt of the requested kind from a ground-truth matte.

    Points land where alpha > 0.5 (1 to 5 of them); boxes are the tight
    alpha > 0 box jittered by up to ``box_jitter`` of the image extent per
    side; masks binarize alpha at 0.5 then dilate or erode by 0-3 cells.
    """
    a = np.asarray(gt_alpha)
    if a.ndim == 3:
        a = a[:, :, 0]
    h, w = a.shape
    if kind == "point":
        ys, xs = np.nonzero(a > 0.5)
        if ys.size == 0:
            raise GenerationError("no alpha > 0.5 support for point prompts")
        n = int(rng.integers(1, 6))
        idx = rng.integers(0, ys.size, size=n)
        pts = [((xs[i] + 0.5) / w, (ys[i] + 0.5) / h) for i in idx]
        return VisualPrompt.point(pts)

    if kind == "box":
        support = a > 0
        if not support.any():
            raise GenerationError("empty alpha support for box prompts")
        x1, y1, x2, y2 = mask_bbox(support)
        jx1, jy1, jx2, jy2 = rng.uniform(-box_jitter, box_jitter, size=4) if box_jitter \
            else (0.0, 0.0, 0.0, 0.0)
        nx1, nx2 = np.clip(x1 + jx1, 0.0, 1.0), np.clip(x2 + jx2, 0.0, 1.0)
        ny1, ny2 = np.clip(y1 + jy1, 0.0, 1.0), np.clip(y2 + jy2, 0.0, 1.0)
        if nx1 >= nx2:
            nx1, nx2 = x1, x2
        if ny1 >= ny2:
            ny1, ny2 = y1, y2
        return VisualPrompt.box(nx1, ny1, nx2, ny2)

    if kind == "mask":
        binary = a >= 0.5
        if not binary.any():
            raise GenerationError("empty binarized alpha for mask prompts")
        radius = int(rng.integers(0, 4))
        grid = binary
        if radius > 0:
            if rng.random() < 0.5:
                grid = ndimage.binary_dilation(binary, iterations=radius)
            else:
                eroded = ndimage.binary_erosion(binary, iterations=radius)
                grid = eroded if eroded.any() else binary
        return VisualPrompt.mask(grid)

    raise ValueError(f"unknown prompt kind {kind!r}")


# --- scenes -------------------------------------------------------------


def make_scene(rng: np.random.Generator, duplicate_prob: float = 0.5, size: int = 64,
               kind: str | None = None, prompt_kind: str | None = None) -> SynthScene:
    """One composited scene with ground truth, prompt and opacity label.

    With probability ``duplicate_prob`` an identical unprompted copy of the
    foreground lands at a non-overlapping position; if no placement is
    found in 20 tries the scene falls back to a single instance.  Prompt
    sampling failures (e.g. point prompts on faint glass) resample the
    whole scene.
    """
    for _ in range(_MAX_SCENE_ATTEMPTS):
        k = kind if kind is not None else SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))]
        shape = _sample_shape(k, rng, size)
        margin = min(_margin(shape), size / 2.0 - 1.0)
        lo, hi = margin, size - margin
        mid = size / 2.0

        alpha1 = None
        layers = []
        distractor_alpha = None
        if rng.random() < duplicate_prob:
            # place the pair near-symmetrically about the middle so two
            # instances fit even for the largest shapes
            room = mid - margin
            for _ in range(_MAX_PLACEMENTS):
                if room <= 0:
                    break
                phi = rng.uniform(0.0, 2 * math.pi)
                off = rng.uniform(0.7, 1.0) * room
                u = np.array([math.sin(phi), math.cos(phi)])
                c1 = tuple(np.clip(mid + off * u + rng.uniform(-1.5, 1.5, 2), lo, hi))
                c2 = tuple(np.clip(mid - off * u + rng.uniform(-1.5, 1.5, 2), lo, hi))
                a1 = _render_alpha(shape, size, c1)
                a2 = _render_alpha(shape, size, c2)
                if not ((a1[:, :, 0] > 0) & (a2[:, :, 0] > 0)).any():
                    alpha1, distractor_alpha = a1, a2
                    break
        if alpha1 is None:  # single instance, or placement fallback
            c1 = (rng.uniform(lo, hi), rng.uniform(lo, hi))
            alpha1 = _render_alpha(shape, size, c1)
            distractor_alpha = None
        rgb = np.broadcast_to(shape["color"], (size, size, 3)).copy()
        layers = [(rgb, alpha1)]
        if distractor_alpha is not None:
            layers.append((rgb.copy(), distractor_alpha))

        background = _gen_background(rng, size)
        image = composite(background, layers)
        pk = prompt_kind if prompt_kind is not None else PROMPT_KINDS[rng.integers(3)]
        try:
            prompt = sample_prompts(alpha1, pk, rng)
        except GenerationError:
            continue
        return SynthScene(
            image=image,
            gt_alpha=alpha1,
            prompt=prompt,
            opacity=0 if k == "glass" else 1,
            distractor_count=0 if distractor_alpha is None else 1,
            distractor_alpha=distractor_alpha,
            background=background,
            layers=layers,
            shape_kind=k,
        )
    raise GenerationError(f"could not build a valid scene in {_MAX_SCENE_ATTEMPTS} attempts")


# --- dataset directories -------------------------------------------------


def scene_dir_name(index: int) -> str:
    return f"scene_{index:06d}"


def write_scene(scene_dir, scene: SynthScene, seed: int) -> None:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    save_rgb(scene_dir / "image.png", scene.image)
    save_gray(scene_dir / "alpha.png", scene.gt_alpha)
    if scene.prompt.kind == "mask":
        save_gray(scene_dir / "prompt_mask.png", scene.prompt.mask_grid.astype(np.float64))
    (scene_dir / "prompt.txt").write_text(format_prompt_lines(scene.prompt, scene.opacity))
    meta = {
        "seed": seed,
        "kind": scene.shape_kind,
        "opacity": scene.opacity,
        "distractor_count": scene.distractor_count,
    }
    (scene_dir / "meta.txt").write_text(
        "".join(f"{k}={v}\n" for k, v in meta.items()))


def generate_dataset(out_dir, count: int, seed: int, size: int = 64,
                     duplicate_prob: float = 0.5, prompt_kind: str | None = None) -> Path:
    """Write ``count`` seeded scenes plus a manifest; returns the root path."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        rng = subrng(seed, STREAM_SCENE, i)
        scene = make_scene(rng, duplicate_prob=duplicate_prob, size=size,
                           prompt_kind=prompt_kind)
        write_scene(root / scene_dir_name(i), scene, seed=seed)
    with open(root / "manifest.json", "w") as fh:
        json.dump({"count": count, "seed": seed, "size": size,
                   "duplicate_prob": duplicate_prob}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return root


@dataclass
class LoadedScene:
    image: np.ndarray
    gt_alpha: np.ndarray
    prompt: VisualPrompt
    opacity: int
    meta: dict


def load_scene(scene_dir) -> LoadedScene:
    scene_dir = Path(scene_dir)
    image = load_rgb(scene_dir / "image.png")
    alpha = load_gray(scene_dir / "alpha.png")
    prompt, opacity = parse_prompt_file(scene_dir / "prompt.txt")
    meta = {}
    meta_path = scene_dir / "meta.txt"
    if meta_path.exists():
        for line in meta_path.read_text().splitlines():
            if "=" in line:
                key, _, value = line.partition("=")
                meta[key.strip()] = int(value) if value.strip().lstrip("-").isdigit() else value.strip()
    return LoadedScene(image=image, gt_alpha=alpha, prompt=prompt, opacity=opacity, meta=meta)


def list_scene_dirs(root) -> list[Path]:
    return sorted(p for p in Path(root).iterdir() if p.is_dir() and p.name.startswith("scene_"))
