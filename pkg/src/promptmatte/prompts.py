"""Visual prompts and the conditioning signals derived from them.

A prompt is a point set, a box, or a binary mask, all in normalized [0,1]
image coordinates.  From a prompt this module builds the three signals the
model consumes:

* a rasterized prompt image that is encoded next to the input image,
* a coordinate embedding (1680-wide for points, 1280-wide for boxes and
  masks, i.e. four 320-wide axis encodings) combined with a 320-wide
  opacity embedding into the conditioning vector that stands in for a
  diffusion time embedding,
* per-resolution attention masks: hard {0,1} grids for boxes/masks and
  soft Gaussian bumps for points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapacityError, DimensionError
from .tensor import Tensor, add, linear

# Total coordinate-embedding widths per prompt kind, and the per-axis width
# shared with the opacity embedding.  1680 = 2^4*3*5*7 is divisor-rich so the
# zero padding P for point lists stays small.
POINT_WIDTH = 1680
BOX_WIDTH = 1280
AXIS_WIDTH = 320

# Normalized values are pre-scaled by this factor before sinusoidal encoding,
# matching the numeric range the frequency bank was designed for.
COORD_SCALE = 1000.0

POINT_RADIUS_FRACTION = 0.02  # rasterized point disk radius, fraction of min extent
DEFAULT_SIGMA = 0.1           # soft point-mask width in normalized units

KINDS = ("point", "box", "mask")


@dataclass(frozen=True)
class VisualPrompt:
    """A user prompt: one of a point set, a box, or a binary mask."""

    kind: str
    points: tuple[tuple[float, float], ...] | None = None
    box: tuple[float, float, float, float] | None = None
    mask_grid: np.ndarray | None = None

    @classmethod
    def point(cls, points) -> "VisualPrompt":
        pts = tuple((float(x), float(y)) for x, y in points)
        if not pts:
            raise ValueError("point prompt needs at least one point")
        for x, y in pts:
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise ValueError(f"point ({x}, {y}) outside [0,1]^2")
        return cls(kind="point", points=pts)

    @classmethod
    def box(cls, x1: float, y1: float, x2: float, y2: float) -> "VisualPrompt":
        x1, x2 = sorted((float(x1), float(x2)))
        y1, y2 = sorted((float(y1), float(y2)))
        for v in (x1, y1, x2, y2):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"box coordinate {v} outside [0,1]")
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box ({x1}, {y1}, {x2}, {y2})")
        return cls(kind="box", box=(x1, y1, x2, y2))

    @classmethod
    def mask(cls, grid) -> "VisualPrompt":
        m = np.asarray(grid) > 0.5
        if m.ndim != 2:
            raise ValueError(f"mask grid must be 2-D, got shape {m.shape}")
        if not m.any():
            raise ValueError("mask prompt has no set cells")
        return cls(kind="mask", mask_grid=m)


@dataclass(frozen=True)
class CondEmbedding:
    """Conditioning vector replacing the time embedding, with provenance."""

    vector: Tensor
    coord_width: int
    padding: int
    opacity: int


@dataclass(frozen=True)
class AttentionMask:
    """Spatial attention weighting in [0,1]; hard masks are binary."""

    grid: np.ndarray
    kind: str  # "hard" or "soft"

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def flat(self) -> np.ndarray:
        return self.grid.reshape(-1)


def _validate_opacity(o: int) -> int:
    o = int(o)
    if o not in (0, 1):
        raise ValueError(f"opacity must be 0 or 1, got {o}")
    return o


# --- sinusoidal encodings ----------------------------------------------


def _sin_cos(value: float, dim: int) -> np.ndarray:
    """Sin/cos bank of ``dim`` entries; odd dims get one extra sin entry."""
    n_sin = (dim + 1) // 2
    if n_sin == 1:
        freqs = np.ones(1)
    else:
        freqs = np.exp(-math.log(10000.0) * np.arange(n_sin) / (n_sin - 1))
    ang = value * freqs
    return np.concatenate([np.sin(ang), np.cos(ang[: dim - n_sin])])


def sinusoidal_encode(value: float, dim: int) -> np.ndarray:
    """Encode a scalar as [sin(v*w_0..w_{d/2-1}), cos(v*w_0..)].

    Frequencies follow the usual geometric ladder w_i = 10000^(-i/(d/2-1)),
    reducing to the single frequency 1 when dim == 2.  Callers pre-scale
    normalized coordinates by COORD_SCALE.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"dim must be even and >= 2, got {dim}")
    return _sin_cos(float(value), dim)


def point_pad(n: int) -> tuple[int, int]:
    """Minimal zero padding P so (2N+P) divides the point-embedding width.

    Returns (P, per_scalar_dim) with per_scalar_dim = 1680 / (2N + P).
    """
    if not 1 <= n <= POINT_WIDTH // 2:
        raise ValueError(f"point count {n} outside [1, {POINT_WIDTH // 2}]")
    for p in range(POINT_WIDTH):
        if POINT_WIDTH % (2 * n + p) == 0:
            return p, POINT_WIDTH // (2 * n + p)
    raise AssertionError("unreachable: 2N+P eventually reaches 1680")


def mask_bbox(mask) -> tuple[float, float, float, float]:
    """Tight normalized box around the set cells of a binary grid.

    Cell edges define the box, so a single set cell yields a box one
    cell-width wide, keeping x1 < x2 and y1 < y2.
    """
    m = np.asarray(mask) > 0.5
    if m.ndim != 2:
        raise DimensionError(f"mask must be 2-D, got shape {m.shape}")
    if not m.any():
        raise ValueError("empty mask has no bounding box")
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    h, w = m.shape
    return (cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h)


def coord_embedding(prompt: VisualPrompt) -> tuple[np.ndarray, int]:
    """Sinusoidal coordinate embedding of a prompt; returns (vector, padding).

    Boxes (and mask bounding boxes) embed their four corner numbers into
    320 dims each (1280 total).  Point lists are zero-padded to a divisor
    of 1680 and each scalar gets an equal share of the 1680 dims.
    """
    if prompt.kind in ("box", "mask"):
        box = prompt.box if prompt.kind == "box" else mask_bbox(prompt.mask_grid)
        parts = [sinusoidal_encode(v * COORD_SCALE, AXIS_WIDTH) for v in box]
        return np.concatenate(parts), 0
    if prompt.kind != "point":
        raise ValueError(f"unknown prompt kind {prompt.kind!r}")
    n = len(prompt.points)
    if 2 * n > POINT_WIDTH:
        raise CapacityError(f"{n} points exceed the {POINT_WIDTH}-wide encoding")
    pad, per_scalar = point_pad(n)
    scalars = [c for pt in prompt.points for c in pt] + [0.0] * pad
    parts = [_sin_cos(v * COORD_SCALE, per_scalar) for v in scalars]
    return np.concatenate(parts), pad


def opacity_embedding(opacity: int) -> np.ndarray:
    """320-wide sinusoidal encoding of the binary opacity label."""
    o = _validate_opacity(opacity)
    return sinusoidal_encode(o * COORD_SCALE, AXIS_WIDTH)


def cond_embedding(e_opacity, e_coord, f1_weight: Tensor, f1_bias: Tensor,
                   f2_weight: Tensor, f2_bias: Tensor, *, coord_width: int | None = None,
                   padding: int = 0, opacity: int = 1) -> CondEmbedding:
    """Combine opacity and coordinate embeddings: f1(E_opacity) + f2(E_coord).

    The caller selects the f2 head matching the prompt kind (input width
    1680 for points, 1280 for boxes/masks); both heads share the output
    width of the conditioning pathway.
    """
    dt = f1_weight.dtype
    e_o = e_opacity if isinstance(e_opacity, Tensor) else Tensor(np.asarray(e_opacity), dtype=dt)
    e_c = e_coord if isinstance(e_coord, Tensor) else Tensor(np.asarray(e_coord), dtype=dt)
    if f1_weight.shape[1] != e_o.shape[-1]:
        raise DimensionError(f"f1 expects width {f1_weight.shape[1]}, got {e_o.shape[-1]}")
    if f2_weight.shape[1] != e_c.shape[-1]:
        raise DimensionError(f"f2 expects width {f2_weight.shape[1]}, got {e_c.shape[-1]}")
    if f1_weight.shape[0] != f2_weight.shape[0]:
        raise DimensionError("f1 and f2 must share their output width")
    vec = add(linear(e_o, f1_weight, f1_bias), linear(e_c, f2_weight, f2_bias))
    return CondEmbedding(vector=vec, coord_width=e_c.shape[-1],
                         padding=padding, opacity=_validate_opacity(opacity))


# --- rasterization and attention masks ---------------------------------


def _cell_centers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    return ys, xs


def _area_resample(src: np.ndarray, h: int, w: int) -> np.ndarray:
    """Exact area-average resampling of a 2-D grid to (h, w)."""
    sh, sw = src.shape

    def overlap(n_out, n_in):
        edges_out = np.arange(n_out + 1) * (n_in / n_out)
        lo = edges_out[:-1, None]
        hi = edges_out[1:, None]
        cells = np.arange(n_in)[None, :]
        ov = np.minimum(hi, cells + 1) - np.maximum(lo, cells)
        return np.clip(ov, 0.0, None) / (n_in / n_out)

    return overlap(h, sh) @ src.astype(np.float64) @ overlap(w, sw).T


def rasterize_prompt(prompt: VisualPrompt, h: int, w: int) -> np.ndarray:
    """Draw a prompt as an (h, w, 1) image in [0,1].

    Points become anti-aliased filled disks of radius 0.02*min(h, w); boxes
    are filled rectangles (cell-center membership); masks are resampled to
    the target grid with nearest neighbor.
    """
    if h < 8 or w < 8:
        raise ValueError(f"raster extents must be >= 8, got {h}x{w}")
    if prompt.kind == "box":
        x1, y1, x2, y2 = prompt.box
        ys, xs = _cell_centers(h, w)
        inside = ((ys >= y1) & (ys <= y2))[:, None] & ((xs >= x1) & (xs <= x2))[None, :]
        img = inside.astype(np.float64)
    elif prompt.kind == "mask":
        src = prompt.mask_grid
        sh, sw = src.shape
        ri = np.minimum((np.arange(h) * sh) // h, sh - 1)
        ci = np.minimum((np.arange(w) * sw) // w, sw - 1)
        img = src[np.ix_(ri, ci)].astype(np.float64)
    elif prompt.kind == "point":
        radius = POINT_RADIUS_FRACTION * min(h, w)
        ys = np.arange(h)[:, None] + 0.5
        xs = np.arange(w)[None, :] + 0.5
        img = np.zeros((h, w))
        for x, y in prompt.points:
            d = np.hypot(xs - x * w, ys - y * h)
            img = np.maximum(img, np.clip(radius + 0.5 - d, 0.0, 1.0))
    else:
        raise ValueError(f"unknown prompt kind {prompt.kind!r}")
    return img[:, :, None]


def _containing_cell(x: float, y: float, h: int, w: int) -> tuple[int, int]:
    return min(int(y * h), h - 1), min(int(x * w), w - 1)


def attention_mask_build(prompt: VisualPrompt, h: int, w: int,
                         sigma: float = DEFAULT_SIGMA) -> AttentionMask:
    """Build the spatial attention mask for a prompt at grid (h, w).

    Boxes and masks yield hard {0,1} grids (masks are area-averaged to the
    target grid and re-thresholded at 0.5); an empty result forces the cell
    nearest the region center to 1.  Points yield a soft grid: per-cell max
    over points of a Gaussian bump in normalized coordinates, with the cell
    containing each point pinned to exactly 1.
    """
    if h < 1 or w < 1:
        raise ValueError(f"mask extents must be >= 1, got {h}x{w}")
    if prompt.kind == "point":
        if sigma <= 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        ys, xs = _cell_centers(h, w)
        grid = np.zeros((h, w))
        for x, y in prompt.points:
            d2 = (ys[:, None] - y) ** 2 + (xs[None, :] - x) ** 2
            grid = np.maximum(grid, np.exp(-d2 / (2.0 * sigma * sigma)))
        for x, y in prompt.points:
            grid[_containing_cell(x, y, h, w)] = 1.0
        return AttentionMask(grid=grid, kind="soft")

    if prompt.kind == "box":
        x1, y1, x2, y2 = prompt.box
        ys, xs = _cell_centers(h, w)
        grid = (((ys >= y1) & (ys <= y2))[:, None]
                & ((xs >= x1) & (xs <= x2))[None, :]).astype(np.float64)
        if not grid.any():
            grid[_containing_cell((x1 + x2) / 2, (y1 + y2) / 2, h, w)] = 1.0
        return AttentionMask(grid=grid, kind="hard")

    if prompt.kind == "mask":
        avg = _area_resample(prompt.mask_grid.astype(np.float64), h, w)
        grid = (avg >= 0.5).astype(np.float64)
        if not grid.any():
            rows, cols = np.nonzero(prompt.mask_grid)
            sh, sw = prompt.mask_grid.shape
            cy, cx = (rows.mean() + 0.5) / sh, (cols.mean() + 0.5) / sw
            grid[_containing_cell(cx, cy, h, w)] = 1.0
        return AttentionMask(grid=grid, kind="hard")

    raise ValueError(f"unknown prompt kind {prompt.kind!r}")


def build_attention_masks(prompt: VisualPrompt, resolutions,
                          sigma: float = DEFAULT_SIGMA) -> dict[tuple[int, int], AttentionMask]:
    """Masks for every (h, w) resolution an attention layer will run at."""
    return {(h, w): attention_mask_build(prompt, h, w, sigma) for h, w in resolutions}


# --- prompt files -------------------------------------------------------


def parse_prompt_file(path) -> tuple[VisualPrompt, int]:
    """Read a textual prompt file; returns (prompt, opacity).

    Lines: ``point x1 y1 [x2 y2 ...]``, ``box x1 y1 x2 y2``,
    ``mask <path-to-binary-image>`` and an optional ``opacity 0|1`` line
    (default 1).  The first prompt line wins; mask paths are resolved
    relative to the prompt file.
    """
    path = Path(path)
    prompt = None
    opacity = 1
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        kw, args = tokens[0].lower(), tokens[1:]
        if kw == "opacity":
            opacity = _validate_opacity(int(args[0]))
        elif prompt is not None:
            continue
        elif kw == "point":
            vals = [float(v) for v in args]
            if len(vals) < 2 or len(vals) % 2:
                raise ValueError(f"{path}: point line needs an even number of coordinates")
            prompt = VisualPrompt.point(list(zip(vals[::2], vals[1::2])))
        elif kw == "box":
            if len(args) != 4:
                raise ValueError(f"{path}: box line needs 4 coordinates")
            prompt = VisualPrompt.box(*(float(v) for v in args))
        elif kw == "mask":
            from .images import load_gray

            grid = load_gray(path.parent / " ".join(args))
            prompt = VisualPrompt.mask(grid[:, :, 0] > 0.5)
        else:
            raise ValueError(f"{path}: unknown prompt keyword {kw!r}")
    if prompt is None:
        raise ValueError(f"{path}: no prompt line found")
    return prompt, opacity


def format_prompt_lines(prompt: VisualPrompt, opacity: int,
                        mask_filename: str = "prompt_mask.png") -> str:
    """Render a prompt back to the textual file format."""
    if prompt.kind == "point":
        coords = " ".join(f"{c:.6f}" for pt in prompt.points for c in pt)
        line = f"point {coords}"
    elif prompt.kind == "box":
        line = "box " + " ".join(f"{v:.6f}" for v in prompt.box)
    else:
        line = f"mask {mask_filename}"
    return f"{line}\nopacity {_validate_opacity(opacity)}\n"
