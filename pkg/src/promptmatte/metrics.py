"""Alpha-matte quality metrics and relative-improvement aggregation.

Conventions: MSE and MAD are plain means of squared/absolute differences;
SAD, Grad and Conn carry the customary 1/1000 scaling.  Grad compares
Gaussian-derivative gradient magnitudes (sigma 1.4, kernels truncated at
3*sigma and L2-normalized, replicate-padded correlation).  Conn follows
the standard connectivity scheme: thresholds 0.1..0.9, per-pixel
degree of connectedness to the largest jointly-connected region under
4-connectivity, with the usual 0.15 discount on small drops.

``impro`` is the average relative improvement over a baseline across a
metric tuple (lower is better for every metric), in percent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError

GRAD_SIGMA = 1.4
CONN_STEP = 0.1
CONN_DISCOUNT = 0.15


@dataclass(frozen=True)
class MetricRow:
    """The five per-image metrics for one (method, dataset, prompt) cell."""

    mse: float
    mad: float
    sad: float
    grad: float
    conn: float

    def values(self) -> tuple[float, float, float, float, float]:
        return (self.mse, self.mad, self.sad, self.grad, self.conn)


def _prep(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.ndim == 3 and p.shape[2] == 1:
        p = p[:, :, 0]
    if g.ndim == 3 and g.shape[2] == 1:
        g = g[:, :, 0]
    if p.ndim != 2 or g.ndim != 2:
        raise DimensionError(f"mattes must be 2-D, got {p.shape} and {g.shape}")
    if p.shape != g.shape:
        raise DimensionError(f"matte extents differ: {p.shape} vs {g.shape}")
    return p, g


def pixel_metrics(pred, gt) -> tuple[float, float, float]:
    """(MSE, MAD, SAD): mean square, mean absolute, and sum/1000 of |diff|."""
    p, g = _prep(pred, gt)
    diff = p - g
    mse = float(np.mean(diff * diff))
    mad = float(np.mean(np.abs(diff)))
    sad = float(np.sum(np.abs(diff)) / 1000.0)
    return mse, mad, sad


def _gaussian_derivative_kernel(sigma: float) -> np.ndarray:
    """First-order Gaussian derivative along x, truncated at 3*sigma, L2-normalized."""
    half = int(math.ceil(3.0 * sigma))
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-ax**2 / (2 * sigma**2)) / (sigma * math.sqrt(2 * math.pi))
    dg = -ax * g / sigma**2
    kernel = g[:, None] * dg[None, :]
    return kernel / math.sqrt(float(np.sum(kernel * kernel)))


def _gradient_amplitude(matte: np.ndarray, sigma: float) -> np.ndarray:
    kx = _gaussian_derivative_kernel(sigma)
    gx = ndimage.correlate(matte, kx, mode="nearest")
    gy = ndimage.correlate(matte, kx.T, mode="nearest")
    return np.hypot(gx, gy)


def grad_metric(pred, gt, sigma: float = GRAD_SIGMA) -> float:
    """Sum of absolute gradient-magnitude differences, scaled by 1/1000."""
    p, g = _prep(pred, gt)
    return float(np.sum(np.abs(_gradient_amplitude(p, sigma)
                               - _gradient_amplitude(g, sigma))) / 1000.0)


def _largest_joint_component(binary: np.ndarray) -> np.ndarray:
    """Largest 4-connected component of a binary grid (empty grid -> empty)."""
    labels, count = ndimage.label(binary)
    if count == 0:
        return np.zeros_like(binary, dtype=bool)
    sizes = np.bincount(labels.reshape(-1))[1:]
    return labels == (1 + int(np.argmax(sizes)))


def conn_metric(pred, gt, step: float = CONN_STEP, discount: float = CONN_DISCOUNT) -> float:
    """Connectivity error per the standard scheme, scaled by 1/1000.

    For each threshold the source region is the largest connected component
    where both mattes exceed the threshold; a pixel's connectedness level
    is the last threshold at which it still belonged to that region (with
    an empty joint region every remaining pixel drops out).
    """
    p, g = _prep(pred, gt)
    n_steps = int(round(1.0 / step)) - 1
    thresholds = [(i + 1) * step for i in range(n_steps)]

    level = np.full(p.shape, -1.0)
    for i, theta in enumerate(thresholds):
        omega = _largest_joint_component((p >= theta) & (g >= theta))
        dropped = (level == -1.0) & ~omega
        level[dropped] = thresholds[i - 1] if i > 0 else 0.0
    level[level == -1.0] = 1.0

    dp = p - level
    dg = g - level
    phi_p = 1.0 - dp * (dp >= discount)
    phi_g = 1.0 - dg * (dg >= discount)
    return float(np.sum(np.abs(phi_p - phi_g)) / 1000.0)


def all_metrics(pred, gt, grad_sigma: float = GRAD_SIGMA,
                conn_step: float = CONN_STEP) -> MetricRow:
    mse, mad, sad = pixel_metrics(pred, gt)
    return MetricRow(mse=mse, mad=mad, sad=sad,
                     grad=grad_metric(pred, gt, sigma=grad_sigma),
                     conn=conn_metric(pred, gt, step=conn_step))


def impro(baseline, method) -> float:
    """Average relative improvement of ``method`` over ``baseline``, in percent.

    All metrics are lower-is-better: 100 * mean_i (b_i - m_i) / b_i.
    Main-table rows carry 5 values, ablation rows 8 (MSE and SAD over two
    benchmarks and two prompt types).
    """
    b = np.asarray(baseline, dtype=np.float64)
    m = np.asarray(method, dtype=np.float64)
    if b.shape != m.shape or b.ndim != 1:
        raise DimensionError(f"value sequences differ: {b.shape} vs {m.shape}")
    if b.size == 0:
        raise ValueError("empty metric sequences")
    if (b <= 0).any():
        raise ValueError("baseline entries must be strictly positive")
    return float(100.0 * np.mean((b - m) / b))
