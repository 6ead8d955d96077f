"""Dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap a numpy buffer (float32 or float64) and optionally record how
they were produced, so that ``backward`` on a scalar result can populate
``grad`` on every leaf created with ``requires_grad=True``.  The op set is
exactly what a small convolutional U-Net with attention needs: conv2d,
linear, softmax, group-norm+SiLU, elementwise arithmetic, reshaping,
nearest resampling and reductions.  Broadcasting is limited to scalars and
suffix shapes (a bias whose shape matches the trailing axes of the other
operand); anything fancier raises.

Graphs are single-use: after a non-retained ``backward`` the recorded
closures are dropped and a second traversal raises ``GraphStateError``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import DimensionError, GraphStateError

_ALLOWED_DTYPES = (np.float32, np.float64)


def _as_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in [np.dtype(d) for d in _ALLOWED_DTYPES]:
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    return dt


class Tensor:
    """N-dimensional array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_as_dtype(dtype), copy=False)
        elif arr.dtype not in [np.dtype(d) for d in _ALLOWED_DTYPES]:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._consumed = False

    # --- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{grad})"

    # --- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_ensure_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _ensure_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(a: Tensor, b: Tensor):
    if a.dtype != b.dtype:
        raise DimensionError(f"dtype mismatch: {a.dtype} vs {b.dtype}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _suffix_reduce(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum the leading axes of ``grad`` so it matches ``shape`` (a suffix)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def _binary_shapes(a: Tensor, b: Tensor):
    """Validate scalar / same-shape / suffix-broadcast operand shapes."""
    if a.shape == b.shape:
        return
    if b.size == 1 or a.size == 1:
        return
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    if a.ndim < b.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
        return
    raise DimensionError(f"incompatible shapes {a.shape} and {b.shape}")


# --- elementwise ------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _ensure_tensor(b, a.dtype)
    _check_same_dtype(a, b)
    _binary_shapes(a, b)
    data = a.data + b.data

    def backward(g):
        ga = g if a.shape == g.shape else _suffix_reduce(g, a.shape).reshape(a.shape)
        gb = g if b.shape == g.shape else _suffix_reduce(g, b.shape).reshape(b.shape)
        return ga, gb

    return _make(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _ensure_tensor(b, a.dtype)
    _check_same_dtype(a, b)
    _binary_shapes(a, b)
    data = a.data * b.data

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        if a.shape != data.shape:
            ga = _suffix_reduce(ga, a.shape).reshape(a.shape)
        if b.shape != data.shape:
            gb = _suffix_reduce(gb, b.shape).reshape(b.shape)
        return ga, gb

    return _make(data, (a, b), backward)


def texp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def tlog(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def tabs(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    y = x.data * s
    return _make(y, (x,), lambda g: (g * (s + y * (1.0 - s)),))


# --- shape manipulation -----------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = x.data.reshape(shape)
    return _make(data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of empty sequence")
    for t in tensors[1:]:
        _check_same_dtype(tensors[0], t)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        grads = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(data, tensors, backward)


def slice_(x: Tensor, key) -> Tensor:
    """Basic slicing (tuples of slice objects / ints); fancy indexing is not supported."""
    data = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _make(data, (x,), backward)


# --- reductions -------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _make(np.asarray(data), (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in ax]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# --- linear algebra ---------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading axes must match exactly."""
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"leading axes differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``y = x @ weight.T + bias``.

    ``weight`` is (d_out, d_in); every leading axis of ``x`` passes through.
    """
    _check_same_dtype(x, weight)
    if weight.ndim != 2:
        raise DimensionError(f"weight must be 2-D, got {weight.shape}")
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise DimensionError(f"input width {x.shape[-1]} != weight width {d_in}")
    if bias is not None and bias.shape != (d_out,):
        raise DimensionError(f"bias shape {bias.shape} != ({d_out},)")

    xmat = x.data.reshape(-1, d_in)
    ymat = xmat @ weight.data.T
    if bias is not None:
        ymat = ymat + bias.data
    data = ymat.reshape(x.shape[:-1] + (d_out,))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.reshape(-1, d_out)
        gx = (gmat @ weight.data).reshape(x.shape)
        gw = gmat.T @ xmat
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0)

    return _make(data, parents, backward)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-(sample, channel) bias (N, C) onto feature maps (N, C, H, W)."""
    _check_same_dtype(x, bias)
    if x.ndim != 4 or bias.ndim != 2 or x.shape[:2] != bias.shape:
        raise DimensionError(f"expected (N,C,H,W) and (N,C); got {x.shape} and {bias.shape}")
    data = x.data + bias.data[:, :, None, None]
    return _make(data, (x, bias), lambda g: (g, g.sum(axis=(2, 3))))


# --- convolution ------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )
    # (N, Ho, Wo, C, kh, kw) -> matrix rows are output positions
    return np.ascontiguousarray(view.transpose(0, 4, 5, 1, 2, 3)).reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW input with OIkk kernels."""
    _check_same_dtype(x, weight)
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D operands; got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise DimensionError(f"input has {c} channels, kernel expects {i}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"bias shape {bias.shape} != ({o},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    colmat = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(o, -1)
    ymat = colmat @ wmat.T
    if bias is not None:
        ymat = ymat + bias.data
    data = ymat.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ colmat).reshape(weight.shape)
        gcol = gmat @ wmat  # (N*Ho*Wo, C*kh*kw)
        gcols = gcol.reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros_like(xp)
        for a in range(kh):
            for b in range(kw):
                gxp[:, :, a:a + ho * stride:stride, b:b + wo * stride:stride] += (
                    gcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0)

    return _make(data, parents, backward)


# --- normalization and softmax ----------------------------------------


def norm_act(x: Tensor, groups: int, scale: Tensor, shift: Tensor,
             eps: float = 1e-5) -> Tensor:
    """Group normalization followed by SiLU.

    The per-group body is standardized to mean 0 / variance 1 (with ``eps``
    guarding zero-variance groups), then scaled and shifted per channel.
    """
    _check_same_dtype(x, scale)
    _check_same_dtype(x, shift)
    if x.ndim != 4:
        raise DimensionError(f"norm_act expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if groups <= 0 or c % groups != 0:
        raise ValueError(f"{groups} groups do not divide {c} channels")
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError("scale/shift must be per-channel vectors")

    xg = x.data.reshape(n, groups, c // groups, h, w)
    mean = xg.mean(axis=(2, 3, 4), keepdims=True)
    var = xg.var(axis=(2, 3, 4), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv_std).reshape(n, c, h, w)
    y = xhat * scale.data[None, :, None, None] + shift.data[None, :, None, None]
    s = expit(y)
    data = y * s

    def backward(g):
        gy = g * (s + data * (1.0 - s))  # SiLU'(y) = sig(y) + y*sig(y)*(1-sig(y))
        gscale = (gy * xhat).sum(axis=(0, 2, 3))
        gshift = gy.sum(axis=(0, 2, 3))
        gxhat = (gy * scale.data[None, :, None, None]).reshape(n, groups, c // groups, h, w)
        xh = xhat.reshape(n, groups, c // groups, h, w)
        m = (c // groups) * h * w
        dot = (gxhat * xh).sum(axis=(2, 3, 4), keepdims=True)
        tot = gxhat.sum(axis=(2, 3, 4), keepdims=True)
        gx = inv_std * (gxhat - tot / m - xh * dot / m)
        return gx.reshape(x.shape), gscale, gshift

    return _make(data, (x, scale, shift), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Max-stabilized softmax along the last axis."""
    m = x.data.max(axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise ValueError("softmax row with all -inf logits is degenerate")
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), backward)


# --- resampling -------------------------------------------------------


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping area-average pooling by an integer factor."""
    if factor <= 0:
        raise ValueError(f"factor must be positive, got {factor}")
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"extents {h}x{w} not divisible by {factor}")
    ho, wo = h // factor, w // factor
    data = x.data.reshape(n, c, ho, factor, wo, factor).mean(axis=(3, 5))

    def backward(g):
        gx = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        return (gx / (factor * factor),)

    return _make(data, (x,), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor <= 0:
        raise ValueError(f"factor must be positive, got {factor}")
    n, c, h, w = x.shape
    data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(data, (x,), backward)


# --- backward + gradient checking -------------------------------------


def backward(root: Tensor, retain_graph: bool = False) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``root``.

    ``root`` must be scalar-valued.  Unless ``retain_graph`` is set the graph
    is consumed, and a second call raises ``GraphStateError``.
    """
    if root.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    if root._consumed:
        raise GraphStateError("graph already consumed by a previous backward")
    if not root.requires_grad:
        raise ValueError("root does not require grad; nothing to differentiate")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            if node._backward is None:
                raise GraphStateError("graph already consumed by a previous backward")
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                buf = grads.get(id(p))
                grads[id(p)] = pg if buf is None else buf + pg
            if not retain_graph:
                node._backward = None
                node._consumed = True
        else:
            node.grad = g.copy() if node.grad is None else node.grad + g
    if not retain_graph:
        root._consumed = True


def zero_grads(tensors) -> None:
    """Drop accumulated gradients (accepts an iterable or a mapping)."""
    values = tensors.values() if hasattr(tensors, "values") else tensors
    for t in values:
        t.grad = None


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    max_rel_err: float
    passed: bool

    def __bool__(self) -> bool:
        return self.passed


def check_gradient(f, x, eps: float = 1e-5, tol: float = 1e-4,
                   denom_floor: float = 1e-3) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    Relative error per coordinate is |a - n| / max(|a|, |n|, denom_floor);
    the check passes iff the maximum over coordinates is below ``tol``.
    Run in float64: finite differences are unreliable in float32.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ValueError("check_gradient needs a scalar-valued function")
    backward(out)
    analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        bumped = base.copy().reshape(-1)
        bumped[i] += eps
        hi = f(Tensor(bumped.reshape(base.shape))).item()
        bumped[i] -= 2 * eps
        lo = f(Tensor(bumped.reshape(base.shape))).item()
        flat[i] = (hi - lo) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), denom_floor)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(analytic, numeric, rel, max_rel, max_rel < tol)


__all__ = [
    "Tensor", "add", "mul", "texp", "tlog", "tabs", "sigmoid", "silu",
    "reshape", "transpose", "concat", "slice_", "tsum", "tmean",
    "matmul", "linear", "add_channel_bias", "conv2d", "norm_act",
    "softmax_lastdim", "avg_pool2d", "upsample_nearest",
    "backward", "zero_grads", "check_gradient", "GradCheckReport",
]
