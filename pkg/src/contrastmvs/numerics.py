"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations the stereo pipeline needs are provided. Every op builds a
node holding its parents and a closure mapping the output gradient to the
parent gradients; ``Tensor.backward`` replays the graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import threading
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "no_grad",
    "grad_enabled",
    "kink_monitor",
    "as_tensor",
    "elementwise",
    "reduce",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "log",
    "exp",
    "sqrt",
    "pow2",
    "relu",
    "absolute",
    "clamp",
    "tsum",
    "mean",
    "max_with_argmax",
    "softmax",
    "reshape",
    "conv2d",
    "conv3d",
    "upsample_nearest2",
    "resize_bilinear",
    "bilinear_matrix",
    "bilinear_sample",
    "gradcheck",
    "GradcheckReport",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# Per-thread switches: evaluation runs one graph per worker thread.
# ``grad`` gates graph recording; ``kinks``, when not None, collects a
# checksum of each piecewise op's branch pattern so gradcheck can detect
# finite-difference steps that cross a kink.
_STATE = threading.local()


def grad_enabled() -> bool:
    return getattr(_STATE, "grad", True)


def _kink_log() -> list[int] | None:
    return getattr(_STATE, "kinks", None)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = grad_enabled()
    _STATE.grad = False
    try:
        yield
    finally:
        _STATE.grad = prev


@contextlib.contextmanager
def kink_monitor() -> Iterator[list[int]]:
    """Collect branch-pattern checksums from relu/abs/clamp/argmax ops."""
    prev = _kink_log()
    log: list[int] = []
    _STATE.kinks = log
    try:
        yield log
    finally:
        _STATE.kinks = prev


def record_branch(pattern: np.ndarray) -> None:
    """Register a discrete branch decision (mask or index array)."""
    log = _kink_log()
    if log is not None:
        arr = np.ascontiguousarray(pattern)
        log.append(zlib.crc32(arr.tobytes()) ^ (arr.size << 1))


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _graph(self) -> list["Tensor"]:
        # iterative post-order DFS; recursion would overflow on deep graphs
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(self._graph()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by zero")
    out = ad / bd
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
                 "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(~(a.data > 0)):
        raise DomainError("log of a non-positive value; clamp the input first")
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    """Square root; like ``log`` it requires strictly positive input."""
    a = as_tensor(a)
    if np.any(a.data <= 0) or not np.all(np.isfinite(a.data)):
        raise DomainError("sqrt of a non-positive or non-finite value; clamp first")
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def pow2(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "pow2")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    record_branch(mask)
    # NaN passes through so a poisoned graph still fails downstream
    out = np.where(mask | np.isnan(a.data), a.data, 0.0)
    return _node(out, (a,), lambda g: (g * mask,), "relu")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    record_branch(sign.astype(np.int8))
    return _node(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; the gradient is zero wherever the bound is active."""
    a = as_tensor(a)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    record_branch(inside)
    out = np.clip(a.data, lo, hi)
    return _node(out, (a,), lambda g: (g * inside,), "clamp")


_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}
_UNARY = {"neg": neg, "log": log, "sqrt": sqrt, "exp": exp, "pow2": pow2, "relu": relu, "abs": absolute}


def elementwise(kind: str, a, b=None) -> Tensor:
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ------------------------------------------------------------------ reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(ax % ndim for ax in axis)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"repeated axis in {axis}")
    return axes


def _expand_back(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...], keepdims: bool):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    if any(a.shape[ax] == 0 for ax in axes):
        raise ShapeError("empty reduction extent")
    shape = a.shape
    return _node(a.data.sum(axis=axes, keepdims=keepdims), (a,),
                 lambda g: (np.array(_expand_back(g, shape, axes, keepdims)),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise ShapeError("empty reduction extent")
    shape = a.shape
    return _node(a.data.mean(axis=axes, keepdims=keepdims), (a,),
                 lambda g: (np.array(_expand_back(g, shape, axes, keepdims)) / count,), "mean")


def max_with_argmax(a, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max along one axis plus the (non-differentiable) index map."""
    a = as_tensor(a)
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise ShapeError("empty reduction extent")
    idx = np.argmax(a.data, axis=axis)
    record_branch(idx)
    values = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (out,)

    return _node(values, (a,), backward, "max"), idx


def reduce(kind: str, a, axes=None):
    if kind == "sum":
        return tsum(a, axes)
    if kind == "mean":
        return mean(a, axes)
    if kind == "max":
        if axes is None or not isinstance(axes, int):
            raise ValueError("max-with-argmax reduces exactly one axis")
        return max_with_argmax(a, axes)
    raise ValueError(f"unknown reduction {kind!r}")


def softmax(a, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NonFiniteError("softmax input is not finite")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), backward, "softmax")


# ------------------------------------------------------------------- reshaping


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def take(a, index) -> Tensor:
    """Numpy-style indexing; gradients scatter back (accumulating repeats)."""
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _node(np.array(a.data[index]), (a,), backward, "index")


# ---------------------------------------------------------------- convolutions


def _conv(x: Tensor, w: Tensor, b: Tensor | None, stride: int, padding: int, nd: int) -> Tensor:
    if x.ndim != nd + 1 or w.ndim != nd + 2:
        raise ShapeError(f"conv{nd}d expects input [C,...] with {nd} spatial dims and "
                         f"kernels [O,C,...]; got {x.shape}, {w.shape}")
    cout, cin = w.shape[:2]
    ksize = w.shape[2:]
    if cin != x.shape[0]:
        raise ShapeError(f"kernel expects {cin} input channels, input has {x.shape[0]}")
    if any(k % 2 == 0 for k in ksize):
        raise ShapeError(f"kernel extents must be odd, got {ksize}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} != ({cout},)")
    xp = np.pad(x.data, [(0, 0)] + [(padding, padding)] * nd)
    out_sp = tuple((xp.shape[1 + i] - ksize[i]) // stride + 1 for i in range(nd))
    if any(n < 1 for n in out_sp):
        raise ShapeError(f"convolution output extent {out_sp} < 1")

    def window(offs):
        return (slice(None),) + tuple(
            slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offs, out_sp))

    # im2col: cols[c, k, *out]
    offsets = list(np.ndindex(*ksize))
    nk = len(offsets)
    npix = int(np.prod(out_sp))
    cols = np.empty((cin, nk) + out_sp)
    for j, offs in enumerate(offsets):
        cols[:, j] = xp[window(offs)]
    cols = cols.reshape(cin * nk, npix)
    wmat = w.data.reshape(cout, cin * nk)
    out = (wmat @ cols).reshape((cout,) + out_sp)
    if b is not None:
        out += b.data.reshape((cout,) + (1,) * nd)

    def backward(g):
        g2 = g.reshape(cout, npix)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2 @ cols.T).reshape(w.shape)
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape((cin, nk) + out_sp)
            gxp = np.zeros(xp.shape)
            for j, offs in enumerate(offsets):
                gxp[window(offs)] += gcols[:, j]
            gx = gxp[(slice(None),) + (slice(padding, -padding),) * nd] if padding else gxp
        if b is not None:
            gb = g2.sum(axis=1)
        return (gx, gw, gb)

    if b is not None:
        return _node(out, (x, w, b), backward, f"conv{nd}d")
    return _node(out, (x, w), lambda g: backward(g)[:2], f"conv{nd}d")


def conv2d(x, w, b=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Cross-correlation of ``x[C,H,W]`` with ``w[O,C,k,k]``; 'same' padding by default."""
    w = as_tensor(w)
    if padding is None:
        padding = w.shape[-1] // 2
    return _conv(as_tensor(x), w, None if b is None else as_tensor(b), stride, padding, 2)


def conv3d(x, w, b=None, padding: int | None = None) -> Tensor:
    """Stride-1 cross-correlation of ``x[C,D,H,W]`` with ``w[O,C,k,k,k]``."""
    w = as_tensor(w)
    if padding is None:
        padding = w.shape[-1] // 2
    return _conv(as_tensor(x), w, None if b is None else as_tensor(b), 1, padding, 3)


# ---------------------------------------------------------------- resampling


def upsample_nearest2(a) -> Tensor:
    """Double the last two extents by pixel replication."""
    a = as_tensor(a)
    out = a.data.repeat(2, axis=-2).repeat(2, axis=-1)
    shape = a.shape

    def backward(g):
        h, w = shape[-2:]
        return (g.reshape(shape[:-2] + (h, 2, w, 2)).sum(axis=(-3, -1)),)

    return _node(out, (a,), backward, "upsample_nearest2")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] interpolation matrix, half-pixel centres."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def resize_bilinear(a, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of the last two extents to ``size`` (works both ways)."""
    a = as_tensor(a)
    h, w = a.shape[-2:]
    ay = bilinear_matrix(h, size[0])
    ax = bilinear_matrix(w, size[1])
    out = ay @ a.data @ ax.T
    return _node(out, (a,), lambda g: (ay.T @ g @ ax,), "resize_bilinear")


# samples this close to the image border (roundoff) count as on it
BORDER_TOL = 1e-9


def bilinear_sample(src, u: np.ndarray, v: np.ndarray, valid: np.ndarray | None = None):
    """Sample ``src[C,H,W]`` at continuous pixel coordinates ``(u, v)``.

    Returns ``(values[C, *u.shape], mask)``. A sample is valid when the point
    lies in ``[0, W-1] x [0, H-1]`` up to ``BORDER_TOL`` (so all four
    neighbours exist) and the optional ``valid`` flag is set; invalid samples
    are zero. Coordinates are constants: gradients flow to ``src`` only.
    """
    src = as_tensor(src)
    if src.ndim != 3:
        raise ShapeError(f"bilinear_sample expects [C,H,W], got {src.shape}")
    c, h, w = src.shape
    if h < 2 or w < 2:
        raise ShapeError("bilinear sampling needs at least 2x2 pixels")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        mask = (np.isfinite(u) & np.isfinite(v) & (u >= -BORDER_TOL) & (u <= w - 1 + BORDER_TOL)
                & (v >= -BORDER_TOL) & (v <= h - 1 + BORDER_TOL))
    if valid is not None:
        mask &= valid
    uu = np.clip(np.where(mask, u, 0.0), 0.0, w - 1).ravel()
    vv = np.clip(np.where(mask, v, 0.0), 0.0, h - 1).ravel()
    x0 = np.minimum(np.floor(uu).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(vv).astype(np.int64), h - 2)
    fx = uu - x0
    fy = vv - y0
    m = mask.ravel().astype(np.float64)
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]) * m
    idx = np.stack([y0 * w + x0, y0 * w + x0 + 1, (y0 + 1) * w + x0, (y0 + 1) * w + x0 + 1])
    flat = src.data.reshape(c, h * w)
    out = np.zeros((c, uu.size))
    for k in range(4):
        out += flat[:, idx[k]] * weights[k]
    out = out.reshape((c,) + u.shape)

    def backward(g):
        g2 = g.reshape(c, -1)
        offs = (np.arange(c) * (h * w))[:, None, None]
        full_idx = (offs + idx[None]).ravel()
        full_w = (g2[:, None, :] * weights[None]).ravel()
        gs = np.bincount(full_idx, weights=full_w, minlength=c * h * w)
        return (gs.reshape(c, h, w),)

    return _node(out, (src,), backward, "bilinear_sample"), mask


# ------------------------------------------------------------------ gradcheck


@dataclass
class GradcheckReport:
    """Per-input agreement between analytic and central-difference gradients."""

    max_rel_err: dict[str, float] = field(default_factory=dict)
    max_abs_err: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    step_shrinks: int = 0
    skipped: int = 0
    scale: float = 0.0

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.worst <= tol


def _as_named(inputs) -> dict[str, np.ndarray]:
    if isinstance(inputs, dict):
        return {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    return {f"x{i}": np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
            for i, v in enumerate(inputs)}


def gradcheck(f: Callable[..., Tensor], inputs, h: float = 1e-5, max_coords: int | None = None,
              seed: int = 0, floor: float = 1e-6, max_shrink: int = 3) -> GradcheckReport:
    """Compare ``f``'s analytic gradient with central finite differences.

    ``f`` receives one Tensor per input (positionally, or by keyword when
    ``inputs`` is a dict) and must return a scalar Tensor. The error for an
    input is ``max|a - n| / max(|a|_inf, |n|_inf, floor)`` where the norms
    run over every checked coordinate of every input, so inputs whose true
    gradient is zero are judged against the gradient's overall scale. When a
    difference step flips a relu/abs/clamp/argmax branch, the step is shrunk
    tenfold (up to ``max_shrink`` times) before the coordinate is skipped.
    ``max_coords`` caps the number of randomly chosen coordinates per input.
    """
    named = _as_named(inputs)
    keyword = isinstance(inputs, dict)

    def call(arrays: dict[str, np.ndarray], grad: bool):
        ts = {k: Tensor(v, requires_grad=grad) for k, v in arrays.items()}
        out = f(**ts) if keyword else f(*ts.values())
        if out.size != 1:
            raise ShapeError("gradcheck needs a scalar-valued function")
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError("function value is not finite")
        return out, ts

    with kink_monitor() as base_kinks:
        out, ts = call(named, True)
    base_sig = list(base_kinks)
    out.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in ts.items()}
    for k, g in analytic.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"analytic gradient for {k} is not finite")

    rng = np.random.default_rng(seed)
    report = GradcheckReport()

    def evaluate(arrays) -> tuple[float, list[int]]:
        with no_grad(), kink_monitor() as kinks:
            val, _ = call(arrays, False)
        return float(val.data.reshape(-1)[0]), list(kinks)

    pairs: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for name, base in named.items():
        coords = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            coords = np.sort(rng.choice(base.size, size=max_coords, replace=False))
        a = analytic[name].reshape(-1)[coords]
        num = np.full(coords.size, np.nan)
        for j, flat in enumerate(coords):
            step = h
            for _ in range(max_shrink + 1):
                work = dict(named)
                plus = base.copy().reshape(-1)
                minus = base.copy().reshape(-1)
                plus[flat] += step
                minus[flat] -= step
                work[name] = plus.reshape(base.shape)
                fp, sig_p = evaluate(work)
                work[name] = minus.reshape(base.shape)
                fm, sig_m = evaluate(work)
                if sig_p == base_sig and sig_m == base_sig:
                    num[j] = (fp - fm) / (2.0 * step)
                    break
                step /= 10.0
                report.step_shrinks += 1
            else:
                report.skipped += 1
        ok = np.isfinite(num)
        pairs[name] = (a[ok], num[ok])
    scale = floor
    for a, num in pairs.values():
        scale = max(scale, np.max(np.abs(a), initial=0.0), np.max(np.abs(num), initial=0.0))
    for name, (a, num) in pairs.items():
        diff = np.abs(a - num).max(initial=0.0)
        report.max_abs_err[name] = float(diff)
        report.max_rel_err[name] = float(diff / scale)
        report.checked[name] = int(a.size)
    report.scale = float(scale)
    return report
