"""Small dense-tensor engine with reverse-mode automatic differentiation.

Only the operations needed by the flow layers and the temporal nets are
provided. Shapes must match exactly for binary elementwise ops; the only
broadcasting is the explicit per-channel family (``add_channel_bias``,
``mul_channels``, ``broadcast_channels``), where the channel axis is last.

Layouts
-------
* Volumes are ``(D, H, W, C)``; there is no batch axis.
* conv3d kernels are ``(k, k, k, Cin, Cout)`` and the op is a
  cross-correlation with zero "same" padding::

      out[d, h, w, o] = b[o] + sum_{i,j,l,c} xpad[d+i, h+j, w+l, c] * K[i, j, l, c, o]

* Reductions use numpy's pairwise summation over C-ordered data, so results
  are reproducible within one build.

Every op checks its output for NaN/Inf and raises ``NonFiniteError``.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, NonFiniteError, SingularMatrixError

_DTYPES = {"float32": np.float32, "float64": np.float64, 32: np.float32, 64: np.float64}

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype():
    return _get("dtype", _global_dtype[0])


_global_dtype = [np.float32]


def set_precision(mode):
    """Select the global compute precision: ``"float32"`` (default) or ``"float64"``."""
    try:
        _global_dtype[0] = _DTYPES[mode]
    except KeyError:
        raise ContractError(f"unknown precision mode {mode!r}") from None


@contextlib.contextmanager
def precision(mode):
    """Temporarily switch precision for the current thread."""
    try:
        dt = _DTYPES[mode]
    except KeyError:
        raise ContractError(f"unknown precision mode {mode!r}") from None
    prev = getattr(_state, "dtype", None)
    _state.dtype = dt
    try:
        yield dt
    finally:
        if prev is None:
            del _state.dtype
        else:
            _state.dtype = prev


def grad_enabled():
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Tensor:
    """An immutable array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or default_dtype())
        if any(d < 1 for d in arr.shape):
            raise ContractError(f"tensor dims must all be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def origin(self):
        if self._parents:
            return "derived-node"
        return "leaf-parameter" if self.requires_grad else "leaf-input"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor / tensor is not supported; multiply by exp(-log) instead")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------- elementwise


def add(a, b):
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def neg(x):
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x, c):
    c = x.data.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def shift(x, c):
    c = x.data.dtype.type(c)
    return _make(x.data + c, (x,), lambda g: (g,), "shift")


def square(x):
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2 * g * xd,), "square")


def exp(x):
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x):
    xd = x.data
    if (xd <= 0).any():
        raise ContractError("log of non-positive input")
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sigmoid(x):
    y = expit(x.data)
    return _make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def log_sigmoid(x):
    """log(sigmoid(x)) without underflow for very negative x."""
    xd = x.data
    y = -np.logaddexp(0, -xd).astype(xd.dtype)
    return _make(y, (x,), lambda g: (g * expit(-xd),), "log_sigmoid")


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient is zero where the value was clipped."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ------------------------------------------------------------------ reductions


def sum(x):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.full(shape, g, dtype=x.dtype),), "sum")


def mean(x):
    n = x.data.size
    shape = x.shape
    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


# --------------------------------------------------------------------- shaping


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x, axes):
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),), "permute")


def channel_slice(x, start, stop):
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _make(np.ascontiguousarray(x.data[..., start:stop]), (x,), back, "channel_slice")


def concat_channels(*xs):
    sizes = np.cumsum([t.shape[-1] for t in xs])[:-1]
    for t in xs[1:]:
        if t.shape[:-1] != xs[0].shape[:-1]:
            raise ContractError(f"concat_channels: spatial mismatch {xs[0].shape} vs {t.shape}")
    return _make(np.concatenate([t.data for t in xs], axis=-1), xs,
                 lambda g: tuple(np.split(g, sizes, axis=-1)), "concat_channels")


# ------------------------------------------------------------- channel family


def _check_channel_vec(x, v, op):
    if v.data.ndim != 1 or v.shape[0] != x.shape[-1]:
        raise ContractError(f"{op}: expected per-channel vector of {x.shape[-1]}, got {v.shape}")


def add_channel_bias(x, b):
    _check_channel_vec(x, b, "add_channel_bias")
    axes = tuple(range(x.data.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)), "add_channel_bias")


def mul_channels(x, s):
    _check_channel_vec(x, s, "mul_channels")
    xd, sd = x.data, s.data
    axes = tuple(range(xd.ndim - 1))
    return _make(xd * sd, (x, s), lambda g: (g * sd, (g * xd).sum(axis=axes)), "mul_channels")


def broadcast_channels(v, spatial):
    """Tile a per-channel vector over a spatial grid."""
    spatial = tuple(spatial)
    axes = tuple(range(len(spatial)))
    out = np.broadcast_to(v.data, spatial + v.shape).copy()
    return _make(out, (v,), lambda g: (g.sum(axis=axes),), "broadcast_channels")


def channel_matmul(x, w):
    """Per-voxel channel mixing ``y = W x``; ``w`` has shape (Cout, Cin)."""
    if w.data.ndim != 2 or w.shape[1] != x.shape[-1]:
        raise ContractError(f"channel_matmul: weight {w.shape} does not match input {x.shape}")
    xd, wd = x.data, w.data
    out_shape = xd.shape[:-1] + (wd.shape[0],)
    x2 = xd.reshape(-1, xd.shape[-1])

    def back(g):
        g2 = g.reshape(-1, wd.shape[0])
        return (g2 @ wd).reshape(xd.shape), g2.T @ x2

    return _make((x2 @ wd.T).reshape(out_shape), (x, w), back, "channel_matmul")


def logabsdet(w, min_abs_det=1e-12, name="matrix"):
    """log|det W| with gradient W^-T."""
    sign, ld = np.linalg.slogdet(w.data.astype(np.float64))
    if sign == 0 or ld < np.log(min_abs_det):
        raise SingularMatrixError(f"{name} is singular (log|det| = {ld})")
    wd = w.data
    return _make(np.asarray(ld, dtype=wd.dtype), (w,),
                 lambda g: (g * np.linalg.inv(wd).T,), "logabsdet")


# ---------------------------------------------------------------------- conv3d


def _im2col(x, k):
    """(D,H,W,C) -> (D*H*W, k*k*k*C) with column order (i, j, l, c)."""
    d, h, w, c = x.shape
    if k == 1:
        return x.reshape(d * h * w, c)
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k, k), axis=(0, 1, 2))  # (D,H,W,C,k,k,k)
    return win.transpose(0, 1, 2, 4, 5, 6, 3).reshape(d * h * w, k * k * k * c)


def conv3d_array(x, kernel, bias=None):
    """conv3d on raw arrays (no graph)."""
    k = kernel.shape[0]
    d, h, w, _ = x.shape
    out = _im2col(x, k) @ kernel.reshape(-1, kernel.shape[-1])
    if bias is not None:
        out += bias
    return out.reshape(d, h, w, kernel.shape[-1])


def conv3d(x, kernel, bias=None):
    """3D cross-correlation with zero 'same' padding.

    ``x``: (D, H, W, Cin); ``kernel``: (k, k, k, Cin, Cout) with k odd;
    ``bias``: (Cout,) or None.
    """
    kd = kernel.data
    if x.data.ndim != 4:
        raise ContractError(f"conv3d expects a (D,H,W,C) input, got {x.shape}")
    if kd.ndim != 5 or not (kd.shape[0] == kd.shape[1] == kd.shape[2]) or kd.shape[0] % 2 == 0:
        raise ContractError(f"conv3d kernel must be (k,k,k,Cin,Cout) with odd k, got {kd.shape}")
    if kd.shape[3] != x.shape[3]:
        raise ContractError(f"conv3d: input {x.shape} has {x.shape[3]} channels, "
                            f"kernel {kd.shape} expects {kd.shape[3]}")
    if bias is not None and bias.shape != (kd.shape[4],):
        raise ContractError(f"conv3d: bias {bias.shape} does not match kernel {kd.shape}")

    k = kd.shape[0]
    cout = kd.shape[4]
    d, h, w, cin = x.shape
    cols = _im2col(x.data, k)
    out = cols @ kd.reshape(-1, cout)
    if bias is not None:
        out += bias.data
    out = out.reshape(d, h, w, cout)

    def back(g):
        g2 = g.reshape(-1, cout)
        gk = (cols.T @ g2).reshape(kd.shape)
        flipped = np.ascontiguousarray(kd[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3))
        gx = conv3d_array(g, flipped)
        grads = (gx, gk)
        if bias is not None:
            grads += (g2.sum(axis=0),)
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, parents, back, "conv3d")


# -------------------------------------------------------------------- backward


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output):
    """Reverse-mode sweep from a scalar ``output``.

    Sets ``.grad`` on every leaf reached that has ``requires_grad`` and returns
    ``{leaf: gradient}``. Each node is visited exactly once.
    """
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return {}
    order = _toposort(output)
    grads = {id(output): np.ones_like(output.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            leaves[node] = g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.data.dtype).reshape(p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf, g in leaves.items():
        if not np.isfinite(g).all():
            raise NonFiniteError("backward produced non-finite gradients")
        leaf.grad = g
    return leaves


def grad(output, params):
    """Gradients of a scalar with respect to ``params`` (zeros where unreached)."""
    got = backward(output)
    return [got.get(p, np.zeros_like(p.data)) for p in params]
