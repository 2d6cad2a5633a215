"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records one entry on the calling thread's
tape when at least one input requires a gradient. ``backward`` replays the
tape in reverse, hands leaf gradients to ``Tensor.grad`` and clears the tape.
Only the operator set used by the deblurring model is provided.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericError, UsageError

DTYPE = np.float64
_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class _Node:
    op: str
    inputs: tuple
    out: "Tensor"
    backward: Callable


class _State(threading.local):
    def __init__(self):
        self.tape: list[_Node] = []
        self.grad_enabled = True
        self.anomaly = False
        self.first_bad_op: str | None = None
        self.macs: list[int] | None = None


_state = _State()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, metrics)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def detect_anomaly():
    """Record the name of the first operation producing a non-finite value.

    The name is available through ``first_anomaly()`` after (or during) the
    block; nothing is raised so the caller decides how to report it.
    """
    prev = _state.anomaly
    _state.anomaly = True
    _state.first_bad_op = None
    try:
        yield
    finally:
        _state.anomaly = prev


def first_anomaly() -> str | None:
    return _state.first_bad_op


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates executed by matmul/linear/conv kernels.

    Yields a one-element list whose entry grows as operations run.
    """
    prev = _state.macs
    counter = [0]
    _state.macs = counter
    try:
        yield counter
    finally:
        _state.macs = prev


def _add_macs(n: int) -> None:
    if _state.macs is not None:
        _state.macs[0] += int(n)


def clear_tape() -> None:
    _state.tape.clear()


def tape_length() -> int:
    return len(_state.tape)


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(out_data: np.ndarray, inputs: tuple, backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data if out_data.dtype == DTYPE else out_data.astype(DTYPE)
    out.grad = None
    out.name = None
    out.requires_grad = False
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _state.tape.append(_Node(op, inputs, out, backward_fn))
    if _state.anomaly and _state.first_bad_op is None and not np.all(np.isfinite(out.data)):
        _state.first_bad_op = op
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    The tape is consumed: a second backward over the same forward pass is
    not supported.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if not loss.requires_grad:
        tape.clear()
        return
    produced = {id(node.out) for node in tape}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if id(loss) not in produced:
        leaves[id(loss)] = loss
    for node in reversed(tape):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in produced:
                leaves[key] = t
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    for key, t in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=DTYPE).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
    tape.clear()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------

def _operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc
    return a, b


def add(a, b) -> Tensor:
    a, b = _operands(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _operands(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _operands(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log; with ``eps > 0`` the input is floored at ``eps`` first."""
    x = a.data
    if eps > 0:
        xc = np.maximum(x, eps)
        live = x >= eps
        return _make(np.log(xc), (a,), lambda g: (np.where(live, g / xc, 0.0),), "log")
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    x = a.data
    scale = np.where(x > 0, 1.0, slope)
    return _make(x * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), bw, "gelu")


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` is true, else ``b``; ``cond`` is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    c = np.asarray(cond, dtype=bool)

    def bw(g):
        ga = _unbroadcast(np.where(c, g, 0.0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(c, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(np.where(c, a.data, b.data), (a, b), bw, "where")


def straight_through(soft: Tensor, hard) -> Tensor:
    """Forward returns ``hard`` exactly; backward routes the gradient to ``soft``."""
    h = np.asarray(hard, dtype=DTYPE)
    if h.shape != soft.shape:
        raise DimensionError(f"straight_through: hard {h.shape} vs soft {soft.shape}")
    return _make(h.copy(), (soft,), lambda g: (g,), "straight_through")


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# -- reductions ----------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return tsum(a, axes, keepdims) * (1.0 / n)


# -- shape manipulation ----------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} into {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            n != m for i, (n, m) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise DimensionError(f"concat along axis {axis}: {ref} vs {t.shape}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), bw, "concat")


def getitem(a: Tensor, idx) -> Tensor:
    """Basic slicing/integer indexing with bounds checks on integer indices."""
    if not isinstance(idx, tuple):
        idx = (idx,)
    for dim, i in enumerate(idx):
        if isinstance(i, (int, np.integer)) and dim < a.ndim:
            n = a.shape[dim]
            if not -n <= i < n:
                raise DimensionError(f"index {i} out of range for axis {dim} with extent {n}")
        elif isinstance(i, slice) and dim < a.ndim:
            n = a.shape[dim]
            start = i.start if i.start is not None else 0
            stop = i.stop if i.stop is not None else n
            if (i.step in (None, 1)) and (start > n or stop > n or start < -n or stop < -n):
                raise DimensionError(f"slice {i} out of range for axis {dim} with extent {n}")
    shape = a.shape
    out = a.data[idx]

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return _make(np.array(out, dtype=DTYPE), (a,), bw, "getitem")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather entries of ``a`` along ``axis``; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    shape = a.shape
    out = np.take(a.data, idx, axis=ax)

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        gm = gm.reshape((idx.size,) + gm.shape[idx.ndim:])
        fm = np.moveaxis(full, ax, 0)
        np.add.at(fm, idx.reshape(-1), gm)
        return (full,)

    return _make(out, (a,), bw, "take")


def index_put(base: Tensor, indices, values: Tensor) -> Tensor:
    """Copy of ``base`` with rows ``indices`` (axis 0, unique) replaced by ``values``."""
    idx = np.asarray(indices, dtype=np.intp)
    if values.shape[0] != idx.size or values.shape[1:] != base.shape[1:]:
        raise DimensionError(
            f"index_put: {idx.size} indices with values {values.shape} into base {base.shape}"
        )
    out = base.data.copy()
    out[idx] = values.data

    def bw(g):
        gb = None
        if base.requires_grad:
            gb = g.copy()
            gb[idx] = 0.0
        return gb, g[idx]

    return _make(out, (base, values), bw, "index_put")


def roll(a: Tensor, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    shifts, axes = tuple(shifts), tuple(axes)
    back = tuple(-s for s in shifts)
    return _make(np.roll(a.data, shifts, axes), (a,), lambda g: (np.roll(g, back, axes),), "roll")


def pad(a: Tensor, width: int, mode: str = "zero", axes: Sequence[int] = (-2, -1)) -> Tensor:
    """Pad ``width`` entries on both sides of each axis in ``axes``.

    ``mode`` is ``"zero"`` or ``"reflect"`` (mirror excluding the edge sample).
    """
    if width == 0:
        return a
    if mode not in ("zero", "reflect"):
        raise UsageError(f"unknown pad mode {mode!r}")
    axes = tuple(ax % a.ndim for ax in axes)
    if mode == "reflect":
        for ax in axes:
            if a.shape[ax] <= width:
                raise DimensionError(
                    f"reflect pad {width} needs extent > {width}, axis {ax} has {a.shape[ax]}"
                )
    spec = [(0, 0)] * a.ndim
    for ax in axes:
        spec[ax] = (width, width)
    out = np.pad(a.data, spec, mode="constant" if mode == "zero" else "reflect")
    p = width

    def bw(g):
        for ax in axes:
            n = g.shape[ax] - 2 * p
            gm = np.moveaxis(g, ax, 0)
            core = gm[p:p + n].copy()
            if mode == "reflect":
                for j in range(p):
                    core[p - j] += gm[j]
                    core[n - 2 - j] += gm[p + n + j]
            g = np.moveaxis(core, 0, ax)
        return (g,)

    return _make(out, (a,), bw, "pad")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading extents."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch extents incompatible: {a.shape} @ {b.shape}") from exc
    _add_macs(out.size * a.shape[-1])
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis with ``w`` of shape (in, out)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, wd.shape[0])
    out = x2 @ wd
    if b is not None:
        out += b.data
    _add_macs(out.size * wd.shape[0])
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out.reshape(lead + (wd.shape[1],)), inputs, bw, "linear")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each token over its last (channel) axis, then scale and shift."""
    if eps <= 0:
        raise UsageError("layer_norm eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "layer_norm")


# -- convolutions --------------------------------------------------------------

def _parse_padding(padding):
    if padding is None or padding == "none":
        return "zero", 0
    if isinstance(padding, int):
        return "zero", padding
    mode, width = padding
    if mode not in ("zero", "reflect"):
        raise UsageError(f"unknown pad mode {mode!r}")
    return mode, int(width)


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None, stride: int = 1, padding=None) -> Tensor:
    """Cross-correlation of ``x`` (..., C_in, H, W) with ``k`` (C_out, C_in, kh, kw).

    ``padding`` is ``None``, an int (zero padding) or ``(mode, width)`` with
    mode ``"zero"`` or ``"reflect"``.
    """
    mode, p = _parse_padding(padding)
    if x.ndim < 3 or k.ndim != 4:
        raise DimensionError(f"conv2d expects (...,C,H,W) input and 4-d kernel, got {x.shape}, {k.shape}")
    if x.shape[-3] != k.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    xp = pad(x, p, mode) if p else x
    H, W = xp.shape[-2:]
    co, ci, kh, kw = k.shape
    if kh > H or kw > W:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {H}x{W}")
    lead = xp.shape[:-3]
    xd = xp.data.reshape((-1, ci, H, W))
    ho = (H - kh) // stride + 1
    wo = (W - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]  # n, ci, ho, wo, kh, kw
    kd = k.data
    out = np.einsum("nchwij,ocij->nohw", win, kd, optimize=True)
    if b is not None:
        out += b.data[:, None, None]
    _add_macs(out.size * ci * kh * kw)
    inputs = (xp, k) if b is None else (xp, k, b)

    def bw(g):
        gx = gk = None
        if xp.requires_grad:
            gxd = np.zeros_like(xd)
            for i in range(kh):
                for j in range(kw):
                    gxd[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum(
                        "nohw,oc->nchw", g, kd[:, :, i, j], optimize=True)
            gx = gxd.reshape(xp.shape)
        if k.requires_grad:
            gk = np.einsum("nohw,nchwij->ocij", g, win, optimize=True)
        if b is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    return _make(out.reshape(lead + (co, ho, wo)), inputs,
                 lambda g: bw(g.reshape(out.shape)), "conv2d")


def conv_transpose2d(x: Tensor, k: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution of ``x`` (..., C_in, H, W) with ``k`` (C_in, C_out, kh, kw).

    Output extents are ``(H - 1) * stride + kh``; with a 2x2 kernel at stride 2
    the spatial size doubles.
    """
    if x.ndim < 3 or k.ndim != 4:
        raise DimensionError(f"conv_transpose2d expects (...,C,H,W) and 4-d kernel, got {x.shape}, {k.shape}")
    if min(x.shape) <= 0 or min(k.shape) <= 0:
        raise DimensionError(f"conv_transpose2d non-positive extents: {x.shape}, {k.shape}")
    ci, co, kh, kw = k.shape
    if x.shape[-3] != ci:
        raise DimensionError(f"conv_transpose2d channel mismatch: {x.shape} vs {k.shape}")
    lead = x.shape[:-3]
    H, W = x.shape[-2:]
    xd = x.data.reshape((-1, ci, H, W))
    n = xd.shape[0]
    ho, wo = (H - 1) * stride + kh, (W - 1) * stride + kw
    out = np.zeros((n, co, ho, wo), dtype=DTYPE)
    kd = k.data
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (H - 1) + 1:stride, j:j + stride * (W - 1) + 1:stride] += np.einsum(
                "nchw,co->nohw", xd, kd[:, :, i, j], optimize=True)
    if b is not None:
        out += b.data[:, None, None]
    _add_macs(n * H * W * ci * co * kh * kw)
    inputs = (x, k) if b is None else (x, k, b)

    def bw(g):
        g = g.reshape(out.shape)
        gx = np.zeros_like(xd) if x.requires_grad else None
        gk = np.zeros_like(kd) if k.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                gs = g[:, :, i:i + stride * (H - 1) + 1:stride, j:j + stride * (W - 1) + 1:stride]
                if gx is not None:
                    gx += np.einsum("nohw,co->nchw", gs, kd[:, :, i, j], optimize=True)
                if gk is not None:
                    gk[:, :, i, j] = np.einsum("nchw,nohw->co", xd, gs, optimize=True)
        gx = gx.reshape(x.shape) if gx is not None else None
        if b is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    return _make(out.reshape(lead + (co, ho, wo)), inputs, bw, "conv_transpose2d")


def depthwise_conv2d_hwc(x: Tensor, k: Tensor, b: Tensor | None = None) -> Tensor:
    """Valid depthwise cross-correlation on channels-last maps.

    ``x`` is (..., H, W, C) and ``k`` is (kh, kw, C); padding is applied by the
    caller with ``pad(..., axes=(-3, -2))``.
    """
    kh, kw, c = k.shape
    H, W = x.shape[-3], x.shape[-2]
    if x.shape[-1] != c:
        raise DimensionError(f"depthwise conv channel mismatch: {x.shape} vs {k.shape}")
    if kh > H or kw > W:
        raise DimensionError(f"depthwise kernel {kh}x{kw} larger than input {H}x{W}")
    ho, wo = H - kh + 1, W - kw + 1
    xd, kd = x.data, k.data
    out = np.zeros(xd.shape[:-3] + (ho, wo, c), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out += xd[..., i:i + ho, j:j + wo, :] * kd[i, j]
    if b is not None:
        out += b.data
    _add_macs(out.size * kh * kw)
    inputs = (x, k) if b is None else (x, k, b)

    def bw(g):
        gx = np.zeros_like(xd) if x.requires_grad else None
        gk = np.zeros_like(kd) if k.requires_grad else None
        lead = tuple(range(g.ndim - 1))
        g4 = g.reshape((-1,) + g.shape[-3:])
        x4 = xd.reshape((-1,) + xd.shape[-3:])
        for i in range(kh):
            for j in range(kw):
                if gx is not None:
                    gx[..., i:i + ho, j:j + wo, :] += g * kd[i, j]
                if gk is not None:
                    gk[i, j] = np.einsum("nhwc,nhwc->c", g4, x4[:, i:i + ho, j:j + wo, :])
        if b is None:
            return gx, gk
        return gx, gk, g.sum(axis=lead)

    return _make(out, inputs, bw, "depthwise_conv2d")


# -- spectral ----------------------------------------------------------------

_DFT_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _dft_mats(n: int) -> tuple[np.ndarray, np.ndarray]:
    mats = _DFT_CACHE.get(n)
    if mats is None:
        idx = np.arange(n)
        ang = 2.0 * np.pi * np.outer(idx, idx) / n
        mats = (np.cos(ang), np.sin(ang))
        _DFT_CACHE[n] = mats
    return mats


def fft2(x: Tensor) -> Tensor:
    """Unnormalized 2-D DFT of real planes (..., H, W) -> (..., 2, H, W).

    Index 0 of the new axis holds the real part, index 1 the imaginary part.
    Computed by row-column factorization with dense DFT matrices, so any
    extent works.
    """
    H, W = x.shape[-2:]
    ch, sh = _dft_mats(H)
    cw, sw = _dft_mats(W)
    xd = x.data
    # F = C - iS, so F_H X F_W = (C X C - S X S) - i (S X C + C X S)
    xc, xs = xd @ cw, xd @ sw
    re = ch @ xc - sh @ xs
    im = -(sh @ xc + ch @ xs)
    _add_macs(4 * xd.size * (H + W))

    def bw(g):
        gr, gi = g[..., 0, :, :], g[..., 1, :, :]
        # adjoint of each real-linear map; the DFT matrices are symmetric
        gx = ch @ gr @ cw - sh @ gr @ sw - sh @ gi @ cw - ch @ gi @ sw
        return (gx,)

    return _make(np.stack([re, im], axis=-3), (x,), bw, "fft2")
