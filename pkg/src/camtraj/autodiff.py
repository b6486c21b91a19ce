"""Minimal reverse-mode automatic differentiation over numpy arrays.

Ops executed inside an active :class:`Tape` are recorded in execution order,
which is already a topological order, so ``Tape.backward`` is one reverse
sweep. Outside a tape the same functions run as plain numpy with no
bookkeeping, which is what inference uses.

    tape = Tape()
    with tape:
        loss = ad.sum(ad.mul(x, x))
    grads = tape.backward(loss, [x])   # {x: 2 * x.data}
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import CamtrajError, InvalidInputError, ShapeError

_local = threading.local()


class NonFiniteError(CamtrajError, FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only scalar division is supported")
        return scale(self, 1.0 / other)


class Tape:
    """Records primitive ops executed while the tape is active."""

    def __init__(self):
        self.nodes: List[tuple] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor, params=None) -> dict:
        """Reverse sweep from scalar ``loss``.

        ``params`` may be a sequence of tensors (result keyed by tensor) or a
        mapping name -> tensor (result keyed by name). Parameters the loss does
        not reach get zero gradients.
        """
        if loss.data.size != 1:
            raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig
        if params is None:
            return grads
        if isinstance(params, dict):
            return {k: _grad_or_zero(grads, t) for k, t in params.items()}
        return {t: _grad_or_zero(grads, t) for t in params}


def _grad_or_zero(grads, t):
    g = grads.get(id(t))
    if g is None:
        return np.zeros_like(t.data)
    return g.reshape(t.shape).astype(t.dtype, copy=False)


def _active_tape() -> Optional[Tape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


_check_finite = False


def set_check_finite(flag: bool) -> None:
    """Raise :class:`NonFiniteError` from any op that produces NaN/Inf."""
    global _check_finite
    _check_finite = bool(flag)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    if _check_finite and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append((out, tuple(inputs), fn))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")
    ad_, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g * bd, ad_.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad_, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record(ad_ * bd, (a, b), fn, "mul")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _record(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def gelu(x) -> Tensor:
    """tanh-approximated GELU."""
    x = _as_tensor(x)
    xd = x.data
    k = xd.dtype.type(math.sqrt(2.0 / math.pi))
    c = xd.dtype.type(0.044715)
    x2 = xd * xd
    inner = k * (xd + c * x2 * xd)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def fn(g):
        dinner = k * (1.0 + 3.0 * c * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _record(out, (x,), fn, "gelu")


def dropout(x, p: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout; identity when ``train`` is off or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise InvalidInputError(f"dropout p must lie in [0, 1), got {p}")
    x = _as_tensor(x)
    if not train or p == 0.0:
        return x
    if rng is None:
        raise InvalidInputError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape, dtype=np.float32) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return _record(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad_, bd = a.data, b.data

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad_.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad_.ndim > 2:
                gb = ad_.reshape(-1, ad_.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad_, -1, -2), g), bd.shape)
        return ga, gb

    return _record(np.matmul(ad_, bd), (a, b), fn, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` for a 2-D weight, fused to save a temporary."""
    x = _as_tensor(x)
    w = _as_tensor(weight, x)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data
    out = np.matmul(xd, wd)
    inputs = [x, w]
    if bias is not None:
        b = _as_tensor(bias, x)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} vs output width {w.shape[1]}")
        out += b.data
        inputs.append(b)

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = np.matmul(g, wd.T) if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if w.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _record(out, inputs, fn, "linear")


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from None
    return _record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record(out, ts, fn, "concat")


def embedding_lookup(table, idx) -> Tensor:
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding index out of range [0, {table.shape[0]})")
    tshape = table.shape

    def fn(g):
        out = np.zeros(tshape, dtype=g.dtype)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, *tshape[1:]))
        return (out,)

    return _record(table.data[idx], (table,), fn, "embedding_lookup")


# ---------------------------------------------------------------------------
# reductions and normalizations


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out), (a,), fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    y = a.data - np.max(a.data, axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= np.sum(y, axis=axis, keepdims=True)

    def fn(g):
        gy = g * y
        gy -= y * np.sum(gy, axis=axis, keepdims=True)
        return (gy,)

    return _record(y, (a,), fn, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse

    def fn(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _record(out, (a,), fn, "log_softmax")


def layer_norm(x, eps: float = 1e-5, weight=None, bias=None) -> Tensor:
    """Normalize over the last axis, then apply the optional affine."""
    x = _as_tensor(x)
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    inputs = [x]
    out = xhat
    w = b = None
    if weight is not None:
        w = _as_tensor(weight, x)
        inputs.append(w)
        out = out * w.data
    if bias is not None:
        b = _as_tensor(bias, x)
        inputs.append(b)
        out = out + b.data

    def fn(g):
        grads = []
        gx = g * w.data if w is not None else g
        dx = inv / d * (d * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        grads.append(dx)
        if w is not None:
            grads.append(_unbroadcast(g * xhat, w.shape) if w.requires_grad else None)
        if b is not None:
            grads.append(_unbroadcast(g, b.shape) if b.requires_grad else None)
        return tuple(grads)

    return _record(out, inputs, fn, "layer_norm")


def masked_mean(x, mask, axis: int = -2) -> Tensor:
    """Mean over ``axis`` of the positions where ``mask`` is true.

    ``mask`` has the shape of ``x`` without its trailing feature axis, so for
    ``x`` of shape (B, T, D) it is (B, T) and ``axis`` picks the T axis.
    """
    x = _as_tensor(x)
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape[:-1]:
        raise ShapeError(f"masked_mean: mask shape {m.shape} vs features {x.shape}")
    w = m[..., None].astype(x.dtype)
    count = w.sum(axis=axis, keepdims=True)
    if np.any(count == 0):
        raise InvalidInputError("masked_mean: mask selects no positions")
    w = w / count
    out = (x.data * w).sum(axis=axis)

    def fn(g):
        return (np.expand_dims(g, axis) * w,)

    return _record(out, (x,), fn, "masked_mean")


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = _as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    n = np.maximum(n, x.dtype.type(eps))
    y = x.data / n

    def fn(g):
        return ((g - y * np.sum(g * y, axis=axis, keepdims=True)) / n,)

    return _record(y, (x,), fn, "l2_normalize")


# ---------------------------------------------------------------------------
# optimizer


INT64_MAX = np.iinfo(np.int64).max


@dataclass
class AdamWState:
    lr: float = 1e-4
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamWState):
    """One in-place AdamW update with decoupled weight decay.

    Returns ``(params, state)`` for convenience; both are mutated.
    """
    if state.step >= INT64_MAX:
        raise CamtrajError("AdamW step counter overflow")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name}: {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data *= p.dtype.type(1.0 - state.lr * state.weight_decay)
        step = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.data -= step.astype(p.dtype, copy=False)
    return params, state
