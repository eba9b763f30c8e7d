"""Reverse-mode automatic differentiation over dense numpy arrays.

A `Tape` records primitive operations executed inside its context; `Tape.grad`
replays the record backwards to produce exact gradients. The primitive set is
the minimum needed by the sine MLPs and the ultrasound renderer: elementwise
arithmetic, matmul, transcendentals, clamp, cumulative sum/product, 2D
convolution, slicing/concatenation and reductions.

Ops accept either `Value` or plain ndarray operands; with no active tape (or
only constant inputs) they just compute, so the same model code serves both
training and inference.
"""

from __future__ import annotations

import threading
from collections import Counter
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Value", "Tape", "grad", "check_gradient",
    "add", "sub", "neg", "mul", "div", "matmul", "power",
    "sin", "cos", "exp", "log", "sqrt", "sigmoid", "softplus", "relu",
    "clamp", "where", "cumulative_sum", "cumulative_product", "conv2d",
    "concat", "stack", "reshape", "reduce_sum", "reduce_mean",
]

_FLOAT_DTYPES = (np.float32, np.float64)

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def _current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Value:
    """Dense real array plus tracing metadata.

    `data` must be finite on creation. Arrays produced by taped ops carry a
    node id into the tape that recorded them; `grad` is populated by
    `Tape.grad` for leaf values.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_nid")

    # make numpy defer binary ops to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Value data must be finite (no NaN/Inf)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._nid = None

    @classmethod
    def _traced(cls, data: np.ndarray, tape: "Tape", nid: int) -> "Value":
        v = cls.__new__(cls)
        v.data = data
        v.requires_grad = False
        v.grad = None
        v._tape = tape
        v._nid = nid
        return v

    @classmethod
    def _untraced(cls, data: np.ndarray) -> "Value":
        v = cls.__new__(cls)
        v.data = data
        v.requires_grad = False
        v.grad = None
        v._tape = None
        v._nid = None
        return v

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Value(shape={self.data.shape}, dtype={self.data.dtype})"

    def __float__(self):
        return float(self.data)

    # arithmetic sugar
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only operation record; single-writer per pass.

    Node inputs always reference strictly earlier nodes, so the record is
    acyclic by construction and a single reverse sweep in tape order yields
    deterministic gradient accumulation.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._leaves: dict[int, tuple[Value, int]] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def op_counts(self) -> Counter:
        return Counter(node.op for node in self._nodes)

    def _record(self, op: str, parents: tuple, backward) -> int:
        self._nodes.append(_Node(op, parents, backward))
        return len(self._nodes) - 1

    def _node_index(self, v) -> int | None:
        """Node id of `v` on this tape; leaves are registered lazily."""
        if not isinstance(v, Value):
            return None
        if v._tape is self and v._nid is not None:
            return v._nid
        if v.requires_grad:
            key = id(v)
            hit = self._leaves.get(key)
            if hit is not None:
                return hit[1]
            nid = self._record("leaf", (), None)
            self._leaves[key] = (v, nid)
            return nid
        return None

    def _traced(self, v) -> bool:
        return isinstance(v, Value) and (
            v.requires_grad or (v._tape is self and v._nid is not None)
        )

    def grad(self, loss: Value, params: Sequence[Value]) -> list[np.ndarray]:
        """Gradients of a scalar loss w.r.t. `params` (tape-order accumulation).

        Parameters not reachable from the loss get zero gradients of matching
        shape.
        """
        if not isinstance(loss, Value):
            raise ValueError("loss must be a Value")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
        adjoints: list[np.ndarray | None] = [None] * len(self._nodes)
        loss_nid = loss._nid if loss._tape is self else self._leaves.get(id(loss), (None, None))[1]
        if loss_nid is not None:
            adjoints[loss_nid] = np.ones_like(loss.data)
            for nid in range(loss_nid, -1, -1):
                g = adjoints[nid]
                node = self._nodes[nid]
                if g is None or node.backward is None:
                    continue
                for pid, contrib in zip(node.parents, node.backward(g)):
                    if adjoints[pid] is None:
                        adjoints[pid] = contrib.copy() if contrib.base is not None else contrib
                    else:
                        adjoints[pid] = adjoints[pid] + contrib
        out = []
        for p in params:
            hit = self._leaves.get(id(p))
            g = adjoints[hit[1]] if hit is not None else None
            if g is None:
                g = np.zeros_like(p.data)
            p.grad = g
            out.append(g)
        return out


def grad(loss: Value, params: Sequence[Value]) -> list[np.ndarray]:
    """Convenience wrapper: dispatch to the tape that recorded `loss`."""
    if not isinstance(loss, Value) or loss._tape is None:
        raise ValueError("loss is not attached to a tape")
    return loss._tape.grad(loss, params)


# ---------------------------------------------------------------------------
# op plumbing

def _data(v) -> np.ndarray:
    return v.data if isinstance(v, Value) else np.asarray(v)


def _coerce_pair(a, b):
    """Numpy views of both operands; python scalars adopt the array dtype."""
    av, bv = isinstance(a, Value), isinstance(b, Value)
    ad = a.data if av else a
    bd = b.data if bv else b
    if isinstance(ad, np.ndarray) and not isinstance(bd, np.ndarray):
        bd = np.asarray(bd, dtype=ad.dtype)
    elif isinstance(bd, np.ndarray) and not isinstance(ad, np.ndarray):
        ad = np.asarray(ad, dtype=bd.dtype)
    else:
        ad = np.asarray(ad)
        bd = np.asarray(bd)
        if ad.dtype != bd.dtype:
            if not isinstance(a, np.ndarray) and ad.ndim == 0:
                ad = ad.astype(bd.dtype)
            elif not isinstance(b, np.ndarray) and bd.ndim == 0:
                bd = bd.astype(ad.dtype)
            else:
                raise TypeError(f"dtype mismatch: {ad.dtype} vs {bd.dtype}")
    return ad, bd


def _wrap(out: np.ndarray, *inputs):
    if any(isinstance(v, Value) for v in inputs):
        return Value._untraced(out)
    return out


def _emit(op: str, out: np.ndarray, pairs, inputs):
    """Record `op` if any input is traced on the active tape.

    `pairs` is a list of (input, grad_fn); grad_fn maps the output adjoint to
    that input's adjoint contribution.
    """
    tape = _current_tape()
    if tape is None or not any(tape._traced(v) for v, _ in pairs):
        return _wrap(out, *inputs)
    parents, fns = [], []
    for v, fn in pairs:
        nid = tape._node_index(v)
        if nid is not None:
            parents.append(nid)
            fns.append(fn)

    def backward(g, _fns=tuple(fns)):
        return tuple(fn(g) for fn in _fns)

    nid = tape._record(op, tuple(parents), backward)
    return Value._traced(out, tape, nid)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic primitives

def add(a, b):
    ad, bd = _coerce_pair(a, b)
    out = ad + bd
    return _emit("add", out, [
        (a, lambda g: _unbroadcast(g, ad.shape)),
        (b, lambda g: _unbroadcast(g, bd.shape)),
    ], (a, b))


def sub(a, b):
    ad, bd = _coerce_pair(a, b)
    out = ad - bd
    return _emit("sub", out, [
        (a, lambda g: _unbroadcast(g, ad.shape)),
        (b, lambda g: _unbroadcast(-g, bd.shape)),
    ], (a, b))


def neg(x):
    xd = _data(x)
    return _emit("neg", -xd, [(x, lambda g: -g)], (x,))


def mul(a, b):
    ad, bd = _coerce_pair(a, b)
    out = ad * bd
    return _emit("mul", out, [
        (a, lambda g: _unbroadcast(g * bd, ad.shape)),
        (b, lambda g: _unbroadcast(g * ad, bd.shape)),
    ], (a, b))


def div(a, b):
    ad, bd = _coerce_pair(a, b)
    out = ad / bd
    return _emit("div", out, [
        (a, lambda g: _unbroadcast(g / bd, ad.shape)),
        (b, lambda g: _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    ], (a, b))


def matmul(a, b):
    ad, bd = _coerce_pair(a, b)
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ValueError("matmul supports 1D/2D operands only")
    out = ad @ bd

    def grad_a(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd)
        if ad.ndim == 1 and bd.ndim == 2:
            return g @ bd.T
        return g * bd  # 1D @ 1D

    def grad_b(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:
            return ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return np.outer(ad, g)
        return g * ad

    return _emit("matmul", out, [(a, grad_a), (b, grad_b)], (a, b))


def power(x, p):
    """x**p for a constant exponent; non-integer p requires positive base."""
    xd = _data(x)
    p = float(p)
    if not float(p).is_integer() and np.any(xd <= 0):
        raise ValueError("power with non-integer exponent needs positive base")
    out = xd ** p
    return _emit("power", out, [
        (x, lambda g: g * p * xd ** (p - 1.0)),
    ], (x,))


# ---------------------------------------------------------------------------
# transcendental / activation primitives

def sin(x):
    xd = _data(x)
    return _emit("sin", np.sin(xd), [(x, lambda g: g * np.cos(xd))], (x,))


def cos(x):
    xd = _data(x)
    return _emit("cos", np.cos(xd), [(x, lambda g: -g * np.sin(xd))], (x,))


def exp(x):
    xd = _data(x)
    out = np.exp(xd)
    return _emit("exp", out, [(x, lambda g: g * out)], (x,))


def log(x):
    xd = _data(x)
    return _emit("log", np.log(xd), [(x, lambda g: g / xd)], (x,))


def sqrt(x):
    xd = _data(x)
    out = np.sqrt(xd)
    return _emit("sqrt", out, [(x, lambda g: g * (0.5 / out))], (x,))


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    xd = _data(x)
    out = _sigmoid_raw(xd)
    return _emit("sigmoid", out, [(x, lambda g: g * out * (1.0 - out))], (x,))


def softplus(x):
    xd = _data(x)
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    return _emit("softplus", out, [(x, lambda g: g * _sigmoid_raw(xd))], (x,))


def relu(x):
    xd = _data(x)
    return _emit("relu", np.maximum(xd, 0), [
        (x, lambda g: g * (xd > 0)),
    ], (x,))


def clamp(x, lo=None, hi=None):
    """Clip to [lo, hi]; gradient flows only on the strict interior."""
    xd = _data(x)
    out = np.clip(xd, lo, hi)
    mask = np.ones_like(xd, dtype=bool)
    if lo is not None:
        mask &= xd > lo
    if hi is not None:
        mask &= xd < hi
    return _emit("clamp", out, [(x, lambda g: g * mask)], (x,))


def where(cond, a, b):
    """Select by a constant boolean mask; gradients route per branch."""
    cond = np.asarray(cond, dtype=bool)
    ad, bd = _coerce_pair(a, b)
    out = np.where(cond, ad, bd)
    return _emit("where", out, [
        (a, lambda g: _unbroadcast(np.where(cond, g, 0.0), ad.shape)),
        (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), bd.shape)),
    ], (a, b))


# ---------------------------------------------------------------------------
# scan primitives

def cumulative_sum(x, axis: int):
    xd = _data(x)
    out = np.cumsum(xd, axis=axis)

    def backward(g):
        return np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)

    return _emit("cumulative_sum", out, [(x, backward)], (x,))


def cumulative_product(x, axis: int):
    xd = _data(x)
    out = np.cumprod(xd, axis=axis)

    def backward(g):
        # dL/dx_i = (prod_{k<i} x_k) * s_i with s_i = g_i + x_{i+1} s_{i+1}:
        # exact also through zero factors (no division).
        xm = np.moveaxis(xd, axis, 0)
        gm = np.moveaxis(g, axis, 0)
        n = xm.shape[0]
        s = np.empty_like(xm)
        s[n - 1] = gm[n - 1]
        for i in range(n - 2, -1, -1):
            s[i] = gm[i] + xm[i + 1] * s[i + 1]
        prefix = np.ones_like(xm)
        if n > 1:
            np.cumprod(xm[:-1], axis=0, out=prefix[1:])
        return np.moveaxis(prefix * s, 0, axis)

    return _emit("cumulative_product", out, [(x, backward)], (x,))


# ---------------------------------------------------------------------------
# convolution

def _conv2d_raw(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """True 2D convolution, zero padding, same output size, odd kernel."""
    h, w = img.shape
    kh, kw = kernel.shape
    a, b = kh // 2, kw // 2
    padded = np.pad(img, ((a, a), (b, b)))
    out = np.zeros_like(img)
    for u in range(kh):
        for v in range(kw):
            out += kernel[u, v] * padded[2 * a - u:2 * a - u + h,
                                         2 * b - v:2 * b - v + w]
    return out


def conv2d(img, kernel):
    """img (H,W) convolved with an odd-sized kernel; zero-padded, same size."""
    imd, kd = _data(img), _data(kernel)
    if imd.ndim != 2 or kd.ndim != 2:
        raise ValueError("conv2d expects 2D image and 2D kernel")
    if kd.shape[0] % 2 == 0 or kd.shape[1] % 2 == 0:
        raise ValueError("conv2d kernel dims must be odd")
    if kd.dtype != imd.dtype:
        kd = kd.astype(imd.dtype)
    out = _conv2d_raw(imd, kd)

    def grad_img(g):
        return _conv2d_raw(g, kd[::-1, ::-1])

    def grad_kernel(g):
        h, w = imd.shape
        kh, kw = kd.shape
        a, b = kh // 2, kw // 2
        padded = np.pad(imd, ((a, a), (b, b)))
        gk = np.empty_like(kd)
        for u in range(kh):
            for v in range(kw):
                gk[u, v] = np.sum(g * padded[2 * a - u:2 * a - u + h,
                                             2 * b - v:2 * b - v + w])
        return gk

    return _emit("conv2d", out, [(img, grad_img), (kernel, grad_kernel)], (img, kernel))


# ---------------------------------------------------------------------------
# shape primitives

def concat(parts: Sequence, axis: int = 0):
    datas = [_data(p) for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    pairs = []
    for i, p in enumerate(parts):
        def fn(g, i=i):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]
        pairs.append((p, fn))
    return _emit("concat", out, pairs, tuple(parts))


def stack(parts: Sequence, axis: int = 0):
    datas = [_data(p) for p in parts]
    out = np.stack(datas, axis=axis)

    pairs = []
    for i, p in enumerate(parts):
        def fn(g, i=i):
            return np.take(g, i, axis=axis)
        pairs.append((p, fn))
    return _emit("stack", out, pairs, tuple(parts))


def reshape(x, shape):
    xd = _data(x)
    out = xd.reshape(shape)
    return _emit("reshape", out, [(x, lambda g: g.reshape(xd.shape))], (x,))


def take(x, idx):
    """Basic slicing/indexing; adjoint scatters into zeros."""
    xd = _data(x)
    out = xd[idx]

    def backward(g):
        gx = np.zeros_like(xd)
        gx[idx] += g
        return gx

    return _emit("take", out, [(x, backward)], (x,))


# ---------------------------------------------------------------------------
# reductions

def reduce_sum(x, axis=None, keepdims: bool = False):
    xd = _data(x)
    out = np.sum(xd, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return np.broadcast_to(g, xd.shape).astype(xd.dtype, copy=True)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, xd.shape).astype(xd.dtype, copy=True)

    return _emit("reduce_sum", out, [(x, backward)], (x,))


def reduce_mean(x, axis=None, keepdims: bool = False):
    xd = _data(x)
    out = np.mean(xd, axis=axis, keepdims=keepdims)
    count = xd.size if axis is None else np.prod(
        [xd.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])

    def backward(g):
        if axis is None:
            gg = g
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, xd.shape) / count).astype(xd.dtype, copy=True)

    return _emit("reduce_mean", out, [(x, backward)], (x,))


# ---------------------------------------------------------------------------
# verification oracle

def check_gradient(f: Callable, params: Sequence[Value], step: float,
                   return_per_entry: bool = False):
    """Max relative error between taped gradients and central differences.

    Relative error per entry is |analytic - numeric| / max(1, |analytic|,
    |numeric|). Central differences are meaningless exactly at clamp/relu
    kinks; callers should keep probe points off the kinks (see tests for the
    documented failure mode).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    with Tape() as tape:
        loss = f(params)
        analytic = tape.grad(loss, params)

    def eval_loss():
        out = f(params)
        return float(out.data if isinstance(out, Value) else out)

    max_err = 0.0
    details = []
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        ga_flat = ga.reshape(-1)
        errs = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = eval_loss()
            flat[i] = orig - step
            fm = eval_loss()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = float(ga_flat[i])
            errs[i] = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        details.append(errs.reshape(p.data.shape))
        if errs.size:
            max_err = max(max_err, float(errs.max()))
    if return_per_entry:
        return max_err, details
    return max_err
