"""Reverse-mode differentiation over a fixed operation set.

Operations append a backward closure to the active :class:`Tape` as they run;
``Tape.backward`` replays the closures in reverse creation order, which is a
valid topological order because every node is created after its inputs.

Values keep the dtype they were created with (float32 for training, float64
for finite-difference oracles).  Explicit reductions accumulate in float64.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    pass


class Tape:
    def __init__(self, record: bool = True):
        self.record = record
        self._ops = []

    def param(self, value) -> Var:
        """A leaf that receives a gradient."""
        return Var(np.asarray(value), self, requires_grad=True)

    def const(self, value) -> Var:
        return Var(np.asarray(value), self, requires_grad=False)

    def params(self, arrays: dict) -> dict:
        return {k: self.param(v) for k, v in arrays.items()}

    def _push(self, fn):
        if self.record:
            self._ops.append(fn)

    def backward(self, loss: Var, grad=None):
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        loss.grad = np.ones_like(loss.value) if grad is None else np.asarray(grad, loss.value.dtype)
        for fn in reversed(self._ops):
            fn()
        self._ops = []


class Var:
    __slots__ = ("value", "grad", "tape", "requires_grad")

    def __init__(self, value, tape: Tape, requires_grad: bool = False):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def _acc(self, g):
        if not self.requires_grad:
            return
        if g.shape != self.value.shape:
            g = _unbroadcast(g, self.value.shape)
        if self.grad is None:
            self.grad = g.astype(self.value.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad_if_unused(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        return self.grad

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported")
        return mul(self, 1.0 / other)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype})"


def _lift(x, like: Var) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=like.value.dtype), like.tape)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _needs(*vs):
    return any(v.requires_grad for v in vs)


def _new(value, tape, parents):
    return Var(value, tape, requires_grad=_needs(*parents))


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Var, b) -> Var:
    b = _lift(b, a)
    out = _new(a.value + b.value, a.tape, (a, b))
    if out.requires_grad:
        def back():
            a._acc(out.grad)
            b._acc(out.grad)
        a.tape._push(back)
    return out


def sub(a: Var, b) -> Var:
    b = _lift(b, a)
    out = _new(a.value - b.value, a.tape, (a, b))
    if out.requires_grad:
        def back():
            a._acc(out.grad)
            b._acc(-out.grad)
        a.tape._push(back)
    return out


def mul(a: Var, b) -> Var:
    b = _lift(b, a)
    out = _new(a.value * b.value, a.tape, (a, b))
    if out.requires_grad:
        def back():
            a._acc(out.grad * b.value)
            b._acc(out.grad * a.value)
        a.tape._push(back)
    return out


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    out = _new(y, x.tape, (x,))
    if out.requires_grad:
        x.tape._push(lambda: x._acc(out.grad * (1.0 - y * y)))
    return out


def relu(x: Var) -> Var:
    pos = x.value > 0
    out = _new(np.where(pos, x.value, 0).astype(x.value.dtype), x.tape, (x,))
    if out.requires_grad:
        x.tape._push(lambda: x._acc(np.where(pos, out.grad, 0).astype(out.grad.dtype)))
    return out


def exp(x: Var) -> Var:
    y = np.exp(x.value)
    out = _new(y, x.tape, (x,))
    if out.requires_grad:
        x.tape._push(lambda: x._acc(out.grad * y))
    return out


def square(x: Var) -> Var:
    out = _new(x.value * x.value, x.tape, (x,))
    if out.requires_grad:
        x.tape._push(lambda: x._acc(2.0 * x.value * out.grad))
    return out


def clip(x: Var, lo, hi) -> Var:
    """Clamp with zero gradient outside [lo, hi]."""
    inside = (x.value >= lo) & (x.value <= hi)
    out = _new(np.clip(x.value, lo, hi), x.tape, (x,))
    if out.requires_grad:
        x.tape._push(lambda: x._acc(np.where(inside, out.grad, 0).astype(out.grad.dtype)))
    return out


def minimum(a: Var, b: Var) -> Var:
    """Elementwise min; ties route the gradient to ``a``."""
    take_a = a.value <= b.value
    out = _new(np.where(take_a, a.value, b.value), a.tape, (a, b))
    if out.requires_grad:
        def back():
            z = np.zeros_like(out.grad)
            a._acc(np.where(take_a, out.grad, z))
            b._acc(np.where(take_a, z, out.grad))
        a.tape._push(back)
    return out


# ---------------------------------------------------------------------------
# shape
# ---------------------------------------------------------------------------


def reshape(x: Var, shape) -> Var:
    out = _new(x.value.reshape(shape), x.tape, (x,))
    if out.requires_grad:
        x.tape._push(lambda: x._acc(out.grad.reshape(x.value.shape)))
    return out


def transpose(x: Var, axes) -> Var:
    inv = np.argsort(axes)
    out = _new(np.ascontiguousarray(x.value.transpose(axes)), x.tape, (x,))
    if out.requires_grad:
        x.tape._push(lambda: x._acc(out.grad.transpose(inv)))
    return out


def concat(xs, axis=-1) -> Var:
    vals = [x.value for x in xs]
    out = _new(np.concatenate(vals, axis=axis), xs[0].tape, xs)
    if out.requires_grad:
        sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

        def back():
            for x, g in zip(xs, np.split(out.grad, sizes, axis=axis)):
                x._acc(g)
        xs[0].tape._push(back)
    return out


def take(x: Var, index, axis=-1) -> Var:
    """Select entries along ``axis`` with an integer array or slice."""
    sl = [slice(None)] * x.value.ndim
    sl[axis] = index
    sl = tuple(sl)
    out = _new(x.value[sl], x.tape, (x,))
    if out.requires_grad:
        def back():
            g = np.zeros_like(x.value)
            np.add.at(g, sl, out.grad)
            x._acc(g)
        x.tape._push(back)
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum(x: Var, axis=None, keepdims=False) -> Var:  # noqa: A001 - mirrors numpy
    val = np.sum(x.value, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.value.dtype)
    out = _new(np.asarray(val), x.tape, (x,))
    if out.requires_grad:
        def back():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._acc(np.broadcast_to(g, x.value.shape).astype(x.value.dtype))
        x.tape._push(back)
    return out


def mean(x: Var, axis=None, keepdims=False) -> Var:
    n = x.value.size if axis is None else np.prod([x.value.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def masked_mean(x: Var, mask) -> Var:
    """Mean of ``x`` (B, T, D) over positions where ``mask`` (B, T) is true."""
    m = np.asarray(mask, dtype=bool)
    cnt = m.sum(axis=1).astype(np.float64)
    if np.any(cnt == 0):
        raise ShapeMismatch("masked_mean needs at least one valid position per row")
    xm = np.where(m[:, :, None], x.value, 0)
    val = (np.sum(xm, axis=1, dtype=np.float64) / cnt[:, None]).astype(x.value.dtype)
    out = _new(val, x.tape, (x,))
    if out.requires_grad:
        w = (m / cnt[:, None]).astype(x.value.dtype)

        def back():
            x._acc(out.grad[:, None, :] * w[:, :, None])
        x.tape._push(back)
    return out


# ---------------------------------------------------------------------------
# linear algebra and fused layers
# ---------------------------------------------------------------------------


def matmul(a: Var, b) -> Var:
    b = _lift(b, a)
    if a.value.shape[-1] != b.value.shape[-2 if b.value.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul {a.value.shape} @ {b.value.shape}")
    out = _new(a.value @ b.value, a.tape, (a, b))
    if out.requires_grad:
        def back():
            g = out.grad
            if a.requires_grad:
                a._acc(g @ np.swapaxes(b.value, -1, -2))
            if b.requires_grad:
                if a.value.ndim > 2 and b.value.ndim == 2:
                    a2 = a.value.reshape(-1, a.value.shape[-1])
                    b._acc(a2.T @ g.reshape(-1, g.shape[-1]))
                else:
                    b._acc(np.swapaxes(a.value, -1, -2) @ g)
        a.tape._push(back)
    return out


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax(x: Var, key_mask=None) -> Var:
    """Softmax over the last axis; ``key_mask`` (broadcastable, bool) marks allowed entries."""
    v = x.value
    if key_mask is not None:
        v = np.where(key_mask, v, -np.inf)
    mx = np.max(v, axis=-1, keepdims=True)
    e = np.exp(v - mx)
    s = np.sum(e, axis=-1, keepdims=True, dtype=np.float64)
    y = (e / s).astype(x.value.dtype)
    out = _new(y, x.tape, (x,))
    if out.requires_grad:
        def back():
            g = out.grad
            dot = np.sum(g * y, axis=-1, keepdims=True, dtype=np.float64).astype(y.dtype)
            x._acc(y * (g - dot))
        x.tape._push(back)
    return out


def layer_norm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    v = x.value
    mu = np.mean(v, axis=-1, keepdims=True, dtype=np.float64)
    var = np.mean((v - mu) ** 2, axis=-1, keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((v - mu) * inv).astype(v.dtype)
    inv = inv.astype(v.dtype)
    out = _new(xhat * gamma.value + beta.value, x.tape, (x, gamma, beta))
    if out.requires_grad:
        def back():
            g = out.grad
            gamma._acc(g * xhat)
            beta._acc(g)
            if x.requires_grad:
                gx = g * gamma.value
                m1 = np.mean(gx, axis=-1, keepdims=True, dtype=np.float64).astype(v.dtype)
                m2 = np.mean(gx * xhat, axis=-1, keepdims=True, dtype=np.float64).astype(v.dtype)
                x._acc(inv * (gx - m1 - xhat * m2))
        x.tape._push(back)
    return out


def conv1d_causal(x: Var, w: Var, b: Var | None, stride: int = 1) -> Var:
    """Causal 1-D convolution.

    ``x`` is (B, T, C_in), ``w`` is (K, C_in, C_out).  Output position ``j``
    sees inputs ``j*stride - K + 1 .. j*stride`` (zero left padding) and the
    output length is ``ceil(T / stride)``.
    """
    B, T, C = x.value.shape
    K, Cw, Co = w.value.shape
    if Cw != C:
        raise ShapeMismatch(f"conv1d expects {Cw} input channels, got {C}")
    T_out = -(-T // stride)
    xp = np.concatenate([np.zeros((B, K - 1, C), dtype=x.value.dtype), x.value], axis=1)
    # column k of a window is input index j*stride - (K-1) + k
    cols = np.stack([xp[:, k: k + (T_out - 1) * stride + 1: stride, :] for k in range(K)], axis=2)
    cols2 = cols.reshape(B * T_out, K * C)
    y = (cols2 @ w.value.reshape(K * C, Co)).reshape(B, T_out, Co)
    if b is not None:
        y = y + b.value
    parents = (x, w) if b is None else (x, w, b)
    out = _new(y, x.tape, parents)
    if out.requires_grad:
        def back():
            g = out.grad.reshape(B * T_out, Co)
            if w.requires_grad:
                w._acc((cols2.T @ g).reshape(K, C, Co))
            if b is not None:
                b._acc(out.grad.reshape(-1, Co).sum(axis=0))
            if x.requires_grad:
                gc = (g @ w.value.reshape(K * C, Co).T).reshape(B, T_out, K, C)
                gxp = np.zeros_like(xp)
                for k in range(K):
                    gxp[:, k: k + (T_out - 1) * stride + 1: stride, :] += gc[:, :, k, :]
                x._acc(gxp[:, K - 1:, :])
        x.tape._push(back)
    return out
