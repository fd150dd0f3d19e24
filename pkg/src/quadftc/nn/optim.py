"""Adam with bias correction, plus global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from quadftc.nn.autodiff import ShapeMismatch


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, **hyper) -> AdamState:
        st = cls(**hyper)
        st.m = {k: np.zeros_like(p) for k, p in params.items()}
        st.v = {k: np.zeros_like(p) for k, p in params.items()}
        return st


def adam_step(params: dict, grads: dict, state: AdamState):
    """Return updated (params, state); inputs are left untouched."""
    if grads.keys() - params.keys():
        raise ShapeMismatch(f"gradients for unknown parameters: {sorted(grads.keys() - params.keys())}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeMismatch(f"{k}: grad {g.shape} vs param {p.shape}")
        m = (b1 * m + (1.0 - b1) * g).astype(p.dtype)
        v = (b2 * v + (1.0 - b2) * g * g).astype(p.dtype)
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p[k] = (p - upd).astype(p.dtype)
        new_m[k] = m
        new_v[k] = v
    return new_p, AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(np.sum(np.square(g, dtype=np.float64)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        s = np.float32(max_norm / (total + 1e-12))
        for g in grads.values():
            g *= s
    return total
