"""Central finite-difference gradient checking.

The analytic gradients come from the float32 reverse sweep; the numerical
reference re-runs the same forward construction on float64 copies of the
parameters so the difference quotient is not drowned in float32 rounding.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Graph, Tensor


def analytic_grads(build_loss: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    """Run the float32 forward/backward once and return a grad copy per parameter."""
    for p in params:
        p.grad = None
    g = Graph()
    g.watch(*params)
    loss = build_loss(params)
    g.backward(loss)
    out = []
    for p in params:
        out.append(np.zeros(p.shape, dtype=np.float64) if p.grad is None else p.grad.astype(np.float64))
    return out


def numerical_grads(
    build_loss: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
) -> list[np.ndarray]:
    """Central differences of the loss w.r.t. every parameter element, in float64."""
    base = [Tensor(p.data.astype(np.float64), dtype=np.float64) for p in params]
    grads = []
    for pi, p in enumerate(base):
        g = np.zeros(p.shape, dtype=np.float64)
        flat_src = p.data.reshape(-1)
        for i in range(flat_src.size):
            for sign in (+1.0, -1.0):
                shifted = flat_src.copy()
                shifted[i] += sign * eps
                probe = list(base)
                probe[pi] = Tensor(shifted.reshape(p.shape), dtype=np.float64)
                val = build_loss(probe).item()
                g.reshape(-1)[i] += sign * val / (2.0 * eps)
        grads.append(g)
    return grads


def max_relative_error(
    build_loss: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    floor: float = 1e-3,
) -> float:
    """Worst elementwise relative error between analytic and numerical gradients.

    The denominator is floored so that near-zero gradient components are
    compared absolutely at the ``floor`` scale rather than amplifying noise.
    """
    ana = analytic_grads(build_loss, params)
    num = numerical_grads(build_loss, params, eps=eps)
    worst = 0.0
    for a, n in zip(ana, num):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
