"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-6,
    samples_per_param: int = 10,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` must rebuild the graph from the current ``params`` values on
    every call and be deterministic. Parameters should be float64. The error
    for an entry is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    params = [p for p in params if p.size]
    if not params:
        return 0.0
    untracked = [p.name or f"#{i}" for i, p in enumerate(params) if not p.requires_grad]
    if untracked:
        raise ValueError(f"grad_check: parameter(s) {untracked} do not require grad")
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise ValueError(f"grad_check needs contiguous parameters ({p.name or 'unnamed'})")
        k = min(samples_per_param, flat.size)
        picks = rng.choice(flat.size, size=k, replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn().data)
            flat[i] = orig - eps
            f_minus = float(loss_fn().data)
            flat[i] = orig
            num = (f_plus - f_minus) / (2 * eps)
            a = float(ga.reshape(-1)[i])
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    for p in params:
        p.grad = None
    return worst
