"""Finite-difference verification of analytic gradients.

``grad_check`` compares reverse-mode gradients against central differences
f(x + h) - f(x - h) over 2h, coordinate by coordinate, and reports the
worst relative error |analytic - numeric| / max(1, |analytic|).  The loss
closure must be pure: it is evaluated many times at perturbed points, so
anything with side effects (running statistics, logging) has to be gated
off by the caller.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NumericalFailure
from .tensor import Tensor

__all__ = ["grad_check", "grad_check_many"]


def grad_check_many(fn: Callable[[], Tensor], params: Sequence[Tensor],
                    eps: float = 1e-5) -> float:
    """Worst relative gradient error of ``fn`` over several parameter tensors.

    ``fn`` must rebuild its graph from the current ``params`` data on every
    call and return a scalar Tensor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    if not params:
        raise ValueError("no parameters to check")
    for p in params:
        if not p.requires_grad:
            raise ValueError("grad_check parameters must have requires_grad=True")

    out = fn()
    if out.data.size != 1:
        raise ValueError("grad_check target must be scalar")
    if not np.isfinite(out.data):
        raise NumericalFailure("loss is not finite at the evaluation point")
    for p in params:
        p.grad = None
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else np.array(p.grad)
                for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn().data)
            flat[i] = orig - eps
            f_minus = float(fn().data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericalFailure("non-finite loss during finite differencing")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(ana_flat[i] - numeric) / max(1.0, abs(ana_flat[i]))
            if rel > worst:
                worst = rel
    return worst


def grad_check(fn: Callable[[], Tensor], params: Tensor, eps: float = 1e-5) -> float:
    """Single-tensor convenience wrapper around :func:`grad_check_many`."""
    return grad_check_many(fn, [params], eps=eps)
