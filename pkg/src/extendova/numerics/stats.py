"""Stateless numeric helpers on plain arrays (no autodiff involved)."""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateInputError
from .rng import Rng

__all__ = ["softmax", "kl_divergence", "cosine_similarity", "gaussian_sample"]

_Q_FLOOR = 1e-12


def softmax(x) -> np.ndarray:
    """Numerically stable softmax of a 1-d vector.

    Shifts by the max before exponentiating, so entries with magnitude in
    the hundreds stay finite.  Output sums to 1 within float64 rounding.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("softmax expects a non-empty 1-d vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input must be finite")
    e = np.exp(x - x.max())
    return e / e.sum()


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats for two probability vectors of equal length.

    Entries of ``q`` are floored at 1e-12 before the log so that a zero in
    ``q`` yields a large finite penalty instead of infinity.  Terms where
    ``p`` is exactly zero contribute nothing.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1 or p.size == 0:
        raise ValueError("kl_divergence expects two 1-d vectors of equal length")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("probability vectors must be non-negative")
    qc = np.maximum(q, _Q_FLOOR)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(qc[mask]))))


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    A zero vector has no direction; that is reported as
    :class:`DegenerateInputError`, never silently mapped to 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("cosine_similarity expects two 1-d vectors of equal length")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < _Q_FLOOR or nb < _Q_FLOOR:
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def gaussian_sample(mean, var, rng: Rng) -> np.ndarray:
    """Draw one sample from a diagonal Gaussian given per-dim variances."""
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if mean.shape != var.shape:
        raise ValueError("mean and var must have the same shape")
    if np.any(var < 0):
        raise ValueError("variances must be non-negative")
    return mean + np.sqrt(var) * rng.normal(size=mean.shape)
