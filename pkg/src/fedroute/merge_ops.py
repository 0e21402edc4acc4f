"""Aggregation operators over flat parameter vectors.

``fed_avg`` is the weighted mean. ``ties_merge`` trims each client's task
vector to its largest-magnitude entries, elects a sign per coordinate, averages
only the entries that agree with the elected sign and adds the result back to
the reference parameters with a scale factor.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np


def _stack(vectors: Sequence[np.ndarray]) -> np.ndarray:
    if len(vectors) == 0:
        raise ValueError("need at least one vector")
    arrs = [np.asarray(v, dtype=np.float64) for v in vectors]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ValueError("vector lengths differ")
    return np.stack(arrs)


def task_vector(theta_k, theta_ref) -> np.ndarray:
    theta_k = np.asarray(theta_k, dtype=np.float64)
    theta_ref = np.asarray(theta_ref, dtype=np.float64)
    if theta_k.shape != theta_ref.shape:
        raise ValueError("layout mismatch between client and reference parameters")
    return theta_k - theta_ref


def keep_count(length: int, keep_percent: float) -> int:
    if not 0 < keep_percent <= 100:
        raise ValueError("keep_percent must be in (0, 100]")
    # round first so that e.g. 70% of 10 is 7, not 8
    return min(length, math.ceil(round(keep_percent * length / 100.0, 9)))


def trim(tau, keep_percent: float, segments: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """Zero all but the top ``keep_percent`` % entries by magnitude.

    Ties at the threshold keep the lower index. ``segments`` is an optional
    list of (start, stop) ranges trimmed independently (per-tensor mode).
    """
    tau = np.asarray(tau, dtype=np.float64)
    if segments is not None:
        out = np.zeros_like(tau)
        for a, b in segments:
            out[a:b] = trim(tau[a:b], keep_percent)
        return out
    k = keep_count(tau.size, keep_percent)
    order = np.argsort(-np.abs(tau), kind="stable")
    out = np.zeros_like(tau)
    keep = order[:k]
    out[keep] = tau[keep]
    return out


def sign_vote(trimmed: Sequence[np.ndarray]) -> np.ndarray:
    return np.sign(_stack(trimmed).sum(0))


def disjoint_merge(trimmed: Sequence[np.ndarray], gamma: np.ndarray) -> np.ndarray:
    T = _stack(trimmed)
    gamma = np.asarray(gamma)
    agree = (np.sign(T) == gamma[None]) & (gamma[None] != 0)
    count = agree.sum(0)
    total = np.where(agree, T, 0.0).sum(0)
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def ties_merge(theta_ref, thetas: Sequence, keep_percent: float = 20.0, scale: float = 1.0,
               segments: Optional[Sequence[tuple]] = None) -> np.ndarray:
    theta_ref = np.asarray(theta_ref, dtype=np.float64)
    if len(thetas) == 0:
        raise ValueError("ties_merge needs at least one client")
    taus = [trim(task_vector(t, theta_ref), keep_percent, segments) for t in thetas]
    gamma = sign_vote(taus)
    return theta_ref + scale * disjoint_merge(taus, gamma)


def fed_avg(thetas: Sequence, weights: Sequence[float]) -> np.ndarray:
    X = _stack(thetas)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(X),):
        raise ValueError("need one weight per vector")
    if np.any(w < 0) or not np.isfinite(w).all():
        raise ValueError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights sum to zero")
    p = w / total
    out = p[0] * X[0]
    for pk, xk in zip(p[1:], X[1:]):
        out = out + pk * xk
    return out
