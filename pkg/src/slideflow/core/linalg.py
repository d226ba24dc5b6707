"""Grouped softmax and closed-form 2-D PCA."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ContractError

DEGENERATE_RTOL = 1e-12
TIE_RTOL = 1e-9


def softmax_over_groups(scores: Sequence[float], groups: Sequence[Sequence[int]]) -> np.ndarray:
    """Softmax of ``scores`` computed independently inside each index group.

    ``groups`` partitions the positions of ``scores``; output order follows input.
    """
    scores = np.asarray(scores, dtype=np.float64)
    out = np.empty_like(scores)
    for g in groups:
        idx = np.asarray(g, dtype=np.intp)
        if idx.size == 0:
            raise ContractError("softmax_over_groups: empty group")
        s = scores[idx]
        e = np.exp(s - s.max())
        out[idx] = e / e.sum()
    return out


@dataclass(frozen=True)
class PCA2D:
    u1: np.ndarray
    u2: np.ndarray
    centroid: np.ndarray
    eigvals: tuple[float, float]
    degenerate: bool
    tie: bool


def _sign_fix(u: np.ndarray) -> np.ndarray:
    # largest-magnitude coordinate made positive (first coordinate wins ties)
    pick = np.argmax(np.abs(u), axis=-1)
    lead = np.take_along_axis(u, pick[..., None], axis=-1)
    return np.where(lead < 0, -u, u)


def pca_2d_batch(points: np.ndarray):
    """Vectorised PCA over a batch of 2-D point sets of shape (..., n, 2).

    Returns ``(u1, u2, centroid, eigvals, degenerate, tie)`` with leading batch
    shape preserved. Covariances use the population normalisation (1/n).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[-1] != 2 or points.ndim < 2:
        raise ContractError(f"pca_2d expects (..., n, 2) points, got {points.shape}")
    if points.shape[-2] < 2:
        raise ContractError("pca_2d needs at least 2 points")
    centroid = points.mean(axis=-2)
    x = points - centroid[..., None, :]
    a = np.mean(x[..., 0] * x[..., 0], axis=-1)
    c = np.mean(x[..., 1] * x[..., 1], axis=-1)
    b = np.mean(x[..., 0] * x[..., 1], axis=-1)
    half_trace = 0.5 * (a + c)
    half_diff = 0.5 * (a - c)
    r = np.hypot(half_diff, b)
    lam1 = half_trace + r
    lam2 = np.maximum(half_trace - r, 0.0)
    theta = 0.5 * np.arctan2(b, half_diff)
    u1 = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    u2 = np.stack([-np.sin(theta), np.cos(theta)], axis=-1)
    u1, u2 = _sign_fix(u1), _sign_fix(u2)

    degenerate = (lam1 < DEGENERATE_RTOL) | (lam2 < DEGENERATE_RTOL * lam1)
    tie = ~degenerate & (lam1 - lam2 <= TIE_RTOL * lam1)
    if np.any(degenerate):
        u1 = np.where(degenerate[..., None], np.array([1.0, 0.0]), u1)
        u2 = np.where(degenerate[..., None], np.array([0.0, 1.0]), u2)
    eigvals = np.stack([lam1, lam2], axis=-1)
    return u1, u2, centroid, eigvals, degenerate, tie


def pca_2d(points: Sequence[Sequence[float]]) -> PCA2D:
    """Principal axes, centroid and eigenvalues (descending) of a 2-D point set."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ContractError(f"pca_2d expects an (n, 2) array, got {pts.shape}")
    u1, u2, centroid, eig, deg, tie = pca_2d_batch(pts)
    return PCA2D(u1, u2, centroid, (float(eig[0]), float(eig[1])), bool(deg), bool(tie))
