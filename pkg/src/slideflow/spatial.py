"""Slide geometry: exact k-NN neighbourhoods, direction vectors and PCA frames."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core.linalg import pca_2d_batch
from .errors import ContractError

DEFAULT_K = 8
BRUTE_FORCE_BELOW = 256

# (alpha1, alpha2) sign pairs, one frame each
FRAME_SIGNS = np.array([(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)])


@dataclass(frozen=True)
class NeighborGraph:
    k: int
    neighbors: np.ndarray  # (N, k_eff) int, nearest first
    sq_dists: np.ndarray  # (N, k_eff)

    @property
    def n_spots(self) -> int:
        return self.neighbors.shape[0]

    @property
    def k_eff(self) -> int:
        return self.neighbors.shape[1]


def _check_coords(coords) -> np.ndarray:
    c = np.asarray(coords, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 2:
        raise ContractError(f"coordinates must have shape (N, 2), got {c.shape}")
    if c.shape[0] < 2:
        raise ContractError("at least 2 spots are required")
    if not np.all(np.isfinite(c)):
        raise ContractError("coordinates must be finite")
    return c


def _sq_dist(c: np.ndarray, i, j) -> np.ndarray:
    dx = c[i, 0] - c[j, 0]
    dy = c[i, 1] - c[j, 1]
    return dx * dx + dy * dy


def _brute_rows(c: np.ndarray, rows: np.ndarray, k_eff: int):
    d2 = _sq_dist(c, rows[:, None], np.arange(len(c))[None, :])
    d2[np.arange(len(rows)), rows] = np.inf
    order = np.argsort(d2, axis=1, kind="stable")[:, :k_eff]
    return order, np.take_along_axis(d2, order, axis=1)


def knn_graph(coords, k: int = DEFAULT_K) -> NeighborGraph:
    """Exact Euclidean k nearest neighbours, ties broken by ascending index.

    Small slides are handled by brute force; larger ones query a KD-tree for a
    few spare candidates, re-rank them with the same distance arithmetic as the
    brute-force path and fall back to a full row scan whenever the spare
    candidates cannot prove the ranking complete.
    """
    c = _check_coords(coords)
    if k < 1:
        raise ContractError("k must be >= 1")
    n = len(c)
    k_eff = min(k, n - 1)
    rows = np.arange(n)
    if n < BRUTE_FORCE_BELOW:
        nbr, d2 = _brute_rows(c, rows, k_eff)
        return NeighborGraph(k, nbr, d2)

    m = min(n, k_eff + 5)
    tree_d, cand = cKDTree(c).query(c, k=m)
    cand_d2 = _sq_dist(c, rows[:, None], cand)
    cand_d2[cand == rows[:, None]] = np.inf
    # row-wise stable ranking by (distance, index)
    key_idx = np.argsort(cand, axis=1, kind="stable")
    cand = np.take_along_axis(cand, key_idx, axis=1)
    cand_d2 = np.take_along_axis(cand_d2, key_idx, axis=1)
    order = np.argsort(cand_d2, axis=1, kind="stable")[:, :k_eff]
    nbr = np.take_along_axis(cand, order, axis=1)
    d2 = np.take_along_axis(cand_d2, order, axis=1)

    # every spot outside the candidate set is at least tree_d[:, -1] away
    bound = tree_d[:, -1]
    unsafe = ~(bound > np.sqrt(d2[:, -1]) * (1.0 + 1e-9)) & (m < n)
    if np.any(unsafe):
        bad = rows[unsafe]
        nbr[bad], d2[bad] = _brute_rows(c, bad, k_eff)
    return NeighborGraph(k, nbr, d2)


def direction_vectors(coords, graph: NeighborGraph, i: int) -> np.ndarray:
    """``C_i - C_j`` for each neighbour ``j`` of spot ``i``, in graph order."""
    c = np.asarray(coords, dtype=np.float64)
    if not 0 <= i < graph.n_spots:
        raise ContractError(f"spot index {i} out of range")
    return c[i] - c[graph.neighbors[i]]


def all_direction_vectors(coords, graph: NeighborGraph) -> np.ndarray:
    c = np.asarray(coords, dtype=np.float64)
    return c[:, None, :] - c[graph.neighbors]


@dataclass(frozen=True)
class FrameSet:
    """Per-spot PCA frames. Arrays carry a leading spot axis when batched."""

    centroid: np.ndarray  # (..., 2)
    u1: np.ndarray  # (..., 2)
    u2: np.ndarray  # (..., 2)
    eigvals: np.ndarray  # (..., 2)
    degenerate: np.ndarray  # (...,) bool
    tie: np.ndarray  # (...,) bool

    @property
    def frames(self) -> np.ndarray:
        """The four matrices ``[a1*u1, a2*u2]`` (columns), shape (..., 4, 2, 2)."""
        cols1 = FRAME_SIGNS[:, 0, None] * self.u1[..., None, :]
        cols2 = FRAME_SIGNS[:, 1, None] * self.u2[..., None, :]
        return np.stack([cols1, cols2], axis=-1)


def build_frames(dirs) -> FrameSet:
    """Frames of one spot's direction-vector set (shape (n, 2)) or a batch (N, n, 2)."""
    d = np.asarray(dirs, dtype=np.float64)
    if d.ndim < 2 or d.shape[-1] != 2:
        raise ContractError(f"direction vectors must have shape (..., n, 2), got {d.shape}")
    if d.shape[-2] < 2:
        raise ContractError("frames need at least 2 direction vectors")
    u1, u2, centroid, eig, deg, tie = pca_2d_batch(d)
    return FrameSet(centroid, u1, u2, eig, deg, tie)


def project_dirs(dirs, frame: np.ndarray, centroid) -> np.ndarray:
    """``(dir - centroid) @ U`` for one 2x2 frame ``U``."""
    return (np.asarray(dirs, dtype=np.float64) - np.asarray(centroid)) @ np.asarray(frame)


@dataclass(frozen=True)
class SlideGeometry:
    """Everything coordinate-derived that a forward pass needs, built once."""

    graph: NeighborGraph
    dirs: np.ndarray  # (N, k, 2)
    frames: FrameSet
    projections: np.ndarray  # (4, N * k, 2)

    @property
    def n_spots(self) -> int:
        return self.graph.n_spots

    @property
    def k_eff(self) -> int:
        return self.graph.k_eff


def build_geometry(coords, k: int = DEFAULT_K) -> SlideGeometry:
    c = _check_coords(coords)
    graph = knn_graph(c, k)
    dirs = all_direction_vectors(c, graph)
    n, ke = graph.neighbors.shape
    if ke >= 2:
        frames = build_frames(dirs)
    else:
        # a lone neighbour has no principal axes; treat as degenerate
        frames = FrameSet(
            dirs.mean(axis=1),
            np.tile([1.0, 0.0], (n, 1)),
            np.tile([0.0, 1.0], (n, 1)),
            np.zeros((n, 2)),
            np.ones(n, dtype=bool),
            np.zeros(n, dtype=bool),
        )
    centered = dirs - frames.centroid[:, None, :]  # (N, k, 2)
    mats = frames.frames  # (N, 4, 2, 2)
    proj = np.einsum("nkc,ngcd->gnkd", centered, mats)
    return SlideGeometry(graph, dirs, frames, proj.reshape(4, n * ke, 2))
