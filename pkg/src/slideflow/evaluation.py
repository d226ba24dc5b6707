"""Per-gene Pearson evaluation and the feature-only ridge baseline."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.linear_model import Ridge

from .data_io import SlideData, check_gene_names, select_hvg
from .errors import ContractError, ShapeError

ZERO_VARIANCE = 1e-15
RIDGE_ALPHA = 1e-2


def pearson_columns(pred, truth) -> np.ndarray:
    """Pearson r between matching columns; constant columns score 0."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 1:
        x, y = x[:, None], y[:, None]
    if x.shape[0] < 2:
        raise ContractError("pearson needs at least 2 observations")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    sxx = np.einsum("ij,ij->j", xc, xc)
    syy = np.einsum("ij,ij->j", yc, yc)
    sxy = np.einsum("ij,ij->j", xc, yc)
    dof = x.shape[0] - 1
    ok = (sxx / dof >= ZERO_VARIANCE) & (syy / dof >= ZERO_VARIANCE)
    r = np.zeros(x.shape[1])
    r[ok] = sxy[ok] / np.sqrt(sxx[ok] * syy[ok])
    return np.clip(r, -1.0, 1.0)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ShapeError(f"pearson needs equal-length vectors, got {x.shape} and {y.shape}")
    return float(pearson_columns(x, y)[0])


@dataclass(frozen=True)
class EvalReport:
    genes: tuple[str, ...]
    pearson: np.ndarray
    n_spots: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.pearson))

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["gene", "pearson"])
            for g, r in zip(self.genes, self.pearson):
                w.writerow([g, repr(float(r))])
            w.writerow(["__mean__", repr(self.mean)])
        return path


def evaluate(pred, truth, hvg: Sequence[int] | None = None, gene_names: Sequence[str] | None = None) -> EvalReport:
    """Per-gene Pearson over the ``hvg`` columns (all columns when omitted)."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} must be equal 2-D shapes")
    g = truth.shape[1]
    idx = np.arange(g) if hvg is None else np.asarray(hvg, dtype=int)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= g:
        raise ContractError(f"gene indices must lie in [0, {g})")
    names = list(gene_names) if gene_names is not None else [f"gene_{i}" for i in range(g)]
    r = pearson_columns(pred[:, idx], truth[:, idx])
    return EvalReport(tuple(names[i] for i in idx), r, truth.shape[0])


def hvg_count(n_genes: int, requested: int = 50) -> int:
    """Clamp the HVG panel to the gene count so small panels stay evaluable."""
    return min(requested, n_genes)


def evaluate_slide(pred, slide: SlideData, n_hvg: int = 50) -> EvalReport:
    """Evaluate against a log1p-normalized slide using its own top-variance genes."""
    truth = slide.expression if slide.normalized else np.log1p(slide.expression)
    hvg = select_hvg(truth, hvg_count(slide.n_genes, n_hvg))
    return evaluate(pred, truth, hvg, slide.gene_names)


def _stack(slides: Sequence[SlideData]):
    for s in slides[1:]:
        check_gene_names(slides[0].gene_names, s.gene_names)
    x = np.concatenate([s.features for s in slides])
    y = np.concatenate([s.expression if s.normalized else np.log1p(s.expression) for s in slides])
    return x, y


def fit_ridge(train: Sequence[SlideData], alpha: float = RIDGE_ALPHA) -> Ridge:
    if not train:
        raise ContractError("ridge baseline needs at least one training slide")
    x, y = _stack(list(train))
    return Ridge(alpha=alpha).fit(x, y)


def independent_baseline(train, test: SlideData, n_hvg: int = 50, alpha: float = RIDGE_ALPHA) -> EvalReport:
    """Per-gene ridge from spot features alone, scored like the joint model."""
    train = [train] if isinstance(train, SlideData) else list(train)
    model = fit_ridge(train, alpha)
    check_gene_names(train[0].gene_names, test.gene_names)
    return evaluate_slide(model.predict(test.features), test, n_hvg)
