"""Flow-matching training and iterative sampling around the denoiser."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .core.optim import AdamState, adam_step, clip_grad_norm
from .data_io import SlideData, sample_region
from .denoiser import Denoiser
from .errors import ContractError, NumericError, ShapeError
from .evaluation import evaluate_slide
from .priors import PriorKind, ZinbParams, sample_prior

log = logging.getLogger(__name__)

DenoiseFn = Callable[[np.ndarray, np.ndarray, np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class FlowConfig:
    steps: int = 5
    prior: PriorKind = field(default_factory=ZinbParams)
    lr: float = 5e-4
    clip: float = 1.0
    epochs: int = 100
    patience: int = 20
    seed: int = 0
    log1p_targets: bool = True
    n_hvg: int = 50
    init_output_head: bool = True
    regions_per_slide: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if self.lr < 0:
            raise ContractError("learning rate must be non-negative")
        if not self.clip > 0:
            raise ContractError("clip norm must be positive")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.regions_per_slide < 1:
            raise ContractError("regions_per_slide must be >= 1")
        if not 1 <= self.patience <= self.epochs:
            raise ContractError(f"patience must lie in [1, epochs], got {self.patience}")


def interpolate(y, y0, t: float) -> np.ndarray:
    """Point ``t`` on the straight path from ``y0`` (t=0) to ``y`` (t=1)."""
    y = np.asarray(y, dtype=np.float64)
    y0 = np.asarray(y0, dtype=np.float64)
    if y.shape != y0.shape:
        raise ShapeError(f"interpolation endpoints differ in shape: {y.shape} vs {y0.shape}")
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t must lie in [0, 1], got {t}")
    return t * y + (1.0 - t) * y0


def training_target(slide: SlideData, cfg: FlowConfig) -> np.ndarray:
    if cfg.log1p_targets:
        return slide.log1p().expression
    return slide.expression


def train_step(
    region: SlideData,
    model: Denoiser,
    opt: AdamState,
    cfg: FlowConfig,
    rng: np.random.Generator,
    where: str = "",
) -> float:
    """One flow-matching update on a region; returns the pre-update loss."""
    target = training_target(region, cfg)
    t = float(rng.uniform(0.0, 1.0))
    y0 = sample_prior(cfg.prior, region.n_spots, region.n_genes, rng)
    y_t = interpolate(target, y0, t)
    geo = model.geometry(region.coords)
    loss, grads = model.loss_and_grads(geo, region.features, y_t, t, target, train=True, rng=rng)
    if not np.isfinite(loss):
        context = f" {where}" if where else ""
        raise NumericError(
            f"non-finite loss {loss}{context} (t={t:.4f}, region of {region.n_spots} spots, slide {region.id!r})"
        )
    try:
        grads = clip_grad_norm(grads, cfg.clip)
    except NumericError as exc:
        raise NumericError(f"{exc} {where}".strip()) from exc
    adam_step(model.params, grads, opt)
    return loss


@dataclass
class SampleTrace:
    """States visited by :func:`sample`, for inspection and cost accounting."""

    y0: np.ndarray | None = None
    times: list[float] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)
    predictions: list[np.ndarray] = field(default_factory=list)

    @property
    def calls(self) -> int:
        return len(self.predictions)


def _as_denoise_fn(model: Union[Denoiser, DenoiseFn], coords, features) -> DenoiseFn:
    if not isinstance(model, Denoiser):
        return lambda y_t, t: np.asarray(model(coords, features, y_t, t), dtype=np.float64)
    geo = model.geometry(coords)
    cache: dict = {}
    return lambda y_t, t: model.predict(geo, features, y_t, t, pair_cache=cache)


def sample(
    coords,
    features,
    model: Union[Denoiser, DenoiseFn],
    cfg: FlowConfig,
    rng: np.random.Generator,
    n_genes: int | None = None,
    y0: np.ndarray | None = None,
    trace: SampleTrace | None = None,
) -> np.ndarray:
    """Iterative refinement from a prior draw over ``cfg.steps`` steps.

    ``model`` is a :class:`Denoiser` or any callable
    ``f(coords, features, y_t, t) -> y_hat``; a callable needs ``n_genes``
    unless ``y0`` is supplied.
    """
    coords = np.asarray(coords, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    n = coords.shape[0]
    if y0 is None:
        g = model.config.n_genes if isinstance(model, Denoiser) else n_genes
        if g is None:
            raise ContractError("n_genes is required when sampling with a plain callable")
        y0 = sample_prior(cfg.prior, n, g, rng)
    y0 = np.asarray(y0, dtype=np.float64)
    f = _as_denoise_fn(model, coords, features)
    s_total = cfg.steps
    y_t = y0
    if trace is not None:
        trace.y0 = y0
    for s in range(s_total):
        t1, t2 = s / s_total, (s + 1) / s_total
        y_hat = f(y_t, t1)
        if trace is not None:
            trace.times.append(t1)
            trace.states.append(y_t)
            trace.predictions.append(y_hat)
        if s == s_total - 1:
            return y_hat
        y_t = y_t + (y_hat - y_t) * ((t2 - t1) / (1.0 - t1))
    raise AssertionError("unreachable")


@dataclass
class TrainReport:
    loss: list[float] = field(default_factory=list)
    val_pearson: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def epochs(self) -> int:
        return len(self.loss)

    def same_metrics(self, other: "TrainReport") -> bool:
        """Equality of everything except wall-clock timings."""
        return self.loss == other.loss and self.val_pearson == other.val_pearson and self.best_epoch == other.best_epoch

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "val_pearson", "seconds"])
            for i, (l, v, s) in enumerate(zip(self.loss, self.val_pearson, self.seconds), start=1):
                w.writerow([i, repr(l), repr(v), f"{s:.3f}"])
        return path


def validation_score(model: Denoiser, slides: Sequence[SlideData], cfg: FlowConfig) -> float:
    """Mean per-gene Pearson of sampled predictions, averaged over slides.

    The prior draws come from a generator reseeded on every call so scores are
    comparable across epochs.
    """
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    scores = []
    for slide in slides:
        pred = sample(slide.coords, slide.features, model, cfg, rng)
        scores.append(evaluate_slide(pred, slide, cfg.n_hvg).mean)
    return float(np.mean(scores))


def init_output_head(model: Denoiser, gene_means: np.ndarray) -> None:
    """Start every expression head as the constant per-gene target mean.

    Adam moves each parameter by roughly the learning rate per step, so an
    output offset of a few log-units, or the spread of a randomly initialised
    head, would otherwise cost thousands of steps to undo.
    """
    gene_means = np.asarray(gene_means, dtype=np.float64)
    for layer in range(model.config.layers):
        w = model.params[f"layer{layer}.head.1.w"]
        model.params[f"layer{layer}.head.1.w"] = np.zeros_like(w)
        model.params[f"layer{layer}.head.1.b"] = gene_means.copy()


def fit(
    train: Sequence[SlideData],
    val: Sequence[SlideData],
    model: Denoiser,
    cfg: FlowConfig,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> tuple[Denoiser, TrainReport]:
    """Train with early stopping on validation Pearson; returns the best model.

    ``model`` is updated in place; the returned model is a separate copy
    holding the best parameters seen.
    """
    train, val = list(train), list(val)
    if not train:
        raise ContractError("training needs at least one slide")
    if not val:
        raise ContractError("early stopping needs at least one validation slide")
    for s in train + val:
        if s.d_in != model.config.d_in or s.n_genes != model.config.n_genes:
            raise ShapeError(
                f"slide {s.id!r} has d_in={s.d_in}, n_genes={s.n_genes}; model expects "
                f"d_in={model.config.d_in}, n_genes={model.config.n_genes}"
            )
    if cfg.init_output_head:
        init_output_head(model, np.concatenate([training_target(s, cfg) for s in train]).mean(axis=0))
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState.for_params(model.params, lr=cfg.lr)
    report = TrainReport()
    best, best_score = model.copy(), -np.inf
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        order = np.concatenate([rng.permutation(len(train)) for _ in range(cfg.regions_per_slide)])
        for step, i in enumerate(order, start=1):
            region = sample_region(train[i], rng, k=model.config.k)
            losses.append(train_step(region, model, opt, cfg, rng, where=f"at epoch {epoch}, step {step}"))
        score = validation_score(model, val, cfg)
        report.loss.append(float(np.mean(losses)))
        report.val_pearson.append(score)
        report.seconds.append(time.perf_counter() - start)
        log.info("epoch %d loss %.5f val_pearson %.4f", epoch, report.loss[-1], score)
        if on_epoch is not None:
            on_epoch(epoch, report.loss[-1], score)
        if score > best_score:
            best, best_score, report.best_epoch = model.copy(), score, epoch
        elif epoch - report.best_epoch >= cfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, report.best_epoch)
            break
    return best, report


__all__ = [
    "FlowConfig",
    "SampleTrace",
    "TrainReport",
    "fit",
    "interpolate",
    "sample",
    "init_output_head",
    "train_step",
    "training_target",
    "validation_score",
]
