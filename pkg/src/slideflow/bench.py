"""E(2)-invariance harness and the inference scaling benchmark."""

from __future__ import annotations

import csv
import logging
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np
from threadpoolctl import threadpool_limits

from .data_io import SlideData, SynthConfig, synth_slide
from .denoiser import Denoiser
from .errors import ContractError
from .flow import FlowConfig, sample
from .priors import sample_prior

log = logging.getLogger(__name__)


# -- invariance -------------------------------------------------------------------------


def random_e2(rng: np.random.Generator, scale: float = 100.0):
    """Random rotation, optional reflection and translation as ``(A, b)``."""
    a = rng.uniform(0.0, 2.0 * np.pi)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    if rng.random() < 0.5:
        rot = rot @ np.diag([1.0, -1.0])
    return rot, rng.normal(scale=scale, size=2)


def apply_transform(coords, a, b) -> np.ndarray:
    return np.asarray(coords, dtype=np.float64) @ np.asarray(a).T + np.asarray(b)


@dataclass
class InvarianceReport:
    tol: float
    diffs: list[float] = field(default_factory=list)
    skipped: bool = False
    reason: str = ""

    @property
    def max_diff(self) -> float:
        return max(self.diffs, default=0.0)

    @property
    def passed(self) -> bool:
        return not self.skipped and self.max_diff < self.tol


def _degenerate_fraction(model: Denoiser, coords) -> float:
    frames = model.geometry(coords).frames
    return float(np.mean(frames.degenerate | frames.tie))


def transform_difference(model: Denoiser, slide: SlideData, a, b, cfg: FlowConfig, seed: int = 0) -> float:
    """Max abs change of sampled output when coordinates are mapped by ``x -> A x + b``."""
    y0 = sample_prior(cfg.prior, slide.n_spots, model.config.n_genes, np.random.default_rng(seed))
    ref = sample(slide.coords, slide.features, model, cfg, np.random.default_rng(seed), y0=y0)
    moved = sample(apply_transform(slide.coords, a, b), slide.features, model, cfg, np.random.default_rng(seed), y0=y0)
    return float(np.max(np.abs(moved - ref)))


def invariance_suite(
    model: Denoiser,
    slide: SlideData,
    transforms: int = 20,
    tol: float = 1e-6,
    cfg: FlowConfig | None = None,
    seed: int = 0,
) -> InvarianceReport:
    """Rerun sampling under random E(2) maps with a shared prior draw and seed."""
    cfg = cfg or FlowConfig()
    report = InvarianceReport(tol)
    frac = _degenerate_fraction(model, slide.coords)
    if frac > 0:
        report.skipped = True
        report.reason = f"{frac:.1%} of spots have degenerate or tied frames"
        log.warning("invariance suite skipped: %s", report.reason)
        return report
    rng = np.random.default_rng(seed)
    for _ in range(transforms):
        a, b = random_e2(rng)
        report.diffs.append(transform_difference(model, slide, a, b, cfg, seed))
    return report


# -- scaling benchmark ------------------------------------------------------------------


@dataclass(frozen=True)
class BenchRow:
    n_spots: int
    median_seconds: float
    peak_bytes: int
    deterministic: bool = True


def bench_slide(model: Denoiser, n_spots: int, seed: int = 0) -> SlideData:
    cfg = SynthConfig(n_spots=n_spots, n_genes=model.config.n_genes, d_in=model.config.d_in, rho=0.0, seed=seed)
    return synth_slide(cfg)


def scaling_benchmark(
    model: Denoiser,
    spot_counts: Sequence[int],
    repeats: int = 3,
    cfg: FlowConfig | None = None,
    seed: int = 0,
    threads: int = 1,
    measure_memory: bool = True,
) -> list[BenchRow]:
    """Median wall-clock and traced peak memory of sampling per slide size.

    Timing and memory come from separate runs because tracing allocations
    slows the timed code down.
    """
    counts = list(spot_counts)
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise ContractError("spot_counts must be strictly ascending")
    if repeats < 1:
        raise ContractError("repeats must be >= 1")
    cfg = cfg or FlowConfig()
    rows = []
    with threadpool_limits(limits=threads):
        for n in counts:
            slide = bench_slide(model, n, seed)
            outputs, times = [], []
            for _ in range(repeats):
                start = time.perf_counter()
                outputs.append(sample(slide.coords, slide.features, model, cfg, np.random.default_rng(seed)))
                times.append(time.perf_counter() - start)
            same = all(np.array_equal(outputs[0], o) for o in outputs[1:])
            peak = 0
            if measure_memory:
                tracemalloc.start()
                try:
                    sample(slide.coords, slide.features, model, cfg, np.random.default_rng(seed))
                    peak = tracemalloc.get_traced_memory()[1]
                finally:
                    tracemalloc.stop()
            row = BenchRow(n, statistics.median(times), peak, same)
            log.info("bench n=%d median %.3fs peak %d bytes", n, row.median_seconds, row.peak_bytes)
            rows.append(row)
    return rows


def write_bench_csv(rows: Sequence[BenchRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_spots", "median_seconds", "peak_bytes"])
        for r in rows:
            w.writerow([r.n_spots, f"{r.median_seconds:.6f}", r.peak_bytes])
    return path


def _panel(x0, title, xs, ys, unit, width=300, height=220, pad=40) -> list[str]:
    lx, ly = np.log2(xs), np.log2(np.maximum(ys, 1e-12))
    span_x = max(lx.max() - lx.min(), 1e-9)
    span_y = max(ly.max() - ly.min(), 1e-9)
    px = x0 + pad + (lx - lx.min()) / span_x * (width - 2 * pad)
    py = height - pad - (ly - ly.min()) / span_y * (height - 2 * pad)
    pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(px, py))
    out = [
        f'<text x="{x0 + width / 2:.0f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{x0 + pad}" y1="{height - pad}" x2="{x0 + width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{x0 + pad}" y1="{pad}" x2="{x0 + pad}" y2="{height - pad}" stroke="black"/>',
        f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{pts}"/>',
    ]
    for a, b, n, v in zip(px, py, xs, ys):
        out.append(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3" fill="steelblue"/>')
        out.append(f'<text x="{a:.1f}" y="{height - pad + 14}" text-anchor="middle" font-size="9">{int(n)}</text>')
        out.append(f'<text x="{a + 4:.1f}" y="{b - 5:.1f}" font-size="9">{v:.3g}{escape(unit)}</text>')
    return out


def write_bench_svg(rows: Sequence[BenchRow], path) -> Path:
    """Log-log plots of time and peak memory against slide size."""
    xs = np.array([r.n_spots for r in rows], dtype=float)
    parts = ['<svg xmlns="http://www.w3.org/2000/svg" width="600" height="220">']
    if len(rows):
        parts += _panel(0, "median seconds", xs, np.array([r.median_seconds for r in rows]), "s")
        parts += _panel(300, "peak traced memory", xs, np.array([r.peak_bytes for r in rows], dtype=float) / 2**20, "MiB")
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path


__all__ = [
    "BenchRow",
    "InvarianceReport",
    "apply_transform",
    "bench_slide",
    "invariance_suite",
    "random_e2",
    "scaling_benchmark",
    "transform_difference",
    "write_bench_csv",
    "write_bench_svg",
]
