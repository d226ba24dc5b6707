"""Slides on disk and in memory, preprocessing, region sampling and synthesis.

The SLB1 container is little-endian::

    b"SLB1" | u64 N | u64 G | u64 d_in | u32 flags
    | f64 coords[N*2] | f64 features[N*d_in] | f64 expression[N*G]
    | G x (u32 len, utf-8 gene name) | u32 len, utf-8 slide id
    | u64 checksum (blake2b-64 over every preceding byte)
"""

from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    ContractError,
    DataError,
    InvariantError,
    TruncatedFileError,
)
from .priors import ZinbParams
from .spatial import knn_graph

MAGIC = b"SLB1"
_HEADER = struct.Struct("<4sQQQI")
FLAG_NORMALIZED = 1


def checksum64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


@dataclass
class SlideData:
    id: str
    coords: np.ndarray
    features: np.ndarray
    expression: np.ndarray
    gene_names: list[str]
    normalized: bool = False

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.expression = np.ascontiguousarray(self.expression, dtype=np.float64)
        self.gene_names = [str(g) for g in self.gene_names]
        self.validate()

    def validate(self) -> None:
        n = self.coords.shape[0]
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise InvariantError(f"coords must be (N, 2), got {self.coords.shape}")
        if n < 2:
            raise InvariantError(f"a slide needs at least 2 spots, got {n}")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise InvariantError("features row count differs from coords")
        if self.expression.ndim != 2 or self.expression.shape[0] != n:
            raise InvariantError("expression row count differs from coords")
        if len(self.gene_names) != self.expression.shape[1]:
            raise InvariantError("gene_names length differs from expression columns")
        for name, arr in (("coords", self.coords), ("features", self.features), ("expression", self.expression)):
            if not np.all(np.isfinite(arr)):
                raise InvariantError(f"{name} contains non-finite values")
        if not self.normalized and np.any(self.expression < 0):
            raise InvariantError("raw expression must be non-negative")

    @property
    def n_spots(self) -> int:
        return self.coords.shape[0]

    @property
    def n_genes(self) -> int:
        return self.expression.shape[1]

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    def subset(self, index: np.ndarray, suffix: str = "") -> "SlideData":
        return SlideData(
            self.id + suffix,
            self.coords[index],
            self.features[index],
            self.expression[index],
            list(self.gene_names),
            self.normalized,
        )

    def log1p(self) -> "SlideData":
        """A log1p-normalised copy; already-normalised slides are returned as is."""
        if self.normalized:
            return self
        return replace(self, expression=log1p_normalize(self.expression), normalized=True)

    def with_expression(self, expression: np.ndarray, normalized: bool | None = None) -> "SlideData":
        return replace(
            self,
            expression=expression,
            normalized=self.normalized if normalized is None else normalized,
        )

    def equals(self, other: "SlideData") -> bool:
        return (
            self.id == other.id
            and self.normalized == other.normalized
            and self.gene_names == other.gene_names
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.expression, other.expression)
        )


# -- persistence ----------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def slide_to_bytes(slide: SlideData) -> bytes:
    flags = FLAG_NORMALIZED if slide.normalized else 0
    parts = [
        _HEADER.pack(MAGIC, slide.n_spots, slide.n_genes, slide.d_in, flags),
        slide.coords.astype("<f8").tobytes(),
        slide.features.astype("<f8").tobytes(),
        slide.expression.astype("<f8").tobytes(),
    ]
    parts += [_pack_str(g) for g in slide.gene_names]
    parts.append(_pack_str(slide.id))
    body = b"".join(parts)
    return body + struct.pack("<Q", checksum64(body))


def save_slide(slide: SlideData, path) -> Path:
    path = Path(path)
    path.write_bytes(slide_to_bytes(slide))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"file truncated: needed {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def array(self, rows: int, cols: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)

    def string(self) -> str:
        (n,) = struct.unpack("<I", self.take(4))
        return self.take(n).decode("utf-8")


def slide_from_bytes(data: bytes) -> SlideData:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data)
    _, n, g, d_in, flags = _HEADER.unpack(r.take(_HEADER.size))
    if n == 0:
        raise InvariantError("header declares zero spots")
    if n < 2:
        raise InvariantError(f"header declares {n} spot(s); at least 2 required")
    coords = r.array(n, 2)
    features = r.array(n, d_in)
    expression = r.array(n, g)
    genes = [r.string() for _ in range(g)]
    slide_id = r.string()
    body_end = r.pos
    (stored,) = struct.unpack("<Q", r.take(8))
    if r.pos != len(data):
        raise ChecksumError(f"{len(data) - r.pos} trailing bytes after checksum")
    if checksum64(data[:body_end]) != stored:
        raise ChecksumError("checksum mismatch")
    return SlideData(slide_id, coords, features, expression, genes, bool(flags & FLAG_NORMALIZED))


def load_slide(path) -> SlideData:
    return slide_from_bytes(Path(path).read_bytes())


def _fmt(v) -> str:
    return repr(float(v))


def export_csv(slide: SlideData, path) -> Path:
    """Write ``spot_id, x, y, <genes...>`` rows."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["spot_id", "x", "y", *slide.gene_names])
        for i in range(slide.n_spots):
            w.writerow([i, *map(_fmt, slide.coords[i]), *map(_fmt, slide.expression[i])])
    return path


# -- preprocessing ----------------------------------------------------------------

def log1p_normalize(expression) -> np.ndarray:
    x = np.asarray(expression, dtype=np.float64)
    if np.any(x < 0):
        raise ContractError("log1p_normalize expects non-negative counts")
    return np.log1p(x)


def select_hvg(expression, n: int = 50) -> np.ndarray:
    """Indices of the ``n`` columns with the largest sample variance.

    Pass log1p-normalised values. Ties go to the lower column index; the result
    is ordered from most to least variable.
    """
    x = np.asarray(expression, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError("expression must be 2-D")
    g = x.shape[1]
    if g < n:
        raise ContractError(f"cannot select {n} highly variable genes from {g}")
    var = x.var(axis=0, ddof=1) if x.shape[0] > 1 else np.zeros(g)
    order = np.lexsort((np.arange(g), -var))
    return order[:n]


# -- region sampling ----------------------------------------------------------------

def region_indices(coords, rng: np.random.Generator, k: int = 8, proportion: float | None = None):
    """Anchor spot plus its nearest neighbours; returns ``(indices, anchor)``.

    ``indices`` is sorted ascending so the subset keeps the slide's row order.
    """
    c = np.asarray(coords, dtype=np.float64)
    n = len(c)
    if n < 2:
        raise ContractError("region sampling needs at least 2 spots")
    p = rng.uniform(0.0, 1.0) if proportion is None else float(proportion)
    m = min(n, max(k + 1, math.ceil(p * n)))
    anchor = int(rng.integers(n))
    d = c - c[anchor]
    d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
    idx = np.arange(n)
    order = np.lexsort((idx, idx != anchor, d2))
    return np.sort(order[:m]), anchor


def sample_region(slide: SlideData, rng: np.random.Generator, k: int = 8, proportion: float | None = None) -> SlideData:
    index, _ = region_indices(slide.coords, rng, k, proportion)
    return slide.subset(index)


# -- synthesis ----------------------------------------------------------------

def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic slide with spatially coupled expression.

    Replicates that share ``law_seed`` share the feature-to-expression map and
    differ only in layout, features and noise (``seed``).
    """

    n_spots: int = 2000
    n_genes: int = 20
    d_in: int = 64
    layout: str = "grid"
    rho: float = 0.8
    snr: float = 16.0
    coupling_k: int = 8
    jitter: float = 0.3
    signal_scale: float = 3.0
    count_scale: float = 30.0
    # only phi and pi are used; the count mean comes from the field
    noise: ZinbParams = field(default_factory=lambda: ZinbParams(mu=1.0, phi=100.0, pi=0.001))
    seed: int = 0
    law_seed: int = 1234

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise ContractError(f"coupling rho must lie in [0, 1), got {self.rho}")
        if self.n_spots < 2 or self.n_genes < 1 or self.d_in < 1:
            raise ContractError("n_spots >= 2, n_genes >= 1 and d_in >= 1 are required")
        if self.layout not in ("grid", "uniform"):
            raise ContractError(f"layout must be 'grid' or 'uniform', got {self.layout!r}")
        if self.snr <= 0:
            raise ContractError("snr must be positive")


def synth_layout(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.n_spots
    side = int(math.ceil(math.sqrt(n)))
    if cfg.layout == "uniform":
        return rng.uniform(0.0, side, size=(n, 2))
    i = np.arange(n)
    base = np.stack([i % side, i // side], axis=1).astype(np.float64)
    return base + rng.uniform(-cfg.jitter, cfg.jitter, size=(n, 2))


def neighbor_mean_operator(coords, k: int):
    g = knn_graph(coords, k)
    return lambda y: y[g.neighbors].mean(axis=1)


def coupled_field(drive: np.ndarray, coords, rho: float, k: int, tol: float = 1e-10, max_iter: int = 10_000):
    """Fixed point of ``Y = (1 - rho) * drive + rho * mean_{j in N(i)} Y_j``.

    Returns ``(field, iterations)``.
    """
    if not 0.0 <= rho < 1.0:
        raise ContractError("rho must lie in [0, 1)")
    if rho == 0.0:
        return drive.copy(), 0
    nmean = neighbor_mean_operator(coords, k)
    y = drive.copy()
    for it in range(1, max_iter + 1):
        nxt = (1.0 - rho) * drive + rho * nmean(y)
        change = np.max(np.abs(nxt - y))
        y = nxt
        if change < tol:
            return y, it
    raise ContractError(f"coupled field did not converge in {max_iter} iterations")


def synth_law(cfg: SynthConfig):
    rng = np.random.default_rng(cfg.law_seed)
    weights = rng.normal(0.0, cfg.signal_scale / math.sqrt(cfg.d_in), size=(cfg.d_in, cfg.n_genes))
    bias = rng.normal(0.0, 0.5, size=cfg.n_genes)
    return weights, bias


def synth_slide(cfg: SynthConfig, return_field: bool = False):
    """Generate one slide; optionally also return the noiseless field."""
    rng = np.random.default_rng(cfg.seed)
    weights, bias = synth_law(cfg)
    coords = synth_layout(cfg, rng)
    clean = rng.standard_normal((cfg.n_spots, cfg.d_in))
    features = clean + rng.standard_normal(clean.shape) / math.sqrt(cfg.snr)
    drive = softplus(clean @ weights + bias)
    fld, _ = coupled_field(drive, coords, cfg.rho, cfg.coupling_k)

    mean = cfg.count_scale * fld
    phi = cfg.noise.phi
    inflate = rng.random(mean.shape) < cfg.noise.pi
    rate = rng.gamma(shape=phi, scale=mean / phi)
    counts = rng.poisson(rate).astype(np.float64)
    counts[inflate] = 0.0

    genes = [f"gene_{g:03d}" for g in range(cfg.n_genes)]
    slide = SlideData(f"synth_{cfg.seed}", coords, features, counts, genes, normalized=False)
    return (slide, fld) if return_field else slide


def replicate_configs(base: SynthConfig, n: int, first_seed: int | None = None) -> list[SynthConfig]:
    start = base.seed if first_seed is None else first_seed
    return [replace(base, seed=start + r) for r in range(n)]


def morans_i(values: np.ndarray, coords, k: int = 8) -> np.ndarray:
    """Per-column Moran's I with binary k-NN weights."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    g = knn_graph(coords, k)
    z = v - v.mean(axis=0)
    num = (z[:, None, :] * z[g.neighbors]).sum(axis=(0, 1))
    den = (z * z).sum(axis=0)
    n, w = len(v), g.neighbors.size
    return (n / w) * num / den


def check_gene_names(a: Sequence[str], b: Sequence[str]) -> None:
    if list(a) != list(b):
        diff = next((i for i, (x, y) in enumerate(zip(a, b)) if x != y), min(len(a), len(b)))
        raise DataError(f"gene names differ (first mismatch at column {diff})")
