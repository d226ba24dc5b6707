"""Prior distributions for the flow-matching source sample.

Three priors are supported: zero-inflated negative binomial counts, a
standard Gaussian and the all-zero point mass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import gammaln

from .errors import ContractError

DEFAULT_PI = 0.5
MU_GRID = (0.1, 0.2, 0.4)
PHI_GRID = (1.0, 2.0, 4.0)


@dataclass(frozen=True)
class ZinbParams:
    """Zero-inflated NB: ``pi`` point mass at zero, else NB(mean=mu, dispersion=phi)."""

    mu: float = 0.2
    phi: float = 2.0
    pi: float = DEFAULT_PI

    def __post_init__(self):
        if not (self.mu > 0 and self.phi > 0 and 0.0 <= self.pi <= 1.0):
            raise ContractError(
                f"invalid ZINB parameters mu={self.mu}, phi={self.phi}, pi={self.pi}"
            )

    @property
    def mean(self) -> float:
        return (1.0 - self.pi) * self.mu

    @property
    def variance(self) -> float:
        mu, phi, pi = self.mu, self.phi, self.pi
        return (1.0 - pi) * mu * (1.0 + mu / phi + pi * mu)


def reference_grid() -> list[ZinbParams]:
    return [ZinbParams(mu, phi, DEFAULT_PI) for phi in PHI_GRID for mu in MU_GRID]


@dataclass(frozen=True)
class Gaussian:
    mean: float = 0.0
    std: float = 1.0


@dataclass(frozen=True)
class Zero:
    pass


PriorKind = Union[ZinbParams, Gaussian, Zero]


def nb_logpmf(y, mu: float, phi: float) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return (
        gammaln(y + phi)
        - gammaln(phi)
        - gammaln(y + 1.0)
        + phi * (np.log(phi) - np.log(phi + mu))
        + y * (np.log(mu) - np.log(phi + mu))
    )


def zinb_pmf(y, p: ZinbParams):
    """Probability of count ``y`` (scalar or array) under ``p``."""
    y_arr = np.asarray(y)
    if np.any(y_arr < 0) or np.any(y_arr != np.floor(y_arr)):
        raise ContractError("zinb_pmf is defined on non-negative integers")
    nb = np.exp(nb_logpmf(y_arr, p.mu, p.phi))
    out = (1.0 - p.pi) * nb + np.where(y_arr == 0, p.pi, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def zinb_sample(n: int, p: ZinbParams, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` counts through the Gamma-Poisson representation of the NB."""
    if n < 1:
        raise ContractError("zinb_sample needs n >= 1")
    inflate = rng.random(n) < p.pi
    rate = rng.gamma(shape=p.phi, scale=p.mu / p.phi, size=n)
    counts = rng.poisson(rate)
    counts[inflate] = 0
    return counts


def sample_prior(kind: PriorKind, rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ContractError(f"prior shape must be positive, got {rows}x{cols}")
    if isinstance(kind, Zero):
        return np.zeros((rows, cols))
    if isinstance(kind, Gaussian):
        return kind.mean + kind.std * rng.standard_normal((rows, cols))
    if isinstance(kind, ZinbParams):
        return zinb_sample(rows * cols, kind, rng).reshape(rows, cols).astype(np.float64)
    raise ContractError(f"unknown prior kind {kind!r}")


def prior_from_name(name: str, mu: float = 0.2, phi: float = 2.0, pi: float = DEFAULT_PI) -> PriorKind:
    name = name.lower()
    if name == "zinb":
        return ZinbParams(mu, phi, pi)
    if name == "gaussian":
        return Gaussian()
    if name == "zero":
        return Zero()
    raise ContractError(f"unknown prior {name!r}; expected zinb, gaussian or zero")


def prior_name(kind: PriorKind) -> str:
    return {ZinbParams: "zinb", Gaussian: "gaussian", Zero: "zero"}[type(kind)]
