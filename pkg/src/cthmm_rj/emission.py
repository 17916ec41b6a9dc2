"""GLM emissions: Gaussian with identity link, Poisson with log link."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import gammaln

from .errors import NumericDomainError, StructuralError

_LOG_2PI = np.log(2.0 * np.pi)


class Family(str, Enum):
    GAUSSIAN = "gaussian"
    POISSON = "poisson"


@dataclass(frozen=True)
class EmissionFamily:
    kind: Family = Family.GAUSSIAN
    dispersion: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Family(self.kind))
        if self.kind is Family.POISSON:
            object.__setattr__(self, "dispersion", 1.0)
        elif not (np.isfinite(self.dispersion) and self.dispersion > 0):
            raise NumericDomainError(f"Gaussian dispersion must be positive, got {self.dispersion}")

    @property
    def is_poisson(self) -> bool:
        return self.kind is Family.POISSON

    def with_dispersion(self, sigma: float) -> "EmissionFamily":
        return EmissionFamily(self.kind, sigma)

    def to_dict(self):
        return {"kind": self.kind.value, "dispersion": self.dispersion}


def design_matrix(covariates, n: int | None = None) -> np.ndarray:
    """Prepend the intercept column to an ``(n, D-1)`` covariate array."""
    if covariates is None:
        return np.ones((n, 1))
    Z = np.asarray(covariates, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None] if n is not None and Z.size == n else Z[None, :]
    return np.hstack([np.ones((Z.shape[0], 1)), Z])


def linear_predictor(z, B) -> np.ndarray:
    """``eta[k] = B[0, k] + sum_d B[d+1, k] * z[d]`` for a single visit."""
    B = np.asarray(B, dtype=float)
    z = np.atleast_1d(np.asarray(z, dtype=float)) if z is not None else np.empty(0)
    if z.size != B.shape[0] - 1:
        raise StructuralError(f"expected {B.shape[0] - 1} covariates, got {z.size}")
    return B[0] + z @ B[1:]


def _check_counts(o):
    o = np.asarray(o, dtype=float)
    if np.any(o < 0) or np.any(o != np.round(o)):
        raise NumericDomainError("Poisson outcomes must be nonnegative integers")
    return o


def logpdf_from_eta(o, eta, fam: EmissionFamily):
    """Elementwise log-density given linear predictors (broadcasts)."""
    o = np.asarray(o, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if fam.is_poisson:
        return o * eta - np.exp(eta) - gammaln(o + 1.0)
    sigma = fam.dispersion
    r = (o - eta) / sigma
    return -0.5 * r * r - np.log(sigma) - 0.5 * _LOG_2PI


def emission_logpdf(o, z, state: int, B, fam: EmissionFamily) -> float:
    if fam.is_poisson:
        _check_counts(o)
    eta = linear_predictor(z, B)[int(state)]
    return float(logpdf_from_eta(o, eta, fam))


def emission_logpdf_matrix(outcomes, X, B, fam: EmissionFamily) -> np.ndarray:
    """``(n_visits, K)`` log-densities for a design matrix ``X`` (intercept included)."""
    return logpdf_from_eta(np.asarray(outcomes, dtype=float)[:, None], X @ np.asarray(B, dtype=float), fam)


def simulate_observation(z, state: int, B, fam: EmissionFamily, rng: np.random.Generator):
    eta = linear_predictor(z, B)[int(state)]
    if fam.is_poisson:
        return int(rng.poisson(np.exp(eta)))
    return float(rng.normal(eta, fam.dispersion))


def simulate_observations(X, states, B, fam: EmissionFamily, rng: np.random.Generator) -> np.ndarray:
    """Vectorized draws for many visits."""
    eta = np.einsum("nd,dn->n", X, np.asarray(B, dtype=float)[:, states])
    if fam.is_poisson:
        return rng.poisson(np.exp(eta)).astype(float)
    return rng.normal(eta, fam.dispersion)
