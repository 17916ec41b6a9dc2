"""Model parameters and prior configuration."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache

import numpy as np
from scipy import stats
from scipy.special import gammaln, xlogy

from . import _kernels
from .ctmc import GeneratorMatrix, as_generator
from .emission import EmissionFamily
from .errors import NumericDomainError, StructuralError

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class CoefficientPrior:
    """Prior on one GLM coefficient.

    ``flat`` is the improper uniform prior (log-density 0), ``normal`` is
    Normal(loc, scale) and ``gamma_mean`` puts Gamma(shape, rate) on
    ``exp(beta)``, i.e. on a Poisson mean.
    """

    kind: str = "flat"
    loc: float = 0.0
    scale: float = 1.0
    shape: float = 1.0
    rate: float = 1.0

    def __post_init__(self):
        if self.kind not in ("flat", "normal", "gamma_mean"):
            raise ValueError(f"unknown coefficient prior {self.kind!r}")

    @property
    def proper(self) -> bool:
        return self.kind != "flat"

    def logpdf(self, beta):
        beta = np.asarray(beta, dtype=float)
        if self.kind == "flat":
            return np.zeros_like(beta)
        if self.kind == "normal":
            z = (beta - self.loc) / self.scale
            return -0.5 * z * z - np.log(self.scale) - _HALF_LOG_2PI
        return self.shape * np.log(self.rate) - gammaln(self.shape) + self.shape * beta - self.rate * np.exp(beta)

    def sample(self, rng, size=None):
        if self.kind == "normal":
            return rng.normal(self.loc, self.scale, size)
        if self.kind == "gamma_mean":
            return np.log(rng.gamma(self.shape, 1.0 / self.rate, size))
        raise NumericDomainError("cannot sample from a flat coefficient prior")


@lru_cache(maxsize=64)
def _truncated_poisson_table(rate: float, k_max: int) -> np.ndarray:
    logp = stats.poisson.logpmf(np.arange(1, k_max + 1), rate)
    return logp - np.logaddexp.reduce(logp)


def truncated_poisson_logpmf(k, rate: float, k_max: int) -> float:
    """Log mass of ``Poisson(rate)`` truncated to ``1..k_max``."""
    if not 1 <= k <= k_max:
        return -np.inf
    return float(_truncated_poisson_table(float(rate), int(k_max))[k - 1])


def truncated_poisson_pmf(rate: float, k_max: int) -> np.ndarray:
    p = stats.poisson.pmf(np.arange(1, k_max + 1), rate)
    return p / p.sum()


@dataclass
class PriorConfig:
    """Priors and tuning constants shared by all samplers."""

    q_shape: float = 1.0
    q_rate: float = 2.0
    dirichlet_alpha: float = 1.0
    intercept_prior: CoefficientPrior = field(default_factory=CoefficientPrior)
    slope_prior: CoefficientPrior = field(default_factory=CoefficientPrior)
    mh_step_sd: float = 0.1
    adapt_target: float = 0.23
    estimate_dispersion: bool = False
    k_prior_rate: float = 3.5
    k_max: int = 15
    split_proposal_sd: float = 0.5
    slope_split_sd: float = 0.1
    row_split_concentration: float = 10.0
    col_split_concentration: float | None = None
    move_prob_split: float = 0.5
    birth_rate: float = 1.0
    bd_time: float = 1.0
    bd_log_rate_cap: float = 700.0
    m_prior_rate: float = 3.0
    m_max: int = 10
    cluster_combine_prob: float = 0.7
    weight_dirichlet: float = 1.0
    cluster_split_concentration: float = 20.0

    def __post_init__(self):
        if isinstance(self.intercept_prior, dict):
            self.intercept_prior = CoefficientPrior(**self.intercept_prior)
        if isinstance(self.slope_prior, dict):
            self.slope_prior = CoefficientPrior(**self.slope_prior)
        for name in ("q_shape", "q_rate", "dirichlet_alpha", "mh_step_sd", "k_prior_rate", "split_proposal_sd",
                     "slope_split_sd", "row_split_concentration", "birth_rate", "bd_time", "m_prior_rate",
                     "weight_dirichlet", "cluster_split_concentration"):
            if not getattr(self, name) > 0:
                raise NumericDomainError(f"{name} must be positive")
        for name in ("move_prob_split", "cluster_combine_prob", "adapt_target"):
            if not 0 < getattr(self, name) < 1:
                raise NumericDomainError(f"{name} must lie in (0, 1)")
        if self.col_split_concentration is not None and not self.col_split_concentration > 0:
            raise NumericDomainError("col_split_concentration must be positive or None")
        if self.k_max < 1 or self.m_max < 1:
            raise NumericDomainError("k_max and m_max must be at least 1")

    def split_prob(self, K: int) -> float:
        """``b_K``: probability of proposing a split with ``K`` states."""
        if K >= self.k_max:
            return 0.0
        if K <= 1:
            return 1.0
        return self.move_prob_split

    def cluster_split_prob(self, M: int) -> float:
        if M >= self.m_max:
            return 0.0
        if M <= 1:
            return 1.0
        return 1.0 - self.cluster_combine_prob

    def log_prior_k(self, K: int) -> float:
        return truncated_poisson_logpmf(K, self.k_prior_rate, self.k_max)

    def log_prior_m(self, M: int) -> float:
        return truncated_poisson_logpmf(M, self.m_prior_rate, self.m_max)

    def log_q_density(self, q):
        q = np.asarray(q, dtype=float)
        a, b = self.q_shape, self.q_rate
        return a * np.log(b) - gammaln(a) + xlogy(a - 1.0, q) - b * q

    def coefficient_prior(self, row: int) -> CoefficientPrior:
        return self.intercept_prior if row == 0 else self.slope_prior

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise StructuralError(f"unknown prior fields {sorted(unknown)}")
        return cls(**d)


class ModelState:
    """One CTHMM parameter set: initial law ``pi``, generator ``Q`` and coefficients ``B`` (D x K)."""

    def __init__(self, pi, Q, B, fam: EmissionFamily):
        self.pi = np.asarray(pi, dtype=float)
        self.Q = as_generator(Q)
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.fam = fam
        self.validate()

    @property
    def K(self) -> int:
        return self.pi.size

    @property
    def D(self) -> int:
        return self.B.shape[0]

    def validate(self):
        K = self.pi.size
        if K < 1:
            raise StructuralError("at least one state is required")
        if self.Q.dim != K or self.B.shape[1] != K:
            raise StructuralError(f"dimension mismatch: pi has {K} states, Q {self.Q.dim}, B {self.B.shape[1]}")
        if np.any(self.pi < 0) or abs(self.pi.sum() - 1.0) > 1e-9:
            raise NumericDomainError(f"initial distribution is not a probability vector: {self.pi}")
        if not np.all(np.isfinite(self.B)):
            raise NumericDomainError("coefficients must be finite")

    @classmethod
    def _unchecked(cls, pi, Q, B, fam: EmissionFamily) -> "ModelState":
        """Build from parts already known to satisfy the invariants."""
        m = cls.__new__(cls)
        m.pi, m.Q, m.B, m.fam = pi, Q, B, fam
        return m

    def copy(self) -> "ModelState":
        return ModelState._unchecked(self.pi.copy(), GeneratorMatrix._unchecked(self.Q.rates), self.B.copy(), self.fam)

    def permuted(self, order) -> "ModelState":
        """Relabel states so that new state ``i`` is old state ``order[i]``."""
        order = np.asarray(order)
        return ModelState._unchecked(self.pi[order], GeneratorMatrix._unchecked(self.Q.rates[np.ix_(order, order)]),
                                     self.B[:, order], self.fam)

    def sorted_by_intercept(self) -> "ModelState":
        return self.permuted(np.argsort(self.B[0], kind="stable"))

    def to_dict(self):
        return {
            "K": self.K,
            "pi": self.pi.tolist(),
            "Q": self.Q.rates.tolist(),
            "B": self.B.tolist(),
            "family": self.fam.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["pi"], d["Q"], d["B"], EmissionFamily(**d["family"]))

    def __repr__(self):
        return f"ModelState(K={self.K}, pi={np.round(self.pi, 4).tolist()}, B={np.round(self.B, 4).tolist()})"


_PRIOR_KINDS = {"flat": 0, "normal": 1, "gamma_mean": 2}


@lru_cache(maxsize=64)
def _coefficient_tables(intercept: CoefficientPrior, slope: CoefficientPrior, D: int):
    rows = [intercept] + [slope] * (D - 1)
    return (np.array([_PRIOR_KINDS[c.kind] for c in rows], dtype=np.int64),
            np.array([c.loc for c in rows], dtype=float), np.array([c.scale for c in rows], dtype=float),
            np.array([c.shape for c in rows], dtype=float), np.array([c.rate for c in rows], dtype=float))


def log_prior_theta(theta: ModelState, prior: PriorConfig) -> float:
    """Log density of ``p0(Theta | K)``; flat coefficient priors contribute 0."""
    tables = _coefficient_tables(prior.intercept_prior, prior.slope_prior, theta.D)
    return float(_kernels.log_prior_params(
        theta.pi, theta.Q.rates, theta.B, float(prior.q_shape), float(prior.q_rate), float(prior.dirichlet_alpha),
        *tables))


def sample_theta_from_prior(K: int, D: int, fam: EmissionFamily, prior: PriorConfig, rng,
                            fallback_B=None) -> ModelState:
    """Draw a parameter set from the priors.

    Rows of ``B`` with flat priors are copied from ``fallback_B`` (or set to
    0) since an improper prior cannot be sampled.
    """
    Q = rng.gamma(prior.q_shape, 1.0 / prior.q_rate, size=(K, K)) if K > 1 else np.zeros((1, 1))
    pi = rng.dirichlet(np.full(K, prior.dirichlet_alpha)) if K > 1 else np.ones(1)
    B = np.zeros((D, K))
    for d in range(D):
        cp = prior.coefficient_prior(d)
        if cp.proper:
            B[d] = cp.sample(rng, K)
        elif fallback_B is not None:
            B[d] = np.asarray(fallback_B)[d, :K] if np.ndim(fallback_B) == 2 else fallback_B[d]
    if not np.all(np.isfinite(B)):
        raise NumericDomainError("coefficients must be finite")
    return ModelState._unchecked(pi, GeneratorMatrix._unchecked(Q), B, fam)
