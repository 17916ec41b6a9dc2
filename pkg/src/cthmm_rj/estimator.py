"""Estimator interface over the samplers (fit / predict / get_params)."""
from __future__ import annotations

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .chain import SAMPLERS, k_posterior, run_chain
from .clustering import MixtureState, membership_log_posteriors, run_clustering
from .data import ObservationSet
from .emission import EmissionFamily
from .errors import StructuralError
from .hmm import forward_backward, marginal_loglik
from .model import ModelState, PriorConfig
from .summary import modal_value, theta_from_record


def check_observations(X, n_covariates: int | None = None) -> ObservationSet:
    """Accept an ObservationSet or a long-format frame with ``subject_id,time,outcome,z1..``."""
    if isinstance(X, ObservationSet):
        obs = X
    elif isinstance(X, pd.DataFrame):
        obs = ObservationSet.from_frame(X)
    else:
        raise TypeError(f"expected an ObservationSet or DataFrame, got {type(X).__name__}")
    if n_covariates is not None and obs.n_covariates != n_covariates:
        raise StructuralError(f"model was fitted with {n_covariates} covariates, data have {obs.n_covariates}")
    return obs


def check_generator(random_state) -> np.random.Generator:
    """``None``, an int seed, a SeedSequence or a Generator."""
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)


def check_prior(prior) -> PriorConfig:
    if prior is None:
        return PriorConfig()
    if isinstance(prior, PriorConfig):
        return prior
    if isinstance(prior, dict):
        return PriorConfig.from_dict(prior)
    raise TypeError(f"prior must be a PriorConfig, dict or None, got {type(prior).__name__}")


def posterior_mean_theta(records, K: int | None = None) -> ModelState:
    """Mean of the draws with ``K`` states (modal ``K`` by default), states sorted by intercept."""
    K = modal_value(records, "K") if K is None else K
    thetas = [theta_from_record(r["theta"]).sorted_by_intercept() for r in records if r["K"] == K and "theta" in r]
    if not thetas:
        raise ValueError(f"no parameter snapshots with K = {K}")
    pi = np.mean([t.pi for t in thetas], axis=0)
    Q = np.mean([t.Q.rates for t in thetas], axis=0)
    B = np.mean([t.B for t in thetas], axis=0)
    fam = thetas[0].fam
    if not fam.is_poisson:
        fam = fam.with_dispersion(float(np.mean([t.fam.dispersion for t in thetas])))
    return ModelState(pi / pi.sum(), Q, B, fam)


def _count_mass(records, key: str) -> dict:
    vals = np.array([r[key] for r in records])
    counts = np.bincount(vals)
    return {int(v): float(counts[v] / vals.size) for v in np.flatnonzero(counts)}


class CTHMMEstimator(BaseEstimator):
    """Posterior over the number of hidden states for one population.

    After ``fit``: ``records_`` (retained draws), ``posterior_k_`` (K -> mass),
    ``k_mode_`` and ``theta_`` (posterior mean at the modal K).
    """

    def __init__(self, family="gaussian", sigma=1.0, sampler="rj", n_iter=1000, burn_in=0, thin=1, prior=None,
                 k_init=1, random_state=None):
        self.family = family
        self.sigma = sigma
        self.sampler = sampler
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.thin = thin
        self.prior = prior
        self.k_init = k_init
        self.random_state = random_state

    def _validate_params(self):
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.n_iter <= self.burn_in:
            raise ValueError("n_iter must exceed burn_in")
        if self.thin < 1 or self.k_init < 1:
            raise ValueError("thin and k_init must be positive")

    def fit(self, X, y=None):
        self._validate_params()
        obs = check_observations(X)
        prior = check_prior(self.prior)
        fam = EmissionFamily(self.family, self.sigma)
        rng = check_generator(self.random_state)
        self.records_, state = run_chain(obs, fam, prior, self.n_iter, rng, sampler=self.sampler,
                                         burn_in=self.burn_in, thin=self.thin, k_init=self.k_init)
        self.posterior_k_ = k_posterior(self.records_)
        self.k_mode_ = modal_value(self.records_, "K")
        self.theta_ = posterior_mean_theta(self.records_, self.k_mode_)
        self.last_theta_ = state.theta
        self.n_covariates_ = obs.n_covariates
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Smoothed state probabilities per visit under ``theta_``, shape (n_visits, K)."""
        check_is_fitted(self, "theta_")
        return forward_backward(check_observations(X, self.n_covariates_), self.theta_).marginals

    def predict(self, X) -> np.ndarray:
        """Most probable hidden state per visit (0-based, ordered by intercept)."""
        return np.argmax(self.predict_proba(X), axis=1)

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "theta_")
        return marginal_loglik(check_observations(X, self.n_covariates_), self.theta_)


class CTHMMClusterer(BaseEstimator):
    """Posterior over the number of mixture components, each with its own state count.

    After ``fit``: ``records_``, ``posterior_m_`` (M -> mass),
    ``posterior_m_filled_`` (occupied components -> mass), ``m_mode_`` and
    ``mixture_`` (the final draw, used for prediction).
    """

    def __init__(self, family="gaussian", sigma=1.0, n_iter=1000, burn_in=0, thin=1, prior=None, m_init=1,
                 k_init=1, random_state=None):
        self.family = family
        self.sigma = sigma
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.thin = thin
        self.prior = prior
        self.m_init = m_init
        self.k_init = k_init
        self.random_state = random_state

    def _validate_params(self):
        if self.n_iter <= self.burn_in:
            raise ValueError("n_iter must exceed burn_in")
        if self.thin < 1 or self.m_init < 1 or self.k_init < 1:
            raise ValueError("thin, m_init and k_init must be positive")

    def fit(self, X, y=None):
        self._validate_params()
        obs = check_observations(X)
        prior = check_prior(self.prior)
        fam = EmissionFamily(self.family, self.sigma)
        rng = check_generator(self.random_state)
        self.records_, mix = run_clustering(obs, fam, prior, self.n_iter, rng, burn_in=self.burn_in, thin=self.thin,
                                            m_init=self.m_init, k_init=self.k_init, params=False)
        self.posterior_m_ = _count_mass(self.records_, "M")
        self.posterior_m_filled_ = _count_mass(self.records_, "M_filled")
        self.m_mode_ = modal_value(self.records_, "M")
        self.mixture_: MixtureState = mix
        self.labels_ = mix.memberships.copy()
        self.n_covariates_ = obs.n_covariates
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Component membership probabilities per subject, shape (n_subjects, M)."""
        check_is_fitted(self, "mixture_")
        return np.exp(membership_log_posteriors(check_observations(X, self.n_covariates_), self.mixture_))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)
