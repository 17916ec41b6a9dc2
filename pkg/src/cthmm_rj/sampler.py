"""Metropolis-within-Gibbs updates at a fixed number of hidden states."""
from __future__ import annotations

import numpy as np

from .ctmc import GeneratorMatrix, endpoint_conditioned_statistics
from .data import ObservationSet
from .emission import EmissionFamily, logpdf_from_eta
from .errors import StaleCacheError
from .hmm import SmoothedQuantities, forward_backward
from .model import ModelState, PriorConfig, sample_theta_from_prior


class SamplerState:
    """Current parameters plus the per-visit quantities derived from them.

    ``indicators[i]`` is the sampled hidden state at flattened visit ``i``.
    ``smoothed`` is valid only while ``smoothed_version == version``.
    """

    def __init__(self, obs: ObservationSet, theta: ModelState, step_sd: float = 0.1):
        self.obs = obs
        self.theta = theta
        self.indicators = np.zeros(obs.n_visits, dtype=np.int64)
        self.step_sd = float(step_sd)
        self.adapting = False
        self.sweeps = 0
        self.mh_proposed = 0
        self.mh_accepted = 0
        self.last_mh = (0, 0)
        self.version = 0
        self.smoothed: SmoothedQuantities | None = None
        self.smoothed_version = -1
        self.loglik = np.nan

    @property
    def K(self) -> int:
        return self.theta.K

    def set_theta(self, theta: ModelState) -> None:
        self.theta = theta
        self.version += 1

    def refresh(self) -> SmoothedQuantities:
        self.smoothed = forward_backward(self.obs, self.theta)
        self.smoothed_version = self.version
        self.loglik = self.smoothed.total_loglik
        return self.smoothed

    def require_smoothed(self) -> SmoothedQuantities:
        if self.smoothed is None or self.smoothed_version != self.version:
            raise StaleCacheError("smoothed quantities are stale; call refresh() after changing theta")
        return self.smoothed

    @property
    def acceptance_rate(self) -> float:
        return self.mh_accepted / self.mh_proposed if self.mh_proposed else np.nan


def initial_theta(obs: ObservationSet, K: int, fam: EmissionFamily, rng=None) -> ModelState:
    """Data-driven starting point: intercepts spread over outcome quantiles, slopes 0."""
    D = obs.n_coefficients
    o = obs.outcomes
    if o.size:
        levels = np.quantile(o, (np.arange(K) + 0.5) / K)
    else:
        levels = np.zeros(K)
    if fam.is_poisson:
        levels = np.log(np.maximum(levels, 0.5))
    B = np.zeros((D, K))
    B[0] = levels
    Q = np.full((K, K), 0.5 / max(K - 1, 1))
    return ModelState(np.full(K, 1.0 / K), Q, B, fam)


def categorical_draws(probs: np.ndarray, rng) -> np.ndarray:
    """One categorical draw per row of ``probs`` (rows need not be normalized)."""
    c = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * c[:, -1]
    idx = np.sum(c <= u[:, None], axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def update_state_indicators(state: SamplerState, rng) -> np.ndarray:
    sq = state.require_smoothed()
    if state.K == 1:
        state.indicators = np.zeros(state.obs.n_visits, dtype=np.int64)
    else:
        state.indicators = categorical_draws(sq.marginals, rng).astype(np.int64)
    return state.indicators


def update_emission_params(state: SamplerState, prior: PriorConfig, rng) -> np.ndarray:
    """Random-walk MH on each coefficient given the current indicators.

    Coefficient rows are visited in turn; within a row the K entries are
    independent given the indicators and are updated together.
    """
    obs = state.obs
    theta = state.theta
    K = theta.K
    B = theta.B.copy()
    fam = theta.fam
    sd = state.step_sd
    S = state.indicators
    accepted = 0
    eta = np.einsum("nd,dn->n", obs.X, B[:, S]) if S.size else np.empty(0)
    lp = logpdf_from_eta(obs.outcomes, eta, fam)
    for d in range(B.shape[0]):
        step = sd * rng.standard_normal(K)
        eta_new = eta + obs.X[:, d] * step[S]
        lp_new = logpdf_from_eta(obs.outcomes, eta_new, fam)
        diff = np.bincount(S, weights=lp_new - lp, minlength=K)
        cp = prior.coefficient_prior(d)
        new = B[d] + step
        log_ratio = diff + cp.logpdf(new) - cp.logpdf(B[d])
        acc = np.log(rng.random(K)) < log_ratio
        if np.any(acc):
            B[d, acc] = new[acc]
            moved = acc[S]
            eta[moved] = eta_new[moved]
            lp[moved] = lp_new[moved]
            accepted += int(acc.sum())
    proposed = B.size
    if prior.estimate_dispersion and not fam.is_poisson:
        fam = _update_dispersion(obs, S, B, fam, sd, rng)
    state.mh_proposed += proposed
    state.mh_accepted += accepted
    state.last_mh = (accepted, proposed)
    state.set_theta(ModelState(theta.pi, theta.Q, B, fam))
    return B


def _update_dispersion(obs, indicators, B, fam, sd, rng) -> EmissionFamily:
    # flat prior on sigma > 0; random walk on log sigma
    eta = np.einsum("nd,dn->n", obs.X, B[:, indicators])
    sigma = fam.dispersion
    new = sigma * np.exp(sd * rng.standard_normal())
    ll = np.sum(logpdf_from_eta(obs.outcomes, eta, fam))
    ll_new = np.sum(logpdf_from_eta(obs.outcomes, eta, fam.with_dispersion(new)))
    if np.log(rng.random()) < ll_new - ll + np.log(new) - np.log(sigma):
        return fam.with_dispersion(new)
    return fam


def update_initial_distribution(state: SamplerState, prior: PriorConfig, rng) -> np.ndarray:
    theta = state.theta
    K = theta.K
    if K == 1:
        pi = np.ones(1)
    else:
        counts = np.bincount(state.indicators[state.obs.first], minlength=K)
        pi = rng.dirichlet(counts + prior.dirichlet_alpha)
        pi = pi / pi.sum()
    state.set_theta(ModelState(pi, theta.Q, theta.B, theta.fam))
    return pi


def draw_generator(N, R, prior: PriorConfig, rng) -> GeneratorMatrix:
    """``q[l, m] ~ Gamma(N[l, m] + a, rate = R[l] + b)`` off the diagonal."""
    N = np.asarray(N, dtype=float)
    R = np.asarray(R, dtype=float)
    K = N.shape[0]
    shape = N + prior.q_shape
    rate = R[:, None] + prior.q_rate
    q = rng.gamma(shape, 1.0 / rate)
    q[np.eye(K, dtype=bool)] = 0.0
    return GeneratorMatrix(q)


def sample_endpoint_pairs(pairwise: np.ndarray, rng):
    """Draw ``(start, end)`` states for each interval from its pairwise posterior."""
    n, K, _ = pairwise.shape
    flat = categorical_draws(pairwise.reshape(n, K * K), rng)
    return flat // K, flat % K


def update_generator(state: SamplerState, prior: PriorConfig, rng) -> GeneratorMatrix:
    sq = state.require_smoothed()
    obs = state.obs
    theta = state.theta
    K = theta.K
    if K == 1:
        return theta.Q
    ends = obs.interval_ends
    starts, finals = sample_endpoint_pairs(sq.pairwise[ends], rng)
    stats = endpoint_conditioned_statistics(theta.Q, starts, finals, obs.gaps[ends], rng)
    Q = draw_generator(stats.jump_counts, stats.occupancy, prior, rng)
    state.set_theta(ModelState(theta.pi, Q, theta.B, theta.fam))
    return Q


def _adapt_step(state: SamplerState, prior: PriorConfig) -> None:
    accepted, proposed = state.last_mh
    if not proposed:
        return
    gain = 1.0 / np.sqrt(state.sweeps + 1.0)
    state.step_sd = float(np.clip(state.step_sd * np.exp(gain * (accepted / proposed - prior.adapt_target)), 1e-4, 10.0))


def gibbs_sweep(state: SamplerState, prior: PriorConfig, rng) -> SamplerState:
    """Indicators, coefficients, initial law, generator; then re-smooth.

    Without observations the full conditional of the parameters is the prior,
    which is sampled directly (coefficient rows with flat priors are kept).
    """
    if state.obs.n_subjects == 0:
        th = state.theta
        state.set_theta(sample_theta_from_prior(th.K, th.D, th.fam, prior, rng, fallback_B=th.B))
        state.refresh()
        state.sweeps += 1
        return state
    if state.smoothed_version != state.version:
        state.refresh()
    update_state_indicators(state, rng)
    update_emission_params(state, prior, rng)
    update_initial_distribution(state, prior, rng)
    state.refresh()
    update_generator(state, prior, rng)
    state.refresh()
    if state.adapting:
        _adapt_step(state, prior)
    state.sweeps += 1
    return state
