"""Moves that change the number of hidden states.

Split takes state ``m`` to a pair (A, B): A keeps index ``m`` and B is
appended. The construction is dimension-matched so that combine is its
exact inverse:

* column weights ``w_i ~ Beta(2, 2)`` split ``q[i, m]`` between A and B;
* ``u ~ Beta(2, 2)`` is A's share of the stationary mass of ``m``;
* row fractions ``v_j ~ Beta(kappa u, kappa (1-u))`` give
  ``q'[A, j] = q[m, j] v_j / u`` and ``q'[B, j] = q[m, j] (1-v_j) / (1-u)``;
* ``q'[A, B] ~ Gamma(a, b)`` and ``q'[B, A]`` is solved so that the
  stationary law of the pair is exactly ``(u s_m, (1-u) s_m)``;
* coefficients move by ``eps`` around the stationary-weighted mean, with
  ``eps_0 > 0`` so that B always has the larger intercept;
* ``pi`` splits by ``w ~ Beta(2, 2)``.

Combine merges rows with stationary weights, sums columns and ``pi``, and
averages coefficients with the same weights, which recovers every
auxiliary variable above.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln, gammaln, xlog1py, xlogy

from . import _kernels
from .ctmc import GeneratorMatrix, stationary_distribution
from .errors import LikelihoodImpossibleError, MoveUnavailableError, StructuralError
from .hmm import marginal_loglik
from .model import ModelState, PriorConfig, log_prior_theta

log = logging.getLogger(__name__)

_LOG6 = np.log(6.0)
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _log_beta22(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        return _LOG6 + np.log(x) + np.log1p(-x)


def _log_beta(x, a, b):
    # -inf at the boundary (a fraction rounded to 0 or 1)
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        return xlogy(a - 1.0, x) + xlog1py(b - 1.0, -x) - betaln(a, b)


def _log_normal(x, sd):
    x = np.asarray(x, dtype=float)
    return -0.5 * (x / sd) ** 2 - np.log(sd) - _HALF_LOG_2PI


def _log_gamma(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x


# ---------------------------------------------------------------- selection

def nearest_states(B) -> np.ndarray:
    """For every state, the closest other state in L1 distance between coefficient columns (ties to the smallest index)."""
    B = np.asarray(B, dtype=float)
    dist = np.abs(B[:, :, None] - B[:, None, :]).sum(axis=0)
    np.fill_diagonal(dist, np.inf)
    return np.argmin(dist, axis=1)


def nearest_state(B, k: int) -> int:
    B = np.asarray(B, dtype=float)
    dist = np.abs(B - B[:, [k]]).sum(axis=0)
    dist[k] = np.inf
    return int(np.argmin(dist))


def pair_multiplicity(B, i: int, j: int, nearest=None) -> int:
    """Number of ways the pair ``{i, j}`` can be chosen by :func:`select_combine_pair` (0, 1 or 2)."""
    if nearest is None:
        return int(nearest_state(B, i) == j) + int(nearest_state(B, j) == i)
    return int(nearest[i] == j) + int(nearest[j] == i)


def select_combine_pair(theta: ModelState, rng):
    if theta.K < 2:
        raise MoveUnavailableError("combine needs at least two states")
    k = int(rng.integers(theta.K))
    return k, nearest_state(theta.B, k)


def _roles(B, i: int, j: int):
    """Order a pair as (A, B): B has the larger intercept."""
    if B[0, i] < B[0, j] or (B[0, i] == B[0, j] and i < j):
        return i, j
    return j, i


# ---------------------------------------------------------------- algebra

@dataclass
class SplitAux:
    """Auxiliary draws of a split of state ``target``; arrays are ordered by the other states' indices."""

    target: int
    col_weights: np.ndarray
    row_fractions: np.ndarray
    occupancy_fraction: float
    new_rate: float
    pi_weight: float
    coef_shift: np.ndarray


@dataclass
class SplitProposal:
    theta: ModelState
    aux: SplitAux
    theta_new: ModelState | None
    pair: tuple
    log_jacobian: float = np.nan
    log_proposal: float = np.nan
    multiplicity: int = 0
    reason: str = ""

    @property
    def valid(self) -> bool:
        return self.theta_new is not None and not self.reason


@dataclass
class MoveOutcome:
    move: str
    accepted: bool
    log_acceptance: float
    theta: ModelState | None = None
    reason: str = ""
    details: dict = field(default_factory=dict)


def _col_weight_params(u, prior: PriorConfig):
    """Beta parameters for the column weights: Beta(2, 2), or centred on ``u`` when a concentration is set."""
    kc = prior.col_split_concentration
    if kc is None:
        return 2.0, 2.0
    return kc * u, kc * (1.0 - u)


def draw_split_aux(theta: ModelState, prior: PriorConfig, rng, target: int | None = None) -> SplitAux:
    K, D = theta.K, theta.D
    m = int(rng.integers(K)) if target is None else int(target)
    u = rng.beta(2.0, 2.0)
    kappa = prior.row_split_concentration
    ca, cb = _col_weight_params(u, prior)
    col = rng.beta(ca, cb, size=K - 1)
    rows = rng.beta(kappa * u, kappa * (1.0 - u), size=K - 1)
    a = rng.gamma(prior.q_shape, 1.0 / prior.q_rate)
    w = rng.beta(2.0, 2.0)
    eps = np.empty(D)
    eps[0] = abs(rng.normal(0.0, prior.split_proposal_sd))
    eps[1:] = rng.normal(0.0, prior.slope_split_sd, size=D - 1)
    return SplitAux(m, col, rows, float(u), float(a), float(w), eps)


def _reverse_rate(Q, s, m, others, u, a, col_A, row_A):
    """Rate ``q'[B, A]`` that makes ``(u s_m, (1-u) s_m)`` stationary for the pair."""
    rho = s[others] / s[m]
    return (u * (row_A.sum() + a) - rho @ col_A) / (1.0 - u)


def _reverse_rate_derivative(Q, s, m, others, u, a, c, col_A, row_A, row_B):
    """``dc/du`` with every other entry of the split generator held fixed."""
    K = Q.shape[0]
    if K == 1:
        return (a + c) / (1.0 - u)
    dQ = np.zeros((K, K))
    dQ[m, others] = row_A - row_B
    dQ[m, m] = -dQ[m, others].sum()
    A = Q.T.copy()
    rhs = -(s @ dQ)
    A[-1, :] = 1.0
    rhs[-1] = 0.0
    ds = np.linalg.solve(A, rhs)
    drho = (ds[others] * s[m] - s[others] * ds[m]) / s[m] ** 2
    return (row_A.sum() + a - drho @ col_A) / (1.0 - u) + c / (1.0 - u)


def _split_log_jacobian(theta: ModelState, aux: SplitAux, s):
    """``(log_jacobian, reason)`` of the split of ``theta`` by ``aux``; reason is empty when valid."""
    K, D = theta.K, theta.D
    m = aux.target
    Q = theta.Q.rates
    others = np.array([i for i in range(K) if i != m], dtype=int)
    u = aux.occupancy_fraction
    q_col = Q[others, m]
    q_row = Q[m, others]
    col_A = aux.col_weights * q_col
    row_A = q_row * aux.row_fractions / u
    row_B = q_row * (1.0 - aux.row_fractions) / (1.0 - u)
    a = aux.new_rate
    c = _reverse_rate(Q, s, m, others, u, a, col_A, row_A)
    if not c > 0.0:
        return np.nan, "reverse rate would be nonpositive"
    dcdu = _reverse_rate_derivative(Q, s, m, others, u, a, c, col_A, row_A, row_B)
    # zero rates give -inf, matching the rejected reverse merge
    with np.errstate(divide="ignore"):
        log_jac = (
            np.sum(np.log(q_col))
            + np.sum(np.log(q_row)) - (K - 1) * (np.log(u) + np.log1p(-u))
            - D * np.log(u)
            + np.log(theta.pi[m])
            + np.log(abs(dcdu))
        )
    return float(log_jac), ""


def split_map(theta: ModelState, aux: SplitAux, s=None):
    """Deterministic split. Returns ``(theta_new, log_jacobian)`` or ``(None, reason)``."""
    K, D = theta.K, theta.D
    m = aux.target
    Q = theta.Q.rates
    if s is None:
        s = stationary_distribution(theta.Q)
    log_jac, reason = _split_log_jacobian(theta, aux, s)
    if reason:
        return None, reason
    others = np.array([i for i in range(K) if i != m], dtype=int)
    u = aux.occupancy_fraction
    q_col = Q[others, m]
    q_row = Q[m, others]
    A, Bn = m, K
    Qn = np.zeros((K + 1, K + 1))
    Qn[np.ix_(others, others)] = Q[np.ix_(others, others)]
    Qn[others, A] = aux.col_weights * q_col
    Qn[others, Bn] = (1.0 - aux.col_weights) * q_col
    Qn[A, others] = q_row * aux.row_fractions / u
    Qn[Bn, others] = q_row * (1.0 - aux.row_fractions) / (1.0 - u)
    Qn[A, Bn] = aux.new_rate
    Qn[Bn, A] = _reverse_rate(Q, s, m, others, u, aux.new_rate, Qn[others, A], Qn[A, others])
    pi = np.empty(K + 1)
    pi[:K] = theta.pi
    pi[A] = aux.pi_weight * theta.pi[m]
    pi[Bn] = (1.0 - aux.pi_weight) * theta.pi[m]
    Bm = np.empty((D, K + 1))
    Bm[:, :K] = theta.B
    eps = aux.coef_shift
    Bm[:, Bn] = theta.B[:, m] + eps
    Bm[:, A] = theta.B[:, m] - (1.0 - u) / u * eps
    try:
        theta_new = ModelState(pi, GeneratorMatrix(Qn), Bm, theta.fam)
    except (ValueError, StructuralError) as exc:
        return None, str(exc)
    return theta_new, log_jac


def combine_map(theta: ModelState, i: int, j: int, prior: PriorConfig | None = None):
    """Merge states ``i`` and ``j`` (the merged state sits at A's index).

    Returns ``(theta_small, aux, (A, B), extras)`` where ``extras`` holds the
    merged stationary law and the reversing split's log Jacobian, log
    auxiliary density (needs ``prior``) and validity.
    """
    K1 = theta.K
    if K1 < 2:
        raise MoveUnavailableError("combine needs at least two states")
    if i == j:
        raise StructuralError("cannot combine a state with itself")
    A, Bn = _roles(theta.B, i, j)
    prior = prior or PriorConfig()
    col_conc = -1.0 if prior.col_split_concentration is None else float(prior.col_split_concentration)
    s_big = stationary_distribution(theta.Q)
    with np.errstate(invalid="ignore", divide="ignore"):
        (pi, Q, B, m, col_w, row_f, u, a, w, eps, s_small, log_jac, log_aux,
         valid) = _kernels.combine_states(theta.pi, theta.Q.offdiagonal(), theta.B, A, Bn, s_big,
                                          float(prior.row_split_concentration), col_conc, float(prior.q_shape),
                                          float(prior.q_rate), float(prior.split_proposal_sd),
                                          float(prior.slope_split_sd))
    small = ModelState._unchecked(pi, GeneratorMatrix._unchecked(Q), B, theta.fam)
    aux = SplitAux(int(m), col_w, row_f, float(u), float(a), float(w), eps)
    extras = {"stationary": s_small, "log_jacobian": float(log_jac), "log_aux": float(log_aux), "valid": bool(valid)}
    return small, aux, (A, Bn), extras


def log_aux_density(aux: SplitAux, prior: PriorConfig) -> float:
    u = aux.occupancy_fraction
    kappa = prior.row_split_concentration
    eps = aux.coef_shift
    if not eps[0] > 0:
        return -np.inf
    ca, cb = _col_weight_params(u, prior)
    lp = float(np.sum(_log_beta(aux.col_weights, ca, cb)))
    lp += float(np.sum(_log_beta(aux.row_fractions, kappa * u, kappa * (1.0 - u))))
    lp += float(_log_beta22(u))
    lp += float(_log_gamma(aux.new_rate, prior.q_shape, prior.q_rate))
    lp += float(_log_beta22(aux.pi_weight))
    lp += float(_log_normal(eps[0], prior.split_proposal_sd)) + np.log(2.0)
    lp += float(np.sum(_log_normal(eps[1:], prior.slope_split_sd)))
    return lp


def split_log_ratio(theta: ModelState, theta_new: ModelState, aux: SplitAux, log_jacobian: float,
                    multiplicity: int, prior: PriorConfig, loglik: float, loglik_new: float,
                    include_move_probs: bool = True, log_proposal: float | None = None) -> float:
    """Log acceptance ratio of a split (before truncation at 0).

    Combine uses the negated value of the same expression, so the two are
    exact reciprocals. ``include_move_probs=False`` drops ``log d - log b``
    (used for birth-death rates).
    """
    K = theta.K
    if multiplicity == 0:
        return -np.inf
    lr = (loglik_new + prior.log_prior_k(K + 1) + log_prior_theta(theta_new, prior)) - (
        loglik + prior.log_prior_k(K) + log_prior_theta(theta, prior)
    )
    if log_proposal is None:
        log_proposal = log_aux_density(aux, prior)
    lr += np.log(K) + np.log(multiplicity) - log_proposal + log_jacobian
    if include_move_probs:
        lr += np.log1p(-prior.split_prob(K + 1)) - np.log(prior.split_prob(K))
    return float(lr)


def propose_split(theta: ModelState, prior: PriorConfig, rng, aux: SplitAux | None = None) -> SplitProposal:
    if aux is None:
        aux = draw_split_aux(theta, prior, rng)
    theta_new, extra = split_map(theta, aux)
    if theta_new is None:
        return SplitProposal(theta, aux, None, (aux.target, theta.K), reason=extra)
    A, Bn = aux.target, theta.K
    mult = pair_multiplicity(theta_new.B, A, Bn)
    prop = SplitProposal(theta, aux, theta_new, (A, Bn), log_jacobian=extra,
                         log_proposal=log_aux_density(aux, prior), multiplicity=mult)
    if mult == 0:
        prop.reason = "new states are not nearest neighbours"
    return prop


def propose_combine(theta: ModelState, pair, nearest=None, prior: PriorConfig | None = None) -> SplitProposal:
    """Combine ``pair``; returned as the split proposal it reverses."""
    small, aux, (A, Bn), extras = combine_map(theta, *pair, prior=prior)
    # a merge that no split can reverse has zero reverse density and is never accepted
    log_jac = extras["log_jacobian"] if extras["valid"] else -np.inf
    return SplitProposal(small, aux, theta, (A, Bn), log_jacobian=log_jac,
                         log_proposal=extras["log_aux"] if extras["valid"] else np.nan,
                         multiplicity=pair_multiplicity(theta.B, A, Bn, nearest))


def combine_log_ratio(proposal: SplitProposal, prior: PriorConfig, loglik_small: float, loglik_big: float,
                      include_move_probs: bool = True) -> float:
    """Negated split ratio; ``-inf`` when the reversing split has zero density (e.g. a fraction rounds to 1)."""
    if proposal.log_jacobian == -np.inf:
        return -np.inf
    lp = None if np.isnan(proposal.log_proposal) else proposal.log_proposal
    lr = split_log_ratio(proposal.theta, proposal.theta_new, proposal.aux, proposal.log_jacobian,
                         proposal.multiplicity, prior, loglik_small, loglik_big, include_move_probs, lp)
    if not np.isfinite(lr):
        return -np.inf
    return -lr


def split_log_acceptance(proposal: SplitProposal, obs, prior: PriorConfig, loglik: float | None = None) -> float:
    if not proposal.valid:
        return -np.inf
    if loglik is None:
        loglik = marginal_loglik(obs, proposal.theta)
    loglik_new = _safe_loglik(obs, proposal.theta_new)
    if loglik_new == -np.inf:
        return -np.inf
    return min(0.0, split_log_ratio(proposal.theta, proposal.theta_new, proposal.aux, proposal.log_jacobian,
                                    proposal.multiplicity, prior, loglik, loglik_new))


def combine_log_acceptance(proposal: SplitProposal, obs, prior: PriorConfig, loglik: float | None = None) -> float:
    if loglik is None:
        loglik = marginal_loglik(obs, proposal.theta_new)
    loglik_small = _safe_loglik(obs, proposal.theta)
    if loglik_small == -np.inf:
        return -np.inf
    return min(0.0, combine_log_ratio(proposal, prior, loglik_small, loglik))


def _safe_loglik(obs, theta) -> float:
    try:
        return marginal_loglik(obs, theta)
    except LikelihoodImpossibleError as exc:
        log.debug("proposal has zero likelihood: %s", exc)
        return -np.inf


# ---------------------------------------------------------------- schedules

def rj_step(state, prior: PriorConfig, rng) -> MoveOutcome:
    """One split-or-combine proposal on a :class:`~cthmm_rj.sampler.SamplerState`."""
    theta = state.theta
    obs = state.obs
    if state.smoothed_version != state.version:
        state.refresh()
    loglik = state.loglik
    K = theta.K
    if K == 1 and prior.k_max == 1:
        return MoveOutcome("none", False, -np.inf, reason="state count is fixed at 1")
    if rng.random() < prior.split_prob(K):
        prop = propose_split(theta, prior, rng)
        if not prop.valid:
            return MoveOutcome("split", False, -np.inf, reason=prop.reason)
        ll_new = _safe_loglik(obs, prop.theta_new)
        lr = split_log_ratio(prop.theta, prop.theta_new, prop.aux, prop.log_jacobian, prop.multiplicity,
                             prior, loglik, ll_new) if ll_new > -np.inf else -np.inf
        candidate = prop.theta_new
        move = "split"
    else:
        pair = select_combine_pair(theta, rng)
        prop = propose_combine(theta, pair, prior=prior)
        ll_new = _safe_loglik(obs, prop.theta)
        lr = combine_log_ratio(prop, prior, ll_new, loglik) if ll_new > -np.inf else -np.inf
        candidate = prop.theta
        move = "combine"
    log_acc = min(0.0, lr) if np.isfinite(lr) or lr == -np.inf else -np.inf
    if np.log(rng.random()) < log_acc:
        state.set_theta(candidate)
        state.refresh()
        return MoveOutcome(move, True, log_acc, candidate)
    return MoveOutcome(move, False, log_acc)


def _death_log_rates(theta: ModelState, obs, prior: PriorConfig, loglik: float, lambda_b: float):
    """Per-state log death rates and the corresponding combine proposals."""
    K = theta.K
    rates = np.full(K, -np.inf)
    proposals = [None] * K
    cache = {}
    nearest = nearest_states(theta.B)
    for j in range(K):
        pair = tuple(sorted((j, int(nearest[j]))))
        if pair not in cache:
            prop = propose_combine(theta, pair, nearest, prior)
            ll_small = _safe_loglik(obs, prop.theta)
            lr = combine_log_ratio(prop, prior, ll_small, loglik, include_move_probs=False)
            cache[pair] = (prop, lr)
        prop, lr = cache[pair]
        with np.errstate(divide="ignore"):
            rate = np.log(lambda_b) - np.log(K) + lr
        if rate > prior.bd_log_rate_cap:
            log.warning("death rate exp(%.1f) clamped at exp(%.1f)", rate, prior.bd_log_rate_cap)
            rate = prior.bd_log_rate_cap
        rates[j] = rate
        proposals[j] = prop
    return rates, proposals


def bd_sweep(state, prior: PriorConfig, rng, t0: float | None = None, lambda_b: float | None = None):
    """Run the birth-death jump process for virtual time ``t0``.

    Births use the split construction and always succeed when the drawn
    configuration is valid; deaths merge a state with its nearest
    neighbour. Returns the list of events as :class:`MoveOutcome`.
    """
    t0 = prior.bd_time if t0 is None else t0
    lambda_b = prior.birth_rate if lambda_b is None else lambda_b
    obs = state.obs
    if state.smoothed_version != state.version:
        state.refresh()
    events = []
    t = 0.0
    while True:
        theta = state.theta
        K = theta.K
        birth = lambda_b if K < prior.k_max and lambda_b > 0 else 0.0
        if K >= 2:
            log_rates, proposals = _death_log_rates(theta, obs, prior, state.loglik, lambda_b)
            death_rates = np.exp(log_rates)
        else:
            death_rates, proposals = np.zeros(0), []
        total = birth + death_rates.sum()
        if total <= 0:
            break
        t += rng.exponential(1.0 / total)
        if t > t0:
            break
        if rng.random() * total < birth:
            prop = propose_split(theta, prior, rng)
            if not prop.valid:
                events.append(MoveOutcome("birth", False, -np.inf, reason=prop.reason))
                continue
            ll = _safe_loglik(obs, prop.theta_new)
            if ll == -np.inf:
                events.append(MoveOutcome("birth", False, -np.inf, reason="zero likelihood"))
                continue
            state.set_theta(prop.theta_new)
            state.refresh()
            events.append(MoveOutcome("birth", True, 0.0, prop.theta_new))
        else:
            j = int(np.searchsorted(np.cumsum(death_rates), rng.random() * death_rates.sum(), side="right"))
            j = min(j, K - 1)
            new = proposals[j].theta
            state.set_theta(new)
            state.refresh()
            events.append(MoveOutcome("death", True, 0.0, new, details={"state": j}))
    return events
