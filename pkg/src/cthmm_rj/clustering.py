"""Finite mixtures of CTHMMs with a varying number of components.

Each component is a full CTHMM with its own number of states. A sweep
updates each component's state count, proposes a component split or
combine, redraws memberships, adds or deletes an empty component, redraws
weights, and finally runs the fixed-K sweep of every component on its
assigned subjects.

Component split and combine act on components whose states are sorted by
intercept. A component with stationary law ``s`` and flows
``F[k, j] = s_k q[k, j]`` splits into children A and B with weights
``w`` and ``1 - w``:

* ``s_A ~ Dirichlet(kappa s)`` and ``s_B = (s - w s_A) / (1 - w)``;
* each free flow is split by ``v ~ Beta(kappa o_k, kappa (1 - o_k))`` with
  ``o_k = w s_A[k] / s_k``; the flows into state 0 are solved from flow
  balance so that ``s_A`` and ``s_B`` are exactly stationary;
* ``pi_A ~ Dirichlet(kappa pi)`` and ``pi_B = (pi - w pi_A) / (1 - w)``;
* coefficients move by ``eps`` around the ``o``-weighted mean, with the
  lowest intercept shift positive so that A is the child with the lower
  baseline.

Combine averages rows of ``Q``, ``pi`` and ``B`` with the same weights and
recovers every auxiliary variable, so the two moves are exact inverses.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln, gammaln, logsumexp

from .ctmc import GeneratorMatrix, stationary_distribution
from .data import ObservationSet
from .errors import LikelihoodImpossibleError, MoveUnavailableError
from .hmm import subject_logliks
from .model import ModelState, PriorConfig, log_prior_theta, sample_theta_from_prior, truncated_poisson_pmf
from .sampler import SamplerState, categorical_draws, gibbs_sweep
from .transdim import MoveOutcome, _log_beta, _log_beta22, _log_normal, rj_step

log = logging.getLogger(__name__)

_LOG2 = np.log(2.0)


@dataclass
class MixtureState:
    """Mixture weights, per-component parameters and subject memberships (0-based)."""

    weights: np.ndarray
    components: list
    memberships: np.ndarray
    step_sd: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.memberships = np.asarray(self.memberships, dtype=np.int64)
        if not self.step_sd:
            self.step_sd = [0.1] * len(self.components)
        self.validate()

    @property
    def M(self) -> int:
        return len(self.components)

    @property
    def state_counts(self) -> list:
        return [c.K for c in self.components]

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.memberships, minlength=self.M)

    @property
    def filled(self) -> int:
        """Number of components with at least one subject."""
        return int(np.count_nonzero(self.counts))

    def validate(self):
        M = len(self.components)
        if M < 1 or self.weights.shape != (M,):
            raise ValueError(f"{M} components but weights of shape {self.weights.shape}")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"mixture weights are not a probability vector: {self.weights}")
        if self.memberships.size and (self.memberships.min() < 0 or self.memberships.max() >= M):
            raise ValueError("memberships reference a missing component")
        if len(self.step_sd) != M:
            raise ValueError("one step size per component is required")
        for c in self.components:
            c.validate()

    def copy(self) -> "MixtureState":
        return MixtureState(self.weights.copy(), [c.copy() for c in self.components],
                            self.memberships.copy(), list(self.step_sd))

    def to_dict(self):
        return {
            "M": self.M,
            "weights": self.weights.tolist(),
            "components": [c.to_dict() for c in self.components],
            "memberships": self.memberships.tolist(),
        }


# ---------------------------------------------------------------- memberships and weights

def component_loglik_matrix(obs: ObservationSet, components) -> np.ndarray:
    """``L[n, m]``: log marginal likelihood of subject ``n`` under component ``m`` (``-inf`` if impossible)."""
    L = np.empty((obs.n_subjects, len(components)))
    for m, c in enumerate(components):
        L[:, m] = subject_logliks(obs, c, strict=False)
    return L


def mixture_loglik(L: np.ndarray, weights) -> float:
    """Log-likelihood with memberships summed out."""
    if L.shape[0] == 0:
        return 0.0
    with np.errstate(divide="ignore"):
        lw = np.log(np.asarray(weights, dtype=float))
    return float(np.sum(logsumexp(L + lw, axis=1)))


def membership_log_posteriors(obs: ObservationSet, mix: MixtureState, L: np.ndarray | None = None) -> np.ndarray:
    """Normalized ``log P(C_n = m | data)`` per subject, shape (N, M)."""
    if L is None:
        L = component_loglik_matrix(obs, mix.components)
    with np.errstate(divide="ignore"):
        lp = L + np.log(mix.weights)
    norm = logsumexp(lp, axis=1) if lp.shape[0] else np.empty(0)
    bad = np.flatnonzero(~np.isfinite(norm))
    if bad.size:
        sid = obs.subject_ids[int(bad[0])]
        raise LikelihoodImpossibleError(f"subject {sid} has zero likelihood under every component", subject=sid)
    return lp - norm[:, None]


def reseed_empty_components(mix: MixtureState, prior: PriorConfig, rng) -> list:
    """Draw fresh parameters from the prior for components without subjects."""
    empty = np.flatnonzero(mix.counts == 0)
    for m in empty:
        c = mix.components[m]
        mix.components[m] = sample_theta_from_prior(c.K, c.D, c.fam, prior, rng, fallback_B=c.B)
    return [int(m) for m in empty]


def update_memberships(obs: ObservationSet, mix: MixtureState, prior: PriorConfig, rng,
                       L: np.ndarray | None = None) -> np.ndarray:
    lp = membership_log_posteriors(obs, mix, L)
    if lp.shape[0]:
        mix.memberships = categorical_draws(np.exp(lp), rng).astype(np.int64)
    reseed_empty_components(mix, prior, rng)
    return mix.memberships


def update_weights(mix: MixtureState, prior: PriorConfig, rng) -> np.ndarray:
    if mix.M == 1:
        mix.weights = np.ones(1)
    else:
        w = rng.dirichlet(mix.counts + prior.weight_dirichlet)
        mix.weights = w / w.sum()
    return mix.weights


def log_weight_prior(weights, delta: float) -> float:
    M = len(weights)
    if M == 1:
        return 0.0
    return float(gammaln(M * delta) - M * gammaln(delta) + (delta - 1.0) * np.sum(np.log(weights)))


# ---------------------------------------------------------------- flow coordinates

def _free_flows(K: int):
    """Off-diagonal entries whose flows are free; flows into state 0 from k >= 1 are solved by balance."""
    return [(k, j) for k in range(K) for j in range(K) if k != j and not (k >= 1 and j == 0)]


def flow_log_jacobian(Q, s=None) -> float:
    """``log |det dQ / d(s_1..s_{K-1}, free flows)|`` for an irreducible generator."""
    Q = np.asarray(Q.rates if isinstance(Q, GeneratorMatrix) else Q, dtype=float)
    K = Q.shape[0]
    if K == 1:
        return 0.0
    if s is None:
        s = stationary_distribution(Q)
    F = s[:, None] * Q
    free = _free_flows(K)
    col = {e: i for i, e in enumerate(free)}
    n_s = K - 1
    off = [(k, j) for k in range(K) for j in range(K) if k != j]
    J = np.zeros((len(off), n_s + len(free)))
    for r, (k, j) in enumerate(off):
        if k == 0:
            J[r, :n_s] = F[k, j] / s[0] ** 2
        else:
            J[r, k - 1] = -F[k, j] / s[k] ** 2
        if (k, j) in col:
            J[r, n_s + col[(k, j)]] = 1.0 / s[k]
        else:
            for i in range(K):
                if i != k:
                    J[r, n_s + col[(i, k)]] += 1.0 / s[k]
            for l in range(1, K):
                if l != k:
                    J[r, n_s + col[(k, l)]] -= 1.0 / s[k]
    sign, logdet = np.linalg.slogdet(J)
    return float(logdet)


def generator_from_flows(s, free_flows) -> np.ndarray:
    """Inverse of the flow parametrization: stationary law plus free flows to rates."""
    s = np.asarray(s, dtype=float)
    K = s.size
    F = np.zeros((K, K))
    for (k, j), f in zip(_free_flows(K), free_flows):
        F[k, j] = f
    for k in range(1, K):
        F[k, 0] = F[:, k].sum() - F[k, 1:].sum()
    Q = F / s[:, None]
    np.fill_diagonal(Q, 0.0)
    return Q


def _log_dirichlet(x, alpha) -> float:
    x = np.asarray(x, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if x.size == 1:
        return 0.0
    return float(gammaln(alpha.sum()) - np.sum(gammaln(alpha)) + np.sum((alpha - 1.0) * np.log(x)))


# ---------------------------------------------------------------- split / combine algebra

@dataclass
class ClusterSplitAux:
    """Auxiliary draws of a component split; arrays follow the parent's intercept order."""

    target: int
    weight: float
    stationary: np.ndarray
    flow_fractions: np.ndarray
    initial: np.ndarray
    coef_shift: np.ndarray


@dataclass
class ClusterProposal:
    parent: ModelState
    aux: ClusterSplitAux
    children: tuple | None
    parent_weight: float
    log_jacobian: float = np.nan
    reason: str = ""

    @property
    def valid(self) -> bool:
        return self.children is not None and not self.reason


def draw_cluster_aux(parent: ModelState, target: int, prior: PriorConfig, rng) -> ClusterSplitAux:
    K, D = parent.K, parent.D
    kappa = prior.cluster_split_concentration
    w = rng.beta(2.0, 2.0)
    s = stationary_distribution(parent.Q)
    sA = rng.dirichlet(kappa * s) if K > 1 else np.ones(1)
    omega = np.clip(w * sA / s, 1e-300, 1.0 - 1e-16)
    free = _free_flows(K)
    v = np.array([rng.beta(kappa * omega[k], kappa * (1.0 - omega[k])) for k, _ in free])
    piA = rng.dirichlet(kappa * parent.pi) if K > 1 else np.ones(1)
    eps = np.empty((D, K))
    eps[0] = rng.normal(0.0, prior.split_proposal_sd, K)
    eps[0, 0] = abs(eps[0, 0])
    if D > 1:
        eps[1:] = rng.normal(0.0, prior.slope_split_sd, (D - 1, K))
    return ClusterSplitAux(target, float(w), sA, v, piA, eps)


def log_cluster_aux_density(parent: ModelState, aux: ClusterSplitAux, prior: PriorConfig) -> float:
    K = parent.K
    kappa = prior.cluster_split_concentration
    s = stationary_distribution(parent.Q)
    w = aux.weight
    lp = float(_log_beta22(w))
    lp += _log_dirichlet(aux.stationary, kappa * s)
    omega = w * aux.stationary / s
    for (k, _), v in zip(_free_flows(K), aux.flow_fractions):
        lp += float(_log_beta(v, kappa * omega[k], kappa * (1.0 - omega[k])))
    lp += _log_dirichlet(aux.initial, kappa * parent.pi)
    eps = aux.coef_shift
    lp += _LOG2 + float(_log_normal(eps[0, 0], prior.split_proposal_sd))
    lp += float(np.sum(_log_normal(eps[0, 1:], prior.split_proposal_sd)))
    lp += float(np.sum(_log_normal(eps[1:], prior.slope_split_sd)))
    return lp


def _strictly_increasing(x) -> bool:
    return bool(np.all(np.diff(x) > 0))


def cluster_split_map(parent: ModelState, aux: ClusterSplitAux, parent_weight: float):
    """Split a sorted component into two sorted children.

    Returns ``((A, B), (weight_A, weight_B), log_jacobian)`` or
    ``(None, None, reason)`` when the auxiliary draw is outside the valid region.
    """
    K, D = parent.K, parent.D
    w = aux.weight
    if not 0.0 < w < 1.0:
        return None, None, "weight outside (0, 1)"
    Q = parent.Q.offdiagonal()
    s = stationary_distribution(parent.Q)
    sA = np.asarray(aux.stationary, dtype=float)
    sB = (s - w * sA) / (1.0 - w)
    if np.any(sA <= 0) or np.any(sB <= 0):
        return None, None, "stationary split leaves a nonpositive mass"
    omega = w * sA / s
    piA = np.asarray(aux.initial, dtype=float)
    piB = (parent.pi - w * piA) / (1.0 - w)
    if np.any(piA <= 0) or np.any(piB <= 0):
        return None, None, "initial split leaves a nonpositive mass"
    free = _free_flows(K)
    vf = np.asarray(aux.flow_fractions, dtype=float)
    if np.any(vf <= 0) or np.any(vf >= 1):
        return None, None, "flow fraction outside (0, 1)"
    F = s[:, None] * Q
    V = np.zeros((K, K))
    for (k, j), x in zip(free, vf):
        V[k, j] = x
    # each child's flows into state 0 come from that child's own balance
    FA = F * V
    FB = F * (1.0 - V)
    for k in range(1, K):
        FA[k, 0] = FA[:, k].sum() - FA[k, 1:].sum()
        FB[k, 0] = FB[:, k].sum() - FB[k, 1:].sum()
        if not (FA[k, 0] > 0 and FB[k, 0] > 0):
            return None, None, "balancing flow fraction outside (0, 1)"
    QA = FA / (w * sA[:, None])
    QB = FB / ((1.0 - w) * sB[:, None])
    np.fill_diagonal(QA, 0.0)
    np.fill_diagonal(QB, 0.0)
    eps = np.asarray(aux.coef_shift, dtype=float)
    BA = parent.B - (1.0 - omega) / omega * eps
    BB = parent.B + eps
    if not (_strictly_increasing(BA[0]) and _strictly_increasing(BB[0])):
        return None, None, "children change the intercept order"
    A = ModelState(piA / piA.sum(), QA, BA, parent.fam)
    B = ModelState(piB / piB.sum(), QB, BB, parent.fam)
    log_jac = cluster_log_jacobian(parent, s, A, sA, B, sB, w, parent_weight)
    return (A, B), (w * parent_weight, (1.0 - w) * parent_weight), log_jac


def cluster_log_jacobian(parent: ModelState, s, A: ModelState, sA, B: ModelState, sB, w: float,
                         parent_weight: float) -> float:
    """Log Jacobian of the component split, evaluated at given parent and children."""
    K, D = parent.K, parent.D
    Q = parent.Q.offdiagonal()
    omega = w * sA / s
    log_jac = -flow_log_jacobian(Q, s) + flow_log_jacobian(A.Q, sA) + flow_log_jacobian(B.Q, sB)
    if K > 1:
        log_jac += float(np.sum(np.log([s[k] * Q[k, j] for k, j in _free_flows(K)])))
        log_jac += -2.0 * (K - 1) * np.log1p(-w) - (K - 1) ** 2 * (np.log(w) + np.log1p(-w))
    log_jac += -D * float(np.sum(np.log(omega))) + np.log(parent_weight)
    return float(log_jac)


def cluster_combine_map(A: ModelState, B: ModelState, weight_A: float, weight_B: float):
    """Merge two sorted components (A has the lower lowest intercept).

    Returns ``(parent, parent_weight, aux)`` with ``aux.target`` unset (-1).
    """
    K = A.K
    wt = weight_A + weight_B
    w = weight_A / wt
    sA = stationary_distribution(A.Q)
    sB = stationary_distribution(B.Q)
    s = w * sA + (1.0 - w) * sB
    omega = w * sA / s
    QA, QB = A.Q.offdiagonal(), B.Q.offdiagonal()
    Q = omega[:, None] * QA + (1.0 - omega[:, None]) * QB
    np.fill_diagonal(Q, 0.0)
    vf = np.array([omega[k] * QA[k, j] / Q[k, j] for k, j in _free_flows(K)])
    pi = w * A.pi + (1.0 - w) * B.pi
    Bp = omega * A.B + (1.0 - omega) * B.B
    parent = ModelState(pi / pi.sum(), Q, Bp, A.fam)
    aux = ClusterSplitAux(-1, float(w), sA, vf, A.pi.copy(), B.B - Bp)
    return parent, wt, aux


def _combine_log_jacobian(parent: ModelState, aux: ClusterSplitAux, A: ModelState, B: ModelState,
                          parent_weight: float) -> float:
    sA = stationary_distribution(A.Q)
    sB = stationary_distribution(B.Q)
    w = aux.weight
    return cluster_log_jacobian(parent, w * sA + (1.0 - w) * sB, A, sA, B, sB, w, parent_weight)


# ---------------------------------------------------------------- selection

def component_distance(a: ModelState, b: ModelState) -> float:
    """Euclidean distance between intercept-sorted coefficient matrices."""
    return float(np.linalg.norm(a.sorted_by_intercept().B - b.sorted_by_intercept().B))


def nearest_component(components, m: int) -> int | None:
    """Closest component with the same state count; ties go to the smallest index."""
    best, best_d = None, np.inf
    for j, c in enumerate(components):
        if j == m or c.K != components[m].K:
            continue
        d = component_distance(components[m], c)
        if d < best_d:
            best, best_d = j, d
    return best


def component_pair_multiplicity(components, i: int, j: int) -> int:
    return int(nearest_component(components, i) == j) + int(nearest_component(components, j) == i)


def cluster_split_log_ratio(prop: ClusterProposal, weights, weights_new, n_pair: int, prior: PriorConfig,
                            loglik: float, loglik_new: float) -> float:
    """Log acceptance ratio of a component split from ``weights`` to ``weights_new``.

    The combine ratio is the negative of the same expression evaluated on
    the reversing split.
    """
    if n_pair == 0:
        return -np.inf
    M = len(weights)
    parent = prop.parent
    A, B = prop.children
    K = parent.K
    delta = prior.weight_dirichlet
    lr = loglik_new - loglik
    lr += prior.log_prior_m(M + 1) - prior.log_prior_m(M)
    lr += log_weight_prior(weights_new, delta) - log_weight_prior(weights, delta)
    lr += prior.log_prior_k(K) + log_prior_theta(A, prior) + log_prior_theta(B, prior) - log_prior_theta(parent, prior)
    lr += np.log(M) + np.log(n_pair) + float(gammaln(K + 1))
    lr += np.log1p(-prior.cluster_split_prob(M + 1)) - np.log(prior.cluster_split_prob(M))
    lr += -log_cluster_aux_density(parent, prop.aux, prior) + prop.log_jacobian
    return float(lr)


@dataclass
class ClusterMoveCandidate:
    """A proposed mixture: components and weights after the move, plus bookkeeping."""

    proposal: ClusterProposal
    components: list | None
    weights: np.ndarray | None
    n_pair: int
    index_a: int = -1
    index_b: int = -1


def propose_cluster_split(mix: MixtureState, prior: PriorConfig, rng, target: int | None = None,
                          aux: ClusterSplitAux | None = None) -> ClusterMoveCandidate:
    """Split component ``target``: A replaces it and B is appended."""
    m = int(rng.integers(mix.M)) if target is None else int(target)
    parent = mix.components[m].sorted_by_intercept()
    if aux is None:
        aux = draw_cluster_aux(parent, m, prior, rng)
    children, cw, extra = cluster_split_map(parent, aux, mix.weights[m])
    if children is None:
        return ClusterMoveCandidate(ClusterProposal(parent, aux, None, mix.weights[m], reason=extra), None, None, 0, m)
    prop = ClusterProposal(parent, aux, children, mix.weights[m], log_jacobian=extra)
    comps = list(mix.components)
    comps[m] = children[0]
    comps.append(children[1])
    weights = np.r_[mix.weights, cw[1]]
    weights[m] = cw[0]
    n_pair = component_pair_multiplicity(comps, m, len(comps) - 1)
    if n_pair == 0:
        prop.reason = "children are not nearest neighbours"
    return ClusterMoveCandidate(prop, comps, weights, n_pair, m, len(comps) - 1)


def propose_cluster_combine(mix: MixtureState, pair) -> ClusterMoveCandidate:
    """Merge the components in ``pair``, which must have equal state counts.

    The merged component takes A's index and B's slot is removed. The
    returned proposal is the split that reverses the merge.
    """
    i, j = (int(x) for x in pair)
    if i == j:
        raise MoveUnavailableError("a component cannot be combined with itself")
    ci, cj = mix.components[i], mix.components[j]
    if ci.K != cj.K:
        raise MoveUnavailableError("components with different state counts cannot be combined")
    si, sj = ci.sorted_by_intercept(), cj.sorted_by_intercept()
    if (si.B[0, 0], i) > (sj.B[0, 0], j):
        i, j, si, sj = j, i, sj, si
    n_pair = component_pair_multiplicity(mix.components, i, j)
    parent, pw, aux = cluster_combine_map(si, sj, mix.weights[i], mix.weights[j])
    keep = [k for k in range(mix.M) if k != j]
    comps = [parent if k == i else mix.components[k] for k in keep]
    weights = mix.weights[keep].copy()
    weights[keep.index(i)] = pw
    aux.target = keep.index(i)
    if not _strictly_increasing(parent.B[0]):
        prop = ClusterProposal(parent, aux, None, pw, reason="merged component changes the intercept order")
    else:
        # the reverse split must land in its valid region; the Jacobian is
        # then evaluated on the actual children for accuracy
        children, _, extra = cluster_split_map(parent, aux, pw)
        if children is None:
            prop = ClusterProposal(parent, aux, None, pw, reason=extra)
        else:
            prop = ClusterProposal(parent, aux, (si, sj), pw,
                                   log_jacobian=_combine_log_jacobian(parent, aux, si, sj, pw))
    return ClusterMoveCandidate(prop, comps, weights, n_pair, i, j)


def cluster_split_log_acceptance(obs, mix: MixtureState, cand: ClusterMoveCandidate, prior: PriorConfig,
                                 L: np.ndarray | None = None):
    """``(log acceptance, L_new)`` for a split candidate."""
    if not cand.proposal.valid:
        return -np.inf, None
    if L is None:
        L = component_loglik_matrix(obs, mix.components)
    Ln = L.copy() if L.size else np.empty((obs.n_subjects, mix.M))
    Ln[:, cand.index_a] = subject_logliks(obs, cand.components[cand.index_a], strict=False)
    Ln = np.column_stack([Ln, subject_logliks(obs, cand.components[-1], strict=False)])
    lr = cluster_split_log_ratio(cand.proposal, mix.weights, cand.weights, cand.n_pair, prior,
                                 mixture_loglik(L, mix.weights), mixture_loglik(Ln, cand.weights))
    return min(0.0, lr), Ln


def cluster_combine_log_acceptance(obs, mix: MixtureState, cand: ClusterMoveCandidate, prior: PriorConfig,
                                   L: np.ndarray | None = None):
    """``(log acceptance, L_new)`` for a combine candidate."""
    if not cand.proposal.valid:
        return -np.inf, None
    if L is None:
        L = component_loglik_matrix(obs, mix.components)
    Ln = np.delete(L, cand.index_b, axis=1)
    Ln[:, cand.proposal.aux.target] = subject_logliks(obs, cand.proposal.parent, strict=False)
    lr = -cluster_split_log_ratio(cand.proposal, cand.weights, mix.weights, cand.n_pair, prior,
                                  mixture_loglik(Ln, cand.weights), mixture_loglik(L, mix.weights))
    return min(0.0, lr), Ln


def cluster_split(obs, mix: MixtureState, prior: PriorConfig, rng, L=None):
    """Draw a split candidate; returns ``(candidate, log acceptance, L_new)``."""
    cand = propose_cluster_split(mix, prior, rng)
    log_acc, Ln = cluster_split_log_acceptance(obs, mix, cand, prior, L)
    return cand, log_acc, Ln


def cluster_combine(obs, mix: MixtureState, prior: PriorConfig, rng, L=None):
    """Pick a component and its nearest equal-K neighbour and merge them.

    Raises :class:`MoveUnavailableError` when no equal-K pair exists.
    """
    if mix.M < 2:
        raise MoveUnavailableError("combine needs at least two components")
    m = int(rng.integers(mix.M))
    j = nearest_component(mix.components, m)
    if j is None:
        raise MoveUnavailableError(f"no other component has {mix.components[m].K} states")
    cand = propose_cluster_combine(mix, (m, j))
    log_acc, Ln = cluster_combine_log_acceptance(obs, mix, cand, prior, L)
    return cand, log_acc, Ln


def _apply(mix: MixtureState, cand: ClusterMoveCandidate, split: bool) -> None:
    if split:
        mix.step_sd = list(mix.step_sd) + [mix.step_sd[cand.index_a]]
    else:
        b = cand.index_b
        merged = np.where(mix.memberships == b, cand.index_a, mix.memberships)
        mix.memberships = merged - (merged > b)
        mix.step_sd = [s for k, s in enumerate(mix.step_sd) if k != b]
    mix.components = list(cand.components)
    mix.weights = cand.weights / cand.weights.sum()


def cluster_move(obs: ObservationSet, mix: MixtureState, prior: PriorConfig, rng, L: np.ndarray | None = None):
    """One component split-or-combine step; returns ``(outcome, L)`` for the resulting mixture."""
    if L is None:
        L = component_loglik_matrix(obs, mix.components)
    split = rng.random() < prior.cluster_split_prob(mix.M)
    move = "cluster_split" if split else "cluster_combine"
    try:
        if split:
            cand, log_acc, Ln = cluster_split(obs, mix, prior, rng, L)
        else:
            cand, log_acc, Ln = cluster_combine(obs, mix, prior, rng, L)
    except MoveUnavailableError as exc:
        return MoveOutcome(move, False, -np.inf, reason=str(exc)), L
    if not cand.proposal.valid:
        return MoveOutcome(move, False, -np.inf, reason=cand.proposal.reason), L
    if np.log(rng.random()) < log_acc:
        _apply(mix, cand, split)
        return MoveOutcome(move, True, log_acc, details={"M": mix.M}), Ln
    return MoveOutcome(move, False, log_acc), L


# ---------------------------------------------------------------- empty components

def empty_birth_log_ratio(M: int, n_empty: int, w_new: float, n_subjects: int, prior: PriorConfig) -> float:
    """Log acceptance ratio for adding an empty component with weight ``w_new`` to ``M`` components.

    ``n_empty`` counts the empty components before the birth. The new
    component's parameters come from the prior and its weight from
    Beta(1, M), with the other weights scaled by ``1 - w_new``; memberships
    are unchanged. The death ratio is the negative.
    """
    delta = prior.weight_dirichlet
    lr = prior.log_prior_m(M + 1) - prior.log_prior_m(M)
    lr += -betaln(M * delta, delta) + (delta - 1.0) * np.log(w_new)
    lr += (n_subjects + M * delta - M) * np.log1p(-w_new)
    lr += np.log(M + 1) - np.log(M) - np.log(n_empty + 1)
    lr += np.log1p(-prior.cluster_split_prob(M + 1)) - np.log(prior.cluster_split_prob(M))
    return float(lr)


def coefficient_priors_proper(prior: PriorConfig, D: int) -> bool:
    return prior.intercept_prior.proper and (D == 1 or prior.slope_prior.proper)


def empty_component_move(mix: MixtureState, prior: PriorConfig, rng) -> MoveOutcome:
    """Add an empty component drawn from the prior, or delete an existing empty one.

    Requires proper coefficient priors, since a new component is a prior
    draw. Without it a component that empties is stuck at its prior draw
    and the split/combine pair rarely removes it.
    """
    D = mix.components[0].D
    if not coefficient_priors_proper(prior, D):
        return MoveOutcome("empty_birth_death", False, -np.inf, reason="improper coefficient prior")
    N = mix.memberships.size
    counts = mix.counts
    birth = rng.random() < prior.cluster_split_prob(mix.M)
    if birth:
        M = mix.M
        w = float(rng.beta(1.0, M))
        if not 0.0 < w < 1.0:
            return MoveOutcome("empty_birth", False, -np.inf, reason="degenerate weight draw")
        table = truncated_poisson_pmf(prior.k_prior_rate, prior.k_max)
        K = int(rng.choice(table.size, p=table)) + 1
        comp = sample_theta_from_prior(K, D, mix.components[0].fam, prior, rng)
        log_acc = min(0.0, empty_birth_log_ratio(M, int(np.sum(counts == 0)), w, N, prior))
        if np.log(rng.random()) < log_acc:
            mix.components = list(mix.components) + [comp]
            mix.weights = np.r_[mix.weights * (1.0 - w), w]
            mix.weights /= mix.weights.sum()
            mix.step_sd = list(mix.step_sd) + [prior.mh_step_sd]
            return MoveOutcome("empty_birth", True, log_acc, details={"M": mix.M})
        return MoveOutcome("empty_birth", False, log_acc)
    empty = np.flatnonzero(counts == 0)
    if mix.M < 2 or empty.size == 0:
        return MoveOutcome("empty_death", False, -np.inf, reason="no empty component")
    j = int(empty[rng.integers(empty.size)])
    w = float(mix.weights[j])
    log_acc = min(0.0, -empty_birth_log_ratio(mix.M - 1, empty.size - 1, w, N, prior))
    if np.log(rng.random()) < log_acc:
        keep = [k for k in range(mix.M) if k != j]
        mix.components = [mix.components[k] for k in keep]
        mix.weights = mix.weights[keep] / mix.weights[keep].sum()
        mix.memberships = mix.memberships - (mix.memberships > j)
        mix.step_sd = [mix.step_sd[k] for k in keep]
        return MoveOutcome("empty_death", True, log_acc, details={"M": mix.M})
    return MoveOutcome("empty_death", False, log_acc)


# ---------------------------------------------------------------- sweep

def _component_states(obs: ObservationSet, mix: MixtureState):
    groups = [np.flatnonzero(mix.memberships == m) for m in range(mix.M)]
    return [SamplerState(obs.subset(g), c, s) for g, c, s in zip(groups, mix.components, mix.step_sd)]


def clustering_sweep(obs: ObservationSet, mix: MixtureState, prior: PriorConfig, rng,
                     adapting: bool = False) -> dict:
    """State-count moves, component move, memberships, empty-component move and weights, then fixed-K sweeps.

    Returns a dict with the component move outcome and the per-component
    moves of the first step.
    """
    k_moves = []
    for m, st in enumerate(_component_states(obs, mix)):
        out = rj_step(st, prior, rng)
        mix.components[m] = st.theta
        k_moves.append(out)
    outcome, L = cluster_move(obs, mix, prior, rng)
    update_memberships(obs, mix, prior, rng, L)
    empty_outcome = empty_component_move(mix, prior, rng)
    update_weights(mix, prior, rng)
    logliks = []
    for m, st in enumerate(_component_states(obs, mix)):
        st.adapting = adapting
        gibbs_sweep(st, prior, rng)
        mix.components[m] = st.theta
        mix.step_sd[m] = st.step_sd
        logliks.append(st.loglik)
    return {"cluster_move": outcome, "empty_move": empty_outcome, "k_moves": k_moves,
            "complete_loglik": float(np.sum(logliks))}


def initial_mixture(obs: ObservationSet, fam, prior: PriorConfig, M: int = 1, K: int = 1, rng=None) -> MixtureState:
    """``M`` components of ``K`` states with data-driven coefficients; subjects assigned round-robin."""
    from .sampler import initial_theta

    base = initial_theta(obs, K, fam)
    comps = [base.copy() for _ in range(M)]
    if M > 1:
        spread = np.linspace(-0.5, 0.5, M)
        for c, d in zip(comps, spread):
            c.B[0] = c.B[0] + d
    memberships = np.arange(obs.n_subjects) % M
    return MixtureState(np.full(M, 1.0 / M), comps, memberships, [prior.mh_step_sd] * M)


def run_clustering(obs: ObservationSet, fam, prior: PriorConfig, n_iter: int, rng, burn_in: int = 0,
                   thin: int = 1, m_init: int = 1, k_init: int = 1, mix_init: MixtureState | None = None,
                   params: bool = True, on_record=None):
    """Run the clustering sampler; records carry ``M``, filled clusters and per-component ``K``."""
    if n_iter < 0 or burn_in < 0 or thin < 1:
        raise ValueError("n_iter and burn_in must be nonnegative and thin positive")
    mix = mix_init if mix_init is not None else initial_mixture(obs, fam, prior, m_init, k_init)
    records = []
    for it in range(n_iter):
        info = clustering_sweep(obs, mix, prior, rng, adapting=it < burn_in)
        if it >= burn_in and (it - burn_in) % thin == 0:
            L = component_loglik_matrix(obs, mix.components) if obs.n_subjects else np.empty((0, mix.M))
            rec = {
                "iteration": int(it),
                "M": mix.M,
                "M_filled": mix.filled,
                "K": [int(k) for k in mix.state_counts],
                "loglik": mixture_loglik(L, mix.weights),
                "move": info["cluster_move"].move,
                "accepted": bool(info["cluster_move"].accepted),
                "counts": mix.counts.tolist(),
            }
            if params:
                rec["weights"] = mix.weights.tolist()
                rec["components"] = [c.to_dict() for c in mix.components]
            records.append(rec)
            if on_record is not None:
                on_record(rec)
    return records, mix
