"""Forward-backward smoothing and likelihoods on the observation grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .ctmc import LatentPath, path_statistics, transition_matrices
from .data import ObservationSet
from .emission import _check_counts, emission_logpdf_matrix
from .errors import LikelihoodImpossibleError, StructuralError
from .model import ModelState


@dataclass
class SmoothedQuantities:
    """Posterior summaries of the hidden chain at the visit times.

    ``marginals[i, k] = P(X_i = k | data)`` and ``pairwise[i, j, k] =
    P(X_{i-1} = j, X_i = k | data)`` over flattened visits ``i``; pairwise
    rows at a subject's first visit are zero.
    """

    marginals: np.ndarray
    pairwise: np.ndarray
    loglik: np.ndarray
    offsets: np.ndarray

    @property
    def total_loglik(self) -> float:
        return float(np.sum(self.loglik))


def _log_emissions(obs: ObservationSet, theta: ModelState) -> np.ndarray:
    if theta.B.shape[0] != obs.n_coefficients:
        raise StructuralError(f"B has {theta.B.shape[0]} rows but data have {obs.n_coefficients} coefficients")
    if theta.fam.is_poisson:
        _check_counts(obs.outcomes)
    return emission_logpdf_matrix(obs.outcomes, obs.X, theta.B, theta.fam)


def transition_kernels(obs: ObservationSet, theta: ModelState) -> np.ndarray:
    """``P[i] = exp(Q * gap_i)`` per visit, computed once per distinct gap."""
    return transition_matrices(theta.Q, obs.gaps)


def _locate(obs: ObservationSet, flat_index: int):
    n = int(np.searchsorted(obs.offsets, flat_index, side="right") - 1)
    return obs.subject_ids[n], int(flat_index - obs.offsets[n])


def _raise_impossible(obs, bad):
    sid, visit = _locate(obs, bad)
    raise LikelihoodImpossibleError(
        f"forward probabilities vanish for subject {sid} at visit {visit}", subject=sid, visit=visit
    )


def forward_backward(obs: ObservationSet, theta: ModelState, log_em=None) -> SmoothedQuantities:
    if obs.n_subjects == 0:
        K = theta.K
        return SmoothedQuantities(np.empty((0, K)), np.empty((0, K, K)), np.empty(0), obs.offsets)
    if log_em is None:
        log_em = _log_emissions(obs, theta)
    P = transition_kernels(obs, theta)
    a, b, ll, bad = _kernels.forward_backward(log_em, P, obs.offsets, theta.pi)
    if bad >= 0:
        _raise_impossible(obs, bad)
    return SmoothedQuantities(a, b, ll, obs.offsets)


def subject_logliks(obs: ObservationSet, theta: ModelState, log_em=None, strict: bool = True) -> np.ndarray:
    """Per-subject log marginal likelihoods.

    With ``strict=False`` impossible subjects get ``-inf`` instead of raising.
    """
    if obs.n_subjects == 0:
        return np.empty(0)
    if log_em is None:
        log_em = _log_emissions(obs, theta)
    P = transition_kernels(obs, theta)
    ll, bad = _kernels.forward_loglik(log_em, P, obs.offsets, theta.pi, strict)
    if strict and bad >= 0:
        _raise_impossible(obs, bad)
    return ll


def marginal_loglik(obs: ObservationSet, theta: ModelState) -> float:
    """Incomplete-data log-likelihood summed over subjects."""
    return float(np.sum(subject_logliks(obs, theta)))


def complete_data_loglik(obs: ObservationSet, paths, theta: ModelState) -> float:
    """Joint log-density of outcomes and fully observed latent paths."""
    paths = list(paths)
    if len(paths) != obs.n_subjects:
        raise StructuralError(f"expected {obs.n_subjects} paths, got {len(paths)}")
    K = theta.K
    Q = theta.Q.rates
    log_em = _log_emissions(obs, theta)
    with np.errstate(divide="ignore"):
        log_q = np.log(np.where(np.eye(K, dtype=bool), 1.0, Q))
        log_pi = np.log(theta.pi)
    total = 0.0
    for n, (subj, path) in enumerate(zip(obs.subjects, paths)):
        if not isinstance(path, LatentPath):
            raise StructuralError(f"path {n} is not a LatentPath")
        tol = 1e-9 * max(1.0, abs(subj.times[-1]))
        if abs(path.start_time - subj.times[0]) > tol or abs(path.end_time - subj.times[-1]) > tol:
            raise StructuralError(
                f"path for subject {subj.subject_id} spans [{path.start_time}, {path.end_time}], "
                f"visits span [{subj.times[0]}, {subj.times[-1]}]"
            )
        if path.states.max() >= K:
            raise StructuralError(f"path for subject {subj.subject_id} visits a state outside 0..{K - 1}")
        states = np.array([path.state_at(t) for t in subj.times])
        rows = np.arange(obs.offsets[n], obs.offsets[n + 1])
        total += float(np.sum(log_em[rows, states]))
        total += float(log_pi[path.initial_state])
        stats = path_statistics(path, K)
        N = stats.jump_counts.astype(float)
        used = (N > 0) & ~np.eye(K, dtype=bool)
        if np.any(log_q[used] == -np.inf):
            return -np.inf
        total += float(np.sum(N[used] * log_q[used])) - float(stats.occupancy @ theta.Q.exit_rates)
    return total
