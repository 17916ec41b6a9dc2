"""Generator-matrix numerics for finite-state continuous-time Markov chains.

States are indexed ``0 .. K-1`` throughout the Python API.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.sparse.csgraph import connected_components

from . import _kernels
from .errors import NumericDomainError, SamplingError, StructuralError

#: truncation mass for the uniformization series
UNIFORMIZATION_TAIL = 1e-12
#: off-diagonal rates at or below this count as absent edges
EDGE_TOL = 1e-14
#: largest lambda*delta handled by a single uniformization series
_MAX_SERIES_ARG = 50.0
#: rejections allowed per interval before switching to the direct sampler
MAX_REJECTIONS = 10_000


class GeneratorMatrix:
    """Infinitesimal generator of a CTMC.

    The diagonal is always recomputed from the off-diagonal rates so that
    rows sum to zero.
    """

    __slots__ = ("rates",)

    def __init__(self, rates):
        q = np.array(rates, dtype=float, copy=True)
        if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] < 1:
            raise StructuralError(f"generator must be a non-empty square matrix, got shape {q.shape}")
        if not np.all(np.isfinite(q)):
            raise NumericDomainError("generator contains non-finite entries")
        np.fill_diagonal(q, 0.0)
        if np.any(q < 0):
            i, j = np.argwhere(q < 0)[0]
            raise NumericDomainError(f"negative off-diagonal rate q[{i},{j}]={q[i, j]}")
        np.fill_diagonal(q, -q.sum(axis=1))
        self.rates = q

    @classmethod
    def from_offdiagonal(cls, rates) -> "GeneratorMatrix":
        return cls(rates)

    @classmethod
    def _unchecked(cls, rates) -> "GeneratorMatrix":
        """Build from rates known to be finite and non-negative off the diagonal."""
        g = cls.__new__(cls)
        q = np.array(rates, dtype=float)
        np.fill_diagonal(q, 0.0)
        np.fill_diagonal(q, -q.sum(axis=1))
        g.rates = q
        return g

    @property
    def dim(self) -> int:
        return self.rates.shape[0]

    @property
    def exit_rates(self) -> np.ndarray:
        return -np.diag(self.rates)

    def offdiagonal(self) -> np.ndarray:
        q = self.rates.copy()
        np.fill_diagonal(q, 0.0)
        return q

    def __repr__(self):
        return f"GeneratorMatrix(dim={self.dim}, rates={self.rates.tolist()})"

    def __eq__(self, other):
        return isinstance(other, GeneratorMatrix) and np.array_equal(self.rates, other.rates)


def as_generator(Q) -> GeneratorMatrix:
    return Q if isinstance(Q, GeneratorMatrix) else GeneratorMatrix(Q)


def _clean_stochastic(P: np.ndarray) -> np.ndarray:
    """Clamp round-off negatives and renormalize rows."""
    if np.any(P < -UNIFORMIZATION_TAIL):
        raise NumericDomainError(f"transition matrix has negative entry {P.min():.3e}")
    P = np.clip(P, 0.0, None)
    P /= P.sum(axis=-1, keepdims=True)
    return P


def _series_terms(x: float) -> int:
    """Number of Poisson terms needed so that the tail mass is below the tolerance."""
    if x <= 0:
        return 1
    return int(stats.poisson.isf(UNIFORMIZATION_TAIL * 1e-1, x)) + 2


def _uniformized(Q: np.ndarray, lam: float):
    return np.eye(Q.shape[0]) + Q / lam


def transition_matrix(Q, delta: float) -> np.ndarray:
    """``exp(Q * delta)`` by uniformization.

    Large ``lambda * delta`` is handled by evaluating the series at
    ``delta / 2**s`` and squaring ``s`` times, which keeps every entry
    nonnegative.
    """
    Q = as_generator(Q).rates
    delta = float(delta)
    if not np.isfinite(delta) or delta < 0:
        raise NumericDomainError(f"delta must be finite and nonnegative, got {delta}")
    K = Q.shape[0]
    lam = float(np.max(-np.diag(Q)))
    if delta == 0.0 or lam == 0.0:
        return np.eye(K)
    x = lam * delta
    squarings = 0
    if x > _MAX_SERIES_ARG:
        squarings = int(np.ceil(np.log2(x / _MAX_SERIES_ARG)))
        x = x / 2.0**squarings
    U = _uniformized(Q, lam)
    n_terms = _series_terms(x)
    weights = stats.poisson.pmf(np.arange(n_terms), x)
    P = np.zeros((K, K))
    term = np.eye(K)
    for w in weights:
        P += w * term
        term = term @ U
    P = _clean_stochastic(P)
    for _ in range(squarings):
        P = _clean_stochastic(P @ P)
    return P


def transition_matrices(Q, deltas) -> np.ndarray:
    """Stack of ``exp(Q * delta)`` for many gaps, sharing matrix powers.

    Returns an array of shape ``(len(deltas), K, K)``. Repeated gaps are
    computed once.
    """
    Q = as_generator(Q).rates
    deltas = np.asarray(deltas, dtype=float)
    K = Q.shape[0]
    out = np.empty((deltas.size, K, K))
    if deltas.size == 0:
        return out
    if np.any(~np.isfinite(deltas)) or np.any(deltas < 0):
        raise NumericDomainError("gaps must be finite and nonnegative")
    lam = float(np.max(-np.diag(Q)))
    if lam == 0.0:
        out[:] = np.eye(K)
        return out
    uniq, inverse = np.unique(deltas, return_inverse=True)
    x = lam * uniq
    small = x <= 4 * _MAX_SERIES_ARG
    P_uniq = np.empty((uniq.size, K, K))
    if np.any(small):
        xs = x[small]
        n_terms = _kernels.poisson_window(float(xs.max()), UNIFORMIZATION_TAIL * 1e-1)[1]
        U = _uniformized(Q, lam)
        powers = np.empty((n_terms, K, K))
        powers[0] = np.eye(K)
        for n in range(1, n_terms):
            powers[n] = powers[n - 1] @ U
        P_uniq[small] = _kernels.poisson_mix(powers, np.ascontiguousarray(xs), UNIFORMIZATION_TAIL * 1e-1)
    for idx in np.flatnonzero(~small):
        P_uniq[idx] = transition_matrix(Q, uniq[idx])
    out[:] = P_uniq[inverse.reshape(-1)]
    return out


def check_irreducible(Q) -> None:
    """Raise :class:`StructuralError` unless the positive-rate graph is strongly connected."""
    Q = as_generator(Q).rates
    K = Q.shape[0]
    # diagonal entries are never positive, so a full count means every edge exists
    if K == 1 or np.count_nonzero(Q > EDGE_TOL) == K * (K - 1):
        return
    adj = (Q > EDGE_TOL).astype(int)
    np.fill_diagonal(adj, 0)
    n_comp, labels = connected_components(adj, directed=True, connection="strong")
    if n_comp > 1:
        # states outside the strong component of state 0
        bad = sorted(int(i) for i in np.flatnonzero(labels != labels[0]))
        raise StructuralError(f"generator is reducible; states {bad} are not mutually reachable with state 0")


def stationary_distribution(Q) -> np.ndarray:
    """Probability vector ``s`` with ``s @ Q = 0``.

    Uses Grassmann-Taksar-Heyman elimination, which involves no
    subtractions and so keeps small stationary masses accurate to
    relative precision.
    """
    G = as_generator(Q)
    check_irreducible(G)
    K = G.dim
    if K == 1:
        return np.ones(1)
    return _kernels.gth_stationary(G.offdiagonal())


@dataclass
class LatentPath:
    """Piecewise-constant trajectory: ``states[i]`` holds on ``[jump_times[i-1], jump_times[i])``."""

    start_time: float
    end_time: float
    jump_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    states: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=int))

    def __post_init__(self):
        self.jump_times = np.asarray(self.jump_times, dtype=float)
        self.states = np.asarray(self.states, dtype=int)
        if self.states.size != self.jump_times.size + 1:
            raise StructuralError("a path needs exactly one more state than jump times")
        if self.end_time < self.start_time:
            raise StructuralError("path end precedes its start")
        if self.jump_times.size:
            if np.any(np.diff(self.jump_times) < 0) or self.jump_times[0] < self.start_time or self.jump_times[-1] > self.end_time:
                raise StructuralError("jump times must be increasing and inside the window")
            if np.any(self.states[1:] == self.states[:-1]):
                raise StructuralError("consecutive segment states must differ")

    @property
    def n_jumps(self) -> int:
        return self.jump_times.size

    @property
    def initial_state(self) -> int:
        return int(self.states[0])

    @property
    def final_state(self) -> int:
        return int(self.states[-1])

    @property
    def duration(self) -> float:
        return self.end_time - self.start_time

    def segments(self):
        """Yield ``(state, t_start, t_end)`` for every segment."""
        edges = np.r_[self.start_time, self.jump_times, self.end_time]
        for k, a, b in zip(self.states, edges[:-1], edges[1:]):
            yield int(k), float(a), float(b)

    def state_at(self, t):
        """State occupied at time(s) ``t`` (right-continuous)."""
        idx = np.searchsorted(self.jump_times, t, side="right")
        return self.states[idx]

    def split(self, t: float):
        """Split into two paths at interior time ``t``."""
        if not self.start_time < t < self.end_time:
            raise StructuralError("split time must be interior")
        k = np.searchsorted(self.jump_times, t, side="right")
        left = LatentPath(self.start_time, t, self.jump_times[:k], self.states[: k + 1])
        right = LatentPath(t, self.end_time, self.jump_times[k:], self.states[k:])
        return left, right


@dataclass
class PathStatistics:
    """Jump counts ``N[l, m]`` and occupancy times ``R[l]``."""

    jump_counts: np.ndarray
    occupancy: np.ndarray

    def __add__(self, other: "PathStatistics") -> "PathStatistics":
        return PathStatistics(self.jump_counts + other.jump_counts, self.occupancy + other.occupancy)

    @classmethod
    def zeros(cls, K: int) -> "PathStatistics":
        return cls(np.zeros((K, K), dtype=np.int64), np.zeros(K))


def path_statistics(path: LatentPath, K: int | None = None) -> PathStatistics:
    if K is None:
        K = int(path.states.max()) + 1
    N = np.zeros((K, K), dtype=np.int64)
    np.add.at(N, (path.states[:-1], path.states[1:]), 1)
    R = np.zeros(K)
    edges = np.r_[path.start_time, path.jump_times, path.end_time]
    np.add.at(R, path.states, np.diff(edges))
    return PathStatistics(N, R)


def _jump_probs(Q: np.ndarray, state: int) -> np.ndarray:
    p = np.clip(Q[state], 0.0, None).copy()
    p[state] = 0.0
    return p / p.sum()


def _forward(Q, state, t, horizon, rng, times, states):
    exit_rates = -np.diag(Q)
    while True:
        rate = exit_rates[state]
        if rate <= 0:
            return state
        t += rng.exponential(1.0 / rate)
        if t >= horizon:
            return state
        state = int(rng.choice(Q.shape[0], p=_jump_probs(Q, state)))
        times.append(t)
        states.append(state)


def simulate_path(Q, initial, horizon: float, rng: np.random.Generator, start_time: float = 0.0) -> LatentPath:
    """Gillespie simulation on ``[start_time, start_time + horizon]``.

    ``initial`` is either a state index or a probability vector.
    """
    Q = as_generator(Q).rates
    if not horizon > 0:
        raise NumericDomainError("horizon must be positive")
    if np.ndim(initial) == 0:
        state = int(initial)
    else:
        state = int(rng.choice(Q.shape[0], p=np.asarray(initial, dtype=float)))
    times, states = [], [state]
    end = start_time + horizon
    _forward(Q, state, start_time, end, rng, times, states)
    return LatentPath(start_time, end, np.array(times), np.array(states))


def endpoint_conditioned_path(
    Q,
    start_state: int,
    end_state: int,
    delta: float,
    rng: np.random.Generator,
    start_time: float = 0.0,
    max_rejections: int = MAX_REJECTIONS,
) -> LatentPath:
    """Draw a path conditioned on both endpoints by modified rejection sampling.

    When the endpoints differ the first jump time comes from the exponential
    truncated to ``[0, delta]``, so constant paths are never proposed. After
    ``max_rejections`` failures the direct uniformization sampler is used.
    """
    G = as_generator(Q)
    Q = G.rates
    a, b = int(start_state), int(end_state)
    if not delta > 0:
        raise NumericDomainError("delta must be positive")
    exit_rates = G.exit_rates
    end = start_time + delta
    for _ in range(max_rejections):
        times, states = [], [a]
        if a == b:
            last = _forward(Q, a, start_time, end, rng, times, states)
        else:
            r = exit_rates[a]
            if r <= 0:
                break
            u = rng.random()
            tau = -np.log1p(-u * -np.expm1(-r * delta)) / r
            nxt = int(rng.choice(Q.shape[0], p=_jump_probs(Q, a)))
            times.append(start_time + tau)
            states.append(nxt)
            last = _forward(Q, nxt, start_time + tau, end, rng, times, states)
        if last == b:
            return LatentPath(start_time, end, np.array(times), np.array(states))
    return uniformization_path(G, a, b, delta, rng, start_time)


def uniformization_path(Q, start_state: int, end_state: int, delta: float, rng, start_time: float = 0.0) -> LatentPath:
    """Direct endpoint-conditioned sampler via the uniformized jump chain."""
    G = as_generator(Q)
    Q = G.rates
    K = Q.shape[0]
    a, b = int(start_state), int(end_state)
    lam = float(G.exit_rates.max())
    P_ab = transition_matrix(G, delta)[a, b]
    if lam == 0.0 or P_ab <= 0.0:
        if a == b:
            return LatentPath(start_time, start_time + delta, np.empty(0), np.array([a]))
        raise SamplingError(f"endpoint pair ({a}, {b}) has zero probability over gap {delta}")
    U = _uniformized(Q, lam)
    x = lam * delta
    target = rng.random() * P_ab
    powers = [np.eye(K)]
    log_pmf = -x
    acc = 0.0
    n = 0
    n_max = _series_terms(x) + 50
    while True:
        acc += np.exp(log_pmf) * powers[n][a, b]
        if acc >= target or n >= n_max:
            break
        n += 1
        log_pmf += np.log(x) - np.log(n)
        powers.append(powers[-1] @ U)
    while len(powers) <= n:
        powers.append(powers[-1] @ U)
    if powers[n][a, b] <= 0:
        raise SamplingError(f"direct sampler could not connect states {a} and {b}")
    times = np.sort(rng.uniform(0.0, delta, size=n)) + start_time
    jump_times, states = [], [a]
    cur = a
    for i in range(n):
        remaining = n - i - 1
        w = U[cur] * powers[remaining][:, b]
        nxt = int(rng.choice(K, p=w / w.sum()))
        if nxt != cur:
            jump_times.append(times[i])
            states.append(nxt)
        cur = nxt
    return LatentPath(start_time, start_time + delta, np.array(jump_times), np.array(states))


def endpoint_conditioned_statistics(Q, starts, ends, deltas, rng: np.random.Generator,
                                    max_rejections: int = MAX_REJECTIONS) -> PathStatistics:
    """Summed :class:`PathStatistics` of independent endpoint-conditioned paths.

    Same sampler as :func:`endpoint_conditioned_path`, compiled, and without
    materializing the paths. The compiled RNG is reseeded from ``rng`` so the
    result is a deterministic function of the generator state.
    """
    G = as_generator(Q)
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    ends = np.ascontiguousarray(ends, dtype=np.int64)
    deltas = np.ascontiguousarray(deltas, dtype=float)
    _kernels.seed(int(rng.integers(2**31 - 1)))
    N, R, failed = _kernels.endpoint_statistics(G.rates, starts, ends, deltas, int(max_rejections))
    if failed >= 0:
        raise SamplingError(
            f"could not sample a path from state {starts[failed]} to {ends[failed]} "
            f"over gap {deltas[failed]} (interval {failed})"
        )
    return PathStatistics(N, R)
