"""Acceptance criteria, one test per criterion, each reporting a PASS/FAIL line."""
import math
import time

import numpy as np
import pytest
from scipy import stats

from cthmm_rj.chain import run_chain
from cthmm_rj.clustering import (MixtureState, cluster_combine_map, cluster_split_log_ratio, propose_cluster_combine,
                                 propose_cluster_split, run_clustering)
from cthmm_rj.ctmc import (LatentPath, endpoint_conditioned_path, path_statistics, stationary_distribution,
                           transition_matrix)
from cthmm_rj.data import ObservationSet
from cthmm_rj.emission import EmissionFamily
from cthmm_rj.experiments import generate_scenario, load_preset, replication_seeds, run_scenario
from cthmm_rj.hmm import marginal_loglik
from cthmm_rj.model import CoefficientPrior, ModelState, PriorConfig, sample_theta_from_prior, truncated_poisson_pmf
from cthmm_rj.sampler import SamplerState, draw_generator, update_initial_distribution
from cthmm_rj.summary import filled_signature, integrated_autocorr_time, modal_value
from cthmm_rj.transdim import (combine_log_ratio, combine_map, draw_split_aux, propose_combine, propose_split,
                               split_log_ratio, split_map)
from conftest import random_generator, random_model, random_observations, random_subject
from oracles import chi_square_pooled, enumeration_loglik, uniformization_series

FAM = EmissionFamily("gaussian", 1.0)
PROPER = PriorConfig(intercept_prior=CoefficientPrior("normal", 0.0, 2.0),
                     slope_prior=CoefficientPrior("normal", 0.0, 1.0))
Q2 = np.array([[-1.20, 1.20], [0.25, -0.25]])


def burned(records, fraction=0.25):
    return records[int(len(records) * fraction):]


def mass(values, target):
    values = list(values)
    return sum(v == target for v in values) / len(values)


# ---------------------------------------------------------------- 1. forward algorithm

def test_forward_matches_enumeration(verdict):
    rng = np.random.default_rng(1001)
    start = time.perf_counter()
    worst = 0.0
    for i in range(200):
        K = int(rng.integers(2, 4))
        T = int(rng.integers(3, 7))
        family = "gaussian" if i % 2 == 0 else "poisson"
        theta = random_model(rng, K, D=2, family=family)
        s = random_subject(rng, "s", T, n_cov=1, family=family)
        X = np.column_stack([np.ones(T), s.covariates])
        expected = enumeration_loglik(s.times, s.outcomes, X, theta.pi, theta.Q.rates, theta.B, family,
                                      theta.fam.dispersion)
        worst = max(worst, abs(marginal_loglik(ObservationSet([s]), theta) - expected))
    elapsed = time.perf_counter() - start
    verdict(1, worst < 1e-10 and elapsed < 60,
            f"200 instances, max |forward - enumeration| = {worst:.2e} (tol 1e-10), {elapsed:.1f}s (limit 60s)")


# ---------------------------------------------------------------- 2. matrix exponential

def test_matrix_exponential(verdict):
    rng = np.random.default_rng(1002)
    start = time.perf_counter()
    identity_exact = True
    semigroup = series = 0.0
    for _ in range(100):
        Q = random_generator(rng, 4, scale=rng.uniform(0.2, 3.0))
        identity_exact &= bool(np.array_equal(transition_matrix(Q, 0.0), np.eye(4)))
        s, t = rng.uniform(0.05, 3.0, 2)
        semigroup = max(semigroup, np.abs(transition_matrix(Q, s + t)
                                          - transition_matrix(Q, s) @ transition_matrix(Q, t)).max())
        series = max(series, np.abs(transition_matrix(Q, s) - uniformization_series(Q, s)).max())
    elapsed = time.perf_counter() - start
    ok = identity_exact and semigroup < 1e-8 and series < 1e-8 and elapsed < 60
    verdict(2, ok, f"identity exact={identity_exact}, semigroup err {semigroup:.1e}, series err {series:.1e} "
                   f"(tol 1e-8), {elapsed:.1f}s (limit 60s)")


# ---------------------------------------------------------------- 3. endpoint-conditioned paths

def test_endpoint_conditioned_constant_path(verdict):
    rng = np.random.default_rng(1003)
    start = time.perf_counter()
    n, delta = 100_000, 1.0
    constant = sum(endpoint_conditioned_path(Q2, 0, 0, delta, rng).jump_times.size == 0 for _ in range(n))
    elapsed = time.perf_counter() - start
    p = math.exp(Q2[0, 0] * delta) / transition_matrix(Q2, delta)[0, 0]
    se = math.sqrt(p * (1 - p) / n)
    phat = constant / n
    ok = abs(phat - p) < 3 * se and elapsed < 120
    verdict(3, ok, f"P(constant) = {phat:.5f} vs {p:.5f}, |z| = {abs(phat - p) / se:.2f} (limit 3), "
                   f"{elapsed:.1f}s (limit 120s)")


# ---------------------------------------------------------------- 4. conjugate updates

def _moment_z(draws, mean, var):
    n = draws.size
    z_mean = abs(draws.mean() - mean) / math.sqrt(var / n)
    sq = (draws - mean) ** 2
    z_var = abs(sq.mean() - var) / (sq.std() / math.sqrt(n))
    return max(z_mean, z_var)


def test_conjugate_updates(verdict):
    rng = np.random.default_rng(1004)
    start = time.perf_counter()
    n = 100_000
    prior = PriorConfig(q_shape=1.0, q_rate=2.0, dirichlet_alpha=1.0)
    path = LatentPath(0.0, 6.0, [0.5, 1.7, 2.0, 4.1, 5.0], [0, 1, 0, 1, 2, 0])
    ps = path_statistics(path, 3)
    draws = np.array([draw_generator(ps.jump_counts, ps.occupancy, prior, rng).rates for _ in range(n)])
    worst = 0.0
    for l in range(3):
        for m in range(3):
            if l == m:
                continue
            a = ps.jump_counts[l, m] + prior.q_shape
            b = ps.occupancy[l] + prior.q_rate
            worst = max(worst, _moment_z(draws[:, l, m], a / b, a / b**2))
    obs = random_observations(rng, 9)
    state = SamplerState(obs, random_model(rng, 3))
    first_states = np.array([0, 0, 0, 0, 1, 1, 2, 0, 1])
    state.indicators = np.zeros(obs.n_visits, dtype=np.int64)
    state.indicators[obs.first] = first_states
    alpha = np.bincount(first_states, minlength=3) + prior.dirichlet_alpha
    pis = np.array([update_initial_distribution(state, prior, rng) for _ in range(n)])
    a0 = alpha.sum()
    for k in range(3):
        mean = alpha[k] / a0
        var = alpha[k] * (a0 - alpha[k]) / (a0**2 * (a0 + 1))
        worst = max(worst, _moment_z(pis[:, k], mean, var))
    elapsed = time.perf_counter() - start
    verdict(4, worst < 3 and elapsed < 120,
            f"max moment |z| over Gamma and Dirichlet updates = {worst:.2f} (limit 3), {elapsed:.1f}s (limit 120s)")


# ---------------------------------------------------------------- 5. trans-dimensional algebra

def _random_theta(rng, K, D):
    return ModelState(rng.dirichlet(np.ones(K)), random_generator(rng, K), rng.normal(0, 2, (D, K)), FAM)


def _valid_split(rng, K, D):
    while True:
        theta = _random_theta(rng, K, D)
        aux = draw_split_aux(theta, PROPER, rng)
        new, _ = split_map(theta, aux)
        if new is not None:
            return theta, aux, new


def _mixture(components, weights):
    return MixtureState(np.asarray(weights, dtype=float), components, np.zeros(0, dtype=int))


def test_transdimensional_algebra(verdict):
    rng = np.random.default_rng(1005)
    start = time.perf_counter()
    trip = recip = station = 0.0
    # state split and combine
    for _ in range(100):
        K, D = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        theta, aux, new = _valid_split(rng, K, D)
        small, _, _, _ = combine_map(new, aux.target, K, PROPER)
        trip = max(trip, np.abs(small.Q.rates - theta.Q.rates).max(), np.abs(small.B - theta.B).max(),
                   np.abs(small.pi - theta.pi).max())
        s, s_new = stationary_distribution(theta.Q), stationary_distribution(new.Q)
        others = [i for i in range(K) if i != aux.target]
        station = max(station, np.abs(s_new[others] - s[others]).max(initial=0.0),
                      abs(s_new[aux.target] + s_new[K] - s[aux.target]))
    checked = 0
    while checked < 100:
        theta = _random_theta(rng, int(rng.integers(1, 5)), 2)
        prop = propose_split(theta, PROPER, rng)
        if not prop.valid:
            continue
        ll, ll_new = rng.normal(-50, 5, 2)
        fwd = split_log_ratio(theta, prop.theta_new, prop.aux, prop.log_jacobian, prop.multiplicity, PROPER,
                              ll, ll_new)
        rev = combine_log_ratio(propose_combine(prop.theta_new, prop.pair, prior=PROPER), PROPER, ll, ll_new)
        recip = max(recip, abs(fwd + rev))
        checked += 1
    for _ in range(100):
        K1 = int(rng.integers(2, 6))
        big = _random_theta(rng, K1, 1)
        i, j = (int(x) for x in rng.choice(K1, 2, replace=False))
        small, _, (A, Bn), _ = combine_map(big, i, j, PROPER)
        sb, ss = stationary_distribution(big.Q), stationary_distribution(small.Q)
        merged = A if A < Bn else A - 1
        keep = [k for k in range(K1) if k not in (A, Bn)]
        station = max(station, abs(ss[merged] - sb[A] - sb[Bn]),
                      np.abs(ss[[k if k < Bn else k - 1 for k in keep]] - sb[keep]).max(initial=0.0))
    # component split and combine
    checked = 0
    while checked < 100:
        M, K = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        comps = [sample_theta_from_prior(K, 2, FAM, PROPER, rng) for _ in range(M)]
        mix = _mixture(comps, rng.dirichlet(np.ones(M)) if M > 1 else [1.0])
        cand = propose_cluster_split(mix, PROPER, rng)
        if not cand.proposal.valid:
            continue
        big = _mixture(cand.components, cand.weights)
        back = propose_cluster_combine(big, (cand.index_a, cand.index_b))
        parent = mix.components[cand.index_a].sorted_by_intercept()
        trip = max(trip, np.abs(back.proposal.parent.Q.rates - parent.Q.rates).max(),
                   np.abs(back.proposal.parent.B - parent.B).max(), np.abs(back.proposal.parent.pi - parent.pi).max(),
                   np.abs(back.weights - mix.weights).max())
        ll, ll_new = rng.normal(-100, 10, 2)
        fwd = cluster_split_log_ratio(cand.proposal, mix.weights, cand.weights, cand.n_pair, PROPER, ll, ll_new)
        rev = -cluster_split_log_ratio(back.proposal, back.weights, big.weights, back.n_pair, PROPER, ll, ll_new)
        recip = max(recip, abs(fwd + rev))
        A, B = cand.components[cand.index_a], cand.components[cand.index_b]
        wA, wB = cand.weights[cand.index_a], cand.weights[cand.index_b]
        merged, _, _ = cluster_combine_map(A.sorted_by_intercept(), B.sorted_by_intercept(), wA, wB)
        w = wA / (wA + wB)
        s_mix = w * stationary_distribution(A.sorted_by_intercept().Q) \
            + (1 - w) * stationary_distribution(B.sorted_by_intercept().Q)
        station = max(station, np.abs(stationary_distribution(merged.Q) - s_mix).max(),
                      np.abs(stationary_distribution(parent.Q) - s_mix).max())
        checked += 1
    elapsed = time.perf_counter() - start
    ok = trip < 1e-12 and recip < 1e-10 and station < 1e-8 and elapsed < 120
    verdict(5, ok, f"round trip {trip:.1e} (tol 1e-12), reciprocity {recip:.1e} (tol 1e-10), "
                   f"stationary {station:.1e} (tol 1e-8), {elapsed:.1f}s (limit 120s)")


# ---------------------------------------------------------------- 6. prior recovery

def _prior_fit(values, probs):
    values = np.asarray(values)
    tau = integrated_autocorr_time(values)
    step = max(1, math.ceil(2 * tau))
    kept = values[::step]
    counts = np.bincount(kept, minlength=probs.size + 1)[1:probs.size + 1]
    stat, dof = chi_square_pooled(counts, probs)
    return stats.chi2.sf(stat, dof), tau, kept.size


def test_prior_recovery(verdict):
    # no subjects makes the likelihood identically zero on the log scale
    obs = ObservationSet([], n_covariates=0)
    prior = PriorConfig(intercept_prior=CoefficientPrior("normal", 0.0, 1.0))
    n = 200_000
    start = time.perf_counter()
    k_probs = truncated_poisson_pmf(prior.k_prior_rate, prior.k_max)
    m_probs = truncated_poisson_pmf(prior.m_prior_rate, prior.m_max)
    results = {}
    for sampler in ("rj", "bd"):
        recs, _ = run_chain(obs, FAM, prior, n, np.random.default_rng(1006), sampler=sampler, params=False)
        results[sampler] = _prior_fit([r["K"] for r in recs], k_probs)
    recs, _ = run_clustering(obs, FAM, prior, n, np.random.default_rng(1007), params=False)
    results["clustering M"] = _prior_fit([r["M"] for r in recs], m_probs)
    elapsed = time.perf_counter() - start
    ok = all(p > 0.01 for p, _, _ in results.values()) and elapsed < 600
    detail = ", ".join(f"{k}: p={p:.3f} (tau {t:.1f}, {m} draws)" for k, (p, t, m) in results.items())
    verdict(6, ok, f"{detail}; alpha 0.01, {elapsed:.0f}s (limit 600s)")


# ---------------------------------------------------------------- 7-9. desk-scale replications

def test_intercept_only_poisson_replication(verdict):
    cfg = load_preset("ex5_3").with_subjects(300)
    obs, _ = generate_scenario(cfg)
    start = time.perf_counter()
    recs = run_scenario(cfg.replace(n_iter=10_000, burn_in=0), obs, replication_seeds(cfg.seed, 1)[0])
    elapsed = time.perf_counter() - start
    kept = burned(recs)
    mode = modal_value(kept, "K")
    p3 = mass((r["K"] for r in kept), 3)
    ok = mode == 3 and p3 >= 0.70 and elapsed < 45 * 60
    verdict(7, ok, f"300 subjects, 10000 iterations: mode K = {mode}, P(K=3) = {p3:.4f} (need >= 0.70), "
                   f"{elapsed / 60:.1f} min (limit 45)")


def test_four_state_gaussian_replication(verdict):
    cfg = load_preset("ex5_1").with_subjects(300)
    obs, _ = generate_scenario(cfg)
    start = time.perf_counter()
    modes, masses = [], []
    for seed in replication_seeds(cfg.seed, 5):
        kept = burned(run_scenario(cfg.replace(n_iter=15_000, burn_in=0), obs, seed))
        modes.append(modal_value(kept, "K"))
        masses.append(round(mass((r["K"] for r in kept), 4), 3))
    elapsed = time.perf_counter() - start
    hits = modes.count(4)
    ok = hits >= 4 and elapsed < 120 * 60
    verdict(8, ok, f"5 runs x 15000 iterations: modes {modes}, P(K=4) {masses}, mode 4 in {hits}/5 (need 4), "
                   f"{elapsed / 60:.1f} min (limit 120)")


def test_two_cluster_replication(verdict):
    cfg = load_preset("ex5_4_pair")
    obs, _ = generate_scenario(cfg)
    start = time.perf_counter()
    recs = run_scenario(cfg.replace(n_iter=5000, burn_in=0), obs, replication_seeds(cfg.seed, 1)[0])
    elapsed = time.perf_counter() - start
    kept = burned(recs)
    m_mode = modal_value(kept, "M")
    filled_mode = modal_value(kept, "M_filled")
    at_mode = [r for r in kept if r["M"] == m_mode]
    k_modes = list(modal_value([{"s": list(filled_signature(r))} for r in at_mode], "s"))
    pm2 = mass((r["M"] for r in kept), 2)
    ok = m_mode == 2 and sorted(k_modes) == [2, 4] and elapsed < 60 * 60
    verdict(9, ok, f"5000 iterations: mode M = {m_mode} (P = {pm2:.3f}), filled clusters mode {filled_mode}, "
                   f"state-count modes {k_modes} (need [2, 4]), {elapsed / 60:.1f} min (limit 60)")
