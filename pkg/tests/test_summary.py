import math

import numpy as np
import pytest

from cthmm_rj.clustering import run_clustering
from cthmm_rj.emission import EmissionFamily
from cthmm_rj.errors import StructuralError
from cthmm_rj.model import CoefficientPrior, ModelState, PriorConfig
from cthmm_rj.summary import (TraceWriter, component_state_modes, count_posterior, credible_interval,
                              discard_burn_in, filled_signature, flatten_theta, integrated_autocorr_time,
                              membership_summary, modal_value, parameter_summary, read_trace, state_count_table,
                              summarize_records, write_trace)
from conftest import random_observations

FAM = EmissionFamily("gaussian", 1.0)


def sorted_quantile(x, p):
    """Linear-interpolation quantile computed from a plain sort."""
    s = sorted(x)
    h = (len(s) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (h - lo) * (s[hi] - s[lo])


def theta_record(it, B, pi=None, Q=None):
    K = len(B[0])
    pi = pi if pi is not None else [1.0 / K] * K
    Q = Q if Q is not None else (np.ones((K, K)) - K * np.eye(K)).tolist()
    return {"iteration": it, "K": K, "loglik": 0.0, "move": "split", "accepted": False,
            "theta": ModelState(pi, Q, B, FAM).to_dict()}


def cluster_record(it, K, counts):
    return {"iteration": it, "M": len(K), "M_filled": sum(c > 0 for c in counts), "K": K, "loglik": 0.0,
            "move": "cluster_split", "accepted": False, "counts": counts}


# ---------------------------------------------------------------- intervals

@pytest.mark.parametrize("n", [1, 2, 7, 40, 401])
def test_credible_interval_matches_sort_oracle(n):
    x = np.random.default_rng(n).normal(size=n)
    lo, hi = credible_interval(x)
    assert lo == pytest.approx(sorted_quantile(x, 0.025), abs=1e-12)
    assert hi == pytest.approx(sorted_quantile(x, 0.975), abs=1e-12)


def test_single_record_is_point_mass():
    rec = theta_record(0, [[0.5, 2.0]])
    out = summarize_records([rec], burn_in=0)
    post = out["posterior_k"]
    assert post["posterior_probability"].tolist() == [0.0, 1.0]
    p = out["parameters"].set_index("parameter")
    assert p.loc["b_0_2", "mean"] == p.loc["b_0_2", "lower"] == p.loc["b_0_2", "upper"] == 2.0
    assert (p["n_draws"] == 1).all()


def test_burn_in_covering_trace_is_an_error():
    recs = [theta_record(i, [[0.0]]) for i in range(3)]
    with pytest.raises(ValueError, match="no records"):
        summarize_records(recs, burn_in=3)
    with pytest.raises(ValueError):
        discard_burn_in(recs, -1)


def test_count_posterior_sums_to_one():
    recs = [{"K": k} for k in [1, 3, 3, 2, 3, 5]]
    df = count_posterior(recs, "K")
    assert df["k"].tolist() == [1, 2, 3, 4, 5]
    assert abs(df["posterior_probability"].sum() - 1.0) < 1e-12
    assert df["posterior_probability"].tolist()[2] == pytest.approx(0.5)


def test_modal_value_ties_go_to_smallest():
    assert modal_value([{"K": 3}, {"K": 2}, {"K": 3}, {"K": 2}], "K") == 2


# ---------------------------------------------------------------- relabelling

def test_parameters_sorted_by_intercept():
    a = theta_record(0, [[3.0, -1.0]], pi=[0.8, 0.2])
    b = theta_record(1, [[-1.2, 2.8]], pi=[0.3, 0.7])
    p = parameter_summary([a, b]).set_index("parameter")["mean"]
    assert p["b_0_1"] == pytest.approx(-1.1) and p["b_0_2"] == pytest.approx(2.9)
    assert p["pi_1"] == pytest.approx(0.25) and p["pi_2"] == pytest.approx(0.75)


def test_parameter_summary_conditions_on_modal_k():
    recs = [theta_record(0, [[0.0, 1.0]]), theta_record(1, [[0.0, 3.0]]), theta_record(2, [[5.0]])]
    out = parameter_summary(recs)
    assert (out["K"] == 2).all()
    assert out.set_index("parameter").loc["b_0_2", "mean"] == pytest.approx(2.0)


def test_flatten_names_every_parameter():
    theta = ModelState([0.2, 0.3, 0.5], np.ones((3, 3)) - 3 * np.eye(3), np.arange(6.0).reshape(2, 3), FAM)
    names = flatten_theta(theta)
    assert len(names) == 3 + 6 + 6 + 1
    assert "q_2_3" in names and "b_1_3" in names and "q_2_2" not in names


# ---------------------------------------------------------------- clustering tables

def test_state_count_table_conditionals():
    recs = [cluster_record(0, [2, 4], [5, 5]), cluster_record(1, [4, 2], [6, 4]),
            cluster_record(2, [2, 3, 4], [5, 0, 5]), cluster_record(3, [3, 4], [5, 5])]
    t = state_count_table(recs)
    at2 = t[t["M"] == 2].set_index("state_counts")["conditional_probability"]
    assert at2["2,4"] == pytest.approx(2 / 3) and at2["3,4"] == pytest.approx(1 / 3)
    assert abs(t["posterior_probability"].sum() - 1.0) < 1e-12
    assert component_state_modes(recs) == [2, 4]


def test_filled_signature_ignores_empty_components():
    assert filled_signature(cluster_record(0, [3, 2, 4], [5, 0, 5])) == (3, 4)


def test_membership_rows_sum_to_subjects():
    recs = [cluster_record(0, [2, 4], [7, 3]), cluster_record(1, [4, 2], [2, 8]), cluster_record(2, [2, 4], [6, 4])]
    m = membership_summary(recs)
    assert m["mean_subjects"].sum() == pytest.approx(10)
    assert m["mean_subjects"].iloc[0] >= m["mean_subjects"].iloc[1]


def test_clustering_trace_summaries(rng):
    obs = random_observations(rng, 8)
    prior = PriorConfig(intercept_prior=CoefficientPrior("normal", 0.0, 3.0))
    recs, _ = run_clustering(obs, FAM, prior, 12, rng, m_init=2)
    out = summarize_records(recs, burn_in=2)
    assert {"trace", "posterior_m", "posterior_m_filled", "state_counts", "membership", "parameters"} <= set(out)
    assert abs(out["posterior_m"]["posterior_probability"].sum() - 1.0) < 1e-12
    assert list(out["trace"].columns) == ["iteration", "M", "M_filled", "K", "loglik"]
    assert out["membership"]["mean_subjects"].sum() == pytest.approx(8)


# ---------------------------------------------------------------- persistence

def test_trace_round_trip(tmp_path):
    recs = [theta_record(i, [[0.0, float(i)]]) for i in range(4)]
    path = tmp_path / "t.jsonl"
    write_trace(recs, path)
    assert read_trace(path) == recs


def test_trace_writer_requires_increasing_iterations(tmp_path):
    with TraceWriter(tmp_path / "t.jsonl") as tw:
        tw({"iteration": 0})
        tw({"iteration": 2})
        with pytest.raises(StructuralError):
            tw({"iteration": 2})
    assert tw.count == 2


def test_malformed_trace_names_line(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text('{"iteration": 0}\n{oops\n')
    with pytest.raises(StructuralError, match=":2:"):
        read_trace(path)


# ---------------------------------------------------------------- autocorrelation

def test_autocorr_time_of_white_noise():
    x = np.random.default_rng(3).normal(size=20_000)
    assert integrated_autocorr_time(x) == pytest.approx(1.0, abs=0.1)


def test_autocorr_time_of_ar1():
    rng = np.random.default_rng(4)
    phi, n = 0.8, 200_000
    e = rng.normal(size=n)
    x = np.empty(n)
    x[0] = e[0]
    for t in range(1, n):
        x[t] = phi * x[t - 1] + e[t]
    # closed form (1 + phi) / (1 - phi)
    assert integrated_autocorr_time(x) == pytest.approx(9.0, rel=0.1)


def test_autocorr_time_of_constant_series():
    assert integrated_autocorr_time(np.ones(50)) == 1.0
