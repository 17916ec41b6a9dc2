import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cthmm_rj import CTHMMClusterer, CTHMMEstimator, CoefficientPrior, PriorConfig, generate_scenario, load_preset
from cthmm_rj.errors import StructuralError
from cthmm_rj.estimator import check_observations, check_prior, posterior_mean_theta


@pytest.fixture(scope="module")
def two_state_data():
    cfg = load_preset("ex5_4_pair").with_subjects(25, 0)
    obs, truth = generate_scenario(cfg)
    return obs, truth


def test_get_params_and_clone():
    est = CTHMMEstimator(n_iter=50, sampler="bd", random_state=3)
    params = est.get_params()
    assert params["n_iter"] == 50 and params["sampler"] == "bd"
    assert clone(est).get_params() == params
    est.set_params(burn_in=10)
    assert est.burn_in == 10


def test_predict_before_fit_raises(two_state_data):
    obs, _ = two_state_data
    with pytest.raises(NotFittedError):
        CTHMMEstimator().predict(obs)


def test_invalid_params_rejected(two_state_data):
    obs, _ = two_state_data
    with pytest.raises(ValueError):
        CTHMMEstimator(sampler="gibbs").fit(obs)
    with pytest.raises(ValueError):
        CTHMMEstimator(n_iter=5, burn_in=5).fit(obs)


def test_fit_recovers_two_states(two_state_data):
    obs, truth = two_state_data
    # a proper coefficient prior gives extra states their Occam penalty
    prior = {"intercept_prior": {"kind": "normal", "loc": 0.0, "scale": 10.0}}
    est = CTHMMEstimator(n_iter=300, burn_in=100, prior=prior, random_state=1, k_init=2).fit(obs)
    assert est.k_mode_ == 2
    assert abs(sum(est.posterior_k_.values()) - 1.0) < 1e-12
    np.testing.assert_allclose(est.theta_.B[0], [-3.5, 3.5], atol=0.3)
    states = est.predict(obs)
    true_states = np.concatenate([p.state_at(s.times) for p, s in zip(truth.paths, obs.subjects)])
    assert np.mean(states == true_states) > 0.95
    proba = est.predict_proba(obs)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert np.isfinite(est.score(obs))


def test_fit_is_reproducible(two_state_data):
    obs, _ = two_state_data
    a = CTHMMEstimator(n_iter=30, random_state=7).fit(obs)
    b = CTHMMEstimator(n_iter=30, random_state=7).fit(obs)
    assert a.records_ == b.records_


def test_frame_input_matches_observation_set(two_state_data):
    obs, _ = two_state_data
    a = CTHMMEstimator(n_iter=20, random_state=2).fit(obs)
    b = CTHMMEstimator(n_iter=20, random_state=2).fit(obs.to_frame())
    assert a.records_ == b.records_


def test_covariate_mismatch_on_predict(two_state_data):
    obs, _ = two_state_data
    est = CTHMMEstimator(n_iter=10, random_state=0).fit(obs)
    frame = obs.to_frame()
    frame["z1"] = 0.0
    with pytest.raises(StructuralError):
        est.predict(frame)


def test_check_helpers():
    with pytest.raises(TypeError):
        check_observations([1, 2, 3])
    assert check_prior(None) == PriorConfig()
    assert check_prior({"k_max": 4}).k_max == 4
    with pytest.raises(TypeError):
        check_prior(3)


def test_posterior_mean_needs_snapshots():
    with pytest.raises(ValueError):
        posterior_mean_theta([{"K": 2}], K=2)


def test_clusterer_separates_components():
    cfg = load_preset("ex5_4_pair").with_subjects(12, 12)
    obs, truth = generate_scenario(cfg)
    prior = PriorConfig(intercept_prior=CoefficientPrior("normal", 0.0, 10.0))
    cl = CTHMMClusterer(n_iter=60, burn_in=20, prior=prior, m_init=2, k_init=2, random_state=4).fit(obs)
    assert abs(sum(cl.posterior_m_.values()) - 1.0) < 1e-12
    assert abs(sum(cl.posterior_m_filled_.values()) - 1.0) < 1e-12
    labels = cl.predict(obs)
    assert labels.shape == (24,)
    # the two generating clusters end up in different components
    a, b = labels[:12], labels[12:]
    assert len(set(a)) == 1 and len(set(b)) == 1 and a[0] != b[0]
    np.testing.assert_allclose(cl.predict_proba(obs).sum(axis=1), 1.0, atol=1e-12)
