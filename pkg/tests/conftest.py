import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cthmm_rj.data import ObservationSet, Subject  # noqa: E402
from cthmm_rj.emission import EmissionFamily  # noqa: E402
from cthmm_rj.model import ModelState  # noqa: E402


def random_generator(rng, K, scale=1.0, sparse=0.0):
    Q = rng.gamma(1.0, scale, (K, K))
    if sparse:
        Q[rng.random((K, K)) < sparse] = 0.0
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q


def random_model(rng, K, D=1, family="gaussian", sigma=1.0, spread=2.0):
    fam = EmissionFamily(family, sigma)
    B = rng.normal(0.0, spread, (D, K))
    if family == "poisson":
        B = rng.normal(0.5, 0.7, (D, K))
    pi = rng.dirichlet(np.ones(K))
    return ModelState(pi, random_generator(rng, K), B, fam)


def random_subject(rng, sid, T, n_cov=0, family="gaussian", horizon=5.0):
    times = np.r_[0.0, np.sort(rng.uniform(0.0, horizon, T - 1))]
    if family == "poisson":
        y = rng.poisson(2.0, T).astype(float)
    else:
        y = rng.normal(0.0, 2.0, T)
    return Subject(sid, times, y, rng.normal(size=(T, n_cov)))


def random_observations(rng, n_subjects, T_range=(3, 6), n_cov=0, family="gaussian"):
    subs = [random_subject(rng, f"s{n}", int(rng.integers(*T_range, endpoint=True)), n_cov, family)
            for n in range(n_subjects)]
    return ObservationSet(subs, n_covariates=n_cov)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def gaussian():
    return EmissionFamily("gaussian", 1.0)


@pytest.fixture
def poisson():
    return EmissionFamily("poisson")


@pytest.fixture
def q2():
    """Two-state generator with exit rates 1.20 and 0.25."""
    return np.array([[-1.2, 1.2], [0.25, -0.25]])


@pytest.fixture
def small_obs(rng):
    return random_observations(rng, 4, n_cov=1)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def report(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
