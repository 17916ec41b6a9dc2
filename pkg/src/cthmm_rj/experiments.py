"""Simulation scenarios, presets and replication runs."""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .chain import k_posterior, run_chain
from .clustering import run_clustering
from .ctmc import simulate_path
from .data import ObservationSet, Subject
from .emission import EmissionFamily, simulate_observations
from .errors import StructuralError
from .model import ModelState, PriorConfig

SAMPLER_KINDS = ("rj", "bd", "clustering")


@dataclass
class ComponentTruth:
    """Generating parameters of one population (one cluster, or the whole sample)."""

    Q: list
    pi: list
    B: list
    n_subjects: int

    def model(self, fam: EmissionFamily) -> ModelState:
        return ModelState(self.pi, self.Q, self.B, fam)


@dataclass
class CovariateLaw:
    """Per-visit covariate distribution: ``normal`` (mean, sd) or ``binomial`` (n, p)."""

    law: str
    mean: float = 0.0
    sd: float = 1.0
    n: int = 1
    p: float = 0.5

    def __post_init__(self):
        if self.law not in ("normal", "binomial"):
            raise StructuralError(f"covariate law must be normal or binomial, got {self.law!r}")

    def draw(self, rng, size):
        if self.law == "normal":
            return rng.normal(self.mean, self.sd, size)
        return rng.binomial(self.n, self.p, size).astype(float)


@dataclass
class ScenarioConfig:
    """A data-generating scenario plus the sampler settings used to analyse it."""

    name: str
    family: str
    components: list
    sigma: float = 1.0
    covariates: list = field(default_factory=list)
    horizon: float = 15.0
    visits_min: int = 20
    visits_max: int = 60
    prior: dict = field(default_factory=dict)
    sampler: str = "rj"
    n_iter: int = 1000
    burn_in: int = 0
    thin: int = 1
    seed: int = 0
    description: str = ""

    def __post_init__(self):
        self.components = [c if isinstance(c, ComponentTruth) else ComponentTruth(**c) for c in self.components]
        self.covariates = [c if isinstance(c, CovariateLaw) else CovariateLaw(**c) for c in self.covariates]
        self.validate()

    @property
    def fam(self) -> EmissionFamily:
        return EmissionFamily(self.family, self.sigma)

    @property
    def n_subjects(self) -> int:
        return int(sum(c.n_subjects for c in self.components))

    @property
    def n_coefficients(self) -> int:
        return len(self.covariates) + 1

    def prior_config(self) -> PriorConfig:
        return PriorConfig.from_dict(self.prior)

    def validate(self):
        if not self.horizon > 0:
            raise StructuralError(f"{self.name}: horizon must be positive")
        if not 1 <= self.visits_min <= self.visits_max:
            raise StructuralError(f"{self.name}: need 1 <= visits_min <= visits_max")
        if self.sampler not in SAMPLER_KINDS:
            raise StructuralError(f"{self.name}: sampler must be one of {SAMPLER_KINDS}")
        if not self.components:
            raise StructuralError(f"{self.name}: at least one component is required")
        for i, c in enumerate(self.components):
            try:
                m = c.model(self.fam)
            except Exception as exc:
                raise StructuralError(f"{self.name}: components[{i}]: {exc}") from exc
            if m.D != self.n_coefficients:
                raise StructuralError(
                    f"{self.name}: components[{i}].B has {m.D} rows but {len(self.covariates)} covariates are configured"
                )
            if c.n_subjects < 0:
                raise StructuralError(f"{self.name}: components[{i}].n_subjects must be nonnegative")
        self.prior_config()

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise StructuralError(f"unknown scenario fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "ScenarioConfig":
        d = self.to_dict()
        d.update(changes)
        return ScenarioConfig.from_dict(d)

    def with_subjects(self, *sizes) -> "ScenarioConfig":
        """Copy with new per-component subject counts (one size is broadcast)."""
        if len(sizes) == 1:
            sizes = sizes * len(self.components)
        if len(sizes) != len(self.components):
            raise StructuralError(f"{self.name}: expected {len(self.components)} sizes, got {len(sizes)}")
        comps = [dict(asdict(c), n_subjects=int(n)) for c, n in zip(self.components, sizes)]
        return self.replace(components=comps)


def available_presets() -> list:
    return sorted(p.name[:-5] for p in resources.files("cthmm_rj.presets").iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> ScenarioConfig:
    path = resources.files("cthmm_rj.presets") / f"{name}.json"
    if not path.is_file():
        raise StructuralError(f"unknown preset {name!r}; available: {', '.join(available_presets())}")
    return ScenarioConfig.from_dict(json.loads(path.read_text()))


@dataclass
class GroundTruth:
    """Generating parameters, per-subject component labels and latent paths."""

    components: list
    memberships: np.ndarray
    paths: list

    def to_dict(self):
        return {
            "components": [c.to_dict() for c in self.components],
            "memberships": self.memberships.tolist(),
            "paths": [
                {"start_time": p.start_time, "end_time": p.end_time,
                 "jump_times": p.jump_times.tolist(), "states": p.states.tolist()}
                for p in self.paths
            ],
        }


def visit_times(n_visits: int, horizon: float, rng) -> np.ndarray:
    """First visit at 0, the rest uniform on ``(0, horizon)``."""
    rest = np.sort(rng.uniform(0.0, horizon, n_visits - 1))
    return np.r_[0.0, rest]


def generate_scenario(cfg: ScenarioConfig, rng=None):
    """Simulate the scenario; returns ``(ObservationSet, GroundTruth)``.

    With ``rng=None`` the generator is seeded from ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    fam = cfg.fam
    models = [c.model(fam) for c in cfg.components]
    subjects, paths, labels = [], [], []
    n = 0
    for label, (comp, model) in enumerate(zip(cfg.components, models)):
        for _ in range(comp.n_subjects):
            path = simulate_path(model.Q, model.pi, cfg.horizon, rng)
            T = int(rng.integers(cfg.visits_min, cfg.visits_max + 1))
            times = visit_times(T, cfg.horizon, rng)
            states = path.state_at(times)
            Z = np.column_stack([law.draw(rng, T) for law in cfg.covariates]) if cfg.covariates else np.empty((T, 0))
            X = np.column_stack([np.ones(T), Z])
            y = simulate_observations(X, states, model.B, fam, rng)
            subjects.append(Subject(f"s{n:05d}", times, y, Z))
            paths.append(path)
            labels.append(label)
            n += 1
    obs = ObservationSet(subjects, n_covariates=len(cfg.covariates))
    return obs, GroundTruth(models, np.array(labels, dtype=np.int64), paths)


def run_scenario(cfg: ScenarioConfig, obs: ObservationSet, seed: int, params: bool = False, n_iter: int | None = None):
    """Run the configured sampler once; returns the retained trace records."""
    rng = np.random.default_rng(seed)
    prior = cfg.prior_config()
    n_iter = cfg.n_iter if n_iter is None else n_iter
    if cfg.sampler == "clustering":
        records, _ = run_clustering(obs, cfg.fam, prior, n_iter, rng, burn_in=cfg.burn_in, thin=cfg.thin, params=params)
    else:
        records, _ = run_chain(obs, cfg.fam, prior, n_iter, rng, sampler=cfg.sampler, burn_in=cfg.burn_in,
                               thin=cfg.thin, params=params)
    return records


def posterior_counts(records, key: str) -> dict:
    """Posterior distribution of ``K`` (single-model chains) or ``M`` (clustering chains)."""
    if key == "K":
        return k_posterior(records)
    vals = np.array([r[key] for r in records])
    if vals.size == 0:
        raise ValueError("no records to summarize")
    counts = np.bincount(vals)[1:]
    return {k + 1: float(counts[k] / vals.size) for k in range(counts.size)}


def _replicate(args):
    cfg_dict, obs, seed = args
    cfg = ScenarioConfig.from_dict(cfg_dict)
    key = "M" if cfg.sampler == "clustering" else "K"
    return posterior_counts(run_scenario(cfg, obs, seed), key)


def replication_seeds(base_seed: int, replications: int) -> list:
    """Independent chain seeds derived from one base seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(base_seed).spawn(replications)]


def run_replication_study(cfg: ScenarioConfig, replications: int, chain_seeds=None, obs=None, n_jobs: int = 1):
    """Run independent chains on one fixed dataset.

    Returns ``{"posteriors": [...], "modes": [...], "mode_frequency": {...}}``
    where each posterior maps the count (K or M) to its posterior mass.
    """
    if replications < 1:
        raise ValueError("replications must be positive")
    if obs is None:
        obs, _ = generate_scenario(cfg)
    seeds = list(chain_seeds) if chain_seeds is not None else replication_seeds(cfg.seed + 1, replications)
    if len(seeds) != replications:
        raise ValueError("one chain seed per replication is required")
    jobs = [(cfg.to_dict(), obs, s) for s in seeds]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            posteriors = list(pool.map(_replicate, jobs))
    else:
        posteriors = [_replicate(j) for j in jobs]
    modes = [max(p, key=p.get) for p in posteriors]
    freq = {int(k): modes.count(k) / replications for k in sorted(set(modes))}
    return {"seeds": seeds, "posteriors": posteriors, "modes": modes, "mode_frequency": freq}
