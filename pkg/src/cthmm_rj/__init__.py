"""Bayesian continuous-time hidden Markov models with unknown state and cluster counts."""
from .chain import k_posterior, run_chain
from .clustering import MixtureState, run_clustering
from .ctmc import (GeneratorMatrix, LatentPath, PathStatistics, endpoint_conditioned_path, path_statistics,
                   simulate_path, stationary_distribution, transition_matrix)
from .data import ObservationSet, Subject
from .emission import EmissionFamily, emission_logpdf
from .errors import (CTHMMError, LikelihoodImpossibleError, MoveUnavailableError, NumericDomainError,
                     SamplingError, StaleCacheError, StructuralError)
from .estimator import CTHMMClusterer, CTHMMEstimator
from .experiments import ScenarioConfig, generate_scenario, load_preset, run_replication_study
from .hmm import forward_backward, marginal_loglik
from .model import CoefficientPrior, ModelState, PriorConfig
from .transdim import bd_sweep, rj_step

__version__ = "0.1.0"

__all__ = [
    "CTHMMClusterer", "CTHMMError", "CTHMMEstimator", "CoefficientPrior", "EmissionFamily", "GeneratorMatrix",
    "LatentPath", "LikelihoodImpossibleError", "MixtureState", "ModelState", "MoveUnavailableError",
    "NumericDomainError", "ObservationSet", "PathStatistics", "PriorConfig", "SamplingError", "ScenarioConfig",
    "StaleCacheError", "StructuralError", "Subject", "bd_sweep", "emission_logpdf", "endpoint_conditioned_path",
    "forward_backward", "generate_scenario", "k_posterior", "load_preset", "marginal_loglik", "path_statistics",
    "rj_step", "run_chain", "run_clustering", "run_replication_study", "simulate_path", "stationary_distribution",
    "transition_matrix",
]
