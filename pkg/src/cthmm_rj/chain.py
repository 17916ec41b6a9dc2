"""Driver loop for the state-count samplers."""
from __future__ import annotations

import numpy as np

from .data import ObservationSet
from .emission import EmissionFamily
from .model import ModelState, PriorConfig
from .sampler import SamplerState, gibbs_sweep, initial_theta
from .transdim import bd_sweep, rj_step

SAMPLERS = ("rj", "bd")


def trace_record(iteration: int, state: SamplerState, move: str, accepted: bool, params: bool = True) -> dict:
    rec = {
        "iteration": int(iteration),
        "K": int(state.K),
        "loglik": float(state.loglik),
        "move": move,
        "accepted": bool(accepted),
    }
    if params:
        rec["theta"] = state.theta.to_dict()
    return rec


def run_chain(obs: ObservationSet, fam: EmissionFamily, prior: PriorConfig, n_iter: int, rng,
              sampler: str = "rj", burn_in: int = 0, thin: int = 1, k_init: int = 1,
              theta_init: ModelState | None = None, params: bool = True, on_record=None):
    """Alternate a dimension move with a fixed-K sweep for ``n_iter`` iterations.

    Records for iterations ``>= burn_in`` at multiples of ``thin`` are
    returned (and passed to ``on_record`` if given). The emission step size
    adapts during burn-in only.
    """
    if sampler not in SAMPLERS:
        raise ValueError(f"sampler must be one of {SAMPLERS}, got {sampler!r}")
    if n_iter < 0 or burn_in < 0 or thin < 1:
        raise ValueError("n_iter and burn_in must be nonnegative and thin positive")
    theta = theta_init if theta_init is not None else initial_theta(obs, k_init, fam)
    state = SamplerState(obs, theta, step_sd=prior.mh_step_sd)
    state.refresh()
    records = []
    for it in range(n_iter):
        state.adapting = it < burn_in
        if sampler == "rj":
            out = rj_step(state, prior, rng)
            move, accepted = out.move, out.accepted
        else:
            events = bd_sweep(state, prior, rng)
            move = ",".join(e.move for e in events if e.accepted) or "none"
            accepted = any(e.accepted for e in events)
        gibbs_sweep(state, prior, rng)
        if it >= burn_in and (it - burn_in) % thin == 0:
            rec = trace_record(it, state, move, accepted, params)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
    return records, state


def k_posterior(records, k_max: int | None = None) -> dict:
    ks = np.array([r["K"] for r in records])
    if ks.size == 0:
        raise ValueError("no records to summarize")
    top = int(ks.max()) if k_max is None else k_max
    counts = np.bincount(ks, minlength=top + 1)[1:]
    return {k + 1: float(counts[k] / ks.size) for k in range(counts.size)}
