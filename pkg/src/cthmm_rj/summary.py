"""Trace persistence and posterior summaries."""
from __future__ import annotations

import json
from collections import Counter
from pathlib import Path

import numpy as np
import pandas as pd

from .emission import EmissionFamily
from .errors import StructuralError
from .model import ModelState

CI_LEVEL = 0.95


def write_trace(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


class TraceWriter:
    """Append records to a JSON Lines file as they are produced."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w")
        self.count = 0
        self._last = -1

    def __call__(self, record: dict) -> None:
        if record["iteration"] <= self._last:
            raise StructuralError("trace iterations must be strictly increasing")
        self._last = record["iteration"]
        self._fh.write(json.dumps(record) + "\n")
        self.count += 1

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trace(path) -> list:
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise StructuralError(f"{path}:{line_no}: malformed trace record ({exc.msg})") from exc
    return records


def is_clustering_trace(records) -> bool:
    return bool(records) and "M" in records[0]


def discard_burn_in(records, burn_in: int) -> list:
    """Drop the first ``burn_in`` records; at least one must remain."""
    if burn_in < 0:
        raise ValueError("burn_in must be nonnegative")
    if burn_in >= len(records):
        raise ValueError(f"burn-in {burn_in} leaves no records out of {len(records)}")
    return list(records[burn_in:])


def count_posterior(records, key: str = "K") -> pd.DataFrame:
    """Posterior mass of each value of ``K`` or ``M`` from 1 to the largest visited."""
    vals = np.array([r[key] for r in records], dtype=np.int64)
    if vals.size == 0:
        raise ValueError("no records to summarize")
    counts = np.bincount(vals)[1:]
    col = key.lower()
    return pd.DataFrame({col: np.arange(1, counts.size + 1), "posterior_probability": counts / vals.size})


def modal_value(records, key: str):
    vals = [r[key] if not isinstance(r[key], list) else tuple(r[key]) for r in records]
    counts = Counter(vals)
    top = max(counts.values())
    # ties go to the smallest value
    return min(v for v, c in counts.items() if c == top)


def integrated_autocorr_time(x, window_factor: float = 5.0) -> float:
    """Integrated autocorrelation time with Sokal's adaptive window.

    The window is the smallest ``M`` with ``M >= window_factor * tau(M)``.
    A constant series returns 1.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2:
        return 1.0
    y = x - x.mean()
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(y, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n]
    if acov[0] <= 0:
        return 1.0
    rho = acov / acov[0]
    taus = 2.0 * np.cumsum(rho) - 1.0
    ok = np.arange(n) >= window_factor * taus
    m = int(np.argmax(ok)) if ok.any() else n - 1
    return float(max(taus[m], 1.0))


def credible_interval(samples, level: float = CI_LEVEL, axis: int = 0):
    tail = (1.0 - level) / 2.0
    return np.quantile(samples, tail, axis=axis), np.quantile(samples, 1.0 - tail, axis=axis)


def theta_from_record(d: dict) -> ModelState:
    return ModelState(d["pi"], d["Q"], d["B"], EmissionFamily(**d["family"]))


def flatten_theta(theta: ModelState, prefix: str = "") -> dict:
    """Named scalars of a parameter set, states relabelled by ascending intercept."""
    t = theta.sorted_by_intercept()
    K = t.K
    out = {}
    for k in range(K):
        out[f"{prefix}pi_{k + 1}"] = float(t.pi[k])
    for l in range(K):
        for m in range(K):
            if l != m:
                out[f"{prefix}q_{l + 1}_{m + 1}"] = float(t.Q.rates[l, m])
    for d in range(t.D):
        for k in range(K):
            out[f"{prefix}b_{d}_{k + 1}"] = float(t.B[d, k])
    if not t.fam.is_poisson:
        out[f"{prefix}sigma"] = float(t.fam.dispersion)
    return out


def _summary_frame(rows: list, level: float) -> pd.DataFrame:
    if not rows:
        raise ValueError("no parameter snapshots in the retained records")
    df = pd.DataFrame(rows)
    lo, hi = credible_interval(df.to_numpy(), level)
    return pd.DataFrame({"parameter": df.columns, "mean": df.mean().to_numpy(), "lower": lo, "upper": hi,
                         "n_draws": len(df)})


def parameter_summary(records, level: float = CI_LEVEL) -> pd.DataFrame:
    """Posterior means and equal-tailed intervals conditional on the modal ``K``."""
    k = modal_value(records, "K")
    rows = [flatten_theta(theta_from_record(r["theta"])) for r in records if r["K"] == k and "theta" in r]
    out = _summary_frame(rows, level)
    out.insert(0, "K", k)
    return out


def _component_order(rec: dict) -> list:
    # descending subject count, ties by state count then mean intercept
    counts = rec["counts"]
    comps = rec.get("components")

    def key(m):
        level = float(np.mean(comps[m]["B"][0])) if comps else 0.0
        return (-counts[m], rec["K"][m], level, m)

    return sorted(range(len(counts)), key=key)


def state_count_signature(rec: dict) -> tuple:
    """Per-component state counts as a sorted tuple (label-free)."""
    return tuple(sorted(rec["K"]))


def filled_signature(rec: dict) -> tuple:
    """Sorted state counts of the components that hold subjects."""
    return tuple(sorted(k for k, c in zip(rec["K"], rec["counts"]) if c > 0))


def ordered_signature(rec: dict) -> tuple:
    """Per-component state counts with components ordered by descending size."""
    return tuple(rec["K"][m] for m in _component_order(rec))


def _modal_ordered_records(records):
    M = modal_value(records, "M")
    at_m = [r for r in records if r["M"] == M]
    sig = Counter(ordered_signature(r) for r in at_m).most_common(1)[0][0]
    return M, sig, [r for r in at_m if ordered_signature(r) == sig]


def cluster_parameter_summary(records, level: float = CI_LEVEL) -> pd.DataFrame:
    """Per-component summaries at the modal ``M`` and modal size-ordered state counts.

    Components are labelled by descending subject count and states within a
    component by ascending intercept.
    """
    M, sig, keep = _modal_ordered_records(records)
    rows = []
    for r in keep:
        if "components" not in r:
            continue
        row = {}
        for rank, m in enumerate(_component_order(r)):
            row[f"c{rank + 1}_weight"] = float(r["weights"][m])
            row.update(flatten_theta(theta_from_record(r["components"][m]), prefix=f"c{rank + 1}_"))
        rows.append(row)
    out = _summary_frame(rows, level)
    out.insert(0, "state_counts", ",".join(map(str, sig)))
    out.insert(0, "M", M)
    return out


def state_count_table(records) -> pd.DataFrame:
    """Posterior of the sorted per-component state counts given each visited ``M``."""
    rows = []
    by_m = Counter(r["M"] for r in records)
    joint = Counter((r["M"], state_count_signature(r)) for r in records)
    for (M, sig), c in sorted(joint.items()):
        rows.append({"M": M, "state_counts": ",".join(map(str, sig)), "conditional_probability": c / by_m[M],
                     "posterior_probability": c / len(records)})
    return pd.DataFrame(rows)


def component_state_modes(records, M: int | None = None) -> list:
    """Modal sorted state-count vector among records with ``M`` components (modal ``M`` by default)."""
    M = modal_value(records, "M") if M is None else M
    sigs = Counter(state_count_signature(r) for r in records if r["M"] == M)
    if not sigs:
        raise ValueError(f"no records with M = {M}")
    return list(sigs.most_common(1)[0][0])


def membership_summary(records) -> pd.DataFrame:
    """Mean subjects per size-ordered component at the modal ``M``; rows sum to the subject count."""
    M, sig, keep = _modal_ordered_records(records)
    counts = np.zeros(M)
    for r in keep:
        counts += np.asarray(r["counts"], dtype=float)[_component_order(r)]
    return pd.DataFrame({"component": np.arange(1, M + 1), "K": list(sig), "mean_subjects": counts / len(keep)})


def trace_series(records) -> pd.DataFrame:
    """Plot-ready per-iteration series."""
    if is_clustering_trace(records):
        return pd.DataFrame({
            "iteration": [r["iteration"] for r in records],
            "M": [r["M"] for r in records],
            "M_filled": [r["M_filled"] for r in records],
            "K": [";".join(map(str, r["K"])) for r in records],
            "loglik": [r["loglik"] for r in records],
        })
    return pd.DataFrame({
        "iteration": [r["iteration"] for r in records],
        "K": [r["K"] for r in records],
        "loglik": [r["loglik"] for r in records],
    })


def summarize_records(records, burn_in: int = 0, level: float = CI_LEVEL) -> dict:
    """All tables for a trace, keyed by output name."""
    kept = discard_burn_in(records, burn_in)
    out = {"trace": trace_series(kept)}
    has_params = any("theta" in r or "components" in r for r in kept)
    if is_clustering_trace(kept):
        out["posterior_m"] = count_posterior(kept, "M")
        out["posterior_m_filled"] = count_posterior(kept, "M_filled")
        out["state_counts"] = state_count_table(kept)
        out["membership"] = membership_summary(kept)
        if has_params:
            out["parameters"] = cluster_parameter_summary(kept, level)
    else:
        out["posterior_k"] = count_posterior(kept, "K")
        if has_params:
            out["parameters"] = parameter_summary(kept, level)
    return out
