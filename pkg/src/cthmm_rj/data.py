"""Irregularly timed longitudinal observations."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pandas as pd

from .emission import design_matrix
from .errors import StructuralError


@dataclass
class Subject:
    subject_id: str
    times: np.ndarray
    outcomes: np.ndarray
    covariates: np.ndarray  # (T, D-1)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.outcomes = np.asarray(self.outcomes, dtype=float)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov.reshape(self.times.size, -1)
        self.covariates = cov
        if self.times.size < 1:
            raise StructuralError(f"subject {self.subject_id} has no visits")
        if self.outcomes.shape != self.times.shape or self.covariates.shape[0] != self.times.size:
            raise StructuralError(f"subject {self.subject_id}: times/outcomes/covariates lengths differ")
        if np.any(np.diff(self.times) <= 0):
            raise StructuralError(f"subject {self.subject_id}: visit times must be strictly increasing")
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.outcomes)) and np.all(np.isfinite(self.covariates))):
            raise StructuralError(f"subject {self.subject_id}: non-finite values")

    @property
    def n_visits(self) -> int:
        return self.times.size

    @property
    def gaps(self) -> np.ndarray:
        return np.diff(self.times)


class ObservationSet:
    """Per-subject visits plus flattened arrays used by the numerical kernels.

    ``offsets[n]:offsets[n+1]`` selects subject ``n`` in the flat arrays and
    ``gaps[i]`` is the time since the previous visit of the same subject
    (0 at first visits).
    """

    def __init__(self, subjects, n_covariates: int | None = None):
        self.subjects = list(subjects)
        dims = {s.covariates.shape[1] for s in self.subjects}
        if n_covariates is not None:
            dims.add(int(n_covariates))
        if len(dims) > 1:
            raise StructuralError(f"covariate dimension differs across subjects: {sorted(dims)}")
        self.n_covariates = dims.pop() if dims else 0
        lengths = np.array([s.n_visits for s in self.subjects], dtype=np.int64)
        self.offsets = np.r_[0, np.cumsum(lengths)].astype(np.int64)
        if self.subjects:
            self.times = np.concatenate([s.times for s in self.subjects])
            self.outcomes = np.concatenate([s.outcomes for s in self.subjects])
            cov = np.vstack([s.covariates for s in self.subjects])
            self.gaps = np.concatenate([np.r_[0.0, s.gaps] for s in self.subjects])
        else:
            self.times = np.empty(0)
            self.outcomes = np.empty(0)
            cov = np.empty((0, 0))
            self.gaps = np.empty(0)
        self.X = design_matrix(cov, n=self.times.size) if self.subjects else np.empty((0, self.n_covariates + 1))
        self.first = self.offsets[:-1]
        is_first = np.zeros(self.times.size, dtype=bool)
        is_first[self.first] = True
        # visits that close an interval
        self.interval_ends = np.flatnonzero(~is_first)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_visits(self) -> int:
        return self.times.size

    @property
    def n_coefficients(self) -> int:
        return self.n_covariates + 1

    @property
    def subject_ids(self):
        return [s.subject_id for s in self.subjects]

    def subset(self, indices) -> "ObservationSet":
        if len(indices) == 0:
            return _empty_set(self.n_covariates)
        return ObservationSet([self.subjects[i] for i in indices], n_covariates=self.n_covariates)

    def __len__(self):
        return self.n_subjects

    def __repr__(self):
        return f"ObservationSet(n_subjects={self.n_subjects}, n_visits={self.n_visits}, n_covariates={self.n_covariates})"

    @classmethod
    def from_arrays(cls, subject_ids, times, outcomes, covariates=None) -> "ObservationSet":
        subject_ids = np.asarray(subject_ids)
        times = np.asarray(times, dtype=float)
        outcomes = np.asarray(outcomes, dtype=float)
        if covariates is None:
            covariates = np.empty((times.size, 0))
        covariates = np.asarray(covariates, dtype=float).reshape(times.size, -1)
        subjects = []
        _, first_idx = np.unique(subject_ids, return_index=True)
        for i in np.sort(first_idx):
            sid = subject_ids[i]
            m = subject_ids == sid
            subjects.append(Subject(str(sid), times[m], outcomes[m], covariates[m]))
        return cls(subjects)

    def to_frame(self) -> pd.DataFrame:
        ids = np.repeat(self.subject_ids, np.diff(self.offsets))
        df = pd.DataFrame({"subject_id": ids, "time": self.times, "outcome": self.outcomes})
        for d in range(self.n_covariates):
            df[f"z{d + 1}"] = self.X[:, d + 1]
        return df

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "ObservationSet":
        missing = {"subject_id", "time", "outcome"} - set(df.columns)
        if missing:
            raise StructuralError(f"data is missing columns {sorted(missing)}")
        zcols = sorted((c for c in df.columns if c.startswith("z") and c[1:].isdigit()), key=lambda c: int(c[1:]))
        return cls.from_arrays(
            df["subject_id"].astype(str).to_numpy(),
            df["time"].to_numpy(float),
            df["outcome"].to_numpy(float),
            df[zcols].to_numpy(float) if zcols else None,
        )

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.10g")

    @classmethod
    def from_csv(cls, path) -> "ObservationSet":
        return cls.from_frame(pd.read_csv(path, dtype={"subject_id": str}))


@lru_cache(maxsize=16)
def _empty_set(n_covariates: int) -> ObservationSet:
    return ObservationSet([], n_covariates=n_covariates)
