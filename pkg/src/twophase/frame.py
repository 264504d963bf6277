"""The phase-I cohort container."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd


@dataclass(frozen=True)
class CohortFrame:
    """Phase-I data plus the phase-II sampling state of every unit.

    Parameters
    ----------
    data : pandas.DataFrame
        One row per cohort member. Phase-II columns (``phase2``) may hold
        the true values in simulations; only rows with ``R == 1`` are ever
        read by estimation code.
    stratum : ndarray of int
        Stratum label in ``1..K`` for each row.
    R : ndarray of bool, optional
        Phase-II sampling indicator. Defaults to all False.
    pi : ndarray of float, optional
        Inclusion probabilities. Defaults to zero.
    weight : ndarray of float, optional
        Design (or adjusted) weights; only meaningful where ``R`` is set.
    phase2 : tuple of str
        Names of the columns measured at phase II.
    """

    data: pd.DataFrame
    stratum: np.ndarray
    R: np.ndarray | None = None
    pi: np.ndarray | None = None
    weight: np.ndarray | None = None
    phase2: tuple[str, ...] = ("X",)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.data)
        stratum = np.asarray(self.stratum, dtype=np.int64)
        if stratum.shape != (n,):
            raise ValueError("stratum must have one entry per row")
        if n and stratum.min() < 1:
            raise ValueError("stratum ids must be in 1..K")
        object.__setattr__(self, "stratum", stratum)
        R = np.zeros(n, bool) if self.R is None else np.asarray(self.R, bool)
        pi = np.zeros(n) if self.pi is None else np.asarray(self.pi, float)
        if self.weight is None:
            with np.errstate(divide="ignore"):
                w = np.where(pi > 0, 1.0 / np.where(pi > 0, pi, 1.0), 0.0)
        else:
            w = np.asarray(self.weight, float)
        for name, arr in (("R", R), ("pi", pi), ("weight", w)):
            if arr.shape != (n,):
                raise ValueError(f"{name} must have one entry per row")
        if np.any(w[R] <= 0):
            raise ValueError("weights must be positive for sampled rows")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "phase2", tuple(self.phase2))

    def __len__(self):
        return len(self.data)

    def __getitem__(self, name):
        """Column ``name`` as a float ndarray (cached)."""
        try:
            return self._cache[name]
        except KeyError:
            arr = self.data[name].to_numpy(dtype=float)
            self._cache[name] = arr
            return arr

    @property
    def columns(self):
        return list(self.data.columns)

    @property
    def N(self):
        return len(self.data)

    @property
    def n(self):
        return int(self.R.sum())

    @property
    def stratum_ids(self):
        return np.unique(self.stratum)

    def stratum_sizes(self, ids=None):
        ids = self.stratum_ids if ids is None else np.asarray(ids)
        return np.array([(self.stratum == k).sum() for k in ids], dtype=np.int64)

    def sampled_counts(self, ids=None):
        ids = self.stratum_ids if ids is None else np.asarray(ids)
        return np.array([(self.R & (self.stratum == k)).sum() for k in ids], dtype=np.int64)

    def with_sample(self, R, pi=None, weight=None):
        """Return a copy carrying a new phase-II sample."""
        return replace(self, R=R, pi=pi, weight=weight, _cache=self._cache)

    def with_weights(self, weight):
        return replace(self, weight=weight, _cache=self._cache)

    def with_column(self, name, values):
        data = self.data.copy()
        data[name] = values
        return replace(self, data=data, _cache={})

    def observed(self):
        """The frame's data with phase-II columns masked to NaN where unsampled."""
        data = self.data.copy()
        for col in self.phase2:
            if col in data:
                data[col] = data[col].where(self.R)
        return data
