"""Stratification, stratified SRSWOR and adaptive multiwave sampling."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .allocation import (
    DEFAULT_N_MIN,
    Allocation,
    PriorSpec,
    StratumTable,
    allocation_from_prior,
    model_implied_dispersions,
    proportional_allocation,
    wright_allocation,
)
from .errors import TwoPhaseError, WaveInfeasible
from .glm import fit_weighted_glm, predict_xhat


@dataclass(frozen=True)
class StratificationRule:
    """Either a cross-classification of discrete columns or quantile cuts on
    one continuous column."""

    columns: tuple[str, ...] = ()
    quantile_column: str | None = None
    probs: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if bool(self.columns) == (self.quantile_column is not None):
            raise ValueError("give either cross-classification columns or a quantile column")
        if self.quantile_column is not None:
            p = np.asarray(self.probs)
            if len(p) == 0 or np.any(p <= 0) or np.any(p >= 1) or np.any(np.diff(p) <= 0):
                raise ValueError("quantile probabilities must be strictly increasing in (0, 1)")

    @classmethod
    def cross(cls, *columns):
        return cls(columns=columns)

    @classmethod
    def quantiles(cls, column, probs):
        return cls(quantile_column=column, probs=tuple(probs))


@dataclass(frozen=True)
class Strata:
    """Result of :func:`stratify`.

    ``ids`` and ``sizes`` cover every cell of the rule, including empty ones
    (flagged in ``empty``); :meth:`table` drops the empty cells.
    """

    stratum: np.ndarray
    ids: np.ndarray
    sizes: np.ndarray
    labels: tuple
    cutpoints: np.ndarray | None = None

    @property
    def empty(self):
        return self.sizes == 0

    @property
    def has_empty(self):
        return bool(self.empty.any())

    def table(self, s=None):
        keep = ~self.empty
        s = np.ones(keep.sum()) if s is None else s
        return StratumTable(self.ids[keep], self.sizes[keep], s)


def order_statistic_cutpoints(values, probs):
    """Cut ``j`` is the order statistic at 0-based position ``floor(p_j N)``."""
    v = np.sort(np.asarray(values, float))
    pos = np.floor(np.asarray(probs) * len(v) + 1e-9).astype(int)
    return v[np.clip(pos, 0, len(v) - 1)]


def stratify(data, rule):
    """Assign every row to exactly one stratum (ids start at 1).

    Quantile strata are left-closed: ``v`` is in stratum ``j`` when
    ``q_{j-1} <= v < q_j``.
    """
    if rule.quantile_column is not None:
        v = np.asarray(data[rule.quantile_column], float)
        cuts = order_statistic_cutpoints(v, rule.probs)
        stratum = 1 + np.searchsorted(cuts, v, side="right")
        K = len(cuts) + 1
        ids = np.arange(1, K + 1)
        sizes = np.bincount(stratum, minlength=K + 1)[1:]
        edges = np.r_[-np.inf, cuts, np.inf]
        labels = tuple((edges[j], edges[j + 1]) for j in range(K))
        return Strata(stratum, ids, sizes, labels, cuts)

    levels = []
    codes = []
    for col in rule.columns:
        v = np.asarray(data[col])
        if v.dtype.kind == "f" and not np.all(np.isfinite(v) & (v == np.round(v))):
            raise ValueError(f"column {col!r} is not discrete")
        lev, inv = np.unique(v, return_inverse=True)
        levels.append(lev)
        codes.append(inv)
    radix = [len(lev) for lev in levels]
    index = np.zeros(len(codes[0]), dtype=np.int64)
    for code, r in zip(codes, radix):
        index = index * r + code
    K = int(np.prod(radix))
    stratum = index + 1
    sizes = np.bincount(index, minlength=K)
    labels = tuple(itertools.product(*[lev.tolist() for lev in levels]))
    return Strata(stratum, np.arange(1, K + 1), sizes, labels)


@dataclass(frozen=True)
class SampleDraw:
    R: np.ndarray
    pi: np.ndarray
    weight: np.ndarray


def _draw_within(stratum, counts_by_id, rng, exclude=None):
    """Mark ``counts_by_id[k]`` uniformly chosen rows of each stratum ``k``,
    skipping rows in ``exclude``."""
    keys = rng.random(len(stratum))
    if exclude is not None:
        keys[exclude] = 2.0
    order = np.lexsort((keys, stratum))
    s_sorted = stratum[order]
    starts = np.searchsorted(s_sorted, s_sorted, side="left")
    pos = np.arange(len(order)) - starts
    take = pos < counts_by_id(s_sorted)
    chosen = np.zeros(len(stratum), bool)
    chosen[order[take]] = True
    return chosen


def _lookup(ids, values):
    table = dict(zip(np.asarray(ids).tolist(), np.asarray(values).tolist()))

    def f(s):
        u, inv = np.unique(s, return_inverse=True)
        return np.array([table.get(k, 0) for k in u.tolist()])[inv]

    return f


def sample_stratified(allocation, stratum, rng):
    """Stratified simple random sampling without replacement.

    Returns indicators, inclusion probabilities ``n_k / N_k`` for every row
    and weights ``1 / pi`` (zero where ``pi`` is zero).
    """
    stratum = np.asarray(stratum)
    sizes = np.array([(stratum == k).sum() for k in allocation.ids])
    if np.any(sizes != allocation.N):
        raise ValueError("allocation does not match the stratum sizes")
    R = _draw_within(stratum, _lookup(allocation.ids, allocation.n), rng)
    pi = _lookup(allocation.ids, allocation.n / allocation.N)(stratum).astype(float)
    with np.errstate(divide="ignore"):
        w = np.where(pi > 0, 1.0 / np.where(pi > 0, pi, 1.0), 0.0)
    return SampleDraw(R, pi, w)


def sample_increment(ids, increment, stratum, rng, exclude=None):
    """Draw ``increment[k]`` new units per stratum among rows not in ``exclude``."""
    return _draw_within(np.asarray(stratum), _lookup(ids, increment), rng, exclude)


def stratum_lookup(ids, values, stratum):
    """Broadcast per-stratum ``values`` to the rows of ``stratum``."""
    return _lookup(ids, values)(np.asarray(stratum))


@dataclass(frozen=True)
class WaveSpec:
    """One wave of a multiwave plan.

    ``design`` is ``"proportional"`` or a :class:`PriorSpec` for the first
    wave; later waves are always optimised from current estimates.
    """

    size: int
    design: object = "proportional"


@dataclass
class WaveRecord:
    wave: int
    design: str
    increment: np.ndarray
    cumulative: np.ndarray
    alpha: np.ndarray | None
    beta: np.ndarray | None
    stream: str
    status: str = "ok"


@dataclass
class WaveLog:
    ids: np.ndarray
    N: np.ndarray
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def to_frame(self):
        rows = []
        for rec in self.records:
            for j, k in enumerate(self.ids):
                row = {
                    "wave": rec.wave, "stratum": int(k), "N": int(self.N[j]),
                    "design": rec.design, "allocated": int(rec.increment[j]),
                    "cumulative": int(rec.cumulative[j]), "stream": rec.stream,
                    "status": rec.status,
                }
                for name, est in (("alpha", rec.alpha), ("beta", rec.beta)):
                    row[name] = "" if est is None else " ".join(repr(float(x)) for x in est)
                rows.append(row)
        return pd.DataFrame(rows)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False)


@dataclass(frozen=True)
class MultiwaveResult:
    log: WaveLog
    cohort: object
    allocation: Allocation


def _fit_wave(cohort, R, w, outcome_spec, imputation_spec, x_column):
    """IPW fits of the imputation and outcome models on the current sample.

    Returns ``(alpha, beta, sigma, status)``; estimates are None on failure.
    """
    rows = np.flatnonzero(R)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            imp = fit_weighted_glm(cohort, imputation_spec, w[rows], rows=rows)
            out = fit_weighted_glm(cohort, outcome_spec, w[rows], rows=rows)
    except (TwoPhaseError, np.linalg.LinAlgError) as exc:
        return None, None, None, f"fit failed: {type(exc).__name__}"
    bad = [f"{name} {why}" for name, fit in (("imputation", imp), ("outcome", out))
           for why, flag in (("separated", fit.separated), ("not converged", not fit.converged))
           if flag]
    if bad:
        return None, None, None, "fit failed: " + ", ".join(bad)
    sigma = None
    if imputation_spec.family == "linear":
        x = cohort[imputation_spec.response][rows]
        resid = x - predict_xhat(imp, cohort, imputation_spec, rows)
        sigma = float(np.sqrt(np.sum(w[rows] * resid**2) / np.sum(w[rows])))
    return imp.beta, out.beta, sigma, "ok"


def multiwave_run(cohort, wave_plan, rng, outcome_spec, imputation_spec, x_column="X",
                  target=None, rule=None, n_min=DEFAULT_N_MIN):
    """Adaptive multiwave stratified sampling.

    Wave 1 follows its own design. Before each later wave the imputation and
    outcome models are refitted by IPW on everything sampled so far, the
    model-implied dispersions at those estimates are computed, and Wright's
    algorithm allocates the wave's units on top of the counts already taken
    (strata already over their optimal size receive nothing). If the fits
    fail, that wave falls back to a proportional increment.

    The combined sample is weighted as one stratified draw of the cumulative
    size: ``w_i = N_k / n_k``.

    Parameters
    ----------
    cohort : CohortFrame
    wave_plan : sequence of WaveSpec or (size, design) pairs
    rng : numpy.random.Generator
        Each wave draws from its own spawned child stream.
    """
    plan = [w if isinstance(w, WaveSpec) else WaveSpec(*w) for w in wave_plan]
    if not plan:
        raise ValueError("empty wave plan")
    if rule is not None:
        cohort = type(cohort)(cohort.data, stratify(cohort, rule).stratum, phase2=cohort.phase2)
    stratum = cohort.stratum
    table = StratumTable.from_strata(stratum)
    ids, Nk = table.ids, table.N
    total = sum(w.size for w in plan)
    if plan[0].size < np.minimum(n_min, Nk).sum():
        raise WaveInfeasible(f"wave 1 size {plan[0].size} cannot give every stratum {n_min} units")
    if total > Nk.sum():
        raise WaveInfeasible(f"plan total {total} exceeds the cohort size {Nk.sum()}")

    streams = rng.spawn(len(plan))
    log = WaveLog(ids, Nk)
    counts = np.zeros(len(ids), dtype=np.int64)
    R = np.zeros(len(stratum), bool)
    alpha = beta = sigma = None
    status = "ok"
    alloc = None
    for wave, spec in enumerate(plan, start=1):
        g = streams[wave - 1]
        cum = int(counts.sum() + spec.size)
        if wave == 1:
            if isinstance(spec.design, PriorSpec):
                design = "prior"
                alloc = allocation_from_prior(spec.design, cohort, spec.size, g, outcome_spec,
                                              imputation_spec, x_column, target, n_min)
            elif spec.design == "proportional":
                design = "proportional"
                alloc = proportional_allocation(table, spec.size, n_min)
            else:
                raise ValueError(f"unknown wave-1 design {spec.design!r}")
        elif beta is None:
            design = "proportional-fallback"
            alloc = proportional_allocation(table, cum, n_min, start=counts)
        else:
            design = "adaptive"
            s = model_implied_dispersions(cohort, beta, alpha, outcome_spec, imputation_spec,
                                          x_column, target, stratum, ids,
                                          sigma=sigma or 1.0, rng=g)
            # strata with nothing observed yet borrow the largest dispersion
            s = np.where(counts == 0, s.max(), s)
            alloc = wright_allocation(table.with_dispersions(s), cum, n_min, start=counts)
        increment = alloc.n - counts
        new = _draw_within(stratum, _lookup(ids, increment), g, exclude=R)
        R |= new
        counts = alloc.n.copy()
        log.records.append(WaveRecord(wave, design, increment, counts.copy(), alpha, beta,
                                      stream=f"wave-{wave}", status=status))
        if wave < len(plan):
            w = _lookup(ids, Nk / np.maximum(counts, 1))(stratum).astype(float) * R
            alpha, beta, sigma, status = _fit_wave(cohort, R, w, outcome_spec,
                                                   imputation_spec, x_column)

    pi = _lookup(ids, counts / Nk)(stratum).astype(float)
    weight = np.where(R, 1.0 / np.where(pi > 0, pi, 1.0), 0.0)
    final = cohort.with_sample(R, pi, weight)
    return MultiwaveResult(log, final, Allocation(ids, counts, Nk, n_min))
