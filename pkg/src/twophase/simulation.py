"""Data-generating processes and Monte Carlo replication loops.

Three scenarios are available:

``priors_binary``
    Binary X with a binary surrogate A, logistic outcome, 8 strata on
    (A, Y, Z2); two-wave designs with prior-based or proportional wave 1.
``raking_continuous``
    Normal X measured with error, linear outcome, 3 strata at the 20th and
    80th percentiles of the error-prone X; designs optimal for IPW (IF-IPW)
    or for raking (IF-GR).
``case_control``
    Rare binary outcome, normal X, strata defined by Y.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.special import expit, logit

from . import __version__
from .allocation import (
    PriorSpec,
    StratumTable,
    influence_dispersions,
    model_implied_dispersions,
    raking_optimal_dispersions,
    proportional_allocation,
    wright_allocation,
)
from .errors import ConfigError, FailureRateExceeded, TwoPhaseError
from .estimators import ipw_fit, phase1_auxiliaries, raking_fit
from .frame import CohortFrame
from .glm import (
    ModelSpec,
    fit_arrays,
    fit_imputation_model,
    fit_weighted_glm,
    phase1_influence,
    predict_xhat,
)
from .sampling import (
    StratificationRule,
    WaveSpec,
    multiwave_run,
    sample_increment,
    sample_stratified,
    stratify,
    stratum_lookup,
)

SCENARIOS = ("priors_binary", "raking_continuous", "case_control")

PRIORS_OUTCOME = ModelSpec("logistic", "Y", ("X", "Z1", "Z2"))
PRIORS_IMPUTATION = ModelSpec("logistic", "X", ("Z1", "Z2", "A", "Y"))
PRIORS_BETA = np.array([-2.0, 0.5, 1.0, 1.0])
PRIORS_RULE = StratificationRule.cross("A", "Y", "Z2")

RAKING_OUTCOME = ModelSpec("linear", "Y", ("X", "Z1", "Z2"))
RAKING_IMPUTATION = ModelSpec("linear", "X", ("Xt", "Z1", "Z2", "Y"))
RAKING_BETA = np.array([1.0, 0.0, 1.0, 1.0])
RAKING_RULE = StratificationRule.quantiles("Xt", (0.2, 0.8))
MEASUREMENT_SD = 0.5

CASE_CONTROL_OUTCOME = ModelSpec("logistic", "Y", ("X",))

# name -> (mean shift below truth, prior variance)
PRIOR_DESIGNS = {
    "well.strong": (np.sqrt(0.1) / 2, 0.1),
    "well.weak": (np.sqrt(0.1) / 2, 1.0),
    "poor.strong": (0.5, 0.1),
    "poor.weak": (0.5, 1.0),
}

# stable catalogue order: RNG streams are keyed by position here, so a
# design's draws do not depend on which other designs are requested
DESIGNS = ("census", "proportional", "optimal", "prop.two", *PRIOR_DESIGNS,
           "IF-IPW", "IF-GR")
ESTIMATORS = ("census", "ipw", "raking")

DEFAULTS = {
    "priors_binary": dict(N=1000, n=300, reps=1000,
                          designs=("well.strong", "well.weak", "poor.strong", "poor.weak", "prop.two"),
                          estimators=("raking", "ipw"),
                          wave_plans=((50, 250), (100, 200), (150, 150), (200, 100), (250, 50)),
                          mode="feasible", reference="prop.two"),
    "raking_continuous": dict(N=4000, n=600, reps=2000, designs=("IF-IPW", "IF-GR"),
                              estimators=("raking", "ipw"), wave_plans=((150, 450),),
                              mode="oracle", reference="IF-IPW"),
    "case_control": dict(N=10000, n=200, reps=200, designs=("IF-IPW", "proportional"),
                         estimators=("ipw",), wave_plans=((100, 100),), mode="oracle",
                         reference="proportional"),
}


def gen_priors_scenario(N, rng):
    """Binary X ~ Bern(0.15); A with sensitivity = specificity = 0.8;
    Z1 ~ U(0, 1); Z2 ~ Bern(0.6); logit P(Y=1) = -2 + 0.5 X + Z1 + Z2."""
    X = (rng.random(N) < 0.15).astype(float)
    flip = rng.random(N) < 0.2
    A = np.where(flip, 1.0 - X, X)
    Z1 = rng.random(N)
    Z2 = (rng.random(N) < 0.6).astype(float)
    eta = PRIORS_BETA[0] + PRIORS_BETA[1] * X + PRIORS_BETA[2] * Z1 + PRIORS_BETA[3] * Z2
    Y = (rng.random(N) < expit(eta)).astype(float)
    data = pd.DataFrame({"X": X, "A": A, "Z1": Z1, "Z2": Z2, "Y": Y})
    return CohortFrame(data, stratify(data, PRIORS_RULE).stratum)


def gen_raking_scenario(N, rng):
    """X ~ N(0, 1); Xt = X + U with U ~ N(0, 0.5^2); Z1 ~ Bern(0.5);
    Z2, eps ~ N(0, 1); Y = 1 + 0 X + Z1 + Z2 + eps."""
    X = rng.standard_normal(N)
    Xt = X + MEASUREMENT_SD * rng.standard_normal(N)
    Z1 = (rng.random(N) < 0.5).astype(float)
    Z2 = rng.standard_normal(N)
    Y = RAKING_BETA[0] + RAKING_BETA[1] * X + RAKING_BETA[2] * Z1 + RAKING_BETA[3] * Z2 \
        + rng.standard_normal(N)
    data = pd.DataFrame({"X": X, "Xt": Xt, "Z1": Z1, "Z2": Z2, "Y": Y})
    return CohortFrame(data, stratify(data, RAKING_RULE).stratum)


def gen_case_control_scenario(N, p0=0.05, rng=None, beta_x=0.0):
    """X ~ N(0, 1); logit P(Y=1) = logit(p0) + beta_x X; strata by Y
    (stratum 1 = controls, 2 = cases)."""
    rng = np.random.default_rng() if rng is None else rng
    X = rng.standard_normal(N)
    Y = (rng.random(N) < expit(logit(p0) + beta_x * X)).astype(float)
    data = pd.DataFrame({"X": X, "Y": Y})
    return CohortFrame(data, (Y + 1).astype(int))


def priors_true_alpha(nodes=64):
    """Best-fitting (pseudo-true) coefficients of the logistic imputation
    model X ~ Z1 + Z2 + A + Y under the priors scenario.

    The exact conditional P(X=1 | Z1, Z2, A, Y) is not linear-logistic, so the
    target is the population solution of the imputation score equations,
    computed by Gauss-Legendre quadrature over Z1 and enumeration of the
    discrete variables.
    """
    t, wq = np.polynomial.legendre.leggauss(nodes)
    z1 = (t + 1) / 2
    wq = wq / 2
    rows, weights, resp = [], [], []
    for z2, pz2 in ((0.0, 0.4), (1.0, 0.6)):
        for a in (0.0, 1.0):
            for y in (0.0, 1.0):
                joint = np.zeros((2, nodes))
                for x, px in ((0.0, 0.85), (1.0, 0.15)):
                    pa = 0.8 if a == x else 0.2
                    py = expit(PRIORS_BETA @ np.array([np.ones(nodes), np.full(nodes, x), z1,
                                                        np.full(nodes, z2)]))
                    py = py if y == 1 else 1 - py
                    joint[int(x)] = px * pa * py * pz2 * wq
                tot = joint.sum(0)
                rows.append(np.column_stack([np.ones(nodes), z1, np.full(nodes, z2),
                                             np.full(nodes, a), np.full(nodes, y)]))
                weights.append(tot)
                resp.append(joint[1] / tot)
    V = np.vstack(rows)
    beta, converged, _, _ = fit_arrays(V, np.concatenate(resp), np.concatenate(weights),
                                       "logistic", tol=1e-13)
    assert converged
    return beta


def raking_true_alpha():
    """Imputation coefficients for X ~ Xt + Z1 + Z2 + Y and residual sd.

    With no X effect on Y, E[X | Xt] = Xt / (1 + 0.25) and var = 0.25 / 1.25.
    """
    lam = 1.0 / (1.0 + MEASUREMENT_SD**2)
    return np.array([0.0, lam, 0.0, 0.0, 0.0]), float(np.sqrt(MEASUREMENT_SD**2 * lam))


@dataclass(frozen=True)
class ScenarioConfig:
    """Declarative description of a simulation run."""

    scenario: str
    N: int | None = None
    n: int | None = None
    reps: int | None = None
    seed: int = 20220101
    designs: tuple | None = None
    estimators: tuple | None = None
    wave_plans: tuple | None = None
    mode: str | None = None
    prior_draws: int = 500
    n_min: int = 2
    p0: float = 0.05
    beta_x: float = 0.0
    max_failure_rate: float = 0.02

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {', '.join(SCENARIOS)}")
        d = DEFAULTS[self.scenario]
        for key in ("N", "n", "reps", "designs", "estimators", "mode"):
            if getattr(self, key) is None:
                object.__setattr__(self, key, d[key])
        if self.wave_plans is None:
            # default plans keep their wave-1 fractions when n is overridden
            plans = tuple((max(1, round(p[0] * self.n / d["n"])),) for p in d["wave_plans"])
            plans = tuple(dict.fromkeys((min(p[0], self.n - 1), self.n - min(p[0], self.n - 1))
                                        for p in plans))
            object.__setattr__(self, "wave_plans", plans if self.n > 1 else ((self.n,),))
        object.__setattr__(self, "designs", tuple(self.designs))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "wave_plans", tuple(tuple(int(x) for x in p) for p in self.wave_plans))
        if self.n > self.N:
            raise ConfigError("n must not exceed N")
        if self.reps < 1:
            raise ConfigError("reps must be at least 1")
        if self.mode not in ("oracle", "feasible"):
            raise ConfigError("mode must be 'oracle' or 'feasible'")
        bad = [x for x in self.designs if x not in DESIGNS]
        if bad:
            raise ConfigError(f"unknown designs {bad}; choose from {', '.join(DESIGNS)}")
        bad = [x for x in self.estimators if x not in ESTIMATORS]
        if bad:
            raise ConfigError(f"unknown estimators {bad}; choose from {', '.join(ESTIMATORS)}")
        for plan in self.wave_plans:
            if sum(plan) != self.n or min(plan) < 1:
                raise ConfigError(f"wave plan {plan} must be positive and sum to n={self.n}")
        if self.scenario == "case_control" and not 0 < self.p0 < 1:
            raise ConfigError("p0 must be in (0, 1)")

    @property
    def reference(self):
        ref = DEFAULTS[self.scenario]["reference"]
        return ref if ref in self.designs else self.designs[0]

    def to_dict(self):
        d = asdict(self)
        d["designs"] = list(self.designs)
        d["estimators"] = list(self.estimators)
        d["wave_plans"] = [list(p) for p in self.wave_plans]
        return d


def _scenario_models(config):
    if config.scenario == "priors_binary":
        return PRIORS_OUTCOME, PRIORS_IMPUTATION, PRIORS_BETA
    if config.scenario == "raking_continuous":
        return RAKING_OUTCOME, RAKING_IMPUTATION, RAKING_BETA
    beta = np.array([logit(config.p0), config.beta_x])
    return CASE_CONTROL_OUTCOME, None, beta


def generate(config, rng):
    if config.scenario == "priors_binary":
        return gen_priors_scenario(config.N, rng)
    if config.scenario == "raking_continuous":
        return gen_raking_scenario(config.N, rng)
    return gen_case_control_scenario(config.N, config.p0, rng, config.beta_x)


def _stream(seed, rep, design=None, plan=0):
    key = (rep,) if design is None else (rep, 1 + DESIGNS.index(design), plan)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _single_wave(cohort, table, n, rng, n_min):
    alloc = wright_allocation(table, n, n_min)
    draw = sample_stratified(alloc, cohort.stratum, rng)
    return cohort.with_sample(draw.R, draw.pi, draw.weight), alloc


def _oracle_influence(cohort, outcome):
    return fit_weighted_glm(cohort, outcome).influence


def _oracle_auxiliaries(cohort, outcome, imputation):
    imp = fit_weighted_glm(cohort, imputation)
    return phase1_influence(cohort, outcome, predict_xhat(imp, cohort, imputation))


def _feasible_influence(cohort, outcome, imputation, pilot, rng):
    """Plug-in influence functions and auxiliaries after a pilot sample.

    Unsampled X are replaced by one draw from the fitted imputation model;
    the outcome model is fitted to the completed cohort for the plug-in
    influence functions, and the phase-1 pipeline gives the auxiliaries.
    """
    imp = fit_imputation_model(pilot, imputation)
    mean = predict_xhat(imp, pilot, imputation)
    rows = pilot.R
    if imputation.family == "logistic":
        draw = (rng.random(len(mean)) < mean).astype(float)
    else:
        resid = pilot[imputation.response][rows] - mean[rows]
        sigma = np.sqrt(np.average(resid**2, weights=pilot.weight[rows]))
        draw = mean + sigma * rng.standard_normal(len(mean))
    x = np.where(rows, pilot[imputation.response], draw)
    h = fit_weighted_glm(pilot, outcome, override={imputation.response: x}).influence
    a = phase1_influence(pilot, outcome, mean, imputation.response)
    return h, a


def _design_sample(config, cohort, design, plan_idx, rng, truth):
    """Draw the phase-II sample for one design. Returns (cohort, allocation)."""
    outcome, imputation, beta = _scenario_models(config)
    target = outcome.index("X")
    table = StratumTable.from_strata(cohort.stratum)
    n, n_min = config.n, config.n_min
    plan = config.wave_plans[plan_idx]

    if design == "census":
        R = np.ones(cohort.N, bool)
        return cohort.with_sample(R, np.ones(cohort.N), np.ones(cohort.N)), None
    if design == "proportional":
        return _single_wave(cohort, table, n, rng, n_min)
    if config.scenario == "priors_binary" and design in ("prop.two", "optimal", *PRIOR_DESIGNS):
        alpha = truth["alpha"]
        if design == "optimal":
            s = model_implied_dispersions(cohort, beta, alpha, outcome, imputation)
            return _single_wave(cohort, table.with_dispersions(s), n, rng, n_min)
        if design == "prop.two":
            first = "proportional"
        else:
            shift, var = PRIOR_DESIGNS[design]
            first = PriorSpec.shifted(beta, alpha, shift, var, config.prior_draws)
        waves = [WaveSpec(plan[0], first)] + [WaveSpec(s) for s in plan[1:]]
        res = multiwave_run(cohort, waves, rng, outcome, imputation, n_min=n_min)
        return res.cohort, res.allocation
    if design in ("IF-IPW", "IF-GR"):
        if config.mode == "oracle" or imputation is None:
            h = truth.get("h")
            if h is None:
                h = _oracle_influence(cohort, outcome)
            if design == "IF-IPW":
                return _single_wave(cohort, influence_dispersions(h, cohort.stratum, target), n, rng, n_min)
            a = truth.get("a")
            if a is None:
                a = _oracle_auxiliaries(cohort, outcome, imputation)
            return _single_wave(cohort, raking_optimal_dispersions(h, a, cohort.stratum, target),
                                n, rng, n_min)
        # feasible: proportional pilot, plug-in dispersions, optimal top-up
        pilot_alloc = proportional_allocation(table, plan[0], n_min)
        draw = sample_stratified(pilot_alloc, cohort.stratum, rng)
        pilot = cohort.with_sample(draw.R, draw.pi, draw.weight)
        h, a = _feasible_influence(pilot, outcome, imputation, pilot, rng)
        st = (influence_dispersions(h, cohort.stratum, target) if design == "IF-IPW"
              else raking_optimal_dispersions(h, a, cohort.stratum, target))
        alloc = wright_allocation(st, n, n_min, start=pilot_alloc.n)
        extra = sample_increment(alloc.ids, alloc.n - pilot_alloc.n, cohort.stratum, rng,
                                 exclude=pilot.R)
        R = pilot.R | extra
        pi = stratum_lookup(alloc.ids, alloc.n / alloc.N, cohort.stratum).astype(float)
        return cohort.with_sample(R, pi, np.where(R, 1.0 / pi, 0.0)), alloc
    raise ConfigError(f"design {design!r} is not available for scenario {config.scenario}")


def _estimate(config, sampled, estimator):
    # each replicate draws a fresh cohort, so standard errors include the phase-1 term
    outcome, imputation, _ = _scenario_models(config)
    if estimator == "census":
        return fit_weighted_glm(sampled, outcome)
    if estimator == "ipw":
        return ipw_fit(sampled, outcome, phase1=True)
    if imputation is None:
        raise ConfigError("raking needs an imputation model; not available for case_control")
    a = phase1_auxiliaries(sampled, outcome, imputation)
    return raking_fit(sampled, outcome, a, phase1=True)


def run_replicate(config, rep):
    """One replicate: a fresh cohort, every design, every estimator.

    Returns a list of result dicts (one per design x estimator) and a list of
    allocation records.
    """
    cohort = generate(config, _stream(config.seed, rep))
    outcome, imputation, beta = _scenario_models(config)
    truth = {}
    if config.scenario == "priors_binary":
        truth["alpha"] = _PRIORS_ALPHA()
    elif config.mode == "oracle" and any(d in ("IF-IPW", "IF-GR") for d in config.designs):
        truth["h"] = _oracle_influence(cohort, outcome)
        if imputation is not None and "IF-GR" in config.designs:
            truth["a"] = _oracle_auxiliaries(cohort, outcome, imputation)
    results, allocations = [], []
    multi = len(config.wave_plans) > 1
    for design in config.designs:
        plans = range(len(config.wave_plans)) if (multi and _is_multiwave(design)) else [0]
        for p in plans:
            tag = f"{design}@{config.wave_plans[p][0]}" if multi and _is_multiwave(design) else design
            rng = _stream(config.seed, rep, design, p)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    sampled, alloc = _design_sample(config, cohort, design, p, rng, truth)
            except (TwoPhaseError, np.linalg.LinAlgError) as exc:
                for est in config.estimators:
                    results.append(dict(rep=rep, design=tag, estimator=est, ok=False,
                                        error=type(exc).__name__))
                continue
            if alloc is not None:
                for k, nk in zip(alloc.ids, alloc.n):
                    allocations.append(dict(rep=rep, design=tag, stratum=int(k), n=int(nk)))
            for est in config.estimators:
                try:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore")
                        fit = _estimate(config, sampled, est)
                except (TwoPhaseError, np.linalg.LinAlgError) as exc:
                    results.append(dict(rep=rep, design=tag, estimator=est, ok=False,
                                        error=type(exc).__name__))
                    continue
                ok = fit.converged and not fit.separated
                results.append(dict(rep=rep, design=tag, estimator=est, ok=ok,
                                    error="" if ok else ("separation" if fit.separated else "nonconvergence"),
                                    beta=fit.beta, se=np.sqrt(np.clip(np.diag(fit.vcov), 0, None))))
    return results, allocations


def _is_multiwave(design):
    return design == "prop.two" or design in PRIOR_DESIGNS


_ALPHA_CACHE = {}


def _PRIORS_ALPHA():
    if "a" not in _ALPHA_CACHE:
        _ALPHA_CACHE["a"] = priors_true_alpha()
    return _ALPHA_CACHE["a"]


def _run_chunk(args):
    config, reps = args
    return [run_replicate(config, r) for r in reps]


def jackknife_sd(x):
    """Leave-one-out standard deviations of ``x`` (ddof=1), vectorised."""
    x = np.asarray(x, float)
    R = len(x)
    S, Q = x.sum(), (x * x).sum()
    m = (S - x) / (R - 1)
    ss = (Q - x * x) - (R - 1) * m * m
    return np.sqrt(np.maximum(ss, 0.0) / (R - 2))


def jackknife_se(loo):
    """Jackknife standard error from leave-one-out statistics."""
    loo = np.asarray(loo, float)
    R = len(loo)
    return float(np.sqrt((R - 1) / R * np.sum((loo - loo.mean()) ** 2)))


@dataclass
class MetricsTable:
    """Aggregated simulation metrics plus the per-replicate raw results."""

    config: ScenarioConfig
    summary: pd.DataFrame
    replicates: pd.DataFrame
    allocations: pd.DataFrame = field(default_factory=pd.DataFrame)

    def estimates(self, design, estimator, coefficient="X", ok_only=True):
        d = self.replicates
        sel = (d.design == design) & (d.estimator == estimator) & (d.coefficient == coefficient)
        if ok_only:
            sel &= d.ok
        return d.loc[sel].sort_values("rep")

    def row(self, design, estimator, coefficient="X"):
        s = self.summary
        hit = s[(s.design == design) & (s.estimator == estimator) & (s.coefficient == coefficient)]
        return hit.iloc[0]

    def mean_allocation(self, design):
        a = self.allocations
        return a[a.design == design].groupby("stratum")["n"].mean()

    def to_long(self):
        metrics = ["bias", "empirical_se", "empirical_se_mcse", "mean_estimated_se",
                   "relative_efficiency", "replicates_used", "failures"]
        rows = []
        for rec in self.summary.itertuples(index=False):
            for m in metrics:
                rows.append((self.config.scenario, rec.design, rec.estimator, rec.coefficient,
                             m, getattr(rec, m)))
        if len(self.allocations):
            mean = self.allocations.groupby(["design", "stratum"], sort=False)["n"].mean()
            for (design, k), v in mean.items():
                rows.append((self.config.scenario, design, "allocation", f"stratum{k}", "mean_n", v))
        return pd.DataFrame(rows, columns=["scenario", "design", "estimator", "coefficient",
                                           "metric", "value"])


def _aggregate(config, results, allocations):
    outcome, _, beta_true = _scenario_models(config)
    terms = outcome.terms
    rep_rows = []
    for r in results:
        for j, term in enumerate(terms):
            rep_rows.append(dict(rep=r["rep"], design=r["design"], estimator=r["estimator"],
                                 coefficient=term, ok=bool(r["ok"]), error=r["error"],
                                 estimate=float(r["beta"][j]) if "beta" in r else np.nan,
                                 se=float(r["se"][j]) if "se" in r else np.nan))
    reps = pd.DataFrame(rep_rows)
    tags = list(dict.fromkeys(reps.design))
    summary = []
    for tag in tags:
        for est in config.estimators:
            for j, term in enumerate(terms):
                d = reps[(reps.design == tag) & (reps.estimator == est) & (reps.coefficient == term)]
                good = d[d.ok]
                used, failed = len(good), len(d) - len(good)
                x = good.estimate.to_numpy()
                emp = float(x.std(ddof=1)) if used >= 2 else 0.0
                mcse = jackknife_se(jackknife_sd(x)) if used >= 3 else np.nan
                summary.append(dict(design=tag, estimator=est, coefficient=term,
                                    bias=float(x.mean() - beta_true[j]) if used else np.nan,
                                    empirical_se=emp, empirical_se_mcse=mcse,
                                    mean_estimated_se=float(good.se.mean()) if used else np.nan,
                                    replicates_used=used, failures=failed))
    summary = pd.DataFrame(summary)
    ref = config.reference
    rel = []
    for rec in summary.itertuples(index=False):
        _, at, plan = rec.design.partition("@")
        ref_tag = f"{ref}@{plan}" if at and _is_multiwave(ref) else ref
        r = summary[(summary.design == ref_tag) & (summary.estimator == rec.estimator)
                    & (summary.coefficient == rec.coefficient)]
        if len(r) and rec.empirical_se > 0:
            rel.append(float(r.empirical_se.iloc[0] ** 2 / rec.empirical_se**2))
        else:
            rel.append(np.nan)
    summary["relative_efficiency"] = rel
    return MetricsTable(config, summary, reps, pd.DataFrame(allocations))


def run_replications(config, workers=1, check_failures=True):
    """Run every replicate of ``config`` and aggregate.

    Replicate ``r`` draws only from streams derived from ``(seed, r)``, so
    the output does not depend on ``workers``.
    """
    reps = list(range(config.reps))
    if workers > 1:
        chunks = [reps[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(workers) as ex:
            out = list(ex.map(_run_chunk, [(config, c) for c in chunks]))
        by_rep = {}
        for chunk, res in zip(chunks, out):
            for r, item in zip(chunk, res):
                by_rep[r] = item
        ordered = [by_rep[r] for r in reps]
    else:
        ordered = [run_replicate(config, r) for r in reps]
    results = [x for res, _ in ordered for x in res]
    allocations = [x for _, al in ordered for x in al]
    table = _aggregate(config, results, allocations)
    if check_failures:
        worst = table.summary.failures.max()
        if worst > config.max_failure_rate * config.reps:
            raise FailureRateExceeded(
                f"{worst} of {config.reps} replicates failed for some design/estimator "
                f"(limit {config.max_failure_rate:.0%})")
    return table


def metadata(config, **extra):
    """Everything needed to reproduce a run."""
    return {"package": "twophase", "version": __version__, "config": config.to_dict(), **extra}
