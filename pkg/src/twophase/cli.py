"""Command-line interface: ``twophase {allocate,sample,estimate,simulate}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure
rate above the configured threshold.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import __version__
from .allocation import (
    DEFAULT_N_MIN,
    StratumTable,
    cap_and_redistribute,
    neyman_allocation,
    proportional_allocation,
    wright_allocation,
)
from .errors import ConfigError, FailureRateExceeded, ParseError, TwoPhaseError
from .estimators import ipw_fit, phase1_auxiliaries, raking_fit
from .glm import ModelSpec
from .io import (
    read_cohort_csv,
    read_stratum_table_csv,
    write_allocation_csv,
    write_cohort_csv,
    write_metadata,
    write_metrics_csv,
)
from .sampling import StratificationRule, WaveSpec, multiwave_run, sample_stratified, stratify
from .simulation import DEFAULTS, SCENARIOS, ScenarioConfig, metadata, run_replications

log = logging.getLogger("twophase")

DEFAULT_SEED = 20220101
SUBCOMMANDS = ("allocate", "sample", "estimate", "simulate")
EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    """Fully resolved settings for one CLI invocation."""

    subcommand: str
    out: str
    seed: int = DEFAULT_SEED
    workers: int = 1
    inputs: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)

    def as_dict(self):
        return {"subcommand": self.subcommand, "out": self.out, "seed": self.seed,
                "workers": self.workers, "inputs": self.inputs, "options": self.options,
                "sources": self.sources}


def parse_formula(text):
    """``"Y ~ X + Z1"`` -> ``("Y", ("X", "Z1"), True)``; ``- 1`` drops the intercept."""
    if "~" not in text:
        raise UsageError(f"model formula needs '~': {text!r}")
    lhs, rhs = (s.strip() for s in text.split("~", 1))
    terms = [t.strip() for t in rhs.replace("-", "+-").split("+") if t.strip()]
    intercept = True
    covs = []
    for t in terms:
        if t in ("-1", "- 1", "0"):
            intercept = False
        elif t == "1":
            continue
        else:
            covs.append(t.lstrip("-").strip())
    if not lhs:
        raise UsageError(f"model formula has no response: {text!r}")
    return lhs, tuple(covs), intercept


def _model(formula, family):
    response, covs, intercept = parse_formula(formula)
    try:
        return ModelSpec(family, response, covs, intercept)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, help=f"64-bit unsigned seed (default {DEFAULT_SEED})")
    common.add_argument("--workers", type=int, help="worker processes (default 1)")
    common.add_argument("--out", help="output CSV path")
    common.add_argument("--config", help="JSON file with option defaults; flags override it")

    p = _Parser(prog="twophase", description="Design and analysis of two-phase subsamples.",
                epilog="exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure rate exceeded")
    p.add_argument("--version", action="version", version=f"twophase {__version__}")
    sub = p.add_subparsers(dest="subcommand", parser_class=_Parser)

    a = sub.add_parser("allocate", parents=[common], help="stratum table CSV -> allocation CSV")
    a.add_argument("--strata", help="CSV with columns stratum, N, s")
    a.add_argument("--n", type=int, help="total sample size")
    a.add_argument("--n-min", type=int, dest="n_min")
    a.add_argument("--method", choices=("wright", "neyman", "proportional"))

    s = sub.add_parser("sample", parents=[common], help="draw a stratified or multiwave sample")
    s.add_argument("--cohort", help="cohort CSV")
    s.add_argument("--n", type=int, help="total phase-II size (single wave)")
    s.add_argument("--strata-columns", nargs="+", dest="strata_columns")
    s.add_argument("--quantile-column", dest="quantile_column")
    s.add_argument("--probs", nargs="+", type=float)
    s.add_argument("--design", choices=("proportional", "multiwave"))
    s.add_argument("--waves", nargs="+", type=int, help="wave sizes for the multiwave design")
    s.add_argument("--n-min", type=int, dest="n_min")
    s.add_argument("--outcome", help="outcome formula, e.g. 'Y ~ X + Z1 + Z2'")
    s.add_argument("--family", choices=("linear", "logistic"))
    s.add_argument("--imputation", help="imputation formula, e.g. 'X ~ Z1 + Z2 + A + Y'")
    s.add_argument("--imputation-family", choices=("linear", "logistic"), dest="imputation_family")
    s.add_argument("--wavelog", help="WaveLog CSV path (default: <out>.waves.csv)")

    e = sub.add_parser("estimate", parents=[common], help="IPW or raking estimates from a sample")
    e.add_argument("--cohort", help="sampled cohort CSV (with R/pi/weight columns)")
    e.add_argument("--outcome")
    e.add_argument("--family", choices=("linear", "logistic"))
    e.add_argument("--estimator", choices=("ipw", "raking"))
    e.add_argument("--imputation")
    e.add_argument("--imputation-family", choices=("linear", "logistic"), dest="imputation_family")
    e.add_argument("--distance", choices=("raking", "linear"))
    e.add_argument("--variance", choices=("design", "two-phase"),
                   help="design: phase-II sampling only; two-phase: add the cohort-level term")
    e.add_argument("--design-tag", dest="design_tag")
    e.add_argument("--replicate", type=int)

    m = sub.add_parser("simulate", parents=[common], help="run a Monte Carlo scenario")
    m.add_argument("--scenario", choices=SCENARIOS)
    m.add_argument("--reps", type=int)
    m.add_argument("--N", type=int, dest="N")
    m.add_argument("--n", type=int)
    m.add_argument("--designs", nargs="+")
    m.add_argument("--estimators", nargs="+")
    m.add_argument("--wave-plan", nargs="+", type=int, dest="wave_plan",
                   help="one two-wave plan, e.g. --wave-plan 50 250")
    m.add_argument("--mode", choices=("oracle", "feasible"))
    m.add_argument("--prior-draws", type=int, dest="prior_draws")
    m.add_argument("--p0", type=float)
    m.add_argument("--beta-x", type=float, dest="beta_x")
    m.add_argument("--n-min", type=int, dest="n_min")
    return p


_PATH_OPTIONS = {"strata", "cohort"}


def parse_config(argv=None):
    """Resolve flags, config-file values and defaults into a RunConfig.

    Raises
    ------
    UsageError
        For unknown or missing options, or unreadable config files.
    """
    args = build_parser().parse_args(argv)
    if args.subcommand is None:
        raise UsageError(f"a subcommand is required: {', '.join(SUBCOMMANDS)}")
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("subcommand", "config")}
    file_opts = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                file_opts = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_opts, dict):
            raise UsageError("config file must contain a JSON object")
    merged, sources = {}, {}
    for k, v in file_opts.items():
        merged[k] = v
        sources[k] = "config"
    for k, v in flags.items():
        merged[k] = v
        sources[k] = "flag"
    seed = merged.pop("seed", DEFAULT_SEED)
    sources.setdefault("seed", "default")
    if not 0 <= int(seed) < 2**64:
        raise UsageError("seed must be a 64-bit unsigned integer")
    workers = int(merged.pop("workers", 1))
    sources.setdefault("workers", "default")
    out = merged.pop("out", None)
    if out is None:
        raise UsageError("--out is required")
    inputs = {k: merged.pop(k) for k in list(merged) if k in _PATH_OPTIONS}
    for k, path in inputs.items():
        if not os.path.isfile(path):
            raise UsageError(f"--{k}: file not found: {path}")
    out_dir = os.path.dirname(os.path.abspath(out))
    if not os.path.isdir(out_dir):
        raise UsageError(f"output directory does not exist: {out_dir}")
    if args.subcommand == "simulate":
        scen = merged.get("scenario")
        if scen is None:
            raise UsageError(f"--scenario is required; valid scenarios: {', '.join(SCENARIOS)}")
        if scen not in SCENARIOS:
            raise UsageError(f"unknown scenario {scen!r}; valid scenarios: {', '.join(SCENARIOS)}")
        # wave plans are resolved by ScenarioConfig (they scale with n) and
        # recorded in the metadata from there
        for k in ("N", "n", "reps", "designs", "estimators", "mode"):
            if k not in merged:
                merged[k] = DEFAULTS[scen][k]
                sources[k] = "default"
    return RunConfig(args.subcommand, out, int(seed), workers, inputs, merged, sources)


def _run_allocate(cfg):
    o = cfg.options
    if "strata" not in cfg.inputs or "n" not in o:
        raise UsageError("allocate needs --strata and --n")
    table = read_stratum_table_csv(cfg.inputs["strata"])
    n, n_min = int(o["n"]), int(o.get("n_min", DEFAULT_N_MIN))
    method = o.get("method", "wright")
    raw = None
    if method == "wright":
        alloc = wright_allocation(table, n, n_min)
    elif method == "proportional":
        alloc = proportional_allocation(table, n, n_min)
    else:
        raw = neyman_allocation(table, n)
        alloc = cap_and_redistribute(raw, table, n, n_min)
    write_allocation_csv(alloc, cfg.out, raw)
    return {"total": alloc.total}


def _stratified_cohort(cohort, o):
    if "strata_columns" in o:
        rule = StratificationRule.cross(*o["strata_columns"])
    elif "quantile_column" in o:
        rule = StratificationRule.quantiles(o["quantile_column"], o.get("probs", (0.2, 0.8)))
    else:
        return cohort
    st = stratify(cohort, rule)
    if st.has_empty:
        log.warning("empty strata: %s", st.ids[st.empty].tolist())
    return type(cohort)(cohort.data, st.stratum, phase2=cohort.phase2)


def _run_sample(cfg):
    o = cfg.options
    if "cohort" not in cfg.inputs:
        raise UsageError("sample needs --cohort")
    cohort = read_cohort_csv(cfg.inputs["cohort"])
    cohort = _stratified_cohort(cohort, o)
    rng = np.random.default_rng(cfg.seed)
    n_min = int(o.get("n_min", DEFAULT_N_MIN))
    design = o.get("design", "proportional")
    extra = {}
    if design == "proportional":
        if "n" not in o:
            raise UsageError("proportional sampling needs --n")
        alloc = proportional_allocation(StratumTable.from_strata(cohort.stratum), int(o["n"]), n_min)
        draw = sample_stratified(alloc, cohort.stratum, rng)
        result = cohort.with_sample(draw.R, draw.pi, draw.weight)
    else:
        for k in ("waves", "outcome", "family", "imputation", "imputation_family"):
            if k not in o:
                raise UsageError(f"multiwave sampling needs --{k.replace('_', '-')}")
        outcome = _model(o["outcome"], o["family"])
        imputation = _model(o["imputation"], o["imputation_family"])
        waves = [WaveSpec(int(o["waves"][0]), "proportional")] + [WaveSpec(int(s)) for s in o["waves"][1:]]
        res = multiwave_run(cohort, waves, rng, outcome, imputation,
                            x_column=imputation.response, n_min=n_min)
        result = res.cohort
        wavelog = o.get("wavelog") or f"{os.path.splitext(cfg.out)[0]}.waves.csv"
        res.log.to_csv(wavelog)
        extra["wavelog"] = wavelog
    write_cohort_csv(result, cfg.out)
    return extra


def _run_estimate(cfg):
    o = cfg.options
    for k in ("outcome", "family"):
        if k not in o:
            raise UsageError(f"estimate needs --{k}")
    if "cohort" not in cfg.inputs:
        raise UsageError("estimate needs --cohort")
    outcome = _model(o["outcome"], o["family"])
    required = (outcome.response, *outcome.covariates)
    estimator = o.get("estimator", "ipw")
    imputation = None
    if estimator == "raking":
        if "imputation" not in o or "imputation_family" not in o:
            raise UsageError("raking needs --imputation and --imputation-family")
        imputation = _model(o["imputation"], o["imputation_family"])
        required += (imputation.response, *imputation.covariates)
    phase2 = (imputation.response,) if imputation else tuple(
        c for c in outcome.covariates if c == "X")
    cohort = read_cohort_csv(cfg.inputs["cohort"], phase2=phase2 or ("X",), required=required)
    phase1 = o.get("variance", "design") == "two-phase"
    if estimator == "ipw":
        fit = ipw_fit(cohort, outcome, phase1=phase1)
    else:
        a = phase1_auxiliaries(cohort, outcome, imputation, imputation.response)
        fit = raking_fit(cohort, outcome, a, o.get("distance", "raking"), phase1=phase1)
    se = np.sqrt(np.clip(np.diag(fit.vcov), 0, None))
    pd.DataFrame({
        "coefficient": list(fit.terms), "estimate": fit.beta, "se": se,
        "estimator": estimator, "design": o.get("design_tag", "input"),
        "replicate": int(o.get("replicate", 0)),
    }).to_csv(cfg.out, index=False, float_format="%.17g")
    return {"converged": bool(fit.converged), "separated": bool(fit.separated)}


def _run_simulate(cfg):
    o = dict(cfg.options)
    if "wave_plan" in o:
        o["wave_plans"] = [o.pop("wave_plan")]
    keys = ("scenario", "N", "n", "reps", "designs", "estimators", "wave_plans", "mode",
            "prior_draws", "n_min", "p0", "beta_x")
    unknown = set(o) - set(keys)
    if unknown:
        raise UsageError(f"unknown simulate options: {sorted(unknown)}")
    try:
        config = ScenarioConfig(seed=cfg.seed, **{k: v for k, v in o.items() if k in keys})
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    table = run_replications(config, workers=cfg.workers)
    write_metrics_csv(table, cfg.out)
    return {"scenario_config": config.to_dict()}


_HANDLERS = {"allocate": _run_allocate, "sample": _run_sample,
             "estimate": _run_estimate, "simulate": _run_simulate}


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = parse_config(argv)
        extra = _HANDLERS[cfg.subcommand](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FailureRateExceeded as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, FileNotFoundError, TwoPhaseError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    meta = metadata_for(cfg, **(extra or {}))
    write_metadata(f"{cfg.out}.meta.json", meta)
    return 0


def metadata_for(cfg, **extra):
    return {"package": "twophase", "version": __version__, "run": cfg.as_dict(), **extra}


if __name__ == "__main__":
    sys.exit(main())
