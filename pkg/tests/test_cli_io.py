import json

import numpy as np
import pandas as pd
import pytest

from twophase.allocation import StratumTable, wright_allocation
from twophase.cli import main, parse_config, parse_formula, UsageError
from twophase.errors import ParseError
from twophase.io import (
    read_cohort_csv,
    read_stratum_table_csv,
    write_allocation_csv,
    write_cohort_csv,
    write_stratum_table_csv,
)
from twophase.simulation import gen_priors_scenario


@pytest.fixture
def strata_csv(tmp_path):
    path = tmp_path / "strata.csv"
    path.write_text("stratum,N,s\n1,100,2\n2,200,1\n3,300,1\n")
    return path


# -- io ----------------------------------------------------------------------

def test_missing_phase2_cell_sets_R(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("X,Y\n1.5,0\n2.0,1\n,1\n")
    cohort = read_cohort_csv(path)
    assert cohort.R.tolist() == [True, True, False]
    assert np.isnan(cohort.data["X"][2])


def test_missing_model_column_is_named(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("X,Y\n1,0\n")
    with pytest.raises(ParseError, match="Z1"):
        read_cohort_csv(path, required=("Y", "X", "Z1"))


def test_parse_error_location(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("X,Y\n1,0\n2,oops\n")
    with pytest.raises(ParseError) as err:
        read_cohort_csv(path)
    assert err.value.row == 2 and err.value.column == "Y"
    assert "row 2" in str(err.value)


def test_cohort_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    cohort = gen_priors_scenario(500, rng)
    R = rng.random(500) < 0.3
    cohort = cohort.with_sample(R, np.full(500, 0.3), np.where(R, 1 / 0.3, 0.0))
    path = tmp_path / "c.csv"
    write_cohort_csv(cohort, path)
    back = read_cohort_csv(path)
    np.testing.assert_array_equal(back.R, cohort.R)
    np.testing.assert_array_equal(back.stratum, cohort.stratum)
    np.testing.assert_array_equal(back.weight, cohort.weight)
    for col in ("A", "Z1", "Z2", "Y"):
        np.testing.assert_array_equal(back[col], cohort[col])
    np.testing.assert_array_equal(back["X"][R], cohort["X"][R])
    assert np.isnan(back.data["X"][~R]).all()


def test_stratum_table_round_trip(tmp_path):
    t = StratumTable([1, 2], [10, 20], [0.1, 1 / 3])
    write_stratum_table_csv(t, tmp_path / "t.csv")
    back = read_stratum_table_csv(tmp_path / "t.csv")
    np.testing.assert_array_equal(back.s, t.s)


def test_stratum_table_validation(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("stratum,N,s\n1,10,-1\n")
    with pytest.raises(ParseError, match="column 's'"):
        read_stratum_table_csv(path)


# -- cli ---------------------------------------------------------------------

def test_parse_formula():
    assert parse_formula("Y ~ X + Z1 + Z2") == ("Y", ("X", "Z1", "Z2"), True)
    assert parse_formula("Y ~ X - 1") == ("Y", ("X",), False)
    with pytest.raises(UsageError):
        parse_formula("Y X")


def test_simulate_defaults_resolved(tmp_path):
    cfg = parse_config(["simulate", "--scenario", "raking_continuous", "--reps", "500",
                        "--seed", "42", "--out", str(tmp_path / "m.csv")])
    assert cfg.options["N"] == 4000 and cfg.options["n"] == 600
    assert cfg.seed == 42 and cfg.sources["N"] == "default" and cfg.sources["reps"] == "flag"


def test_missing_scenario_lists_choices(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path / "m.csv")]) == 1
    err = capsys.readouterr().err
    assert "priors_binary" in err and "raking_continuous" in err and "case_control" in err


def test_config_file_precedence(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"scenario": "case_control", "reps": 7, "n": 100, "seed": 5}))
    cfg = parse_config(["simulate", "--config", str(conf), "--reps", "3",
                        "--out", str(tmp_path / "m.csv")])
    assert cfg.options["reps"] == 3 and cfg.sources["reps"] == "flag"
    assert cfg.options["n"] == 100 and cfg.sources["n"] == "config"
    assert cfg.seed == 5 and cfg.sources["seed"] == "config"


def test_allocate_reproduces_wright_examples(tmp_path, strata_csv):
    out = tmp_path / "a.csv"
    assert main(["allocate", "--strata", str(strata_csv), "--n", "10", "--n-min", "1",
                 "--out", str(out)]) == 0
    ref = tmp_path / "ref.csv"
    write_allocation_csv(wright_allocation(read_stratum_table_csv(strata_csv), 10, 1), ref)
    assert out.read_bytes() == ref.read_bytes()
    assert pd.read_csv(out).n.tolist() == [3, 3, 4]
    meta = json.loads((tmp_path / "a.csv.meta.json").read_text())
    assert meta["run"]["seed"] == 20220101 and meta["run"]["options"]["n"] == 10
    assert meta["version"]


def test_allocate_tie_example(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("stratum,N,s\n1,100,1\n2,100,1\n")
    assert main(["allocate", "--strata", str(path), "--n", "5", "--n-min", "1",
                 "--out", str(tmp_path / "a.csv")]) == 0
    assert pd.read_csv(tmp_path / "a.csv").n.tolist() == [3, 2]


def test_exit_codes(tmp_path, strata_csv):
    out = str(tmp_path / "x.csv")
    assert main(["allocate", "--strata", str(tmp_path / "none.csv"), "--n", "3", "--out", out]) == 1
    assert main(["allocate", "--strata", str(strata_csv), "--out", out]) == 1
    assert main(["frobnicate"]) == 1
    bad = tmp_path / "bad.csv"
    bad.write_text("stratum,N,s\n1,abc,1\n")
    assert main(["allocate", "--strata", str(bad), "--n", "3", "--out", out]) == 2
    # infeasible budget is a data error
    assert main(["allocate", "--strata", str(strata_csv), "--n", "5000", "--out", out]) == 2


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    import twophase.simulation as sim
    from twophase.errors import SingularDesign

    def broken(*a):
        raise SingularDesign("forced")

    monkeypatch.setattr(sim, "_estimate", broken)
    code = main(["simulate", "--scenario", "case_control", "--reps", "2", "--N", "500",
                 "--n", "50", "--out", str(tmp_path / "m.csv")])
    assert code == 3


def test_sample_and_estimate_pipeline(tmp_path):
    cohort = gen_priors_scenario(1000, np.random.default_rng(1))
    cohort.data.to_csv(tmp_path / "cohort.csv", index=False)
    sample = tmp_path / "s.csv"
    args = ["sample", "--cohort", str(tmp_path / "cohort.csv"), "--strata-columns", "A", "Y", "Z2",
            "--design", "multiwave", "--waves", "100", "200",
            "--outcome", "Y ~ X + Z1 + Z2", "--family", "logistic",
            "--imputation", "X ~ Z1 + Z2 + A + Y", "--imputation-family", "logistic",
            "--seed", "3", "--out", str(sample)]
    assert main(args) == 0
    first = sample.read_bytes()
    assert main(args) == 0
    assert sample.read_bytes() == first
    s = pd.read_csv(sample)
    assert s.R.sum() == 300 and s.X.isna().sum() == 700
    waves = pd.read_csv(tmp_path / "s.waves.csv")
    assert waves.wave.max() == 2 and waves[waves.wave == 2].cumulative.sum() == 300
    est = tmp_path / "e.csv"
    for extra in ([], ["--estimator", "raking", "--imputation", "X ~ Z1 + Z2 + A + Y",
                       "--imputation-family", "logistic"]):
        assert main(["estimate", "--cohort", str(sample), "--outcome", "Y ~ X + Z1 + Z2",
                     "--family", "logistic", "--out", str(est), *extra]) == 0
        e = pd.read_csv(est)
        assert e.coefficient.tolist() == ["(Intercept)", "X", "Z1", "Z2"]
        assert (e.se > 0).all()


def test_single_wave_sample_quantiles(tmp_path):
    rng = np.random.default_rng(2)
    pd.DataFrame({"Xt": rng.normal(size=200), "Y": rng.normal(size=200),
                  "X": rng.normal(size=200)}).to_csv(tmp_path / "c.csv", index=False)
    out = tmp_path / "s.csv"
    assert main(["sample", "--cohort", str(tmp_path / "c.csv"), "--quantile-column", "Xt",
                 "--probs", "0.2", "0.8", "--n", "50", "--out", str(out)]) == 0
    s = pd.read_csv(out)
    assert s.R.sum() == 50 and sorted(s.stratum.unique()) == [1, 2, 3]


def test_simulate_byte_identical_across_workers(tmp_path):
    outs = []
    for w in ("1", "2", "1"):
        out = tmp_path / f"m{len(outs)}.csv"
        assert main(["simulate", "--scenario", "raking_continuous", "--reps", "3", "--N", "800",
                     "--n", "120", "--workers", w, "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1] == outs[2]
