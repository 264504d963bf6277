import numpy as np
import pandas as pd
import pytest

from twophase.allocation import StratumTable, proportional_allocation
from twophase.errors import CalibrationDivergence, RankDeficientConstraints
from twophase.estimators import (
    calibrate_weights,
    ipw_fit,
    phase1_auxiliaries,
    raking_fit,
    stratified_vcov,
)
from twophase.frame import CohortFrame
from twophase.glm import ModelSpec, fit_weighted_glm
from twophase.sampling import sample_stratified
from twophase.simulation import (
    PRIORS_IMPUTATION,
    PRIORS_OUTCOME,
    RAKING_IMPUTATION,
    RAKING_OUTCOME,
    gen_priors_scenario,
    gen_raking_scenario,
    jackknife_sd,
    jackknife_se,
)

MEAN = ModelSpec("linear", "Y", ())


def _sampled(cohort, n, rng):
    alloc = proportional_allocation(StratumTable.from_strata(cohort.stratum), n)
    d = sample_stratified(alloc, cohort.stratum, rng)
    return cohort.with_sample(d.R, d.pi, d.weight)


# -- calibration -------------------------------------------------------------

def test_calibration_two_unit_example():
    # population totals (10, 4); units with a = (1, 0) and (1, 2), w = 2 each
    a = np.array([[1, 0], [1, 2], [1, 0], [1, 0], [1, 0], [1, 0], [1, 0], [1, 0], [1, 0], [1, 2.0]])
    np.testing.assert_array_equal(a.sum(0), [10, 4])
    R = np.zeros(10, bool)
    R[:2] = True
    w = np.where(R, 2.0, 0.0)
    # oracle: direct solve of the two constraint equations for the adjusted weights
    expected = np.linalg.solve(a[:2].T, a.sum(0))
    np.testing.assert_allclose(expected, [8, 2])
    for distance in ("linear", "raking"):
        cal = calibrate_weights(a, R, w, distance)
        assert cal.converged
        np.testing.assert_allclose(cal.weights, expected, rtol=1e-10)


def test_presatisfied_constraints():
    R = np.r_[np.ones(5, bool), np.zeros(15, bool)]
    w = np.where(R, 4.0, 0.0)
    for distance in ("linear", "raking"):
        cal = calibrate_weights(np.ones((20, 1)), R, w, distance)
        np.testing.assert_allclose(cal.g, 1.0)
        np.testing.assert_allclose(cal.lam, 0.0, atol=1e-14)


def test_calibration_exact_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(50):
        N, q = int(rng.integers(200, 800)), int(rng.integers(1, 4))
        a = np.column_stack([np.ones(N), rng.normal(size=(N, q)) * rng.uniform(0.1, 50, q)])
        R = rng.random(N) < 0.3
        w = np.where(R, 1 / 0.3, 0.0)
        for distance in ("linear", "raking"):
            cal = calibrate_weights(a, R, w, distance)
            assert cal.converged
            T = a.sum(0)
            rel = np.abs(a[R].T @ cal.weights - T) / np.abs(a).sum(0)
            assert rel.max() < 1e-8
            if distance == "raking" and not cal.fallback:
                assert np.all(cal.g > 0)


def test_rank_deficient_constraints():
    a = np.column_stack([np.ones(10), np.arange(10.0), 2 * np.arange(10.0)])
    with pytest.raises(RankDeficientConstraints):
        calibrate_weights(a, np.ones(10, bool), np.ones(10), "linear")


def test_raking_divergence():
    # the sample holds only small values of a, but the population total demands a huge mean
    a = np.column_stack([np.ones(6), [0.0, 1.0, 0.0, 1.0, 100.0, 100.0]])
    R = np.array([1, 1, 1, 1, 0, 0], bool)
    w = np.where(R, 1.5, 0.0)
    with pytest.raises(CalibrationDivergence):
        calibrate_weights(a, R, w, "raking", fallback=False)
    res = calibrate_weights(a, R, w, "raking")
    assert res.fallback and res.distance == "linear"


def test_greg_identity():
    rng = np.random.default_rng(1)
    N = 300
    x = rng.gamma(2.0, size=N)
    y = 2 + 3 * x + rng.normal(size=N)
    R = rng.random(N) < 0.25
    w = np.where(R, N / R.sum(), 0.0)
    A = np.column_stack([np.ones(N), x])
    cal = calibrate_weights(A, R, w, "linear")
    D = A[R]
    B = np.linalg.solve((D * w[R][:, None]).T @ D, (D * w[R][:, None]).T @ y[R])
    greg = np.sum(w[R] * y[R]) + (A.sum(0) - D.T @ w[R]) @ B
    assert np.sum(cal.weights * y[R]) == pytest.approx(greg, rel=1e-12)


# -- IPW ---------------------------------------------------------------------

def test_census_ipw_matches_full_fit():
    cohort = gen_priors_scenario(400, np.random.default_rng(2))
    census = cohort.with_sample(np.ones(400, bool), np.ones(400), np.ones(400))
    fit = ipw_fit(census, PRIORS_OUTCOME)
    full = fit_weighted_glm(cohort, PRIORS_OUTCOME)
    np.testing.assert_allclose(fit.beta, full.beta, atol=1e-12)
    np.testing.assert_allclose(fit.influence, full.influence, atol=1e-10)
    np.testing.assert_allclose(fit.vcov, 0.0)
    raked = raking_fit(census, PRIORS_OUTCOME, cohort["Z1"])
    np.testing.assert_allclose(raked.beta, full.beta, atol=1e-10)


def test_srs_mean_variance():
    rng = np.random.default_rng(3)
    N, n = 200, 40
    y = rng.normal(5, 2, N)
    R = np.zeros(N, bool)
    R[rng.choice(N, n, replace=False)] = True
    cohort = CohortFrame(pd.DataFrame({"Y": y}), np.ones(N, int), R, np.full(N, n / N))
    fit = ipw_fit(cohort, MEAN)
    assert fit.beta[0] == pytest.approx(y[R].mean(), abs=1e-12)
    textbook = (1 - n / N) * y[R].var(ddof=1) / n
    assert fit.vcov[0, 0] == pytest.approx(textbook, rel=1e-12, abs=1e-15)


def test_stratified_vcov_total_formula():
    rng = np.random.default_rng(4)
    stratum = np.repeat([1, 2], [30, 20])
    z = rng.normal(size=50)
    N_k = [100, 60]
    v = stratified_vcov(z, stratum, N_k, [1, 2], 160)
    manual = sum(Nk**2 * (1 - nk / Nk) * z[stratum == k].var(ddof=1) / nk
                 for k, Nk, nk in ((1, 100, 30), (2, 60, 20))) / 160**2
    assert v[0, 0] == pytest.approx(manual, rel=1e-12)


def test_ipw_unbiased_priors_scenario():
    rng = np.random.default_rng(5)
    est = []
    for _ in range(1000):
        cohort = gen_priors_scenario(1000, rng)
        est.append(ipw_fit(_sampled(cohort, 300, rng), PRIORS_OUTCOME).coef("X"))
    est = np.array(est)
    assert abs(est.mean() - 0.5) < 3 * est.std(ddof=1) / np.sqrt(len(est))


def test_two_phase_variance_adds_phase1_term():
    rng = np.random.default_rng(6)
    s = _sampled(gen_raking_scenario(2000, rng), 400, rng)
    d, t = ipw_fit(s, RAKING_OUTCOME), ipw_fit(s, RAKING_OUTCOME, phase1=True)
    h, w = d.influence, s.weight[s.R]
    np.testing.assert_allclose(t.vcov - d.vcov, (h * w[:, None]).T @ h / 2000**2, rtol=1e-10)
    assert t.vcov_kind == "two-phase"


# -- raking ------------------------------------------------------------------

def _paired_check(rng, reps, make_aux, N=1000, n=200):
    ipw, rak = [], []
    for _ in range(reps):
        s = _sampled(gen_raking_scenario(N, rng), n, rng)
        ipw.append(ipw_fit(s, RAKING_OUTCOME).coef("X"))
        fit = raking_fit(s, RAKING_OUTCOME, make_aux(s, rng))
        rak.append(fit.coef("X"))
        c = fit.calibration
        assert c.converged and c.max_violation < 1e-8
    return np.array(ipw), np.array(rak)


def test_noise_auxiliaries_do_not_help():
    rng = np.random.default_rng(7)
    ipw, rak = _paired_check(rng, 500, lambda s, g: g.normal(size=s.N))
    # empirical SEs agree within their combined Monte Carlo error
    gap = rak.std(ddof=1) - ipw.std(ddof=1)
    mc = np.hypot(jackknife_se(jackknife_sd(rak)), jackknife_se(jackknife_sd(ipw)))
    assert abs(gap) < 2 * mc
    assert abs(rak.mean() - ipw.mean()) < 2 * ipw.std(ddof=1) / np.sqrt(len(ipw))


def test_exact_influence_auxiliaries_cut_variance():
    rng = np.random.default_rng(8)

    def exact(s, g):
        return fit_weighted_glm(s, RAKING_OUTCOME).influence

    ipw, rak = _paired_check(rng, 500, exact, N=4000, n=600)
    assert rak.var(ddof=1) <= 0.8 * ipw.var(ddof=1)


def test_phase1_auxiliaries_pipeline():
    rng = np.random.default_rng(9)
    s = _sampled(gen_priors_scenario(1000, rng), 300, rng)
    a = phase1_auxiliaries(s, PRIORS_OUTCOME, PRIORS_IMPUTATION)
    assert a.shape == (1000, 4)
    np.testing.assert_allclose(a.sum(0), 0.0, atol=1e-8)
    fit = raking_fit(s, PRIORS_OUTCOME, a)
    assert fit.calibration.converged
    assert fit.vcov_kind == "design-raking"
    assert np.all(np.linalg.eigvalsh(fit.vcov) >= -1e-15)


def test_raking_linear_distance():
    rng = np.random.default_rng(10)
    s = _sampled(gen_raking_scenario(1000, rng), 200, rng)
    a = phase1_auxiliaries(s, RAKING_OUTCOME, RAKING_IMPUTATION)
    lin = raking_fit(s, RAKING_OUTCOME, a, distance="linear")
    exp = raking_fit(s, RAKING_OUTCOME, a, distance="raking")
    assert lin.calibration.distance == "linear"
    assert lin.coef("X") == pytest.approx(exp.coef("X"), abs=0.02)
