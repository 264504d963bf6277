"""Design-based estimators: IPW and generalised raking (calibration)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import CalibrationDivergence, RankDeficientConstraints
from .glm import fit_imputation_model, fit_weighted_glm, phase1_influence, predict_xhat

DISTANCES = ("linear", "raking")
_MAX_EXP = 50.0


def stratified_vcov(z, stratum, N_k, ids, N):
    """Variance of ``(1/N) * sum_i w_i z_i`` under stratified SRSWOR.

    Parameters
    ----------
    z : ndarray, shape (n, p)
        Values on the sampled units.
    stratum : ndarray, shape (n,)
        Stratum of each sampled unit.
    N_k : sequence of int
        Population stratum sizes aligned with ``ids``.
    N : float
        Population size.
    """
    z = np.asarray(z, float)
    if z.ndim == 1:
        z = z[:, None]
    V = np.zeros((z.shape[1], z.shape[1]))
    for k, Nk in zip(ids, N_k):
        zk = z[stratum == k]
        nk = len(zk)
        if nk < 2 or nk >= Nk:
            continue
        V += Nk**2 * (1.0 - nk / Nk) * np.cov(zk, rowvar=False, ddof=1).reshape(V.shape) / nk
    return V / N**2


def _design_parts(cohort):
    ids = cohort.stratum_ids
    return ids, cohort.stratum_sizes(ids)


def phase1_vcov(h, w, N):
    """HT estimate of the cohort-level variance ``sum_i h_i h_i' / N^2``."""
    h = np.asarray(h, float)
    return (h * np.asarray(w, float)[:, None]).T @ h / N**2


def ipw_fit(cohort, model, phase1=False):
    """Inverse-probability weighted fit with stratified design-based variance.

    Parameters
    ----------
    phase1 : bool
        Add the estimated phase-1 (cohort sampling) variance, for inference
        about the superpopulation parameter rather than the cohort census fit.
    """
    rows = np.flatnonzero(cohort.R)
    w = cohort.weight[rows]
    fit = fit_weighted_glm(cohort, model, w, rows=rows)
    ids, N_k = _design_parts(cohort)
    V = stratified_vcov(fit.influence, cohort.stratum[rows], N_k, ids, cohort.N)
    if phase1:
        V = V + phase1_vcov(fit.influence, w, cohort.N)
    return replace(fit, vcov=V, vcov_kind="two-phase" if phase1 else "design")


@dataclass(frozen=True)
class CalibrationResult:
    """Calibrated weights for the sampled units (in row order)."""

    weights: np.ndarray
    g: np.ndarray
    lam: np.ndarray
    distance: str
    converged: bool
    max_violation: float
    fallback: bool = False
    iterations: int = 0


def _violation(As, w, T, scale):
    return float(np.max(np.abs(As.T @ w - T) / scale))


def calibrate_weights(a, R, w, distance="raking", totals=None, tol=1e-10, max_iter=100,
                      fallback=True):
    """Calibrate design weights to known auxiliary totals.

    Finds ``lam`` with ``sum_i R_i w_i g(a_i' lam) a_i = sum_i a_i`` where
    ``g(u) = 1 + u`` (linear) or ``exp(u)`` (raking).

    Parameters
    ----------
    a : ndarray, shape (N, q)
        Auxiliaries for the whole cohort.
    R : ndarray of bool, shape (N,)
    w : ndarray, shape (N,)
        Design weights (only sampled entries are used).
    totals : ndarray, optional
        Population totals; defaults to the column sums of ``a``.
    fallback : bool
        When raking diverges, retry with the linear distance and flag the
        result instead of raising :class:`CalibrationDivergence`.

    Notes
    -----
    The constraint violation is measured relative to ``sum_i |a_ij|`` so that
    columns with zero population total (influence functions) are handled.
    """
    if distance not in DISTANCES:
        raise ValueError(f"distance must be one of {DISTANCES}")
    a = np.asarray(a, float)
    if a.ndim == 1:
        a = a[:, None]
    R = np.asarray(R, bool)
    T = a.sum(0) if totals is None else np.asarray(totals, float)
    scale = np.abs(a).sum(0)
    scale[scale == 0] = 1.0
    # column scaling leaves the calibrated weights unchanged
    colscale = np.abs(a).max(0)
    colscale[colscale == 0] = 1.0
    As = a[R] / colscale
    Ts = T / colscale
    sc = scale / colscale
    ws = np.asarray(w, float)[R]
    if np.linalg.matrix_rank(As) < As.shape[1]:
        raise RankDeficientConstraints("sampled auxiliaries are rank deficient")

    if distance == "linear":
        M = (As * ws[:, None]).T @ As
        lam = np.linalg.solve(M, Ts - As.T @ ws)
        g = 1.0 + As @ lam
        wn = ws * g
        # one refinement step against rounding
        lam += np.linalg.solve(M, Ts - As.T @ wn)
        g = 1.0 + As @ lam
        wn = ws * g
        viol = _violation(As, wn, Ts, sc)
        return CalibrationResult(wn, g, lam / colscale, "linear", viol < 1e-8, viol)

    lam = np.zeros(As.shape[1])
    g = np.ones(len(ws))
    viol = _violation(As, ws, Ts, sc)
    it = 0
    converged = viol < tol
    while not converged and it < max_iter:
        F = As.T @ (ws * g) - Ts
        J = (As * (ws * g)[:, None]).T @ As
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            break
        it += 1
        t = 1.0
        fnorm = np.max(np.abs(F) / sc)
        for _ in range(40):
            cand = lam + t * step
            g_c = np.exp(np.clip(As @ cand, -_MAX_EXP, _MAX_EXP))
            v_c = _violation(As, ws * g_c, Ts, sc)
            if v_c < fnorm:
                break
            t *= 0.5
        lam, g, viol = cand, g_c, v_c
        converged = viol < tol
    if not converged:
        if not fallback:
            raise CalibrationDivergence(f"raking did not converge (violation {viol:.3g})")
        lin = calibrate_weights(a, R, w, "linear", totals)
        return replace(lin, fallback=True)
    return CalibrationResult(ws * g, g, lam / colscale, "raking", True, viol, iterations=it)


def _with_intercept(a):
    a = np.asarray(a, float)
    if a.ndim == 1:
        a = a[:, None]
    if np.any(np.all(a == a[:1], axis=0)):
        return a
    return np.column_stack([np.ones(len(a)), a])


def raking_fit(cohort, model, aux, distance="raking", add_intercept=True, phase1=False):
    """Generalised raking estimator.

    Calibrates the design weights to the population totals of ``aux`` (with
    an intercept column added unless one is present), fits the model with the
    calibrated weights, and estimates the variance from the stratified
    variance of the residuals of the influence functions regressed on the
    auxiliaries.

    Returns
    -------
    FitResult
        With ``vcov_kind == "design-raking"`` (``"two-phase-raking"`` when
        ``phase1`` is set); the calibration details are available as
        ``calibration``.
    """
    A = _with_intercept(aux) if add_intercept else np.asarray(aux, float)
    cal = calibrate_weights(A, cohort.R, cohort.weight, distance)
    rows = np.flatnonzero(cohort.R)
    fit = fit_weighted_glm(cohort, model, cal.weights, rows=rows)
    h = fit.influence
    As = A[rows]
    wg = cal.weights
    B = np.linalg.lstsq(As * np.sqrt(wg)[:, None], h * np.sqrt(wg)[:, None], rcond=None)[0]
    z = cal.g[:, None] * (h - As @ B)
    ids, N_k = _design_parts(cohort)
    V = stratified_vcov(z, cohort.stratum[rows], N_k, ids, cohort.N)
    if phase1:
        V = V + phase1_vcov(h, wg, cohort.N)
        return replace(fit, vcov=V, vcov_kind="two-phase-raking", calibration=cal)
    return replace(fit, vcov=V, vcov_kind="design-raking", calibration=cal)


def phase1_auxiliaries(cohort, outcome_spec, imputation_spec, x_column="X"):
    """Raking auxiliaries from the imputation -> phase-1 model pipeline.

    The imputation model is fitted by IPW on the phase-II sample, ``X`` is
    imputed for every row, and the outcome model is refitted on the whole
    cohort with the imputed values; its influence functions are returned.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        imp = fit_imputation_model(cohort, imputation_spec)
    xhat = predict_xhat(imp, cohort, imputation_spec)
    return phase1_influence(cohort, outcome_spec, xhat, x_column)
