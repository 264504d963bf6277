"""Weighted linear and logistic regression with influence functions.

Influence functions are scaled so that a weighted estimate satisfies

    beta_hat - beta_tilde ~= (1/N) * sum_i R_i w_i h_i

that is, ``h_i = Jbar^{-1} U_i`` with ``Jbar`` the weight-averaged
information per unit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import NonConvergenceWarning, SingularDesign, SingularInformation

FAMILIES = ("linear", "logistic")
_SATURATION = 1e-8


@dataclass(frozen=True)
class ModelSpec:
    """Outcome, imputation or phase-1 regression model.

    Parameters
    ----------
    family : {"linear", "logistic"}
    response : str
    covariates : tuple of str
        Ordered covariate columns; the coefficient vector follows this order
        after the intercept.
    include_intercept : bool
    """

    family: str
    response: str
    covariates: tuple[str, ...]
    include_intercept: bool = True

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if not self.covariates and not self.include_intercept:
            raise ValueError("model needs at least one covariate or an intercept")
        if self.response in self.covariates:
            raise ValueError("response cannot also be a covariate")

    @property
    def terms(self):
        return (("(Intercept)",) if self.include_intercept else ()) + self.covariates

    @property
    def p(self):
        return len(self.terms)

    def index(self, term):
        """Position of ``term`` in the coefficient vector."""
        return self.terms.index(term)


@dataclass(frozen=True)
class FitResult:
    """Output of a weighted GLM fit.

    ``influence`` has one row per fitted unit; ``rows`` gives the positions
    of those units in the source data. ``score_at_solution`` is the
    weight-averaged score, the quantity the convergence test is applied to.
    """

    beta: np.ndarray
    vcov: np.ndarray
    influence: np.ndarray
    score_at_solution: np.ndarray
    converged: bool
    iterations: int
    rows: np.ndarray
    terms: tuple[str, ...] = ()
    vcov_kind: str = "sandwich"
    separated: bool = False
    calibration: object = None

    def coef(self, term):
        return float(self.beta[self.terms.index(term)])

    def se(self, term):
        j = self.terms.index(term)
        return float(np.sqrt(max(self.vcov[j, j], 0.0)))


def design_matrix(data, model, rows=None, override=None):
    """Stack the model's columns from ``data``.

    ``data`` is anything indexable by column name (CohortFrame, DataFrame,
    dict of arrays). ``override`` maps column names to replacement arrays.
    """
    override = override or {}

    def col(name):
        v = override[name] if name in override else data[name]
        v = np.asarray(v, dtype=float)
        return v if rows is None else v[rows]

    y = col(model.response)
    cols = [col(c) for c in model.covariates]
    if model.include_intercept:
        cols.insert(0, np.ones_like(y))
    return np.column_stack(cols), y


def _mean(X, beta, family):
    eta = X @ beta
    return eta if family == "linear" else expit(eta)


def _unit_info_weights(mu, family):
    return np.ones_like(mu) if family == "linear" else mu * (1.0 - mu)


def loglik(beta, X, y, w, family):
    """Weighted log-likelihood (unit scale for the linear model)."""
    eta = X @ beta
    if family == "linear":
        return -0.5 * np.sum(w * (y - eta) ** 2)
    # log(expit(eta)) and log(1 - expit(eta)) without overflow
    return np.sum(w * (y * eta - np.logaddexp(0.0, eta)))


def score_contributions(beta, X, y, family):
    """Per-unit scores ``U_i(beta)`` as an (n, p) array."""
    return X * (y - _mean(X, beta, family))[:, None]


def information(beta, X, w, family):
    """Weighted summed information ``-sum_i w_i dU_i/dbeta``."""
    v = w * _unit_info_weights(_mean(X, beta, family), family)
    return (X * v[:, None]).T @ X


def _check_rank(X, w):
    Xw = X[w > 0] * np.sqrt(w[w > 0])[:, None]
    if Xw.shape[0] < X.shape[1] or np.linalg.matrix_rank(Xw) < X.shape[1]:
        raise SingularDesign(f"weighted design matrix has rank < {X.shape[1]}")


def _saturated(mu, groups):
    sat = (mu < _SATURATION) | (mu > 1.0 - _SATURATION)
    if not sat.any():
        return False
    if groups is None:
        return True
    return any(sat[groups == g].all() for g in np.unique(groups))


def fit_arrays(X, y, w, family, tol=1e-10, max_iter=50, groups=None, check_rank=True):
    """Newton-Raphson with step halving on raw arrays.

    Returns ``(beta, converged, iterations, separated)``.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    w = np.asarray(w, float)
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if check_rank:
        _check_rank(X, w)
    wsum = w.sum()
    p = X.shape[1]
    if family == "linear":
        beta = np.zeros(p)
    else:
        # intercept-only start when the first column is constant
        beta = np.zeros(p)
        if np.all(X[:, 0] == 1.0):
            ybar = np.clip(np.sum(w * y) / wsum, 1e-6, 1 - 1e-6)
            beta[0] = np.log(ybar / (1 - ybar))
    ll = loglik(beta, X, y, w, family)
    converged = separated = False
    it = 0
    polished = False
    while it < max_iter:
        mu = _mean(X, beta, family)
        if family == "logistic" and _saturated(mu, groups):
            separated = True
            break
        score = X.T @ (w * (y - mu))
        if np.max(np.abs(score)) / wsum < tol:
            converged = True
            if polished or family == "linear":
                break
            polished = True
        J = (X * (w * _unit_info_weights(mu, family))[:, None]).T @ X
        try:
            step = np.linalg.solve(J, score)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        it += 1
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            ll_new = loglik(cand, X, y, w, family)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        beta, ll = cand, ll_new
        if converged:
            break
    if family == "logistic" and not separated:
        separated = _saturated(_mean(X, beta, family), groups)
    if not converged:
        mu = _mean(X, beta, family)
        converged = np.max(np.abs(X.T @ (w * (y - mu)))) / wsum < tol
    return beta, bool(converged), it, bool(separated)


def influence_arrays(beta, X, y, w, family, pseudo_inverse=False):
    """Influence matrix ``h_i = Jbar^{-1} U_i`` for the given rows."""
    U = score_contributions(beta, X, y, family)
    Jbar = information(beta, X, w, family) / w.sum()
    if pseudo_inverse:
        return U @ np.linalg.pinv(Jbar)
    cond = np.linalg.cond(Jbar)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularInformation(f"information matrix is singular (cond={cond:.3g})")
    return np.linalg.solve(Jbar, U.T).T


def _sandwich(h, w):
    W = w.sum()
    hw = h * w[:, None]
    return hw.T @ hw / W**2


def fit_weighted_glm(data, model, weights=None, rows=None, tol=1e-10, max_iter=50,
                     groups=None, override=None):
    """Fit a weighted linear or logistic regression.

    Parameters
    ----------
    data : CohortFrame, DataFrame or mapping of arrays
    model : ModelSpec
    weights : array_like, optional
        Positive weights for the fitted rows (after ``rows`` selection).
        Defaults to ones.
    rows : array_like of bool or int, optional
        Subset of ``data`` to fit on.
    groups : array_like, optional
        Labels for the separation check: the fit is flagged ``separated`` when
        every unit of some group has a saturated fitted probability. Without
        groups a single saturated unit is enough.
    override : dict, optional
        Replacement arrays for named columns (full length, before ``rows``).

    Returns
    -------
    FitResult
        ``vcov`` is the weighted sandwich ``sum w_i^2 h_i h_i' / (sum w)^2``.
    """
    X, y = design_matrix(data, model, rows, override)
    n = len(y)
    w = np.ones(n) if weights is None else np.asarray(weights, float)
    if w.shape != (n,):
        raise ValueError("weights must match the fitted rows")
    if np.any(w <= 0):
        raise ValueError("weights must be strictly positive")
    if groups is not None:
        groups = np.asarray(groups)
        if rows is not None and len(groups) != n:
            groups = groups[rows]
    beta, converged, it, separated = fit_arrays(X, y, w, model.family, tol, max_iter, groups)
    if not converged and not separated:
        warnings.warn(f"{model.family} fit did not converge in {max_iter} iterations",
                      NonConvergenceWarning, stacklevel=2)
    h = influence_arrays(beta, X, y, w, model.family, pseudo_inverse=separated)
    score = X.T @ (w * (y - _mean(X, beta, model.family))) / w.sum()
    if rows is None:
        idx = np.arange(n)
    else:
        rows = np.asarray(rows)
        idx = np.flatnonzero(rows) if rows.dtype == bool else rows.astype(np.int64)
    return FitResult(beta=beta, vcov=_sandwich(h, w), influence=h, score_at_solution=score,
                     converged=converged, iterations=it, rows=idx, terms=model.terms,
                     separated=separated)


def influence_functions(fit, data, model, weights=None, rows=None, override=None):
    """Recompute the influence matrix of ``fit`` on the given rows."""
    X, y = design_matrix(data, model, rows, override)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, float)
    return influence_arrays(fit.beta, X, y, w, model.family)


def fit_imputation_model(data, spec, weights=None, rows=None):
    """Fit the model for the phase-II variable on rows where it is observed.

    With a CohortFrame and no ``rows``, the sampled rows (``R``) are used with
    the frame's weights.
    """
    if rows is None and hasattr(data, "R"):
        rows = data.R
        if weights is None:
            weights = data.weight[rows]
    return fit_weighted_glm(data, spec, weights, rows=rows)


def predict_xhat(fit, data, spec, rows=None):
    """Single imputation for every row: fitted mean (probability for binary X)."""
    cols = [np.asarray(data[c], float) for c in spec.covariates]
    n = len(cols[0]) if cols else len(data)
    if spec.include_intercept:
        cols.insert(0, np.ones(n))
    V = np.column_stack(cols)
    if rows is not None:
        V = V[rows]
    return _mean(V, fit.beta, spec.family)


def phase1_influence(data, outcome_spec, xhat, x_column="X"):
    """Influence functions of the outcome model fitted to the whole cohort with
    ``x_column`` replaced by ``xhat``; these are the raking auxiliaries."""
    fit = fit_weighted_glm(data, outcome_spec, override={x_column: xhat})
    return fit.influence
