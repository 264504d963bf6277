"""Stratum sample-size allocation.

The variance objective minimised throughout is ``sum_k (N_k s_k)^2 / n_k``;
it differs from the stratified without-replacement variance of a total only
by the constant ``sum_k N_k s_k^2``.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import AllDispersionZero, Infeasible, SingularAuxiliaries
from .glm import design_matrix

DEFAULT_N_MIN = 2


@dataclass(frozen=True)
class StratumTable:
    """Stratum ids, population counts ``N`` and dispersions ``s``."""

    ids: np.ndarray
    N: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        N = np.asarray(self.N, dtype=np.int64)
        s = np.asarray(self.s, dtype=float)
        if not (ids.shape == N.shape == s.shape) or ids.ndim != 1:
            raise ValueError("ids, N and s must be 1-d and of equal length")
        if len(ids) == 0:
            raise ValueError("at least one stratum is required")
        if np.any(N < 1):
            raise ValueError("every stratum needs N_k >= 1")
        if np.any(~np.isfinite(s)) or np.any(s < 0):
            raise ValueError("dispersions must be finite and non-negative")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "N", N)
        object.__setattr__(self, "s", s)

    @property
    def K(self):
        return len(self.ids)

    @property
    def total(self):
        return int(self.N.sum())

    @classmethod
    def from_strata(cls, stratum, s=None, ids=None):
        """Build from a per-unit stratum column; ``s`` defaults to ones."""
        stratum = np.asarray(stratum)
        ids = np.unique(stratum) if ids is None else np.asarray(ids)
        N = np.array([(stratum == k).sum() for k in ids])
        return cls(ids, N, np.ones(len(ids)) if s is None else s)

    def with_dispersions(self, s):
        return StratumTable(self.ids, self.N, s)


@dataclass(frozen=True)
class Allocation:
    """Integer per-stratum sample sizes."""

    ids: np.ndarray
    n: np.ndarray
    N: np.ndarray
    n_min: int = DEFAULT_N_MIN

    def __post_init__(self):
        n = np.asarray(self.n)
        if not np.all(n == np.round(n)):
            raise ValueError("allocations must be integers")
        n = n.astype(np.int64)
        N = np.asarray(self.N, dtype=np.int64)
        if np.any(n > N) or np.any(n < np.minimum(self.n_min, N)):
            raise ValueError("allocation violates n_min <= n_k <= N_k")
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=np.int64))
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "N", N)

    @property
    def total(self):
        return int(self.n.sum())

    @property
    def exhausted(self):
        return self.n == self.N

    @property
    def shares(self):
        return self.n / self.n.sum()

    @property
    def pi(self):
        """Inclusion probability per stratum."""
        return self.n / self.N

    def as_dict(self):
        return {int(k): int(v) for k, v in zip(self.ids, self.n)}


def variance_objective(table, n):
    """``sum_k (N_k s_k)^2 / n_k`` (infinite if a stratum with s_k > 0 is empty)."""
    A2 = (table.N * table.s) ** 2
    n = np.asarray(n, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(A2 > 0, A2 / n, 0.0)
    return float(terms.sum())


def neyman_allocation(table, n):
    """Continuous Neyman allocation ``n N_k s_k / sum_j N_j s_j``."""
    if n < 1:
        raise ValueError("n must be positive")
    A = table.N * table.s
    total = A.sum()
    if total <= 0:
        raise AllDispersionZero("all stratum dispersions are zero")
    return n * A / total


def _greedy(A, lower, upper, n):
    """Add units one at a time to the stratum with the largest priority
    ``A_k / sqrt(m (m + 1))``; ties go to the lowest index."""
    alloc = lower.astype(np.int64).copy()
    remaining = int(n - alloc.sum())
    heap = []

    def push(k):
        m = alloc[k]
        if m >= upper[k]:
            return
        prio = np.inf if m == 0 and A[k] > 0 else (A[k] / np.sqrt(m * (m + 1.0)) if m > 0 else 0.0)
        heapq.heappush(heap, (-prio, k))

    for k in range(len(A)):
        push(k)
    for _ in range(remaining):
        _, k = heapq.heappop(heap)
        alloc[k] += 1
        push(k)
    return alloc


def _bounds(table, n, n_min, start):
    upper = table.N.astype(np.int64)
    lower = np.minimum(n_min, upper)
    if start is not None:
        start = np.asarray(start, dtype=np.int64)
        if np.any(start > upper) or np.any(start < 0):
            raise Infeasible("existing counts outside 0..N_k")
        lower = np.maximum(lower, start)
    if n < lower.sum():
        raise Infeasible(f"n={n} is below the per-stratum floors (total {lower.sum()})")
    if n > upper.sum():
        raise Infeasible(f"n={n} exceeds the population size {upper.sum()}")
    return lower, upper


def wright_allocation(table, n, n_min=DEFAULT_N_MIN, start=None):
    """Exact integer minimiser of ``sum (N_k s_k)^2 / n_k``.

    Parameters
    ----------
    table : StratumTable
    n : int
        Total sample size.
    n_min : int
        Per-stratum floor (capped at ``N_k`` for tiny strata).
    start : array_like of int, optional
        Units already taken in each stratum; they act as extra floors. Used
        for later waves of a multiwave design.
    """
    n = int(n)
    lower, upper = _bounds(table, n, n_min, start)
    A = table.N * table.s
    alloc = _greedy(A, lower, upper, n)
    return Allocation(table.ids, alloc, table.N, n_min)


def proportional_allocation(table, n, n_min=DEFAULT_N_MIN, start=None):
    """Integer allocation proportional to ``N_k`` (Wright with equal dispersions)."""
    return wright_allocation(table.with_dispersions(np.ones(table.K)), n, n_min, start)


def cap_and_redistribute(raw, table, n, n_min=DEFAULT_N_MIN):
    """Turn a real-valued allocation into a feasible integer one.

    Strata whose ``raw`` entry exceeds ``N_k`` end at ``N_k``, those below
    ``n_min`` at ``n_min``, and the remaining budget is spread over the free
    strata in proportion to ``raw``. This is the bounded minimiser of
    ``sum_k raw_k^2 / n_k``, so Wright's greedy algorithm with ``raw`` as the
    priority weights reaches it in one pass, including cases where fixing a
    cap first would push another stratum below its floor.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (table.K,) or np.any(raw < 0) or not np.all(np.isfinite(raw)):
        raise ValueError("raw allocation must be finite, non-negative and of length K")
    lower, upper = _bounds(table, int(n), n_min, None)
    alloc = _greedy(raw, lower, upper, int(n))
    return Allocation(table.ids, alloc, table.N, n_min)


def stratum_sd(values, stratum, ids):
    """Within-stratum standard deviation (ddof=1; zero for singletons)."""
    out = np.zeros(len(ids))
    for j, k in enumerate(ids):
        v = values[stratum == k]
        out[j] = v.std(ddof=1) if len(v) > 1 else 0.0
    return out


def influence_dispersions(h, stratum, target=0, ids=None):
    """StratumTable whose ``s_k`` are within-stratum sds of one influence column."""
    h = np.asarray(h, dtype=float)
    col = h[:, target] if h.ndim == 2 else h
    stratum = np.asarray(stratum)
    ids = np.unique(stratum) if ids is None else np.asarray(ids)
    N = np.array([(stratum == k).sum() for k in ids])
    return StratumTable(ids, N, stratum_sd(col, stratum, ids))


def raking_optimal_dispersions(h, a, stratum, target=0, ids=None):
    """Dispersions for allocating a raking estimator.

    Regresses the target influence column on the auxiliaries (plus an
    intercept) by ordinary least squares over all rows and returns the
    within-stratum sds of the residuals.
    """
    h = np.asarray(h, dtype=float)
    col = h[:, target] if h.ndim == 2 else h
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    D = np.column_stack([np.ones(len(col)), a])
    if np.linalg.matrix_rank(D) < D.shape[1]:
        raise SingularAuxiliaries("auxiliaries with intercept are rank deficient")
    coef, *_ = np.linalg.lstsq(D, col, rcond=None)
    resid = col - D @ coef
    # exact fits leave rounding noise; treat it as zero
    scale = max(np.abs(col).max(), 1.0)
    resid[np.abs(resid) < 1e-10 * scale] = 0.0
    return influence_dispersions(resid, stratum, ids=ids)


def share_distance(a, b):
    """L1 distance between two allocations' share vectors."""
    sa = a.shares if isinstance(a, Allocation) else np.asarray(a) / np.sum(a)
    sb = b.shares if isinstance(b, Allocation) else np.asarray(b) / np.sum(b)
    return float(np.abs(sa - sb).sum())


@dataclass(frozen=True)
class PriorSpec:
    """Independent normal priors on outcome (beta) and imputation (alpha)
    coefficients, in the order of the respective ``ModelSpec.terms``.

    ``sigma`` is the residual sd of a linear imputation model (ignored for
    binary X).
    """

    beta_mean: np.ndarray
    beta_sd: np.ndarray
    alpha_mean: np.ndarray
    alpha_sd: np.ndarray
    draws: int = 500
    sigma: float = 1.0

    def __post_init__(self):
        for name in ("beta_mean", "beta_sd", "alpha_mean", "alpha_sd"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))
        if self.beta_mean.shape != self.beta_sd.shape or self.alpha_mean.shape != self.alpha_sd.shape:
            raise ValueError("prior means and sds must have matching shapes")
        if np.any(self.beta_sd < 0) or np.any(self.alpha_sd < 0):
            raise ValueError("prior sds must be non-negative")
        if self.draws < 1:
            raise ValueError("need at least one prior draw")

    @classmethod
    def shifted(cls, beta, alpha, shift, variance, draws=500, sigma=1.0):
        """Priors ``N(theta - shift, variance)`` around given parameter values."""
        beta = np.asarray(beta, float)
        alpha = np.asarray(alpha, float)
        sd = np.sqrt(variance)
        return cls(beta - shift, np.full(beta.shape, sd), alpha - shift,
                   np.full(alpha.shape, sd), draws, sigma)

    def sample(self, rng):
        """Draw ``(betas, alphas)`` with shapes ``(D, p)`` and ``(D, q)``."""
        z_b = rng.standard_normal((self.draws, len(self.beta_mean)))
        z_a = rng.standard_normal((self.draws, len(self.alpha_mean)))
        return self.beta_mean + z_b * self.beta_sd, self.alpha_mean + z_a * self.alpha_sd


def _imputation_nodes(V, alphas, family, sigma, mc_draws, rng):
    """Monte Carlo support points of a normal X | phase-I data, shape (D, N, M)."""
    lin = alphas @ V.T
    if rng is None:
        rng = np.random.default_rng(0)
    z = rng.standard_normal((V.shape[0], mc_draws))
    nodes = lin[:, :, None] + sigma * z[None, :, :]
    return nodes, np.full(nodes.shape, 1.0 / mc_draws)


def _link(eta, linear):
    return eta if linear else expit(eta)


def _var(mu, linear):
    return np.ones_like(mu) if linear else mu * (1.0 - mu)


def model_implied_dispersions(data, betas, alphas, outcome_spec, imputation_spec,
                              x_column="X", target=None, stratum=None, ids=None,
                              sigma=1.0, mc_draws=200, rng=None, chunk_elems=2_000_000):
    """Per-stratum sd of the target influence function implied by parameters.

    For each parameter draw the phase-II variable is integrated out of the
    outcome-model influence function using the imputation model: exactly over
    ``{0, 1}`` for a logistic imputation model, by ``mc_draws`` normal draws
    per unit for a linear one. The information matrix is the corresponding
    expectation averaged over the cohort.

    Parameters
    ----------
    data : CohortFrame or mapping
        Phase-I columns for every unit (``x_column`` is not read).
    betas, alphas : ndarray
        Shape ``(D, p)`` and ``(D, q)``, or single vectors.

    Returns
    -------
    ndarray
        Shape ``(D, K)`` (or ``(K,)`` for single vectors): the square root of
        the expected within-stratum variance (ddof=1) over the imputation
        distribution.
    """
    single = np.ndim(betas) == 1
    betas = np.atleast_2d(np.asarray(betas, float))
    alphas = np.atleast_2d(np.asarray(alphas, float))
    if betas.shape[0] != alphas.shape[0]:
        raise ValueError("need the same number of beta and alpha draws")
    stratum = np.asarray(data.stratum if stratum is None else stratum)
    ids = np.unique(stratum) if ids is None else np.asarray(ids)
    target = x_column if target is None else target
    t = outcome_spec.index(target)
    jx = outcome_spec.index(x_column)

    n = len(stratum)
    V, _ = design_matrix(data, imputation_spec, override={imputation_spec.response: np.zeros(n)})
    B, y = design_matrix(data, outcome_spec, override={x_column: np.zeros(n)})
    S = np.zeros((n, len(ids)))
    for j, k in enumerate(ids):
        S[stratum == k, j] = 1.0
    Nk = S.sum(0)

    out = np.empty((betas.shape[0], len(ids)))
    p = B.shape[1]
    outer = (B[:, :, None] * B[:, None, :]).reshape(n, p * p)
    binary = imputation_spec.family == "logistic"
    linear_outcome = outcome_spec.family == "linear"
    M = 1 if binary else mc_draws
    step = max(1, chunk_elems // (n * M * p))
    e = np.zeros(p)
    e[t] = 1.0

    for lo in range(0, betas.shape[0], step):
        bet = betas[lo:lo + step]
        alp = alphas[lo:lo + step]
        base = bet @ B.T  # (d, N), linear predictor with x = 0
        bx = bet[:, jx][:, None]
        if binary:
            q = expit(alp @ V.T)
            mu0, mu1 = _link(base, linear_outcome), _link(base + bx, linear_outcome)
            pw0 = (1.0 - q) * _var(mu0, linear_outcome)
            pw1 = q * _var(mu1, linear_outcome)
            w0, w1, w2 = pw0 + pw1, pw1, pw1
        else:
            nodes, probs = _imputation_nodes(V, alp, "linear", sigma, mc_draws, rng)
            eta = base[:, :, None] + nodes * bx[:, :, None]
            mu = _link(eta, linear_outcome)
            pw = probs * _var(mu, linear_outcome)
            w0, w1, w2 = pw.sum(-1), (pw * nodes).sum(-1), (pw * nodes * nodes).sum(-1)
        # information per draw, expanded in powers of x (column jx of B is 0)
        J = (w0 @ outer).reshape(-1, p, p)
        cross = w1 @ B
        J[:, :, jx] += cross
        J[:, jx, :] += cross
        J[:, jx, jx] = w2.sum(-1)
        J /= n
        c = np.linalg.solve(J, np.broadcast_to(e, (J.shape[0], p))[..., None])[..., 0]  # (d, p)
        # h(x) = c' v(x) * (y - mu(x)), where v(x) is the B row with x in column jx
        cB = c @ B.T
        cx = c[:, jx][:, None]
        if binary:
            h0 = cB * (y - mu0)
            h1 = (cB + cx) * (y - mu1)
            m1 = (1.0 - q) * h0 + q * h1
            m2 = (1.0 - q) * h0 * h0 + q * h1 * h1
        else:
            h = (cB[:, :, None] + cx[:, :, None] * nodes) * (y[:, None] - mu)
            ph = probs * h
            m1 = ph.sum(-1)
            m2 = (ph * h).sum(-1)
        # expected ddof=1 stratum variance over X: the within-unit part enters
        # with 1/N_k, the between-unit spread of conditional means with 1/(N_k - 1)
        mean_k = (m1 @ S) / Nk
        within = ((m2 - m1 * m1) @ S) / Nk
        between = ((m1 * m1) @ S - Nk * mean_k ** 2) / np.maximum(Nk - 1, 1)
        var_k = np.where(Nk > 1, within + between, 0.0)
        out[lo:lo + step] = np.sqrt(np.maximum(var_k, 0.0))
    return out[0] if single else out


def allocation_from_prior(prior, data, n, rng, outcome_spec, imputation_spec,
                          x_column="X", target=None, n_min=DEFAULT_N_MIN,
                          stratum=None, start=None):
    """Wright allocation on dispersions averaged over prior draws.

    Dispersion vectors are averaged entrywise across the ``prior.draws``
    parameter draws before a single allocation is made.
    """
    stratum = np.asarray(data.stratum if stratum is None else stratum)
    ids = np.unique(stratum)
    betas, alphas = prior.sample(rng)
    s = model_implied_dispersions(data, betas, alphas, outcome_spec, imputation_spec,
                                  x_column, target, stratum, ids, sigma=prior.sigma, rng=rng)
    table = StratumTable.from_strata(stratum, s.mean(axis=0), ids)
    return wright_allocation(table, n, n_min, start)
