"""Limited-information estimation from univariate and bivariate margins.

Stage 1 estimates thresholds from item proportions and a tetrachoric
correlation for every item pair (thresholds held fixed).  Stage 2 fits the
constrained bi-factor correlation structure by diagonally weighted least
squares, weights being inverse asymptotic variances of the tetrachorics.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, minimize
from scipy.special import ndtr, ndtri

from .bvn import bvn_pdf, bvnu
from .errors import BoundarySolution, DegenerateData, HeywoodError, NonConvergence
from .model import FactorParams, TestletDesign, as_responses, implied_tetrachorics
from .results import FitResult, irt_from_standardized

log = logging.getLogger(__name__)

RHO_MAX = 0.999
NEGATIVE_VARIANCE_TOL = 1e-6
STATIONARY_RTOL = 1e-6


@dataclass(frozen=True)
class TetrachoricResult:
    rho: float
    asy_var: float
    at_boundary: bool = False


@dataclass(frozen=True)
class SampleStats:
    thresholds: np.ndarray
    tetra: np.ndarray
    asy_var: np.ndarray
    n_persons: int = 0
    boundary: np.ndarray | None = None

    @property
    def n_items(self) -> int:
        return self.thresholds.size


def estimate_thresholds(data) -> np.ndarray:
    """tau_j = Phi^-1(proportion of zeros), the convention P(y = 1) = Phi(-tau)."""
    y = as_responses(data)
    p0 = 1.0 - y.mean(axis=0)
    bad = np.flatnonzero((p0 == 0) | (p0 == 1))
    if bad.size:
        raise DegenerateData(f"items {bad.tolist()} have a single observed category")
    return ndtri(p0)


def _cells(tj, tk, rho):
    p11 = bvnu(tj, tk, rho)
    p1j, p1k = ndtr(-tj), ndtr(-tk)
    p10 = p1j - p11
    p01 = p1k - p11
    p00 = 1.0 - p1j - p1k + p11
    return np.maximum([p00, p01, p10, p11], 1e-300)


def table_loglik(table, tau_j, tau_k, rho) -> float:
    t = np.asarray(table, dtype=float).reshape(-1)
    return float(t @ np.log(_cells(tau_j, tau_k, rho)))


def tetrachoric(table, tau_j: float, tau_k: float) -> TetrachoricResult:
    """ML tetrachoric correlation of a 2x2 table with thresholds held fixed.

    ``table[a][b]`` counts persons answering ``a`` on item j and ``b`` on
    item k.  The score is ``phi2(rho) * g(rho)`` with ``g`` strictly
    decreasing, so the root of ``g`` is the unique maximizer.  Estimates
    that would leave [-0.999, 0.999] are clamped and a BoundarySolution
    warning is issued.
    """
    t = np.asarray(table, dtype=float).reshape(-1)
    if t.size != 4 or np.any(t < 0):
        raise ValueError("table must be a 2x2 array of nonnegative counts")

    def g(rho):
        c = _cells(tau_j, tau_k, rho)
        return t[0] / c[0] - t[1] / c[1] - t[2] / c[2] + t[3] / c[3]

    boundary = False
    g_lo, g_hi = g(-RHO_MAX), g(RHO_MAX)
    if g_hi >= 0:
        rho, boundary = RHO_MAX, True
    elif g_lo <= 0:
        rho, boundary = -RHO_MAX, True
    else:
        rho = brentq(g, -RHO_MAX, RHO_MAX, xtol=1e-13, rtol=1e-15)
    c = _cells(tau_j, tau_k, rho)
    info = bvn_pdf(tau_j, tau_k, rho) ** 2 * float(t @ (1.0 / c**2))
    asy_var = 1.0 / info if info > 0 else np.inf
    if boundary:
        warnings.warn(BoundarySolution(f"tetrachoric clamped at {rho:+.3f}"), stacklevel=2)
    return TetrachoricResult(float(rho), float(asy_var), boundary)


def pair_tables(y: np.ndarray) -> np.ndarray:
    """All 2x2 tables as an items x items x 2 x 2 array."""
    y = y.astype(float)
    n11 = y.T @ y
    n1 = y.sum(axis=0)
    n = y.shape[0]
    n10 = n1[:, None] - n11
    n01 = n1[None, :] - n11
    n00 = n - n11 - n10 - n01
    return np.stack([np.stack([n00, n01], -1), np.stack([n10, n11], -1)], -2)


def sample_stats(data) -> SampleStats:
    """Stage-1 statistics: thresholds, tetrachoric matrix and asymptotic variances."""
    y = as_responses(data)
    tau = estimate_thresholds(y)
    tables = pair_tables(y)
    j = y.shape[1]
    rho = np.eye(j)
    var = np.full((j, j), np.nan)
    bnd = np.zeros((j, j), dtype=bool)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BoundarySolution)
        for a in range(j):
            for b in range(a + 1, j):
                res = tetrachoric(tables[a, b], tau[a], tau[b])
                rho[a, b] = rho[b, a] = res.rho
                var[a, b] = var[b, a] = res.asy_var
                bnd[a, b] = bnd[b, a] = res.at_boundary
    if bnd.any():
        log.info("%d tetrachoric correlations at the boundary", int(bnd.sum() // 2))
    return SampleStats(tau, rho, var, y.shape[0], bnd)


class _Objective:
    def __init__(self, stats: SampleStats, design: TestletDesign, weights: str):
        j = stats.n_items
        self.j, self.design = j, design
        self.r = stats.tetra
        if weights == "uls":
            w = np.ones((j, j))
        elif weights == "dwls":
            v = np.where(np.isfinite(stats.asy_var), stats.asy_var, np.inf)
            w = 1.0 / np.maximum(v, 1e-12)
        else:
            raise ValueError(f"unknown weighting {weights!r}")
        np.fill_diagonal(w, 0.0)
        self.w = w
        self.t = np.asarray(design.testlet_of)
        self.same = design.same_testlet()
        np.fill_diagonal(self.same, False)

    def mult(self, s2):
        ext = np.append(s2, 0.0)[self.t]
        return 1.0 + np.where(self.same, ext[:, None], 0.0)

    def __call__(self, p):
        lam, s2 = p[: self.j], p[self.j :]
        m = self.mult(s2)
        e = self.r - np.outer(lam, lam) * m
        we = self.w * e
        f = 0.5 * float((we * e).sum())
        g_lam = -2.0 * (we * m) @ lam
        ll = np.outer(lam, lam)
        g_s2 = np.array([-(we * ll)[np.ix_(ix, ix)].sum() for ix in self._blocks()])
        return f, np.concatenate([g_lam, g_s2])

    def _blocks(self):
        if not hasattr(self, "_ix"):
            self._ix = [self.design.items_in(d) for d in range(self.design.n_testlets)]
        return self._ix


def _start(stats: SampleStats, design: TestletDesign, s2=0.2):
    r = stats.tetra.copy()
    np.fill_diagonal(r, np.nan)
    other = ~design.same_testlet()
    m = np.nanmean(np.where(other, r, np.nan), axis=1)
    m = np.where(np.isfinite(m), m, np.nanmean(r, axis=1))
    lam = m / np.sqrt(max(np.nanmean(m), 1e-3))
    return np.clip(np.nan_to_num(lam, nan=0.3), 0.05, 0.9), np.full(design.n_testlets, s2)


def _minimize(obj, x0, bounded):
    bounds = [(None, None)] * obj.j + [(0.0 if bounded else None, None)] * (x0.size - obj.j)
    return minimize(obj, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                    options={"maxiter": 5000, "ftol": 1e-16, "gtol": 1e-11, "maxcor": 30})


def _converged(res, n_loadings: int) -> bool:
    """Minimizer success, or a projected gradient that is negligible relative to the objective.

    L-BFGS-B can end in a failed line search once the objective stops changing
    in float64, even though it already sits at the optimum.
    """
    if res.success:
        return True
    g, x = np.asarray(res.jac, dtype=float).copy(), res.x
    var = slice(n_loadings, None)
    g[var] = np.where((x[var] <= 0) & (g[var] > 0), 0.0, g[var])
    return bool(np.all(np.isfinite(g)) and np.abs(g).max() <= STATIONARY_RTOL * max(1.0, abs(res.fun)))


def fit_dwls(
    stats: SampleStats,
    design: TestletDesign,
    weights: str = "dwls",
    strict: bool = False,
    n_starts: int = 3,
    seed: int = 0,
) -> FitResult:
    """Weighted least-squares fit of the constrained bi-factor correlation structure.

    A Heywood case is flagged (``extras["heywood"]``, ``converged=False``)
    when a fitted communality is at least one, or when the fit with the
    testlet variances left unconstrained puts any variance below zero.  The
    reported variances always come from the nonnegativity-constrained fit.
    With ``strict=True`` a HeywoodError / NonConvergence is raised instead.
    """
    t0 = time.perf_counter()
    if stats.n_items != design.n_items:
        raise DegenerateData(f"statistics for {stats.n_items} items, design has {design.n_items}")
    obj = _Objective(stats, design, weights)
    lam0, s20 = _start(stats, design)
    rng = np.random.default_rng(seed)
    res, attempts = None, 0
    for attempt in range(max(1, n_starts)):
        attempts += 1
        if attempt == 0:
            x0 = np.concatenate([lam0, s20])
        else:
            x0 = np.concatenate([lam0 * rng.uniform(0.8, 1.2, lam0.size), rng.uniform(0.05, 1.0, s20.size)])
        cand = _minimize(obj, x0, bounded=True)
        if res is None or cand.fun < res.fun:
            res = cand
        if _converged(cand, obj.j):
            break
    ok = _converged(res, obj.j)
    x = res.x
    lam, s2 = x[: obj.j].copy(), np.maximum(x[obj.j :], 0.0)
    if lam.mean() < 0:
        lam = -lam

    negative = False
    s2_free = s2.copy()
    if design.n_testlets:
        free = _minimize(obj, np.concatenate([lam, s2]), bounded=False)
        s2_free = free.x[obj.j :]
        negative = bool(np.any(s2_free < -NEGATIVE_VARIANCE_TOL))

    fp = FactorParams(lam, stats.thresholds, s2)
    resid = 1.0 - fp.communality(design)
    heywood = bool(np.any(resid <= 0)) or negative
    extras = {
        "heywood": heywood,
        "negative_variance": negative,
        "sigma2_unconstrained": s2_free,
        "min_communality_residual": float(resid.min()),
        "objective": float(res.fun),
        "weights": weights,
        "starts": attempts,
        "nonconvergence": not ok,
        "boundary_tetrachorics": int(stats.boundary.sum() // 2) if stats.boundary is not None else 0,
    }
    result = FitResult(
        "dwls", design, fp, irt_from_standardized(fp, design), None,
        converged=ok and not heywood, n_iterations=int(res.nit),
        wall_time=time.perf_counter() - t0, extras=extras,
    )
    if strict and heywood:
        raise HeywoodError("Heywood case in limited-information fit", np.flatnonzero(resid <= 0))
    if strict and not ok:
        raise NonConvergence(f"DWLS minimizer failed: {res.message}", result)
    return result


def fit_liminfo(data, design: TestletDesign, **kw) -> FitResult:
    """Stage 1 plus stage 2 on a response matrix."""
    t0 = time.perf_counter()
    fit = fit_dwls(sample_stats(data), design, **kw)
    return FitResult(**{**fit.__dict__, "wall_time": time.perf_counter() - t0})


def noiseless_stats(fp: FactorParams, design: TestletDesign, asy_var: float = 1.0) -> SampleStats:
    """Population statistics implied by known parameters (unit weights by default)."""
    j = fp.loading.size
    var = np.full((j, j), asy_var, dtype=float)
    np.fill_diagonal(var, np.nan)
    return SampleStats(fp.threshold.copy(), implied_tetrachorics(fp, design), var)
