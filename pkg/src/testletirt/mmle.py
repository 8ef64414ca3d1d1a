"""Marginal maximum likelihood for the testlet model by EM.

The bi-factor reduction keeps every integral two-dimensional: given the
general ability, testlets are conditionally independent, so the marginal
likelihood is an outer Gauss-Hermite sum over theta of a product of inner
sums over each testlet's own standardized effect.  Inner sums only depend on
a person's responses to that testlet's items, so they are evaluated once per
distinct within-testlet pattern.

Internally the probit model ``P = Phi(alpha_j (theta + sigma_d z) - kappa_j)``
is used (unit residual variance, z ~ N(0, 1)); results are reported in the
standardized and logistic metrics.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import log_ndtr, logsumexp, ndtri

from .errors import DegenerateData, NonConvergence
from .model import (
    FactorParams,
    PersonAbilities,
    TestletDesign,
    as_responses,
    check_both_categories,
    standardize_to_theta_metric,
)
from .results import FitResult, from_theta_metric

log = logging.getLogger(__name__)

_LOG_SQRT_2PI = 0.5 * np.log(2 * np.pi)
SIGMA2_MAX = 10.0


@dataclass(frozen=True)
class QuadratureSpec:
    n_nodes: int = 21

    def __post_init__(self):
        if self.n_nodes < 5:
            raise ValueError(f"need at least 5 quadrature nodes, got {self.n_nodes}")

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Standard-normal Gauss-Hermite nodes and weights summing to one."""
        x, w = hermegauss(self.n_nodes)
        return x, w / w.sum()


@dataclass(frozen=True)
class EmSettings:
    max_iterations: int = 500
    loglik_tol: float = 1e-6
    param_tol: float = 1e-5
    newton_iterations: int = 10
    accelerate: bool = True

    def __post_init__(self):
        if min(self.loglik_tol, self.param_tol) <= 0 or self.max_iterations < 1:
            raise ValueError("tolerances and max_iterations must be positive")


def _probit_terms(u, r, n):
    """Grouped probit log-likelihood and its first two derivatives in ``u``."""
    lp, lq = log_ndtr(u), log_ndtr(-u)
    ld = -0.5 * u * u - _LOG_SQRT_2PI
    m1 = np.exp(ld - lp)  # phi/Phi(u)
    m0 = np.exp(ld - lq)  # phi/Phi(-u)
    f = n - r
    ll = r * lp + f * lq
    d1 = r * m1 - f * m0
    d2 = -r * m1 * (u + m1) - f * m0 * (m0 - u)
    return ll, d1, d2


class _Data:
    """Responses split by testlet with within-testlet patterns compressed."""

    def __init__(self, y: np.ndarray, design: TestletDesign):
        self.y = y
        self.n = y.shape[0]
        self.design = design
        self.indep = design.independent_items
        self.y0 = y[:, self.indep].astype(float)
        self.blocks = []
        for d in range(design.n_testlets):
            items = design.items_in(d)
            pats, inv = np.unique(y[:, items], axis=0, return_inverse=True)
            self.blocks.append((items, pats.astype(float), inv.reshape(-1)))


class _Estep:
    """Quantities from one E-step at fixed parameters."""

    def __init__(self, data: _Data, alpha, kappa, sig, x, w, z, v):
        self.x, self.z = x, z
        q, r = x.size, z.size
        lj = np.log(w)[None, :] + np.zeros((data.n, 1))
        if data.indep.size:
            u = alpha[data.indep, None] * x[None, :] - kappa[data.indep, None]
            lp, lq = log_ndtr(u), log_ndtr(-u)
            lj = lj + data.y0 @ (lp - lq) + lq.sum(axis=0)
        self.inner = []
        logv = np.log(v)
        for d, (items, pats, inv) in enumerate(data.blocks):
            eta = (x[:, None] + sig[d] * z[None, :]).reshape(-1)
            u = alpha[items, None] * eta[None, :] - kappa[items, None]
            lp, lq = log_ndtr(u), log_ndtr(-u)
            lk = (pats @ (lp - lq) + lq.sum(axis=0)).reshape(-1, q, r) + logv
            lm = logsumexp(lk, axis=2)  # patterns x Q
            self.inner.append((lk, lm))
            lj = lj + lm[inv]
        self.log_l = logsumexp(lj, axis=1)
        self.loglik = float(self.log_l.sum())
        self.post = np.exp(lj - self.log_l[:, None])  # persons x Q

    def counts(self, data: _Data):
        """Expected counts: (n_q, r_jq) for independent items, per-testlet (n_qr, r_jqr)."""
        post = self.post
        indep = (post.sum(axis=0), data.y0.T @ post) if data.indep.size else None
        blocks = []
        for (items, pats, inv), (lk, lm) in zip(data.blocks, self.inner):
            agg = np.zeros((pats.shape[0], post.shape[1]))
            np.add.at(agg, inv, post)
            c = np.exp(lk - lm[:, :, None]) * agg[:, :, None]  # patterns x Q x R
            c = c.reshape(pats.shape[0], -1)
            blocks.append((c.sum(axis=0), pats.T @ c))
        return indep, blocks


def _newton_items(alpha, kappa, eta, n, r, iters):
    """Joint (alpha, kappa) Newton ascent for a block of items sharing grid ``eta``."""
    alpha, kappa = alpha.copy(), kappa.copy()
    for _ in range(iters):
        u = alpha[:, None] * eta[None, :] - kappa[:, None]
        ll, d1, d2 = _probit_terms(u, r, n[None, :])
        ga, gk = (d1 * eta).sum(1), -d1.sum(1)
        haa, hak, hkk = (d2 * eta * eta).sum(1), -(d2 * eta).sum(1), d2.sum(1)
        det = haa * hkk - hak * hak
        ok = (det > 0) & (haa < 0)
        det = np.where(ok, det, 1.0)
        sa = np.where(ok, -(hkk * ga - hak * gk) / det, 0.0)
        sk = np.where(ok, -(-hak * ga + haa * gk) / det, 0.0)
        base = ll.sum(1)
        step = np.ones_like(alpha)
        for _ in range(30):
            a1, k1 = alpha + step * sa, kappa + step * sk
            new = _probit_terms(a1[:, None] * eta[None, :] - k1[:, None], r, n[None, :])[0].sum(1)
            bad = new < base - 1e-12
            if not bad.any():
                break
            step = np.where(bad, step / 2, step)
        step = np.where(new < base - 1e-12, 0.0, step)
        alpha, kappa = alpha + step * sa, kappa + step * sk
        if np.max(np.abs(step * sa)) + np.max(np.abs(step * sk)) < 1e-10:
            break
    return alpha, kappa


def _newton_sigma(sig, alpha, kappa, x, z, n, r, iters):
    """Projected Newton ascent of the testlet SD on [0, sqrt(10)]; the objective is concave."""
    zz = np.broadcast_to(z[None, :], (x.size, z.size)).reshape(-1)
    xx = np.broadcast_to(x[:, None], (x.size, z.size)).reshape(-1)
    hi = np.sqrt(SIGMA2_MAX)

    def terms(s):
        u = alpha[:, None] * (xx + s * zz)[None, :] - kappa[:, None]
        return _probit_terms(u, r, n[None, :])

    for _ in range(iters):
        ll, d1, d2 = terms(sig)
        g = (d1 * alpha[:, None] * zz).sum()
        h = (d2 * (alpha**2)[:, None] * zz * zz).sum()
        if h >= 0:
            break
        base = ll.sum()
        step = -g / h
        for _ in range(30):
            cand = min(max(sig + step, 0.0), hi)
            if terms(cand)[0].sum() >= base - 1e-12:
                break
            step /= 2
        else:
            break
        if abs(cand - sig) < 1e-12:
            sig = cand
            break
        sig = cand
    return sig


def _start_values(y: np.ndarray, design: TestletDesign, sigma2_start=0.2):
    p = y.mean(axis=0).clip(1e-3, 1 - 1e-3)
    tau = ndtri(1 - p)
    total = y.sum(axis=1).astype(float)
    lam = np.empty(y.shape[1])
    for j in range(y.shape[1]):
        rest = total - y[:, j]
        sd = rest.std()
        rpb = np.corrcoef(y[:, j], rest)[0, 1] if sd > 0 else 0.0
        # point-biserial -> biserial correlation under the normal-ogive threshold
        lam[j] = rpb * np.sqrt(p[j] * (1 - p[j])) / np.exp(-0.5 * tau[j] ** 2 - _LOG_SQRT_2PI)
    s2 = np.full(design.n_testlets, sigma2_start)
    lam = np.clip(np.nan_to_num(lam, nan=0.3), 0.1, 0.85 / np.sqrt(1 + sigma2_start))
    alpha, kappa = standardize_to_theta_metric(lam, tau, design.item_sigma2(s2))
    return alpha, kappa, np.sqrt(s2)


def _pack(alpha, kappa, sig):
    return np.concatenate([alpha, kappa, sig])


def _unpack(p, j):
    return p[:j], p[j : 2 * j], p[2 * j :]


class _EmMap:
    def __init__(self, data: _Data, quad: QuadratureSpec, settings: EmSettings):
        self.data = data
        self.x, self.w = quad.nodes()
        self.z, self.v = self.x, self.w
        self.settings = settings
        self.j = data.y.shape[1]

    def estep(self, p) -> _Estep:
        a, k, s = _unpack(p, self.j)
        return _Estep(self.data, a, k, s, self.x, self.w, self.z, self.v)

    def mstep(self, p, e: _Estep):
        alpha, kappa, sig = (q.copy() for q in _unpack(p, self.j))
        data, it = self.data, self.settings.newton_iterations
        indep, blocks = e.counts(data)
        if indep is not None:
            n_q, r_jq = indep
            ii = data.indep
            alpha[ii], kappa[ii] = _newton_items(alpha[ii], kappa[ii], self.x, n_q, r_jq, it)
        for d, ((items, _, _), (n_g, r_g)) in enumerate(zip(data.blocks, blocks)):
            eta = (self.x[:, None] + sig[d] * self.z[None, :]).reshape(-1)
            alpha[items], kappa[items] = _newton_items(alpha[items], kappa[items], eta, n_g, r_g, it)
            sig[d] = _newton_sigma(sig[d], alpha[items], kappa[items], self.x, self.z, n_g, r_g, it)
        return _pack(alpha, kappa, sig)

    def clamp(self, p):
        a, k, s = _unpack(p.copy(), self.j)
        s[:] = np.clip(s, 0.0, np.sqrt(SIGMA2_MAX))
        return _pack(a, k, s)


def _loglik_theta_metric(y, design, alpha, kappa, sig, quad):
    x, w = quad.nodes()
    return _Estep(_Data(y, design), alpha, kappa, sig, x, w, x, w)


def marginal_loglik(params: FactorParams, data, design: TestletDesign, quad: QuadratureSpec = QuadratureSpec()) -> float:
    """Marginal log-likelihood of ``data`` under standardized parameters.

    Raises HeywoodError if any communality is at least one.
    """
    y = as_responses(data)
    alpha, kappa = standardize_to_theta_metric(params.loading, params.threshold, design.item_sigma2(params.sigma2))
    return _loglik_theta_metric(y, design, alpha, kappa, np.sqrt(params.sigma2), quad).loglik


def fit_mmle(
    data,
    design: TestletDesign,
    quad: QuadratureSpec = QuadratureSpec(),
    settings: EmSettings = EmSettings(),
    raise_on_failure: bool = False,
    start=None,
) -> FitResult:
    """Fit the constrained bi-factor (testlet) model by EM.

    Returns a FitResult whose ``converged`` flag is False when the iteration
    cap is reached; with ``raise_on_failure`` a NonConvergence carrying the
    result is raised instead.  ``extras["loglik_trace"]`` records the
    log-likelihood at every accepted iterate.
    """
    t0 = time.perf_counter()
    y = as_responses(data)
    if y.shape[1] != design.n_items:
        raise DegenerateData(f"data has {y.shape[1]} items, design has {design.n_items}")
    check_both_categories(y)
    em = _EmMap(_Data(y, design), quad, settings)
    j = y.shape[1]
    p = _pack(*(_start_values(y, design) if start is None else start))

    e = em.estep(p)
    trace = [e.loglik]
    converged = False
    it = 0
    while it < settings.max_iterations:
        it += 1
        p1 = em.mstep(p, e)
        if settings.accelerate:
            e1 = em.estep(p1)
            p2 = em.mstep(p1, e1)
            e2 = em.estep(p2)
            pn, en = _squarem(em, p, p1, p2, e2)
        else:
            pn, en = p1, em.estep(p1)
        dl = en.loglik - e.loglik
        dp = np.max(np.abs(pn - p))
        p, e = pn, en
        trace.append(e.loglik)
        if abs(dl) < settings.loglik_tol * max(1.0, abs(e.loglik)) and dp < settings.param_tol:
            converged = True
            break

    alpha, kappa, sig = _unpack(p, j)
    if alpha.mean() < 0:  # reflection of the general factor
        alpha = -alpha
    result = from_theta_metric(
        "mmle",
        design,
        alpha,
        kappa,
        sig**2,
        loglik=e.loglik,
        converged=converged,
        n_iterations=it,
        wall_time=time.perf_counter() - t0,
        extras={"loglik_trace": trace, "quadrature_nodes": quad.n_nodes, "heywood": False},
    )
    if not converged:
        log.info("EM stopped at the iteration cap (%d)", settings.max_iterations)
        if raise_on_failure:
            raise NonConvergence(f"EM did not converge in {settings.max_iterations} iterations", result)
    return result


def _squarem(em: _EmMap, p0, p1, p2, e2):
    """SQUAREM extrapolation with a monotonicity safeguard (falls back to the plain EM iterate)."""
    r = p1 - p0
    v = p2 - p1 - r
    nv = np.linalg.norm(v)
    if nv == 0:
        return p2, e2
    step = -np.linalg.norm(r) / nv
    if step > -1:
        return p2, e2
    pe = em.clamp(p0 - 2 * step * r + step * step * v)
    try:
        ee = em.estep(pe)
        pe = em.mstep(pe, ee)
        ee = em.estep(pe)
    except FloatingPointError:
        return p2, e2
    if np.isfinite(ee.loglik) and ee.loglik >= e2.loglik:
        return pe, ee
    return p2, e2


def score_eap(fit: FitResult, data, quad: QuadratureSpec = QuadratureSpec()) -> PersonAbilities:
    """Posterior means of theta and of the testlet effects (in the sign convention of the response function)."""
    y = as_responses(data)
    design = fit.design
    alpha = np.asarray(fit.extras["lambda_raw"], dtype=float)
    kappa = np.asarray(fit.extras["tau_raw"], dtype=float)
    sig = np.sqrt(fit.sigma2)
    dat = _Data(y, design)
    x, w = quad.nodes()
    e = _Estep(dat, alpha, kappa, sig, x, w, x, w)
    theta = e.post @ x
    gamma = np.zeros((y.shape[0], design.n_testlets))
    for d, ((items, pats, inv), (lk, lm)) in enumerate(zip(dat.blocks, e.inner)):
        cond = np.exp(lk - lm[:, :, None]) @ (sig[d] * x)  # patterns x Q: E[s | theta_q, pattern]
        # s enters with a plus sign, gamma with a minus sign
        gamma[:, d] = -(e.post * cond[inv]).sum(axis=1)
    return PersonAbilities(theta, gamma)
