"""Bayesian estimation of the probit testlet model by MCMC.

The kernel is data-augmentation Gibbs: latent normal responses are drawn
from truncated normals, after which abilities, testlet effects and item
(slope, intercept) pairs all have conjugate normal full conditionals.  Each
testlet variance is updated twice per sweep (interweaving): once from its
inverse-gamma conditional given the testlet effects, once as a scale of the
standardized effects through a Metropolis step.  The second move keeps the
chain mixing when a variance is near zero.

Model (unit residual variance):
    y_ij = 1  iff  alpha_j (theta_i + s_i,d(j)) - kappa_j + e_ij > 0
    theta_i ~ N(0, 1),  s_id ~ N(0, sigma2_d),
    alpha_j, kappa_j ~ N(0, 5),  sigma2_d ~ IG(-1, 0)  (flat on (0, inf)).
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import ChainDivergence, DegenerateData, ZeroVariance
from .mmle import _start_values
from .model import TestletDesign, as_responses, check_both_categories
from .results import FitResult, from_theta_metric

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PriorSpec:
    loading_var: float = 5.0
    threshold_var: float = 5.0
    sigma2_shape: float = -1.0  # IG(-1, 0) is the flat prior on (0, inf)
    sigma2_scale: float = 0.0

    def __post_init__(self):
        if self.loading_var <= 0 or self.threshold_var <= 0 or self.sigma2_scale < 0:
            raise ValueError("prior variances must be positive and the IG scale nonnegative")


@dataclass(frozen=True)
class ChainSpec:
    n_chains: int = 4
    min_iterations: int = 4000
    burn_in: float = 0.5
    thin: int = 1
    psrf_threshold: float = 1.1
    seed: int = 0
    max_factor: int = 10
    ppp_draws: int = 200

    def __post_init__(self):
        if self.n_chains < 2:
            raise ValueError("need at least two chains for the PSRF")
        if not 0 < self.burn_in < 1:
            raise ValueError("burn_in must lie in (0, 1)")
        if self.min_iterations < 20 or self.thin < 1:
            raise ValueError("min_iterations must be >= 20 and thin >= 1")

    @classmethod
    def paper_scale(cls, **kw) -> "ChainSpec":
        return cls(**{"min_iterations": 20000, **kw})


@dataclass
class PosteriorSummary:
    names: list[str]
    mean: np.ndarray
    sd: np.ndarray
    psrf: np.ndarray
    converged: bool
    ppp: float
    n_retained: int
    draws: np.ndarray  # chains x retained x parameters
    extras: dict = field(default_factory=dict)

    @property
    def psrf_max(self) -> float:
        return float(np.max(self.psrf))


def psrf(draws) -> float:
    """Gelman-Rubin potential scale reduction factor.

    ``draws`` is chains x iterations for a single parameter.
    """
    x = np.asarray(draws, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError(f"need >= 2 chains of equal length >= 2, got shape {x.shape}")
    n = x.shape[1]
    w = x.var(axis=1, ddof=1).mean()
    b = n * x.mean(axis=1).var(ddof=1)
    if not w > 0:
        raise ZeroVariance("within-chain variance is zero")
    return float(np.sqrt(((n - 1) / n * w + b / n) / w))


def psrf_all(draws: np.ndarray) -> np.ndarray:
    """PSRF per parameter for a chains x iterations x parameters array (NaN if undefined)."""
    x = np.asarray(draws, dtype=float)
    n = x.shape[1]
    w = x.var(axis=1, ddof=1).mean(axis=0)
    b = n * x.mean(axis=1).var(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(((n - 1) / n * w + b / n) / w)
    return np.where(w > 0, r, np.nan)


@dataclass
class State:
    alpha: np.ndarray
    kappa: np.ndarray
    sigma2: np.ndarray
    theta: np.ndarray
    s: np.ndarray  # persons x testlets

    def copy(self) -> "State":
        return State(*(np.array(v, copy=True) for v in (self.alpha, self.kappa, self.sigma2, self.theta, self.s)))

    def probabilities(self, design: TestletDesign) -> np.ndarray:
        return ndtr(_linear(self, np.asarray(design.testlet_of)))


def _linear(st: State, t: np.ndarray) -> np.ndarray:
    s_ext = np.hstack([st.s, np.zeros((st.s.shape[0], 1))])
    return st.alpha * (st.theta[:, None] + s_ext[:, t]) - st.kappa


def _truncnorm_latent(mu, y, rng):
    """z ~ N(mu, 1) truncated to z > 0 where y = 1 and z <= 0 where y = 0 (inverse CDF)."""
    sgn = 2.0 * y - 1.0
    mu = np.clip(mu, -30.0, 30.0)
    u = 1.0 - rng.random(mu.shape)  # (0, 1]
    return mu - sgn * ndtri(u * ndtr(sgn * mu))


def default_discrepancy(y: np.ndarray, p: np.ndarray) -> float:
    """Item-proportion residuals plus pairwise log-odds-ratio residuals, all squared and standardized."""
    y = y.astype(float)
    q = 1.0 - p
    item = (y.sum(0) - p.sum(0)) ** 2 / np.maximum((p * q).sum(0), 1e-12)
    o11, o10, o01 = y.T @ y, y.T @ (1 - y), (1 - y).T @ y
    o00 = y.shape[0] - o11 - o10 - o01
    e11, e10, e01, e00 = p.T @ p, p.T @ q, q.T @ p, q.T @ q
    lor_o = np.log((o11 + 0.5) * (o00 + 0.5) / ((o10 + 0.5) * (o01 + 0.5)))
    lor_e = np.log((e11 + 0.5) * (e00 + 0.5) / ((e10 + 0.5) * (e01 + 0.5)))
    var = 1 / (e11 + 0.5) + 1 / (e10 + 0.5) + 1 / (e01 + 0.5) + 1 / (e00 + 0.5)
    iu = np.triu_indices(y.shape[1], 1)
    pair = ((lor_o - lor_e) ** 2 / var)[iu]
    return float(item.sum() + pair.sum())


def _discrepancy_pair(state: State, y, design, rng, discrepancy) -> tuple[float, float]:
    p = state.probabilities(design)
    rep = (rng.random(p.shape) < p).astype(np.int8)
    return discrepancy(y, p), discrepancy(rep, p)


def posterior_predictive_p(
    draws: Sequence[State],
    data,
    design: TestletDesign,
    rng: np.random.Generator | None = None,
    discrepancy: Callable[[np.ndarray, np.ndarray], float] = default_discrepancy,
) -> float:
    """Fraction of posterior states whose replicated discrepancy is at least the observed one."""
    y = as_responses(data)
    rng = rng or np.random.default_rng(0)
    pairs = [_discrepancy_pair(st, y, design, rng, discrepancy) for st in draws]
    if not pairs:
        raise ValueError("no posterior draws")
    return float(np.mean([rep >= obs for obs, rep in pairs]))


class Chain:
    """One Gibbs chain; ``update_items`` / ``update_sigma2`` allow fixing blocks."""

    def __init__(self, y, design, priors: PriorSpec, state: State, rng, update_items=True, update_sigma2=True):
        self.y = y.astype(float)
        self.design = design
        self.t = np.asarray(design.testlet_of)
        self.priors = priors
        self.state = state
        self.rng = rng
        self.update_items = update_items
        self.update_sigma2 = update_sigma2
        n_items = y.shape[1]
        self.member = np.zeros((n_items, design.n_testlets))
        for j, d in enumerate(self.t):
            if d >= 0:
                self.member[j, d] = 1.0
        self.blocks = [design.items_in(d) for d in range(design.n_testlets)]
        self.sigma_accept = 0
        self.sigma_tries = 0

    def step(self) -> None:
        st, rng, y = self.state, self.rng, self.y
        n = y.shape[0]
        a, k = st.alpha, st.kappa
        s_items = st.s @ self.member.T  # persons x items (0 for independent items)

        z = _truncnorm_latent(a * (st.theta[:, None] + s_items) - k, y, rng)

        # general ability
        prec = 1.0 + a @ a
        w = z + k - a * s_items
        st.theta = (w @ a) / prec + rng.standard_normal(n) / np.sqrt(prec)

        if self.design.n_testlets:
            w = z + k - a * st.theta[:, None]
            am = self.member * a[:, None]  # items x testlets
            prec_s = 1.0 / st.sigma2 + (a**2) @ self.member
            st.s = (w @ am) / prec_s + rng.standard_normal(st.s.shape) / np.sqrt(prec_s)
            if self.update_sigma2:
                self._update_sigma2(w)
            s_items = st.s @ self.member.T

        if self.update_items:
            eta = st.theta[:, None] + s_items
            pa, pk = 1.0 / self.priors.loading_var, 1.0 / self.priors.threshold_var
            # regression z = alpha * eta - kappa + e ; coefficients (alpha, -kappa)
            h11 = (eta * eta).sum(0) + pa
            h12 = eta.sum(0)
            h22 = n + pk
            b1 = (eta * z).sum(0)
            b2 = z.sum(0)
            det = h11 * h22 - h12 * h12
            m1 = (h22 * b1 - h12 * b2) / det
            m2 = (h11 * b2 - h12 * b1) / det
            # draw from N(m, H^-1) via the Cholesky factor of H
            l11 = np.sqrt(h11)
            l21 = h12 / l11
            l22 = np.sqrt(h22 - l21 * l21)
            e1, e2 = rng.standard_normal((2, a.size))
            x2 = e2 / l22
            x1 = (e1 - l21 * x2) / l11
            st.alpha = m1 + x1
            st.kappa = -(m2 + x2)

        if st.alpha.mean() < 0:  # reflection: flip general loadings with the latent scores
            st.alpha = -st.alpha
            st.theta = -st.theta
            st.s = -st.s

        if not (np.all(np.isfinite(st.alpha)) and np.all(np.isfinite(st.theta)) and np.all(np.isfinite(st.sigma2))):
            raise ChainDivergence("non-finite state in MCMC chain")

    def _update_sigma2(self, w) -> None:
        st, rng, pr = self.state, self.rng, self.priors
        n = st.s.shape[0]
        # centered step: sigma2 | s ~ IG(shape + n/2, scale + sum(s^2)/2)
        ss = (st.s**2).sum(0)
        shape = pr.sigma2_shape + n / 2.0
        st.sigma2 = (pr.sigma2_scale + ss / 2.0) / rng.gamma(shape, 1.0, ss.size)
        # ancillary step: sigma | u = s / sigma, with s = sigma * u entering the latent regression
        sig = np.sqrt(st.sigma2)
        u = st.s / sig
        # w currently holds z + kappa - alpha * theta
        c = -2.0 * pr.sigma2_shape - 1.0  # induced prior on sigma is sigma^c exp(-scale / sigma^2)
        for d, items in enumerate(self.blocks):
            x = u[:, d : d + 1] * st.alpha[items][None, :]
            prec = float((x * x).sum())
            m = float((x * w[:, items]).sum()) / prec
            sd = 1.0 / np.sqrt(prec)
            # proposal: N(m, sd^2) truncated to (0, inf)
            lo = ndtr(-m / sd)
            prop = m + sd * ndtri(lo + (1.0 - lo) * (1.0 - rng.random()))
            if not prop > 0:
                continue
            cur = sig[d]
            log_r = c * np.log(prop / cur) - pr.sigma2_scale * (1 / prop**2 - 1 / cur**2)
            self.sigma_tries += 1
            if np.log(rng.random()) < log_r:
                self.sigma_accept += 1
                sig[d] = prop
        st.sigma2 = sig**2
        st.s = u * sig


def _initial_state(y, design, rng, start) -> State:
    alpha, kappa, sig = start
    n = y.shape[0]
    alpha = alpha * rng.uniform(0.7, 1.3, alpha.size)
    kappa = kappa + rng.normal(0.0, 0.2, kappa.size)
    sigma2 = rng.uniform(0.05, 1.0, design.n_testlets)
    theta = rng.standard_normal(n)
    s = rng.standard_normal((n, design.n_testlets)) * np.sqrt(sigma2)
    return State(alpha, kappa, sigma2, theta, s)


def _structural(st: State) -> np.ndarray:
    return np.concatenate([st.alpha, st.kappa, st.sigma2])


def param_names(design: TestletDesign) -> list[str]:
    j = design.n_items
    return [f"lambda_raw[{i}]" for i in range(j)] + [f"tau_raw[{i}]" for i in range(j)] + [
        f"sigma2[{d}]" for d in range(design.n_testlets)
    ]


def _chain_rngs(seed, n):
    return [np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(n)]


def fit_mcmc(
    data,
    design: TestletDesign,
    priors: PriorSpec = PriorSpec(),
    chains: ChainSpec = ChainSpec(),
    discrepancy: Callable[[np.ndarray, np.ndarray], float] = default_discrepancy,
) -> tuple[FitResult, PosteriorSummary]:
    """Run ``n_chains`` chains until ``min_iterations`` and max PSRF < threshold.

    Chains are extended in blocks of half the minimum length up to
    ``max_factor * min_iterations``.  The first ``burn_in`` fraction of every
    chain is discarded.  Point estimates are posterior means of the
    unit-residual slopes, intercepts and testlet variances.
    """
    t0 = time.perf_counter()
    y = as_responses(data)
    if y.shape[1] != design.n_items:
        raise DegenerateData(f"data has {y.shape[1]} items, design has {design.n_items}")
    check_both_categories(y)
    start = _start_values(y, design)
    rngs = _chain_rngs(chains.seed, chains.n_chains + 1)
    ppp_rng = rngs[-1]
    runs = [Chain(y, design, priors, _initial_state(y, design, r, start), r) for r in rngs[:-1]]

    n_par = 2 * design.n_items + design.n_testlets
    cap = chains.max_factor * chains.min_iterations
    traces = [np.empty((cap, n_par)) for _ in runs]
    # (iteration, chain, observed D, replicated D)
    ppp_every = max(1, int(chains.min_iterations * (1 - chains.burn_in) * chains.n_chains // max(chains.ppp_draws, 1)))
    ppp_log: list[tuple[int, int, float, float]] = []

    done = 0
    target = chains.min_iterations
    while True:
        for c, ch in enumerate(runs):
            for it in range(done, target):
                ch.step()
                traces[c][it] = _structural(ch.state)
                if (it + 1) % ppp_every == 0 and it >= int(chains.burn_in * chains.min_iterations):
                    obs, rep = _discrepancy_pair(ch.state, y, design, ppp_rng, discrepancy)
                    ppp_log.append((it, c, obs, rep))
        done = target
        first = int(chains.burn_in * done)
        kept = np.stack([tr[first:done:chains.thin] for tr in traces])
        r_hat = psrf_all(kept)
        worst = float(np.nanmax(r_hat)) if np.any(np.isfinite(r_hat)) else np.inf
        if worst < chains.psrf_threshold or done >= cap:
            break
        log.info("max PSRF %.3f after %d iterations; extending", worst, done)
        target = min(cap, done + max(chains.min_iterations // 2, 1))

    converged = worst < chains.psrf_threshold
    flat = kept.reshape(-1, n_par)
    mean, sd = flat.mean(0), flat.std(0, ddof=1)
    j = design.n_items
    window = [(o, r) for it, _, o, r in ppp_log if it >= first]
    ppp = float(np.mean([r >= o for o, r in window])) if window else float("nan")
    tries = sum(ch.sigma_tries for ch in runs)
    summary = PosteriorSummary(
        names=param_names(design), mean=mean, sd=sd, psrf=np.nan_to_num(r_hat, nan=1.0),
        converged=converged, ppp=ppp, n_retained=int(flat.shape[0]), draws=kept,
        extras={"iterations_per_chain": done, "ppp_draws": len(window),
                "sigma_scale_acceptance": sum(ch.sigma_accept for ch in runs) / tries if tries else None},
    )
    fit = from_theta_metric(
        "mcmc", design, mean[:j], mean[j : 2 * j], mean[2 * j :],
        loglik=None, converged=converged, n_iterations=done, wall_time=time.perf_counter() - t0,
        extras={"psrf_max": summary.psrf_max, "ppp": ppp, "n_retained": summary.n_retained, "heywood": False},
    )
    return fit, summary


def sample_fixed_items(data, design, alpha, kappa, sigma2, n_iter, seed=0, burn_in=0.5):
    """Sample abilities only, with item parameters and testlet variances held fixed.

    Returns persons x draws arrays of theta and of the testlet effects.
    """
    y = as_responses(data)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    n = y.shape[0]
    st = State(np.asarray(alpha, float), np.asarray(kappa, float), np.asarray(sigma2, float),
               rng.standard_normal(n), np.zeros((n, design.n_testlets)))
    ch = Chain(y, design, PriorSpec(), st, rng, update_items=False, update_sigma2=False)
    first = int(burn_in * n_iter)
    th, ss = [], []
    for it in range(n_iter):
        ch.step()
        if it >= first:
            th.append(ch.state.theta.copy())
            ss.append(ch.state.s.copy())
    return np.array(th).T, np.moveaxis(np.array(ss), 0, -1)


def with_seed(spec: ChainSpec, seed) -> ChainSpec:
    return replace(spec, seed=seed)
