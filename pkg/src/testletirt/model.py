"""2PL testlet model: domain types, response function and metric conversions.

Three parameter metrics appear throughout the package:

* IRT (logistic) metric: ``P = 1 / (1 + exp(-a (theta - b - gamma_d)))``.
* Standardized factor metric: latent response ``y* = lam (theta + s_d) + e``
  with ``Var(y*) = 1`` and ``y = 1`` iff ``y* > tau``.  The testlet factor
  shares the general loading and has variance ``sigma2_d``.
* Conditional (theta) metric: same model with unit residual variance, i.e.
  ``P = Phi(lam_raw (theta + s_d) - tau_raw)``.

The difficulty is ``b = tau / lam`` (so ``P`` increases with the general
factor when ``lam > 0``) and ``a = 1.702 lam / sqrt(1 - lam^2 (1 + sigma2))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import DegenerateData, DegenerateLoading, HeywoodError, InvalidDesign

D_SCALE = 1.702
LOADING_TOL = 1e-8
INDEPENDENT = -1


@dataclass(frozen=True)
class TestletDesign:
    """Assignment of items to testlets; ``-1`` marks an independent item."""

    testlet_of: tuple[int, ...]
    n_testlets: int = field(init=False)

    def __post_init__(self):
        t = tuple(int(d) for d in self.testlet_of)
        object.__setattr__(self, "testlet_of", t)
        used = sorted({d for d in t if d != INDEPENDENT})
        if any(d < INDEPENDENT for d in t):
            raise InvalidDesign(f"invalid testlet index in {t}")
        if used != list(range(len(used))):
            raise InvalidDesign(f"testlet indices must be contiguous from 0, got {used}")
        for d in used:
            if t.count(d) < 2:
                raise InvalidDesign(f"testlet {d} has a single item; its variance is unidentified")
        object.__setattr__(self, "n_testlets", len(used))

    @property
    def n_items(self) -> int:
        return len(self.testlet_of)

    @classmethod
    def from_testlets(cls, n_items: int, testlets: Sequence[Sequence[int]]) -> "TestletDesign":
        of = [INDEPENDENT] * n_items
        for d, items in enumerate(testlets):
            for j in items:
                if not 0 <= j < n_items:
                    raise InvalidDesign(f"item index {j} out of range for {n_items} items")
                if of[j] != INDEPENDENT:
                    raise InvalidDesign(f"item {j} listed in more than one testlet")
                of[j] = d
        return cls(tuple(of))

    @classmethod
    def uniform(cls, n_testlets: int, size: int, n_independent: int = 0) -> "TestletDesign":
        """Consecutive blocks of ``size`` items, optionally followed by independent items."""
        of = [d for d in range(n_testlets) for _ in range(size)]
        return cls(tuple(of + [INDEPENDENT] * n_independent))

    @classmethod
    def unidimensional(cls, n_items: int) -> "TestletDesign":
        return cls((INDEPENDENT,) * n_items)

    def items_in(self, d: int) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.testlet_of) == d)

    @property
    def independent_items(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.testlet_of) == INDEPENDENT)

    def testlets(self) -> list[list[int]]:
        return [self.items_in(d).tolist() for d in range(self.n_testlets)]

    def item_sigma2(self, sigma2) -> np.ndarray:
        """Per-item testlet variance (zero for independent items)."""
        s = np.asarray(sigma2, dtype=float).reshape(-1)
        if s.size != self.n_testlets:
            raise InvalidDesign(f"expected {self.n_testlets} testlet variances, got {s.size}")
        ext = np.append(s, 0.0)
        return ext[np.asarray(self.testlet_of)]

    def same_testlet(self) -> np.ndarray:
        t = np.asarray(self.testlet_of)
        return (t[:, None] == t[None, :]) & (t[:, None] != INDEPENDENT)

    def to_dict(self) -> dict:
        return {"n_items": self.n_items, "testlets": self.testlets()}

    @classmethod
    def from_dict(cls, d: dict) -> "TestletDesign":
        return cls.from_testlets(int(d["n_items"]), d.get("testlets", []))

    def permuted(self, perm: Sequence[int]) -> "TestletDesign":
        """Design for the item order ``perm`` (new item i is old item perm[i])."""
        return TestletDesign(tuple(self.testlet_of[p] for p in perm))


@dataclass(frozen=True)
class ItemIrtParams:
    """Discriminations and difficulties in the logistic IRT metric."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if a.shape != b.shape:
            raise ValueError("a and b must have the same length")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    def __len__(self):
        return self.a.size

    def __getitem__(self, j):
        return ItemIrtParams(self.a[j], self.b[j])

    @property
    def flagged(self) -> np.ndarray:
        """Items whose discrimination is not a finite positive number."""
        return ~(np.isfinite(self.a) & (self.a > 0))


@dataclass(frozen=True)
class FactorParams:
    """Standardized loadings and thresholds plus per-testlet factor variances."""

    loading: np.ndarray
    threshold: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        for name in ("loading", "threshold", "sigma2"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))

    def communality(self, design: TestletDesign) -> np.ndarray:
        return self.loading**2 * (1.0 + design.item_sigma2(self.sigma2))

    def heywood_items(self, design: TestletDesign) -> np.ndarray:
        return np.flatnonzero(~(self.communality(design) < 1.0))


@dataclass(frozen=True)
class PersonAbilities:
    theta: np.ndarray
    gamma: np.ndarray  # persons x testlets


def as_responses(data) -> np.ndarray:
    """Validate a persons x items binary matrix and return it as int8."""
    y = np.asarray(data)
    if y.ndim != 2 or y.size == 0:
        raise DegenerateData(f"responses must be a non-empty 2-D matrix, got shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise DegenerateData("responses must be 0/1 with no missing values")
    return y.astype(np.int8, copy=False)


def check_both_categories(y: np.ndarray) -> None:
    p = y.mean(axis=0)
    bad = np.flatnonzero((p == 0) | (p == 1))
    if bad.size:
        raise DegenerateData(f"items {bad.tolist()} have a single observed category")


def prob_correct(a, b, theta, gamma=0.0):
    """Probability of a correct response under the 2PL testlet model."""
    out = expit(np.asarray(a, dtype=float) * (np.asarray(theta, dtype=float) - b - gamma))
    return out if out.ndim else float(out)


def factor_to_irt(fp: FactorParams, design: TestletDesign, item: int | None = None) -> ItemIrtParams:
    """Convert standardized (lam, tau) to logistic (a, b).

    Raises HeywoodError when ``lam^2 (1 + sigma2_d) >= 1`` and
    DegenerateLoading when ``|lam|`` is below 1e-8.
    """
    lam, tau = fp.loading, fp.threshold
    s2 = design.item_sigma2(fp.sigma2)
    idx = np.arange(lam.size) if item is None else np.atleast_1d(item)
    lam, tau, s2 = lam[idx], tau[idx], s2[idx]
    resid = 1.0 - lam**2 * (1.0 + s2)
    bad = idx[~(resid > 0)]
    if bad.size:
        raise HeywoodError(f"communality >= 1 for items {bad.tolist()}", bad)
    tiny = idx[np.abs(lam) < LOADING_TOL]
    if tiny.size:
        raise DegenerateLoading(f"loading is ~0 for items {tiny.tolist()}; difficulty undefined")
    a = D_SCALE * lam / np.sqrt(resid)
    b = tau / lam
    return ItemIrtParams(a, b)


def irt_to_factor(a, b, sigma2_d) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`factor_to_irt` given each item's testlet variance."""
    c = np.asarray(a, dtype=float) / D_SCALE
    s2 = np.asarray(sigma2_d, dtype=float)
    lam = c / np.sqrt(1.0 + c**2 * (1.0 + s2))
    return lam, np.asarray(b, dtype=float) * lam


def rescale_unstandardized(lambda_raw, tau_raw, sigma2_d) -> tuple[np.ndarray, np.ndarray]:
    """Map unit-residual (theta-metric) estimates onto the standardized metric.

    ``R^2 = c / (1 + c)`` with ``c = lam_raw^2 (1 + sigma2)``; both parameters
    are multiplied by ``sqrt(1 - R^2)``.
    """
    lam = np.asarray(lambda_raw, dtype=float)
    c = lam**2 * (1.0 + np.asarray(sigma2_d, dtype=float))
    f = np.sqrt(1.0 - c / (1.0 + c))
    return lam * f, np.asarray(tau_raw, dtype=float) * f


def standardize_to_theta_metric(lam, tau, sigma2_d) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`rescale_unstandardized`; requires communality < 1."""
    lam = np.asarray(lam, dtype=float)
    resid = 1.0 - lam**2 * (1.0 + np.asarray(sigma2_d, dtype=float))
    if np.any(~(resid > 0)):
        raise HeywoodError("communality >= 1", np.flatnonzero(~(resid > 0)))
    r = np.sqrt(resid)
    return lam / r, np.asarray(tau, dtype=float) / r


def implied_tetrachorics(fp: FactorParams, design: TestletDesign) -> np.ndarray:
    """Model-implied latent correlations ``lam_j lam_k (1 + sigma2_d [same testlet])``."""
    lam = fp.loading
    s2 = design.item_sigma2(fp.sigma2)
    same = design.same_testlet()
    rho = np.outer(lam, lam) * (1.0 + np.where(same, s2[:, None], 0.0))
    np.fill_diagonal(rho, 1.0)
    return rho
