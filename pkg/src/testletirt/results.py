"""Common fit result container and its JSON form."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateLoading, HeywoodError
from .model import FactorParams, ItemIrtParams, TestletDesign, factor_to_irt, rescale_unstandardized


@dataclass(frozen=True)
class FitResult:
    estimator: str
    design: TestletDesign
    factor_params: FactorParams
    irt: ItemIrtParams
    loglik: float | None
    converged: bool
    n_iterations: int
    wall_time: float
    extras: dict = field(default_factory=dict)

    @property
    def sigma2(self) -> np.ndarray:
        return self.factor_params.sigma2

    @property
    def heywood(self) -> bool:
        return bool(self.extras.get("heywood", False))

    def to_dict(self) -> dict:
        fp = self.factor_params
        d = {
            "estimator": self.estimator,
            "lambda": _floats(fp.loading),
            "tau": _floats(fp.threshold),
            "sigma2": _floats(fp.sigma2),
            "a": _floats(self.irt.a),
            "b": _floats(self.irt.b),
            "loglik": None if self.loglik is None else float(self.loglik),
            "converged": bool(self.converged),
            "iterations": int(self.n_iterations),
            "wall_time_s": float(self.wall_time),
            "design": self.design.to_dict(),
        }
        for k, v in self.extras.items():
            d[k] = _floats(v) if isinstance(v, np.ndarray) else v
        return d

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _floats(x):
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(x, dtype=float)]


def irt_from_standardized(fp: FactorParams, design: TestletDesign) -> ItemIrtParams:
    """Per-item conversion that leaves NaN (instead of raising) for unconvertible items."""
    n = fp.loading.size
    a = np.full(n, np.nan)
    b = np.full(n, np.nan)
    for j in range(n):
        try:
            ip = factor_to_irt(fp, design, j)
        except (HeywoodError, DegenerateLoading):
            continue
        a[j], b[j] = ip.a[0], ip.b[0]
    return ItemIrtParams(a, b)


def from_theta_metric(estimator, design, alpha, kappa, sigma2, **kw) -> FitResult:
    """Build a result from unit-residual slopes/intercepts ``P = Phi(alpha (theta + s) - kappa)``."""
    s2_items = design.item_sigma2(sigma2)
    lam, tau = rescale_unstandardized(alpha, kappa, s2_items)
    fp = FactorParams(lam, tau, sigma2)
    extras = dict(kw.pop("extras", {}))
    extras.setdefault("lambda_raw", np.asarray(alpha, dtype=float))
    extras.setdefault("tau_raw", np.asarray(kappa, dtype=float))
    return FitResult(estimator, design, fp, irt_from_standardized(fp, design), extras=extras, **kw)
