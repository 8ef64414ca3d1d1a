"""Monte Carlo parameter-recovery studies.

For each (sample size, testlet variance) condition and replication a data
set is simulated, every requested estimator is fitted, and Bias / SE / RMSE
are computed per item (and per testlet variance) over the replications
whose fit converged.  Replications are independent jobs; results are merged
by (condition, replication) key so the report does not depend on the order
in which jobs finish.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datagen import GenConfig, default_design, fixed_theta, generate_persons, generate_responses, table1_fixture
from .errors import TestletError
from .liminfo import fit_liminfo
from .mcmc import ChainSpec, PriorSpec, fit_mcmc
from .mmle import EmSettings, QuadratureSpec, fit_mmle
from .model import ItemIrtParams, TestletDesign

log = logging.getLogger(__name__)

ESTIMATORS = ("mmle", "mcmc", "dwls")
PARAMETERS = ("a", "b", "sigma2")
DEFAULT_GRID = tuple((ss, tv) for ss in (500, 1000, 2000) for tv in (0.25, 0.5, 1.0))

CONVERGED, HEYWOOD, NONCONVERGED = "converged", "heywood", "nonconverged"


def bias(estimates, truth) -> float:
    x = np.asarray(estimates, dtype=float)
    if x.size == 0:
        raise ValueError("bias of an empty set of estimates")
    return float(x.mean() - truth)


def se(estimates) -> float:
    """Monte Carlo standard error with divisor R (not R - 1)."""
    x = np.asarray(estimates, dtype=float)
    if x.size < 2:
        raise ValueError("SE needs at least two estimates")
    return float(np.sqrt(((x - x.mean()) ** 2).mean()))


def rmse(estimates, truth) -> float:
    x = np.asarray(estimates, dtype=float)
    if x.size == 0:
        raise ValueError("RMSE of an empty set of estimates")
    return float(np.sqrt(((x - truth) ** 2).mean()))


@dataclass(frozen=True)
class Condition:
    sample_size: int
    testlet_variance: float

    @property
    def label(self) -> str:
        return f"ss{self.sample_size}_tv{self.testlet_variance:g}"


@dataclass(frozen=True)
class StudyConfig:
    grid: tuple[tuple[int, float], ...] = DEFAULT_GRID
    n_replications: int = 20
    estimators: tuple[str, ...] = ESTIMATORS
    seed: int = 20170
    items: ItemIrtParams = field(default_factory=table1_fixture)
    design: TestletDesign = field(default_factory=default_design)
    persons_mode: str = "fixed"
    chains: ChainSpec = ChainSpec()
    priors: PriorSpec = PriorSpec()
    quad: QuadratureSpec = QuadratureSpec()
    em: EmSettings = EmSettings()
    mcmc_grid: tuple[tuple[int, float], ...] | None = None
    workers: int | None = None

    def __post_init__(self):
        if self.n_replications < 2:
            raise ValueError("n_replications must be at least 2")
        if not self.grid:
            raise ValueError("the condition grid is empty")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad:
            raise ValueError(f"unknown estimators {sorted(bad)}")
        if self.persons_mode not in ("fixed", "fresh"):
            raise ValueError("persons_mode must be 'fixed' or 'fresh'")
        for ss, tv in self.grid:
            if ss <= 0 or tv < 0:
                raise ValueError(f"invalid condition ({ss}, {tv})")
        object.__setattr__(self, "grid", tuple((int(s), float(t)) for s, t in self.grid))
        if self.mcmc_grid is not None:
            object.__setattr__(self, "mcmc_grid", tuple((int(s), float(t)) for s, t in self.mcmc_grid))

    @property
    def conditions(self) -> list[Condition]:
        return [Condition(ss, tv) for ss, tv in self.grid]

    def estimators_for(self, cond: Condition) -> tuple[str, ...]:
        out = tuple(e for e in ESTIMATORS if e in self.estimators)
        if self.mcmc_grid is not None and (cond.sample_size, cond.testlet_variance) not in self.mcmc_grid:
            out = tuple(e for e in out if e != "mcmc")
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        kw = {}
        if "grid" in d:
            kw["grid"] = tuple(tuple(c) for c in d["grid"])
        for key in ("n_replications", "seed", "persons_mode", "workers"):
            if key in d:
                kw[key] = d[key]
        if "estimators" in d:
            kw["estimators"] = tuple(d["estimators"])
        if d.get("mcmc_grid") is not None:
            kw["mcmc_grid"] = tuple(tuple(c) for c in d["mcmc_grid"])
        if "design" in d:
            kw["design"] = TestletDesign.from_dict(d["design"])
        if "items" in d:
            kw["items"] = ItemIrtParams([i["a"] for i in d["items"]], [i["b"] for i in d["items"]])
        if "mcmc" in d:
            kw["chains"] = ChainSpec(**d["mcmc"])
        if "quadrature_nodes" in d:
            kw["quad"] = QuadratureSpec(int(d["quadrature_nodes"]))
        if "em" in d:
            kw["em"] = EmSettings(**d["em"])
        unknown = set(d) - {"grid", "n_replications", "seed", "persons_mode", "workers", "estimators",
                            "mcmc_grid", "design", "items", "mcmc", "quadrature_nodes", "em"}
        if unknown:
            raise ValueError(f"unknown study config keys {sorted(unknown)}")
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "grid": [list(c) for c in self.grid],
            "n_replications": self.n_replications,
            "estimators": list(self.estimators),
            "seed": self.seed,
            "persons_mode": self.persons_mode,
            "mcmc_grid": None if self.mcmc_grid is None else [list(c) for c in self.mcmc_grid],
            "design": self.design.to_dict(),
            "items": [{"a": float(a), "b": float(b)} for a, b in zip(self.items.a, self.items.b)],
            "mcmc": {k: getattr(self.chains, k) for k in ("n_chains", "min_iterations", "burn_in", "thin",
                                                          "psrf_threshold", "max_factor", "ppp_draws")},
            "quadrature_nodes": self.quad.n_nodes,
            "em": {k: getattr(self.em, k) for k in ("max_iterations", "loglik_tol", "param_tol",
                                                   "newton_iterations", "accelerate")},
        }


@dataclass
class FitRecord:
    condition: str
    replication: int
    estimator: str
    status: str
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    sigma2: np.ndarray | None = None
    wall_time: float = 0.0
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def arr(x):
            return None if x is None else [None if not np.isfinite(v) else float(v) for v in x]

        return {
            "condition": self.condition, "replication": self.replication, "estimator": self.estimator,
            "status": self.status, "converged": self.status == CONVERGED, "heywood": self.status == HEYWOOD,
            "a": arr(self.a), "b": arr(self.b), "sigma2": arr(self.sigma2),
            "wall_time_s": self.wall_time, **self.detail,
        }


@dataclass(frozen=True)
class Cell:
    condition: str
    estimator: str
    parameter: str
    item: int
    n: int
    bias: float
    se: float
    rmse: float


@dataclass
class RecoveryReport:
    cells: list[Cell]
    convergence: list[dict]
    records: list[FitRecord]
    config: StudyConfig | None = None
    wall_time: float = 0.0

    def summary(self) -> list[dict]:
        """Mean and SD across items (or testlets) of Bias, SE and RMSE."""
        groups: dict[tuple, list[Cell]] = {}
        for c in self.cells:
            groups.setdefault((c.condition, c.estimator, c.parameter), []).append(c)
        out = []
        for (cond, est, par), cs in groups.items():
            row = {"condition": cond, "estimator": est, "parameter": par, "n_cells": len(cs)}
            for m in ("bias", "se", "rmse"):
                v = np.array([getattr(c, m) for c in cs])
                row[f"{m}_mean"] = float(v.mean())
                row[f"{m}_sd"] = float(v.std(ddof=1)) if v.size > 1 else 0.0
            out.append(row)
        return out

    def lookup(self, condition: str, estimator: str, parameter: str) -> list[Cell]:
        return [c for c in self.cells if (c.condition, c.estimator, c.parameter) == (condition, estimator, parameter)]

    def convergence_row(self, condition: str, estimator: str) -> dict | None:
        for r in self.convergence:
            if r["condition"] == condition and r["estimator"] == estimator:
                return r
        return None

    def write(self, out_dir, persist_runs: bool = False) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["condition", "estimator", "parameter", "item", "n", "bias", "se", "rmse"])
            for c in self.cells:
                w.writerow([c.condition, c.estimator, c.parameter, c.item, c.n,
                            repr(c.bias), repr(c.se), repr(c.rmse)])
        with open(out / "convergence.csv", "w", newline="") as fh:
            cols = ["condition", "estimator", "n_replications", "converged", "heywood", "nonconverged", "failed"]
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.convergence:
                w.writerow([r[k] if k != "failed" else " ".join(map(str, r[k])) for k in cols])
        doc = {
            "summary": self.summary(),
            "convergence": self.convergence,
            "config": None if self.config is None else self.config.to_dict(),
        }
        (out / "summary.json").write_text(json.dumps(doc, indent=2) + "\n")
        if persist_runs:
            for rec in self.records:
                p = out / "runs" / rec.condition / f"{rec.replication:03d}"
                p.mkdir(parents=True, exist_ok=True)
                (p / f"{rec.estimator}.json").write_text(json.dumps(rec.to_dict(), indent=2) + "\n")


def _tv_key(tv: float) -> int:
    return int(round(tv * 1_000_000))


def replication_seed(cfg: StudyConfig, cond: Condition, rep: int, stream: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([cfg.seed, 1, cond.sample_size, _tv_key(cond.testlet_variance), rep, stream])


def replication_data(cfg: StudyConfig, cond: Condition, rep: int) -> np.ndarray:
    """The response matrix for one replication (deterministic in the base seed)."""
    gen = GenConfig(cond.sample_size, cfg.design, (cond.testlet_variance,) * cfg.design.n_testlets,
                    cfg.items, seed=replication_seed(cfg, cond, rep))
    theta = None
    if cfg.persons_mode == "fixed":
        theta = fixed_theta(cond.sample_size, np.random.SeedSequence([cfg.seed, 0, cond.sample_size]))
    persons = generate_persons(gen, theta)
    return generate_responses(gen, persons, cfg.items)


def fit_one(estimator: str, y, design: TestletDesign, cfg: StudyConfig, seed: int):
    """Fit one estimator; returns (status, FitResult or None, detail)."""
    if estimator == "mmle":
        fit = fit_mmle(y, design, cfg.quad, cfg.em)
        status = CONVERGED if fit.converged else NONCONVERGED
        return status, fit, {"iterations": fit.n_iterations, "loglik": fit.loglik}
    if estimator == "dwls":
        fit = fit_liminfo(y, design)
        if fit.heywood:
            status = HEYWOOD
        else:
            status = CONVERGED if fit.converged else NONCONVERGED
        return status, fit, {"min_communality_residual": fit.extras["min_communality_residual"],
                             "sigma2_unconstrained": [float(v) for v in fit.extras["sigma2_unconstrained"]]}
    if estimator == "mcmc":
        fit, summ = fit_mcmc(y, design, cfg.priors, replace(cfg.chains, seed=seed))
        status = CONVERGED if fit.converged else NONCONVERGED
        return status, fit, {"psrf_max": summ.psrf_max, "ppp": summ.ppp, "iterations": fit.n_iterations}
    raise ValueError(f"unknown estimator {estimator!r}")


def run_replication(cfg: StudyConfig, cond: Condition, rep: int) -> list[FitRecord]:
    y = replication_data(cfg, cond, rep)
    out = []
    for k, est in enumerate(cfg.estimators_for(cond)):
        seed = int(replication_seed(cfg, cond, rep, stream=1 + k).generate_state(1)[0])
        t0 = time.perf_counter()
        try:
            status, fit, detail = fit_one(est, y, cfg.design, cfg, seed)
        except (TestletError, ArithmeticError, ValueError) as exc:
            log.warning("%s rep %d %s failed: %s", cond.label, rep, est, exc)
            out.append(FitRecord(cond.label, rep, est, NONCONVERGED, wall_time=time.perf_counter() - t0,
                                 detail={"error": f"{type(exc).__name__}: {exc}"}))
            continue
        out.append(FitRecord(cond.label, rep, est, status, fit.irt.a.copy(), fit.irt.b.copy(),
                             fit.sigma2.copy(), time.perf_counter() - t0, detail))
    return out


def _job(args):
    cfg, cond, rep = args
    return (cond.label, rep), run_replication(cfg, cond, rep)


def worker_count(cfg: StudyConfig) -> int:
    if cfg.workers:
        return max(1, int(cfg.workers))
    env = os.environ.get("TESTLET_THREADS")
    n = os.cpu_count() or 1
    return max(1, min(n, int(env))) if env else n


def aggregate(cfg: StudyConfig, records: list[FitRecord]) -> tuple[list[Cell], list[dict]]:
    truth = {"a": cfg.items.a, "b": cfg.items.b}
    cells, conv = [], []
    for cond in cfg.conditions:
        for est in cfg.estimators_for(cond):
            recs = sorted((r for r in records if r.condition == cond.label and r.estimator == est),
                          key=lambda r: r.replication)
            counts = {s: sum(r.status == s for r in recs) for s in (CONVERGED, HEYWOOD, NONCONVERGED)}
            conv.append({"condition": cond.label, "estimator": est, "n_replications": len(recs), **counts,
                         "failed": [r.replication for r in recs if r.status != CONVERGED]})
            ok = [r for r in recs if r.status == CONVERGED]
            if len(ok) < 2:
                continue
            true_s2 = np.full(cfg.design.n_testlets, cond.testlet_variance)
            for par, true in (("a", truth["a"]), ("b", truth["b"]), ("sigma2", true_s2)):
                est_mat = np.array([getattr(r, par) for r in ok])
                for i, t in enumerate(true):
                    x = est_mat[:, i]
                    x = x[np.isfinite(x)]
                    if x.size < 2:
                        continue
                    cells.append(Cell(cond.label, est, par, i, int(x.size), bias(x, t), se(x), rmse(x, t)))
    return cells, conv


def run_study(cfg: StudyConfig, progress=None) -> RecoveryReport:
    """Run every condition x replication job and aggregate the converged fits."""
    t0 = time.perf_counter()
    jobs = [(cfg, cond, rep) for cond in cfg.conditions for rep in range(cfg.n_replications)
            if cfg.estimators_for(cond)]
    results: dict[tuple, list[FitRecord]] = {}
    n_workers = worker_count(cfg)
    if n_workers == 1 or len(jobs) <= 1:
        for job in jobs:
            key, recs = _job(job)
            results[key] = recs
            if progress:
                progress(key, recs)
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            for key, recs in pool.map(_job, jobs):
                results[key] = recs
                if progress:
                    progress(key, recs)
    records = [r for key in sorted(results) for r in results[key]]
    cells, conv = aggregate(cfg, records)
    return RecoveryReport(cells, conv, records, cfg, time.perf_counter() - t0)


def scan_runs(runs_dir) -> list[dict]:
    """Read persisted per-replication fit files from ``runs/<condition>/<rep>/<estimator>.json``."""
    root = Path(runs_dir)
    out = []
    for p in sorted(root.glob("*/*/*.json")):
        d = json.loads(p.read_text())
        d.setdefault("condition", p.parent.parent.name)
        d.setdefault("replication", p.parent.name)
        d.setdefault("estimator", p.stem)
        d["path"] = str(p)
        out.append(d)
    return out
