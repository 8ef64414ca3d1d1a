"""Seeded simulation of item parameters, abilities and responses.

Random streams: every seed is turned into a ``numpy.random.SeedSequence``
and each quantity draws from its own spawned child stream, consumed by a
PCG64 generator:

* child 0 -> abilities (theta first, then the testlet effects, column by column)
* child 1 -> responses (one uniform per cell, row-major)
* child 2 -> sampled item parameters (a then b)

PCG64 output and the SeedSequence hashing are platform independent, so a
given seed reproduces the same data everywhere.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidDesign
from .model import ItemIrtParams, PersonAbilities, TestletDesign, prob_correct

# (a, b) for the 30 items, in item order
TABLE1 = (
    (1.17, -1.55), (0.61, -1.29), (0.67, 1.44), (1.16, 1.86), (1.06, -0.90),
    (0.69, 0.05), (0.81, -0.88), (0.95, -0.62), (0.51, 1.89), (0.88, 0.09),
    (0.78, 0.20), (0.96, -0.19), (1.21, 1.89), (0.90, -0.50), (0.94, 0.27),
    (0.76, 0.35), (0.98, -1.24), (0.70, 1.30), (0.90, 0.83), (0.58, 0.06),
    (0.66, -0.41), (0.84, 1.09), (0.81, 0.01), (0.77, -1.06), (0.50, 0.89),
    (0.97, 0.62), (0.62, -0.17), (0.70, -0.81), (0.82, -0.12), (0.77, -0.43),
)

A_MIN = 0.05


def table1_fixture() -> ItemIrtParams:
    a, b = np.array(TABLE1).T
    return ItemIrtParams(a, b)


def default_design() -> TestletDesign:
    """Six testlets of five consecutive items."""
    return TestletDesign.uniform(6, 5)


def _seed_seq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def stream(seed, child: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(_seed_seq(seed).spawn(child + 1)[child]))


@dataclass(frozen=True)
class GenConfig:
    n_persons: int
    design: TestletDesign
    sigma2: tuple[float, ...]
    items: ItemIrtParams | None = None
    seed: int | np.random.SeedSequence = 0
    a_mean: float = 1.0
    a_sd: float = 0.2
    b_mean: float = 0.0
    b_sd: float = 1.0

    def __post_init__(self):
        if self.n_persons <= 0:
            raise InvalidDesign(f"n_persons must be positive, got {self.n_persons}")
        s2 = np.broadcast_to(np.asarray(self.sigma2, dtype=float), (self.design.n_testlets,))
        if np.any(s2 < 0) or not np.all(np.isfinite(s2)):
            raise InvalidDesign(f"sigma2 must be finite and nonnegative, got {s2.tolist()}")
        object.__setattr__(self, "sigma2", tuple(float(v) for v in s2))
        if self.items is not None and len(self.items) != self.design.n_items:
            raise InvalidDesign(f"{len(self.items)} item parameters for {self.design.n_items} items")


def sample_items(cfg: GenConfig) -> ItemIrtParams:
    """Draw a ~ N(a_mean, a_sd) truncated to a > 0.05 and b ~ N(b_mean, b_sd)."""
    rng = stream(cfg.seed, 2)
    n = cfg.design.n_items
    a = rng.normal(cfg.a_mean, cfg.a_sd, n)
    while np.any(low := a <= A_MIN):
        a[low] = rng.normal(cfg.a_mean, cfg.a_sd, low.sum())
    b = rng.normal(cfg.b_mean, cfg.b_sd, n)
    return ItemIrtParams(a, b)


def resolve_items(cfg: GenConfig) -> ItemIrtParams:
    return cfg.items if cfg.items is not None else sample_items(cfg)


def generate_persons(cfg: GenConfig, theta: np.ndarray | None = None) -> PersonAbilities:
    """theta ~ N(0, 1), gamma_d ~ N(0, sigma2_d); pass ``theta`` to reuse a fixed ability set."""
    rng = stream(cfg.seed, 0)
    n = cfg.n_persons
    th = rng.standard_normal(n)
    if theta is not None:
        th = np.asarray(theta, dtype=float)
        if th.shape != (n,):
            raise InvalidDesign(f"theta has shape {th.shape}, expected ({n},)")
    sd = np.sqrt(np.asarray(cfg.sigma2))
    gamma = rng.standard_normal((cfg.design.n_testlets, n)).T * sd
    return PersonAbilities(th, gamma)


def generate_responses(cfg: GenConfig, persons: PersonAbilities, items: ItemIrtParams) -> np.ndarray:
    design = cfg.design
    n = persons.theta.size
    if len(items) != design.n_items or persons.gamma.shape != (n, design.n_testlets):
        raise InvalidDesign(
            f"dimension mismatch: {len(items)} items, gamma {persons.gamma.shape}, "
            f"design has {design.n_items} items and {design.n_testlets} testlets"
        )
    g = np.hstack([persons.gamma, np.zeros((n, 1))])[:, np.asarray(design.testlet_of)]
    p = prob_correct(items.a, items.b, persons.theta[:, None], g)
    u = stream(cfg.seed, 1).random(p.shape)
    return (u < p).astype(np.int8)


def simulate(cfg: GenConfig, theta: np.ndarray | None = None):
    """Convenience wrapper returning ``(items, persons, responses)``."""
    items = resolve_items(cfg)
    persons = generate_persons(cfg, theta)
    return items, persons, generate_responses(cfg, persons, items)


def fixed_theta(n_persons: int, seed) -> np.ndarray:
    """Ability set shared by every replication of one sample size."""
    return stream(seed, 0).standard_normal(n_persons)


def write_responses(path, y: np.ndarray) -> None:
    np.savetxt(path, y, fmt="%d", delimiter=",")


def read_responses(path) -> np.ndarray:
    y = np.loadtxt(path, delimiter=",", dtype=float, ndmin=2)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError(f"{path}: responses must be 0 or 1")
    return y.astype(np.int8)


def truth_document(items: ItemIrtParams, sigma2, design: TestletDesign) -> dict:
    return {
        "items": [{"a": float(a), "b": float(b)} for a, b in zip(items.a, items.b)],
        "sigma2": [float(s) for s in sigma2],
        "design": design.to_dict(),
    }


def write_truth(path, items: ItemIrtParams, sigma2, design: TestletDesign) -> None:
    Path(path).write_text(json.dumps(truth_document(items, sigma2, design), indent=2) + "\n")
