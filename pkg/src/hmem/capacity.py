"""Monte Carlo capacity curves for tensor-product superposition memories,
plus the least-squares optimal-memory property check.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

DEFAULT_GRID = (1, 2, 5, 10, 20, 50, 100, 200)


@dataclass
class CapacityConfig:
    n_entities: int = 100
    d_e: int = 100
    n_relations: int = 20
    d_r: int = 20
    n_bindings_grid: tuple[int, ...] = DEFAULT_GRID
    trials: int = 1000
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_entities", "d_e", "n_relations", "d_r", "trials"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not self.n_bindings_grid or min(self.n_bindings_grid) < 1:
            raise ConfigError("n_bindings_grid needs entries >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "CapacityConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown capacity config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "n_bindings_grid" in kwargs:
            kwargs["n_bindings_grid"] = tuple(kwargs["n_bindings_grid"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class CapacityPoint:
    n_bindings: int
    hits_at_1: float
    trials: int


def _run_trial(cfg: CapacityConfig, point_idx: int, n: int, trial: int) -> bool:
    # per-trial stream keyed on (seed, grid point, trial): parallel and
    # serial execution draw identical numbers
    rng = np.random.default_rng([cfg.seed, point_idx, trial])
    entities = rng.normal(0.0, 1.0 / np.sqrt(cfg.d_e), size=(cfg.n_entities, cfg.d_e))
    relations = rng.normal(0.0, 1.0, size=(cfg.n_relations, cfg.d_r))
    relations /= np.linalg.norm(relations, axis=1, keepdims=True)
    rel_idx = rng.integers(0, cfg.n_relations, size=n)
    ent_idx = rng.integers(0, cfg.n_entities, size=n)
    memory = relations[rel_idx].T @ entities[ent_idx]
    probe_pos = int(rng.integers(0, n))
    retrieved = relations[rel_idx[probe_pos]] @ memory
    dists = ((entities - retrieved) ** 2).sum(axis=1)
    # argmin takes the first (lowest-id) entity on exact ties
    return int(np.argmin(dists)) == int(ent_idx[probe_pos])


def simulate_tpr_capacity(cfg: CapacityConfig) -> list[CapacityPoint]:
    """Hits@1 of probing an n-binding superposition, per grid point.

    Each trial draws fresh entity/relation pools (variance 1/d, relations
    normalized), sums n randomly paired bindings, probes with the relation
    of one stored binding, and checks whether the nearest pool entity is
    that binding's partner.
    """
    cfg.validate()
    points = []
    for point_idx, n in enumerate(cfg.n_bindings_grid):
        hits = sum(
            _run_trial(cfg, point_idx, n, trial) for trial in range(cfg.trials)
        )
        points.append(CapacityPoint(n, hits / cfg.trials, cfg.trials))
    return points


def write_capacity_csv(points: list[CapacityPoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["n_bindings", "hits_at_1", "trials"])
        for p in points:
            writer.writerow([p.n_bindings, p.hits_at_1, p.trials])


# ---------------------------------------------------------------------------
# Optimal-memory property


@dataclass
class OptimalMemoryReport:
    n_pairs: int
    d_e: int
    d_r: int
    scale: float
    expected_scale: float
    max_abs_error: float
    passed: bool
    tolerance: float = 1e-8


def optimal_memory_check(
    n_pairs: int, d_e: int, d_r: int, seed: int, tolerance: float = 1e-8
) -> OptimalMemoryReport:
    """Check that the retrieval-loss minimizer is the weighted superposition.

    Builds the loss sum_i p_i ||e_i - M^T r_i||^2 over uniformly weighted
    pairs with orthonormal relation vectors, solves the normal equations
    directly, and compares the minimizer against the probability-weighted
    sum of outer products up to a single scale factor (n_pairs when p is
    uniform).
    """
    if n_pairs < 1:
        raise ConfigError("need at least one pair")
    if n_pairs > d_r:
        raise ConfigError(
            f"cannot draw {n_pairs} orthonormal relations in {d_r} dimensions"
        )
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(d_r, n_pairs))
    q, r = np.linalg.qr(raw)
    if np.abs(np.diag(r)).min() < 1e-10:
        raise ConfigError("rank-deficient relation set")
    relations = q.T  # rows orthonormal
    entities = rng.normal(size=(n_pairs, d_e))
    p = np.full(n_pairs, 1.0 / n_pairs)

    # normal equations of the quadratic loss: (sum_i p_i r_i r_i^T) M = sum_i p_i r_i e_i^T
    a = (relations.T * p) @ relations
    b = (relations.T * p) @ entities
    m_star, *_ = np.linalg.lstsq(a, b, rcond=None)

    superposition = b  # identical expression: the p-weighted sum of outer products
    num = float((m_star * superposition).sum())
    den = float((superposition * superposition).sum())
    scale = num / den
    max_err = float(np.abs(m_star - scale * superposition).max())
    return OptimalMemoryReport(
        n_pairs=n_pairs,
        d_e=d_e,
        d_r=d_r,
        scale=scale,
        expected_scale=float(n_pairs),
        max_abs_error=max_err,
        passed=max_err <= tolerance and abs(scale - n_pairs) <= tolerance * n_pairs,
    )
