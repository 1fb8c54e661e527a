"""Training loop: adaptive-moment updates, model selection, divergence guard."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import NumericError
from ..kg import Direction, KnowledgeGraph, NeighborIndex, Triplet, build_neighbor_index
from ..memory import spectral_norm_symmetric
from .backward import gradients
from .forward import fit_stats, sample_negatives
from .params import ModelParams, TrainConfig, init_params

GUARD_MARGIN = 0.9


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.blocks().items()},
            v={k: np.zeros_like(a) for k, a in params.blocks().items()},
        )


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    state.t += 1
    bias1 = 1.0 - beta1**state.t
    bias2 = 1.0 - beta2**state.t
    for name, arr in params.blocks().items():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        arr -= lr * m_hat / (np.sqrt(v_hat) + eps)


def apply_spectral_guard(
    params: ModelParams, cfg: TrainConfig, max_filter_sq: float
) -> None:
    """Rescale w_global so the local weight matrices stay inside lam.

    Uses the bound ||(ff^T) ⊙ G||₂ <= max(f²) ||G||₂ and keeps the product
    at or below GUARD_MARGIN * lam.
    """
    if math.isinf(cfg.lam) or max_filter_sq <= 0.0:
        return
    norm = spectral_norm_symmetric(params.harmony.w_global)
    limit = GUARD_MARGIN * cfg.lam
    if norm * max_filter_sq > limit:
        params.harmony.w_global *= limit / (norm * max_filter_sq)


@dataclass
class TrainResult:
    params: ModelParams
    cfg: TrainConfig
    history: list[dict] = field(default_factory=list)
    best_val_mrr: float | None = None
    best_epoch: int | None = None
    diverged: bool = False


def _epoch_instances(
    triplets: Sequence[Triplet], order: np.ndarray
) -> list[tuple[Triplet, Direction]]:
    instances = []
    for i in order:
        t = triplets[i]
        instances.append((t, Direction.RIGHT))
        instances.append((t, Direction.LEFT))
    return instances


def train(
    kg: KnowledgeGraph,
    cfg: TrainConfig,
    valid: Sequence[Triplet] = (),
    index: NeighborIndex | None = None,
    log=None,
) -> TrainResult:
    """Train on kg.triplets; select on validation MRR when possible.

    Each shuffled triplet yields a right-side and a left-side instance, its
    own link withheld from the assembled neighborhood. Deterministic for a
    fixed seed (single-threaded). Loss turning non-finite aborts training
    and returns the last epoch-start parameters with ``diverged`` set.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg, kg.n_entities, kg.n_relations, rng)
    if index is None:
        index = build_neighbor_index(kg)
    adam = AdamState.for_params(params)
    result = TrainResult(params=params, cfg=cfg)
    best: ModelParams | None = None

    # delayed import: evaluation depends on forward, not on this module
    from ..evaluation import FilterSet, evaluate

    val_filter = FilterSet.from_triplets(kg.triplets, valid) if valid else None

    for epoch in range(cfg.epochs):
        snapshot = params.copy()
        stats = fit_stats(params, cfg)
        order = rng.permutation(len(kg.triplets))
        instances = _epoch_instances(kg.triplets, order)
        epoch_loss = 0.0
        n_batches = 0
        try:
            for start in range(0, len(instances), cfg.batch_size):
                batch = instances[start : start + cfg.batch_size]
                negs = []
                for triplet, side in batch:
                    true_e = (
                        triplet.tail if side is Direction.RIGHT else triplet.head
                    )
                    negs.append(
                        sample_negatives(
                            cfg.n_negatives,
                            {true_e},
                            rng,
                            n_entities=kg.n_entities,
                        )
                    )
                if cfg.whiten_per_step:
                    stats = fit_stats(params, cfg)
                grads = gradients(batch, params, index, cfg, negs, stats)
                adam_step(params, grads.blocks, adam, cfg.learning_rate)
                params.harmony.w_global = 0.5 * (
                    params.harmony.w_global + params.harmony.w_global.T
                )
                apply_spectral_guard(params, cfg, grads.max_filter_sq)
                if not math.isfinite(grads.loss):
                    raise NumericError("training loss is not finite")
                epoch_loss += grads.loss
                n_batches += 1
        except NumericError:
            result.params = snapshot
            result.diverged = True
            break

        record = {"epoch": epoch, "loss": epoch_loss / max(n_batches, 1)}
        if (
            val_filter is not None
            and cfg.eval_every > 0
            and (epoch + 1) % cfg.eval_every == 0
        ):
            metrics, _ = evaluate(valid, params, cfg, index, val_filter)
            record["val_mrr"] = metrics.mrr
            if result.best_val_mrr is None or metrics.mrr > result.best_val_mrr:
                result.best_val_mrr = metrics.mrr
                result.best_epoch = epoch
                best = params.copy()
        result.history.append(record)
        if log is not None:
            log(record)

    if not result.diverged:
        result.params = best if best is not None else params
    return result
