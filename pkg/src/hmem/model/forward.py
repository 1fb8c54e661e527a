"""Forward pass: neighborhood scoring, completion, unbinding, and loss.

Every query produces a :class:`QueryTrace` holding the intermediates the
backward pass needs; :func:`query_output` is the plain-output wrapper.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..binding import BindingKind, WhiteningStats, ccorr, fit_whitening, whiten
from ..errors import NumericError
from ..kg import Direction, NeighborIndex, Triplet
from ..memory import candidate_weights, filter_vector, q_row, select_top_k, solve_completion
from .params import ModelParams, Query, TrainConfig

Withhold = tuple[int, Direction, int]


def fit_stats(params: ModelParams, cfg: TrainConfig) -> WhiteningStats | None:
    """Fit decorrelation stats on the concatenated embedding tables."""
    if not cfg.whiten:
        return None
    stacked = np.vstack(
        [params.emb.entities, params.emb.relations_left, params.emb.relations_right]
    )
    return fit_whitening(stacked, cfg.whiten_alpha)


def resolved_tables(
    params: ModelParams, stats: WhiteningStats | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Embedding tables, decorrelated when whitening is active."""
    emb = params.emb
    if stats is None:
        return emb.entities, emb.relations_left, emb.relations_right
    return (
        whiten(emb.entities, stats),
        whiten(emb.relations_left, stats),
        whiten(emb.relations_right, stats),
    )


@dataclass
class QueryTrace:
    """Intermediates of one query's forward pass."""

    query: Query
    row: int
    probe_raw: np.ndarray
    probe: np.ndarray
    probe_norm: float
    m_flat: np.ndarray
    m_hat: np.ndarray
    e_out: np.ndarray
    # explicit-assembly intermediates (None/empty in implicit mode)
    neigh: np.ndarray | None = None
    q_feat: np.ndarray | None = None
    feats: np.ndarray | None = None
    v: np.ndarray | None = None
    weights: np.ndarray | None = None
    sel: np.ndarray | None = None
    r_sel: np.ndarray | None = None
    e_sel: np.ndarray | None = None
    # completion intermediates (None when lam is infinite)
    filt: np.ndarray | None = None
    factor: tuple | None = None

    @property
    def sel_weights(self) -> np.ndarray:
        return self.weights[self.sel]


def instance_query(triplet: Triplet, side: Direction) -> tuple[Query, int, Withhold]:
    """Map a training/eval instance to (query, true entity, withheld entry)."""
    if side is Direction.RIGHT:
        q = Query(triplet.head, triplet.relation, Direction.RIGHT)
        true_e = triplet.tail
    else:
        q = Query(triplet.tail, triplet.relation, Direction.LEFT)
        true_e = triplet.head
    return q, true_e, (triplet.relation, side, true_e)


def _assemble(
    q: Query,
    params: ModelParams,
    index: NeighborIndex,
    cfg: TrainConfig,
    tables: tuple[np.ndarray, np.ndarray, np.ndarray],
    probe_raw: np.ndarray,
    row: int,
    withhold: Withhold | None,
) -> dict:
    ent, rel_l, rel_r = tables
    neigh = index.neighborhood(
        q.entity,
        None if withhold is None else (withhold[0], int(withhold[1]), withhold[2]),
    )
    if len(neigh) == 0:
        return {
            "neigh": neigh,
            "m_flat": np.zeros(cfg.m),
            "sel": np.empty(0, dtype=np.int64),
            "r_sel": np.empty((0, cfg.d_r)),
            "e_sel": np.empty((0, cfg.d_e)),
            "weights": np.empty(0),
        }
    rels, dirs, nbs = neigh[:, 0], neigh[:, 1], neigh[:, 2]
    r_vecs = np.where(
        (dirs == int(Direction.RIGHT))[:, None], rel_r[rels], rel_l[rels]
    )
    e_vecs = ent[nbs]
    feats = np.concatenate([e_vecs, r_vecs], axis=1)
    q_feat = np.concatenate([ent[q.entity], probe_raw])
    weights, _, v = candidate_weights(q_feat, feats, params.weighting, row)
    sel = select_top_k(weights, neigh, cfg.k)
    r_sel, e_sel, w_sel = r_vecs[sel], e_vecs[sel], weights[sel]
    if cfg.binding is BindingKind.TPR:
        m_flat = ((r_sel * w_sel[:, None]).T @ e_sel).reshape(-1)
    else:
        spec = np.fft.rfft(r_sel, axis=1) * np.fft.rfft(e_sel, axis=1)
        m_flat = np.fft.irfft((w_sel[:, None] * spec).sum(axis=0), n=cfg.d_e)
    return {
        "neigh": neigh,
        "q_feat": q_feat,
        "feats": feats,
        "v": v,
        "weights": weights,
        "sel": sel,
        "r_sel": r_sel,
        "e_sel": e_sel,
        "m_flat": m_flat,
    }


def query_trace(
    q: Query,
    params: ModelParams,
    index: NeighborIndex,
    cfg: TrainConfig,
    stats: WhiteningStats | None = None,
    withhold: Withhold | None = None,
) -> QueryTrace:
    """Run one query end to end, keeping intermediates."""
    tables = resolved_tables(params, stats)
    _, rel_l, rel_r = tables
    probe_raw = (
        rel_r[q.relation] if q.side is Direction.RIGHT else rel_l[q.relation]
    )
    row = q_row(q.relation, q.side)

    extra: dict = {}
    if cfg.implicit:
        m_flat = params.implicit_memories[q.entity]
    else:
        extra = _assemble(q, params, index, cfg, tables, probe_raw, row, withhold)
        m_flat = extra.pop("m_flat")

    filt = None
    factor = None
    if math.isinf(cfg.lam):
        m_hat = m_flat
    else:
        if cfg.ablate_local_w:
            w_i = params.harmony.w_global
        else:
            filt = filter_vector(m_flat, params.harmony)
            w_i = np.outer(filt, filt) * params.harmony.w_global
        m_hat, factor = solve_completion(
            m_flat, w_i, params.harmony.b, cfg.lam, cfg.eq8_verbatim
        )

    if cfg.binding is BindingKind.TPR:
        probe_norm = float(np.linalg.norm(probe_raw))
        if probe_norm == 0.0:
            raise NumericError(f"zero-norm probe for relation {q.relation}")
        probe = probe_raw / probe_norm
        e_out = probe @ m_hat.reshape(cfg.d_r, cfg.d_e)
    else:
        probe_norm = 1.0
        probe = probe_raw
        e_out = ccorr(probe, m_hat)

    return QueryTrace(
        query=q,
        row=row,
        probe_raw=probe_raw,
        probe=probe,
        probe_norm=probe_norm,
        m_flat=m_flat,
        m_hat=m_hat,
        e_out=e_out,
        filt=filt,
        factor=factor,
        **extra,
    )


def query_output(
    q: Query,
    params: ModelParams,
    index: NeighborIndex,
    cfg: TrainConfig,
    stats: WhiteningStats | None = None,
    withhold: Withhold | None = None,
) -> np.ndarray:
    """The entity-space vector retrieved for a query."""
    return query_trace(q, params, index, cfg, stats, withhold).e_out


def score(e_o: np.ndarray, e_c: np.ndarray) -> float:
    """Squared Euclidean distance; lower ranks better."""
    diff = np.asarray(e_o) - np.asarray(e_c)
    return float(diff @ diff)


def loss(e_o: np.ndarray, true_e: np.ndarray, negatives: np.ndarray) -> float:
    """Softmax cross-entropy over {true} ∪ negatives with logits -distance²."""
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if negatives.shape[0] == 0:
        raise ValueError("need at least one negative sample")
    cands = np.vstack([np.asarray(true_e, dtype=np.float64)[None, :], negatives])
    diffs = cands - e_o
    logits = -np.einsum("ij,ij->i", diffs, diffs)
    peak = logits.max()
    return float(-(logits[0] - peak) + math.log(np.exp(logits - peak).sum()))


def sample_negatives(
    n: int,
    exclude: set[int],
    rng: np.random.Generator,
    *,
    n_entities: int,
) -> np.ndarray:
    """Uniform sample without replacement from entities outside ``exclude``."""
    if exclude:
        pool = np.setdiff1d(
            np.arange(n_entities), np.fromiter(exclude, dtype=np.int64)
        )
    else:
        pool = np.arange(n_entities)
    if n > len(pool):
        raise ValueError(
            f"cannot draw {n} negatives from {len(pool)} available entities"
        )
    return rng.choice(pool, size=n, replace=False)


def batch_loss(
    params: ModelParams,
    batch: Sequence[tuple[Triplet, Direction]],
    negatives: Sequence[np.ndarray],
    index: NeighborIndex,
    cfg: TrainConfig,
    stats: WhiteningStats | None = None,
) -> float:
    """Mean instance loss over a batch with fixed negative samples."""
    ent, _, _ = resolved_tables(params, stats)
    total = 0.0
    for (triplet, side), negs in zip(batch, negatives):
        q, true_e, withhold = instance_query(triplet, side)
        trace = query_trace(q, params, index, cfg, stats, withhold)
        total += loss(trace.e_out, ent[true_e], ent[np.asarray(negs)])
    return total / len(batch)
