"""Hand-written reverse-mode gradients of the mean batch loss.

Adjoints mirror forward.py step by step. The linear solve in the
completion step uses the standard identity for x = A^{-1} c:
grad_c = A^{-T} g and grad_A = -(grad_c) x^T, with the symmetrization of
the weight matrix folded into the chain. Whitening statistics are treated
as constants (straight-through), matching the per-epoch refresh policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from ..binding import BindingKind, WhiteningStats, ccorr, cconv
from ..errors import NumericError
from ..kg import Direction, NeighborIndex, Triplet
from .forward import QueryTrace, instance_query, query_trace, resolved_tables
from .params import ModelParams, TrainConfig


@dataclass
class Gradients:
    """Per-block gradients plus the batch loss and a guard statistic."""

    blocks: dict[str, np.ndarray]
    loss: float
    max_filter_sq: float

    def check_finite(self) -> None:
        for name, arr in self.blocks.items():
            if not np.isfinite(arr).all():
                raise NumericError(f"non-finite gradient in block {name!r}")


def _zero_blocks(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.blocks().items()}


def _loss_backward(
    e_out: np.ndarray, cands: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Returns (loss, grad e_out, grad candidate rows); true entity is row 0."""
    diffs = cands - e_out
    logits = -np.einsum("ij,ij->i", diffs, diffs)
    peak = logits.max()
    exps = np.exp(logits - peak)
    lse = peak + math.log(exps.sum())
    loss_val = float(lse - logits[0])
    zbar = exps / exps.sum()
    zbar[0] -= 1.0
    # d logits_c / d e_out = -2 (e_out - c); zbar sums to zero
    e_out_bar = 2.0 * (zbar @ cands)
    cands_bar = -2.0 * zbar[:, None] * diffs
    return loss_val, e_out_bar, cands_bar


def _backward_query(
    trace: QueryTrace,
    e_out_bar: np.ndarray,
    params: ModelParams,
    cfg: TrainConfig,
    grads: dict[str, np.ndarray],
    ent_bar: np.ndarray,
    rel_l_bar: np.ndarray,
    rel_r_bar: np.ndarray,
) -> None:
    """Accumulate one query's adjoints into the (whitened-space) buffers."""
    harmony = params.harmony
    d_r, d_e = cfg.d_r, cfg.d_e

    # unbinding
    if cfg.binding is BindingKind.TPR:
        m_hat_mat = trace.m_hat.reshape(d_r, d_e)
        m_hat_bar = np.outer(trace.probe, e_out_bar).reshape(-1)
        probe_unit_bar = m_hat_mat @ e_out_bar
        probe_bar = (
            probe_unit_bar - trace.probe * (trace.probe @ probe_unit_bar)
        ) / trace.probe_norm
    else:
        m_hat_bar = cconv(trace.probe, e_out_bar)
        probe_bar = ccorr(e_out_bar, trace.m_hat)

    # completion
    if math.isinf(cfg.lam):
        m_flat_bar = m_hat_bar
    else:
        u = scipy.linalg.cho_solve(trace.factor, m_hat_bar, check_finite=False)
        if cfg.eq8_verbatim:
            m_flat_bar = -2.0 * cfg.lam * u
            grads["b_harmony"] += -u
        else:
            m_flat_bar = cfg.lam * u
            grads["b_harmony"] += 0.5 * u
        # grad of the symmetrized weight matrix inside the solve
        w_bar = 0.5 * (np.outer(u, trace.m_hat) + np.outer(trace.m_hat, u))
        if cfg.ablate_local_w:
            grads["w_global"] += w_bar
        else:
            f = trace.filt
            grads["w_global"] += w_bar * np.outer(f, f)
            f_bar = 2.0 * (w_bar * harmony.w_global) @ f
            grads["w_map"] += np.outer(f_bar, trace.m_flat)
            grads["b_map"] += f_bar
            m_flat_bar = m_flat_bar + harmony.w_map.T @ f_bar

    # memory assembly
    if cfg.implicit:
        grads["implicit_memories"][trace.query.entity] += m_flat_bar
    elif len(trace.sel) > 0:
        sel = trace.sel
        w_sel = trace.sel_weights
        r_sel, e_sel = trace.r_sel, trace.e_sel
        if cfg.binding is BindingKind.TPR:
            mem_bar = m_flat_bar.reshape(d_r, d_e)
            w_sel_bar = np.einsum("kj,kj->k", r_sel @ mem_bar, e_sel)
            r_sel_bar = (e_sel @ mem_bar.T) * w_sel[:, None]
            e_sel_bar = (r_sel @ mem_bar) * w_sel[:, None]
        else:
            r_spec = np.fft.rfft(r_sel, axis=1)
            e_spec = np.fft.rfft(e_sel, axis=1)
            bound = np.fft.irfft(r_spec * e_spec, n=d_e, axis=1)
            w_sel_bar = bound @ m_flat_bar
            mem_spec = np.fft.rfft(m_flat_bar)
            r_sel_bar = w_sel[:, None] * np.fft.irfft(
                np.conj(e_spec) * mem_spec[None, :], n=d_e, axis=1
            )
            e_sel_bar = w_sel[:, None] * np.fft.irfft(
                np.conj(r_spec) * mem_spec[None, :], n=d_e, axis=1
            )

        # sigmoid weighting
        pre_bar = w_sel_bar * w_sel * (1.0 - w_sel)
        feats_sel = trace.feats[sel]
        feats_bar = np.outer(pre_bar, trace.v)
        v_bar = feats_sel.T @ pre_bar
        grads["b_score"][trace.row] += v_bar
        w_row = trace.row if params.weighting.per_relation else 0
        grads["w_score"][w_row] += np.outer(trace.q_feat, v_bar)
        w_q = params.weighting.w_score[w_row]
        q_feat_bar = w_q @ v_bar

        e_sel_bar = e_sel_bar + feats_bar[:, :d_e]
        r_sel_bar = r_sel_bar + feats_bar[:, d_e:]

        ent_bar[trace.query.entity] += q_feat_bar[:d_e]
        probe_bar = probe_bar + q_feat_bar[d_e:]

        rels_sel = trace.neigh[sel, 0]
        dirs_sel = trace.neigh[sel, 1]
        nbs_sel = trace.neigh[sel, 2]
        np.add.at(ent_bar, nbs_sel, e_sel_bar)
        right = dirs_sel == int(Direction.RIGHT)
        if right.any():
            np.add.at(rel_r_bar, rels_sel[right], r_sel_bar[right])
        if (~right).any():
            np.add.at(rel_l_bar, rels_sel[~right], r_sel_bar[~right])

    # query probe
    if trace.query.side is Direction.RIGHT:
        rel_r_bar[trace.query.relation] += probe_bar
    else:
        rel_l_bar[trace.query.relation] += probe_bar


def gradients(
    batch: Sequence[tuple[Triplet, Direction]],
    params: ModelParams,
    index: NeighborIndex,
    cfg: TrainConfig,
    negatives: Sequence[np.ndarray],
    stats: WhiteningStats | None = None,
) -> Gradients:
    """Exact reverse-mode derivatives of the mean batch loss.

    ``negatives`` supplies the (already sampled) negative entity ids per
    instance, so the computation is a deterministic function of its inputs.
    """
    if len(batch) != len(negatives):
        raise ValueError("need one negative sample list per batch instance")
    ent, _, _ = resolved_tables(params, stats)
    grads = _zero_blocks(params)
    ent_bar = np.zeros_like(ent)
    rel_l_bar = np.zeros_like(params.emb.relations_left)
    rel_r_bar = np.zeros_like(params.emb.relations_right)

    total_loss = 0.0
    max_filter_sq = 0.0
    for (triplet, side), negs in zip(batch, negatives):
        q, true_e, withhold = instance_query(triplet, side)
        trace = query_trace(q, params, index, cfg, stats, withhold)
        if trace.filt is not None:
            max_filter_sq = max(max_filter_sq, float((trace.filt**2).max()))
        elif not math.isinf(cfg.lam) and cfg.ablate_local_w:
            max_filter_sq = max(max_filter_sq, 1.0)

        negs = np.asarray(negs, dtype=np.int64)
        cand_ids = np.concatenate([[true_e], negs])
        loss_val, e_out_bar, cands_bar = _loss_backward(trace.e_out, ent[cand_ids])
        total_loss += loss_val
        np.add.at(ent_bar, cand_ids, cands_bar)
        _backward_query(
            trace, e_out_bar, params, cfg, grads, ent_bar, rel_l_bar, rel_r_bar
        )

    n = len(batch)
    if stats is not None:
        # straight-through whitening: v_hat = (v - mu) S / sqrt(d)
        back = stats.inv_sqrt / math.sqrt(stats.d)
        ent_bar = ent_bar @ back
        rel_l_bar = rel_l_bar @ back
        rel_r_bar = rel_r_bar @ back
    grads["entities"] += ent_bar
    grads["relations_left"] += rel_l_bar
    grads["relations_right"] += rel_r_bar
    for name in grads:
        grads[name] /= n

    result = Gradients(grads, total_loss / n, max_filter_sq)
    result.check_finite()
    return result
