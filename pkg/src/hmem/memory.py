"""Neighbor weighting, top-k memory assembly, and harmony completion.

The harmony functional over a flattened memory m with input state M is

    H(M, m) = 1/2 (m^T W m + b^T m) - lam/2 * ||M - m||^2

whose unique maximizer, for lam greater than the spectral norm of W, is
m_hat = (lam*I - W)^{-1} (lam*M + b/2). A config flag selects an alternate
verbatim variant m_hat = (W - lam*I)^{-1} (2*lam*M + b) instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit

from .binding import BindingKind, MemoryState
from .errors import ShapeError, StabilityError
from .kg import Direction


@dataclass
class WeightingParams:
    """Bilinear scoring weights for grading candidate neighbors.

    ``w_score`` has shape (1, D, D) when shared across queries or
    (2 * n_relations, D, D) when indexed per (relation, side);
    ``b_score`` always has one D-vector per (relation, side).
    """

    w_score: np.ndarray
    b_score: np.ndarray

    @property
    def per_relation(self) -> bool:
        return self.w_score.shape[0] > 1


def q_row(relation: int, side: Direction) -> int:
    """Row index into per-(relation, side) parameter tables."""
    return 2 * relation + int(side)


def candidate_weight(
    e_i: np.ndarray,
    r_q: np.ndarray,
    e_c: np.ndarray,
    r_c: np.ndarray,
    params: WeightingParams,
    q_index: tuple[int, Direction],
) -> float:
    """Score one candidate neighbor against the query, in (0, 1)."""
    q_feat = np.concatenate([e_i, r_q])
    feat = np.concatenate([e_c, r_c])
    row = q_row(*q_index)
    w = params.w_score[row if params.per_relation else 0]
    return float(expit(q_feat @ w @ feat + params.b_score[row] @ feat))


def candidate_weights(
    q_feat: np.ndarray,
    feats: np.ndarray,
    params: WeightingParams,
    row: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized weights for all candidates; returns (weights, pre, v).

    pre = feats @ v with v = W_q^T q_feat + b_q, and weights = sigmoid(pre).
    """
    w = params.w_score[row if params.per_relation else 0]
    v = w.T @ q_feat + params.b_score[row]
    pre = feats @ v
    return expit(pre), pre, v


@dataclass(frozen=True)
class CandidateBinding:
    """A neighbor entry with its vectors and precomputed binding."""

    relation: int
    direction: Direction
    neighbor: int
    r_vec: np.ndarray
    e_vec: np.ndarray
    bound: MemoryState


def select_top_k(weights: np.ndarray, keys: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest weights; ties go to the lowest key.

    ``keys`` is an (n, 3) array of (relation, direction, neighbor) ids.
    Returned indices preserve the descending-weight order.
    """
    if len(weights) == 0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0], -weights))
    return order[: min(k, len(weights))]


def assemble_memory(
    e_i: np.ndarray,
    r_q: np.ndarray,
    neighbors: Sequence[CandidateBinding],
    params: WeightingParams,
    q_index: tuple[int, Direction],
    k: int,
    *,
    kind: BindingKind,
    d_r: int,
    d_e: int,
) -> MemoryState:
    """Weighted superposition of the k highest-weight neighbor bindings.

    Weights are computed for every neighbor; if there are fewer than k the
    full weighted sum is returned; an empty neighborhood gives the zero
    memory.
    """
    if not neighbors:
        return MemoryState.zeros(kind, d_r, d_e)
    for nb in neighbors:
        if nb.bound.kind is not kind:
            raise ShapeError(
                f"mixed binding kinds: {nb.bound.kind} in a {kind} assembly"
            )
    q_feat = np.concatenate([e_i, r_q])
    feats = np.stack([np.concatenate([nb.e_vec, nb.r_vec]) for nb in neighbors])
    keys = np.array(
        [(nb.relation, int(nb.direction), nb.neighbor) for nb in neighbors],
        dtype=np.int64,
    )
    weights, _, _ = candidate_weights(q_feat, feats, params, q_row(*q_index))
    sel = select_top_k(weights, keys, k)
    total = np.zeros_like(neighbors[0].bound.data)
    for j in sel:
        total = total + weights[j] * neighbors[j].bound.data
    return MemoryState(kind, total)


# ---------------------------------------------------------------------------
# Harmony completion


@dataclass
class HarmonyParams:
    """Parameters of the completion step.

    ``w_global`` is kept exactly symmetric (re-symmetrized after every
    gradient update). ``lam`` may be math.inf, making completion the
    identity map.
    """

    w_global: np.ndarray
    b: np.ndarray
    w_map: np.ndarray
    b_map: np.ndarray
    lam: float


def filter_vector(m_flat: np.ndarray, params: HarmonyParams) -> np.ndarray:
    """Map a flattened memory state to its filter vector."""
    return params.w_map @ m_flat + params.b_map


def local_weight_matrix(mem: MemoryState, params: HarmonyParams) -> np.ndarray:
    """Query-local weights: the filter's self-outer product gating w_global."""
    f = filter_vector(mem.flatten(), params)
    return np.outer(f, f) * params.w_global


def spectral_norm_symmetric(w: np.ndarray, n_iter: int = 50) -> float:
    """Power-iteration estimate of the spectral norm of a symmetric matrix.

    Deterministic: starts from the all-ones direction.
    """
    m = w.shape[0]
    v = np.full(m, 1.0 / math.sqrt(m))
    s = 0.0
    for _ in range(n_iter):
        wv = w @ v
        s = float(np.linalg.norm(wv))
        if s == 0.0:
            return 0.0
        v = wv / s
    return s


def _check_spectral(w_i: np.ndarray, lam: float) -> None:
    # cheap sufficient bound first (max absolute row sum), exact eigenvalues
    # only when the bound is inconclusive
    bound = float(np.abs(w_i).sum(axis=1).max()) if w_i.size else 0.0
    if bound < lam:
        return
    norm = float(np.abs(np.linalg.eigvalsh(w_i)).max())
    if lam <= norm:
        raise StabilityError(
            f"lam={lam} must exceed the spectral norm of the local weight "
            f"matrix ({norm:.6g}); refusing to solve a non-concave problem"
        )


def solve_completion(
    m_flat: np.ndarray,
    w_i: np.ndarray,
    b: np.ndarray,
    lam: float,
    eq8_verbatim: bool = False,
) -> tuple[np.ndarray, tuple]:
    """Closed-form completion of a flattened memory; returns (m_hat, factor).

    ``w_i`` is symmetrized before solving, so the map depends smoothly on
    the full matrix rather than one triangle. The returned Cholesky factor
    of (lam*I - w_i) is reused by the backward pass.
    """
    w_i = 0.5 * (w_i + w_i.T)
    _check_spectral(w_i, lam)
    a = lam * np.eye(len(m_flat)) - w_i
    try:
        factor = scipy.linalg.cho_factor(a, check_finite=False)
    except np.linalg.LinAlgError as e:
        raise StabilityError(f"completion solve failed: {e}") from None
    if eq8_verbatim:
        # (w_i - lam*I)^{-1} (2*lam*M + b) = -(lam*I - w_i)^{-1} (2*lam*M + b)
        rhs = -(2.0 * lam * m_flat + b)
    else:
        rhs = lam * m_flat + 0.5 * b
    return scipy.linalg.cho_solve(factor, rhs, check_finite=False), factor


def harmony_complete(
    mem: MemoryState,
    w_i: np.ndarray,
    b: np.ndarray,
    lam: float,
    eq8_verbatim: bool = False,
) -> MemoryState:
    """Maximize the harmony functional in closed form.

    lam = inf returns the input unchanged. Finite lam must exceed the
    spectral norm of ``w_i`` (StabilityError otherwise).
    """
    if math.isinf(lam):
        return MemoryState(mem.kind, mem.data.copy())
    m_hat, _ = solve_completion(mem.flatten(), w_i, b, lam, eq8_verbatim)
    return MemoryState(mem.kind, m_hat.reshape(mem.data.shape))
