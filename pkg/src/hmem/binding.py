"""Binding and unbinding algebra plus the embedding decorrelation transform.

Two binding kinds: the tensor (outer) product, whose memory is a
``d_r x d_e`` matrix, and circular convolution, whose memory is a
``d``-vector (requires ``d_e == d_r``). Circular ops go through the real
FFT, which handles arbitrary (including odd) lengths.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import NumericError, ShapeError


class BindingKind(str, Enum):
    TPR = "tpr"
    CCONV = "cconv"


@dataclass
class MemoryState:
    """A superposition memory: matrix for TPR, vector for CConv."""

    kind: BindingKind
    data: np.ndarray

    def flatten(self) -> np.ndarray:
        # TPR flattens row-major, relation index major
        return self.data.reshape(-1)

    @classmethod
    def from_flat(
        cls, kind: BindingKind, vec: np.ndarray, d_r: int, d_e: int
    ) -> "MemoryState":
        vec = np.asarray(vec, dtype=np.float64)
        if kind is BindingKind.TPR:
            if vec.size != d_r * d_e:
                raise ShapeError(f"flat length {vec.size} != {d_r}*{d_e}")
            return cls(kind, vec.reshape(d_r, d_e))
        if vec.size != d_e:
            raise ShapeError(f"flat length {vec.size} != {d_e}")
        return cls(kind, vec)

    @classmethod
    def zeros(cls, kind: BindingKind, d_r: int, d_e: int) -> "MemoryState":
        if kind is BindingKind.TPR:
            return cls(kind, np.zeros((d_r, d_e)))
        return cls(kind, np.zeros(d_e))


def bind_tpr(r: np.ndarray, e: np.ndarray) -> MemoryState:
    """Outer-product binding: M[i, j] = r[i] * e[j]."""
    return MemoryState(BindingKind.TPR, np.outer(r, e))


def unbind_tpr(r: np.ndarray, mem: MemoryState) -> np.ndarray:
    """Probe a TPR memory by left-dotting with a relation vector."""
    return np.asarray(r, dtype=np.float64) @ mem.data


def _require_same_dim(r: np.ndarray, other: np.ndarray) -> int:
    if r.shape != other.shape or r.ndim != 1:
        raise ShapeError(
            f"circular ops need equal-length vectors, got {r.shape} and {other.shape}"
        )
    return r.shape[0]


def cconv(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Circular convolution out[k] = sum_i a[i] * b[(k - i) mod d]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = _require_same_dim(a, b)
    return np.fft.irfft(np.fft.rfft(a) * np.fft.rfft(b), n=d)


def ccorr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Circular correlation out[k] = sum_i a[i] * b[(k + i) mod d]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = _require_same_dim(a, b)
    return np.fft.irfft(np.conj(np.fft.rfft(a)) * np.fft.rfft(b), n=d)


def bind_cconv(r: np.ndarray, e: np.ndarray) -> MemoryState:
    return MemoryState(BindingKind.CCONV, cconv(r, e))


def unbind_cconv(r: np.ndarray, mem: MemoryState) -> np.ndarray:
    return ccorr(np.asarray(r, dtype=np.float64), mem.data)


def bind(kind: BindingKind, r: np.ndarray, e: np.ndarray) -> MemoryState:
    if kind is BindingKind.TPR:
        return bind_tpr(r, e)
    return bind_cconv(r, e)


def unbind(r: np.ndarray, mem: MemoryState) -> np.ndarray:
    if mem.kind is BindingKind.TPR:
        return unbind_tpr(r, mem)
    return unbind_cconv(r, mem)


# ---------------------------------------------------------------------------
# Decorrelation (whitening)

_EIG_CLAMP = 1e-12


@dataclass
class WhiteningStats:
    """Mean, covariance, and inverse square root fitted to embedding rows.

    cov_reg = (1 - alpha) * cov_emp + alpha * I.
    """

    mean: np.ndarray
    cov_emp: np.ndarray
    cov_reg: np.ndarray
    inv_sqrt: np.ndarray
    alpha: float

    @property
    def d(self) -> int:
        return self.mean.shape[0]


def fit_whitening(embeddings: np.ndarray, alpha: float) -> WhiteningStats:
    """Fit decorrelation statistics on a stack of embedding rows.

    The inverse square root comes from a symmetric eigendecomposition with
    eigenvalues clamped at 1e-12, so alpha = 0 is usable on full-rank data.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ShapeError(f"need an (n >= 2) x d matrix, got shape {emb.shape}")
    if not np.isfinite(emb).all():
        raise NumericError("non-finite values in embeddings")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    n, d = emb.shape
    mean = emb.mean(axis=0)
    centered = emb - mean
    cov_emp = centered.T @ centered / n
    cov_reg = (1.0 - alpha) * cov_emp + alpha * np.eye(d)
    eigvals, eigvecs = np.linalg.eigh(cov_reg)
    eigvals = np.maximum(eigvals, _EIG_CLAMP)
    inv_sqrt = (eigvecs / np.sqrt(eigvals)) @ eigvecs.T
    return WhiteningStats(mean, cov_emp, cov_reg, inv_sqrt, alpha)


def whiten(v: np.ndarray, stats: WhiteningStats) -> np.ndarray:
    """Center, decorrelate, and rescale to componentwise variance 1/d.

    Accepts a single vector or a matrix of row vectors.
    """
    v = np.asarray(v, dtype=np.float64)
    return (v - stats.mean) @ stats.inv_sqrt / np.sqrt(stats.d)
