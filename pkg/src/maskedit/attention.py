"""Masked-attention algebra shared by the self- and cross-attention controllers.

Everything here is pure single-head math on plain float arrays: a feature
matrix is ``(n_tokens, dim)``, a key mask is a binary vector over keys, and
index lists keep track of where extracted rows came from. Multi-head callers
loop heads over these functions.
"""

from __future__ import annotations

import numpy as np

from .errors import CoverageError, DimensionError, EmptyMaskError

__all__ = [
    "scaled_dot_attention",
    "attention_probs",
    "masked_attention",
    "extract",
    "scatter",
]


def _as_matrix(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D (tokens x dim), got shape {a.shape}")
    if not np.isfinite(a).all():
        raise DimensionError(f"{name} contains non-finite entries")
    return a


def _as_key_mask(mask, n_keys: int) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 1 or m.shape[0] != n_keys:
        raise DimensionError(f"key mask must have length {n_keys}, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise DimensionError("key mask must be strictly binary; binarize soft masks first")
    return m.astype(bool)


def attention_probs(q, k, key_bias=None) -> np.ndarray:
    """Row-stochastic attention weights of ``q`` over ``k``.

    ``key_bias`` is an optional additive per-key logit bias (used for masking
    with ``-inf``). Softmax is computed stably; rows sum to 1 exactly up to
    float rounding.
    """
    q = _as_matrix(q, "Q")
    k = _as_matrix(k, "K")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"Q dim {q.shape[1]} != K dim {k.shape[1]}")
    logits = (q @ k.T) / np.sqrt(q.shape[1])
    if key_bias is not None:
        logits = logits + key_bias[None, :]
    logits = logits - logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=1, keepdims=True)


def scaled_dot_attention(q, k, v) -> np.ndarray:
    """Softmax(Q K^T / sqrt(dim)) V for a single head."""
    k = _as_matrix(k, "K")
    v = _as_matrix(v, "V")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"K has {k.shape[0]} keys but V has {v.shape[0]} rows")
    return attention_probs(q, k) @ v


def masked_attention(q, k, v, mask) -> np.ndarray:
    """Attention restricted to keys whose mask bit is 1.

    Masked-out keys get an additive ``-inf`` logit bias, so their attention
    weight is exactly zero. An all-zero mask is an error: removal-style edits
    must be routed through output composition, never an empty key set.
    """
    k = _as_matrix(k, "K")
    v = _as_matrix(v, "V")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"K has {k.shape[0]} keys but V has {v.shape[0]} rows")
    m = _as_key_mask(mask, k.shape[0])
    if not m.any():
        raise EmptyMaskError("mask admits no keys")
    bias = np.where(m, 0.0, -np.inf)
    return attention_probs(q, k, key_bias=bias) @ v


def extract(x, mask) -> tuple[np.ndarray, np.ndarray]:
    """Rows of ``x`` where the mask bit is 1, with their original positions.

    An empty selection is legal and yields an empty ``(0, dim)`` matrix.
    """
    x = _as_matrix(x, "X")
    m = _as_key_mask(mask, x.shape[0])
    positions = np.flatnonzero(m)
    return x[positions], positions


def scatter(parts, n_tokens: int) -> np.ndarray:
    """Reassemble row partitions back into a single ``(n_tokens, dim)`` matrix.

    ``parts`` is a sequence of ``(matrix, positions)`` pairs as produced by
    :func:`extract`. Positions must be disjoint and jointly cover
    ``[0, n_tokens)``.
    """
    filled = np.zeros(n_tokens, dtype=bool)
    dim = None
    for mat, _ in parts:
        mat = np.asarray(mat)
        if mat.size:
            if dim is not None and mat.shape[1] != dim:
                raise DimensionError("scatter parts disagree on dim")
            dim = mat.shape[1]
    if dim is None:
        raise CoverageError("scatter received no rows")
    out = np.empty((n_tokens, dim), dtype=np.float64)
    for mat, positions in parts:
        positions = np.asarray(positions, dtype=np.intp)
        mat = np.asarray(mat, dtype=np.float64)
        if positions.size != mat.shape[0]:
            raise DimensionError("positions length does not match part rows")
        if positions.size == 0:
            continue
        if positions.min() < 0 or positions.max() >= n_tokens:
            raise CoverageError("scatter position out of range")
        if filled[positions].any():
            raise CoverageError("scatter positions overlap")
        filled[positions] = True
        out[positions] = mat
    if not filled.all():
        missing = int(np.flatnonzero(~filled)[0])
        raise CoverageError(f"scatter leaves position {missing} uncovered")
    return out
