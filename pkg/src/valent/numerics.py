"""Dense kernels: 32-bit storage, 64-bit accumulation.

Matrices and vectors are plain ``numpy`` arrays of dtype float32. Every
kernel promotes its inputs to float64, does the arithmetic there and casts
the result back, so the drift between two code paths that compute the same
quantity stays far below the 1e-5 tolerances used by the trace checks.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

F32 = np.float32
F64 = np.float64

# Masked attention logits are fed to softmax_rows as this sentinel.
MASKED = -np.inf


class ZeroVectorWarning(RuntimeWarning):
    """cosine() was asked to compare against an all-zero vector."""


def _as_matrix(m, name: str) -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {what}")
    return arr


def matmul(a, b) -> np.ndarray:
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: a is {a.shape[0]}x{a.shape[1]}, b is {b.shape[0]}x{b.shape[1]}")
    out = (a.astype(F64) @ b.astype(F64)).astype(F32)
    return _check_finite(out, "matmul")


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax. Entries equal to ``-inf`` are masked and come out as exact zeros."""
    x = _as_matrix(m, "m").astype(F64)
    if np.any(np.isnan(x)) or np.any(x == np.inf):
        raise NumericError("softmax_rows: input contains NaN or +inf")
    masked = np.isneginf(x)
    if np.any(masked.all(axis=1)):
        raise NumericError("empty attention row")
    row_max = np.where(masked, -np.inf, x).max(axis=1, keepdims=True)
    e = np.where(masked, 0.0, np.exp(np.where(masked, 0.0, x - row_max)))
    out = e / e.sum(axis=1, keepdims=True)
    return out.astype(F32)


def rms_norm(v, gain, eps: float = 1e-5) -> np.ndarray:
    """RMS-normalise along the last axis. Works on a single vector or a stack of rows."""
    v = np.asarray(v)
    gain = np.asarray(gain)
    if v.shape[-1] != gain.shape[-1] or gain.ndim != 1:
        raise ShapeError(f"rms_norm: vector dim {v.shape[-1]} vs gain dim {gain.shape}")
    x = v.astype(F64)
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return (x / np.sqrt(ms + eps) * gain.astype(F64)).astype(F32)


def layer_norm(v, gain, eps: float = 1e-5) -> np.ndarray:
    """Mean-subtracting layer norm with a gain and no bias."""
    v = np.asarray(v)
    gain = np.asarray(gain)
    if v.shape[-1] != gain.shape[-1] or gain.ndim != 1:
        raise ShapeError(f"layer_norm: vector dim {v.shape[-1]} vs gain dim {gain.shape}")
    x = v.astype(F64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return ((x - mu) / np.sqrt(var + eps) * gain.astype(F64)).astype(F32)


def rope_apply(q_or_k, position, theta_base: float = 10000.0) -> np.ndarray:
    """Rotate adjacent pairs ``(2i, 2i+1)`` of the last axis by ``position * theta_base**(-2i/d)``.

    ``q_or_k`` is ``(rows, d_head)`` for one position, or ``(N, ..., d_head)``
    with ``position`` an array of N positions. Position 0 is the identity.
    """
    x = np.asarray(q_or_k)
    d_head = x.shape[-1]
    if d_head % 2:
        raise ConfigError(f"rotary embedding needs an even head dimension, got {d_head}")
    pos = np.asarray(position, dtype=F64)
    inv_freq = theta_base ** (-np.arange(0, d_head, 2, dtype=F64) / d_head)
    if pos.ndim == 0:
        angles = pos * inv_freq
    else:
        angles = pos.reshape((-1,) + (1,) * (x.ndim - 1)) * inv_freq
    cos, sin = np.cos(angles), np.sin(angles)
    x64 = x.astype(F64)
    even, odd = x64[..., 0::2], x64[..., 1::2]
    out = np.empty_like(x64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out.astype(F32)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=F64).ravel()
    b = np.asarray(b, dtype=F64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cosine: dims {a.shape[0]} and {b.shape[0]} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine of an all-zero vector is defined as 0", ZeroVectorWarning, stacklevel=2)
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def stable_rank_desc(scores) -> np.ndarray:
    """Indices by descending score; equal scores keep ascending index order."""
    s = np.asarray(scores, dtype=F64).ravel()
    if not np.all(np.isfinite(s)):
        raise NumericError("stable_rank_desc: scores must be finite")
    return np.argsort(-s, kind="stable")
