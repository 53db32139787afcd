"""Ranking and correlation metrics.

All functions are pure. Rankings produced here use
:func:`valent.numerics.stable_rank_desc`, so tied scores fall back to the
lower candidate index.
"""

from __future__ import annotations

import math
import warnings
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import MetricError, ShapeError
from .numerics import F32, F64, ZeroVectorWarning


def fractional_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the average of their positions."""
    x = np.asarray(x, dtype=F64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=F64)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x, y) -> float:
    x = np.asarray(x, dtype=F64).ravel()
    y = np.asarray(y, dtype=F64).ravel()
    if x.size != y.size:
        raise ShapeError(f"spearman: lengths {x.size} and {y.size} differ")
    if x.size < 2:
        raise MetricError("spearman needs at least 2 observations")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise MetricError("spearman inputs must be finite")
    rx = fractional_ranks(x)
    ry = fractional_ranks(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise MetricError("undefined correlation: an input has zero rank variance")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def recall_at_k(ranking: Sequence[int], correct: int, k: int) -> int:
    if k < 1:
        raise MetricError("k must be >= 1")
    return int(correct in list(ranking[:k]))


def ndcg_at_k(ranked_relevances, k: int = 10, gain: str = "linear") -> float:
    """NDCG with discount ``1/log2(i+1)``; ``gain`` is ``linear`` (rel) or ``exponential`` (2^rel - 1).

    The ideal ordering is taken over every relevance in the list, so pass the
    full ranked candidate list, not just its top k.
    """
    rel = np.asarray(ranked_relevances, dtype=F64).ravel()
    if np.any(rel < 0):
        raise MetricError("relevance grades must be >= 0")
    if gain == "linear":
        g = rel
    elif gain == "exponential":
        g = np.exp2(rel) - 1.0
    else:
        raise MetricError(f"unknown gain {gain!r}")
    disc = 1.0 / np.log2(np.arange(2, min(k, g.size) + 2, dtype=F64))
    dcg = float(g[:k] @ disc)
    ideal = np.sort(g)[::-1][:k]
    idcg = float(ideal @ disc[:ideal.size])
    return dcg / idcg if idcg > 0 else 0.0


def average_precision(ranked_binary) -> Optional[float]:
    """AP of one ranked list, or None when it holds no relevant item."""
    rel = np.asarray(ranked_binary, dtype=F64).ravel() > 0
    if not rel.any():
        return None
    hits = np.cumsum(rel)
    positions = np.arange(1, rel.size + 1)
    return float(np.mean(hits[rel] / positions[rel]))


def mean_average_precision(per_query: Iterable) -> float:
    """Mean AP over queries; queries without relevant items are skipped."""
    aps = [ap for ap in (average_precision(q) for q in per_query) if ap is not None]
    if not aps:
        raise MetricError("MAP undefined: every query lacks relevant items")
    return float(np.mean(aps))


def mrr_at_n(rank: Optional[int], n: int = 100) -> float:
    """Reciprocal rank, or 0 when the item is missing or ranked below ``n``."""
    if rank is None:
        return 0.0
    if rank < 1:
        raise MetricError(f"rank must be >= 1, got {rank}")
    return 1.0 / rank if rank <= n else 0.0


def mean_reciprocal_rank(ranks: Iterable[Optional[int]], n: int = 100) -> float:
    vals = [mrr_at_n(r, n) for r in ranks]
    if not vals:
        raise MetricError("no instances to average")
    return math.fsum(vals) / len(vals)


def rank_of(scores, target: int) -> int:
    """1-based position of ``target`` under descending scores with lower-index tie-break."""
    s = np.asarray(scores, dtype=F64).ravel()
    t = s[target]
    return int(np.sum(s > t) + np.sum(s[:target] == t)) + 1


def similarity_matrix(a, b) -> np.ndarray:
    """Cosine similarity of every row of ``a`` against every row of ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=F64))
    b = np.atleast_2d(np.asarray(b, dtype=F64))
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"similarity_matrix: dims {a.shape[1]} and {b.shape[1]} differ")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        warnings.warn("zero-norm embedding; its similarities are defined as 0", ZeroVectorWarning, stacklevel=2)
    sa = np.where(na > 0, na, 1.0)
    sb = np.where(nb > 0, nb, 1.0)
    sim = (a / sa[:, None]) @ (b / sb[:, None]).T
    sim[na == 0, :] = 0.0
    sim[:, nb == 0] = 0.0
    return np.clip(sim, -1.0, 1.0).astype(F32)
