"""Task-level scoring: STS (Spearman), retrieval (NDCG@10), reranking (MAP).

An *encoder* is any callable mapping a list of texts to a ``(len, dim)``
array. Scores returned by :class:`DevTask` are in metric points (x100).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus_io.corpora import RetrievalSet, StsPair
from .errors import MetricError
from .metrics import average_precision, ndcg_at_k, similarity_matrix, spearman
from .numerics import stable_rank_desc

log = logging.getLogger(__name__)

Encoder = Callable[[Sequence[str]], np.ndarray]


@dataclass
class StsResult:
    spearman: float
    cosines: np.ndarray
    golds: np.ndarray


@dataclass
class RankingResult:
    score: float
    per_query: dict[str, float] = field(default_factory=dict)
    n_skipped: int = 0


def evaluate_sts(encode: Encoder, pairs: Sequence[StsPair]) -> StsResult:
    ea = encode([p.sentence_a for p in pairs])
    eb = encode([p.sentence_b for p in pairs])
    cos = np.array([similarity_matrix(ea[i:i + 1], eb[i:i + 1])[0, 0] for i in range(len(pairs))],
                   dtype=np.float64)
    golds = np.array([p.gold for p in pairs], dtype=np.float64)
    return StsResult(spearman(cos, golds), cos, golds)


def _encode_ids(encode: Encoder, table: dict[str, str]) -> tuple[list[str], np.ndarray]:
    ids = list(table)
    return ids, encode([table[i] for i in ids])


def evaluate_retrieval(encode: Encoder, rs: RetrievalSet, k: int = 10, gain: str = "linear") -> RankingResult:
    """Mean NDCG@k with every doc in the set as a candidate for every query."""
    qids, qvecs = _encode_ids(encode, rs.queries)
    dids, dvecs = _encode_ids(encode, rs.docs)
    sim = similarity_matrix(qvecs, dvecs)
    per_query, skipped = {}, 0
    for qi, q in enumerate(qids):
        rel = rs.relevant(q)
        if not any(r > 0 for r in rel.values()):
            skipped += 1
            continue
        order = stable_rank_desc(sim[qi])
        per_query[q] = ndcg_at_k([rel.get(dids[j], 0.0) for j in order], k, gain)
    if not per_query:
        raise MetricError("retrieval: no query has a relevant document")
    if skipped:
        log.warning("retrieval: %d queries without relevant docs were skipped", skipped)
    return RankingResult(float(np.mean(list(per_query.values()))), per_query, skipped)


def evaluate_rerank(encode: Encoder, rs: RetrievalSet) -> RankingResult:
    """MAP where each query's candidates are the docs it has qrels for (grade 0 = negative)."""
    qids, qvecs = _encode_ids(encode, rs.queries)
    per_query, skipped = {}, 0
    for qi, q in enumerate(qids):
        cands = rs.relevant(q)
        cand_ids = list(cands)
        if not cand_ids:
            skipped += 1
            continue
        dvecs = encode([rs.docs[d] for d in cand_ids])
        order = stable_rank_desc(similarity_matrix(qvecs[qi:qi + 1], dvecs)[0])
        ap = average_precision([1.0 if cands[cand_ids[j]] > 0 else 0.0 for j in order])
        if ap is None:
            skipped += 1
            continue
        per_query[q] = ap
    if not per_query:
        raise MetricError("rerank: every query lacks relevant candidates")
    if skipped:
        log.warning("rerank: %d queries skipped", skipped)
    return RankingResult(float(np.mean(list(per_query.values()))), per_query, skipped)


@dataclass
class DevTask:
    """A named dev task; ``kind`` is ``sts``, ``retrieval`` or ``rerank``."""

    name: str
    kind: str
    data: object

    def score(self, encode: Encoder) -> float:
        if self.kind == "sts":
            try:
                return 100.0 * evaluate_sts(encode, self.data).spearman
            except MetricError as exc:
                # constant similarities carry no ranking signal
                log.warning("%s: %s; scoring 0", self.name, exc)
                return 0.0
        if self.kind == "retrieval":
            return 100.0 * evaluate_retrieval(encode, self.data).score
        if self.kind == "rerank":
            return 100.0 * evaluate_rerank(encode, self.data).score
        raise MetricError(f"unknown task kind {self.kind!r}")
