"""Training-free probes: prefix/suffix segment matching and logit-lens continuation ranking."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .metrics import mean_reciprocal_rank, rank_of, recall_at_k, similarity_matrix
from .numerics import F32, F64, stable_rank_desc
from .pooling import pool_hidden, pool_va
from .transformer import Model, TraceOptions, forward, forward_prefix_restricted, unembed_scores

log = logging.getLogger(__name__)

# token ids -> (n_layers, dim) array, row i holding layer i+1
LayerwiseEmbedder = Callable[[Sequence[int]], np.ndarray]


@dataclass(frozen=True)
class SegmentProbeConfig:
    split_lo: float = 0.25
    split_hi: float = 0.75
    seed: int = 0
    k_list: tuple[int, ...] = (1, 5, 10)
    max_tokens: int = 512
    min_tokens: int = 8

    def __post_init__(self):
        if not 0 < self.split_lo < self.split_hi < 1:
            raise ConfigError("need 0 < split_lo < split_hi < 1")
        if not self.k_list or min(self.k_list) < 1:
            raise ConfigError("k_list must be non-empty with every k >= 1")
        if self.min_tokens < 2 or self.max_tokens < self.min_tokens:
            raise ConfigError("need 2 <= min_tokens <= max_tokens")


@dataclass(frozen=True)
class LogitLensConfig:
    prefix_lo: int = 50
    prefix_hi: int = 150
    offsets: tuple[int, ...] = (1, 2, 3)
    truncate_tokens: int = 2000
    temperature: float = 1.0
    top_n: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.prefix_lo <= self.prefix_hi:
            raise ConfigError("need 1 <= prefix_lo <= prefix_hi")
        if not self.offsets or min(self.offsets) < 1:
            raise ConfigError("offsets must be non-empty with every offset >= 1")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if self.top_n < 1:
            raise ConfigError("top_n must be >= 1")


def split_window(n: int, cfg: SegmentProbeConfig) -> tuple[int, int]:
    """Inclusive range of admissible prefix lengths for an ``n``-token document."""
    lo = max(math.ceil(cfg.split_lo * n), 1)
    hi = min(math.floor(cfg.split_hi * n), n - 1)
    return lo, hi


def sample_split(n: int, cfg: SegmentProbeConfig, rng: np.random.Generator) -> Optional[int]:
    """Uniform prefix length in the split window, or None when the document must be skipped."""
    if n < cfg.min_tokens:
        log.info("skipping document of %d tokens (< min_tokens %d)", n, cfg.min_tokens)
        return None
    lo, hi = split_window(n, cfg)
    if lo > hi:
        log.info("skipping document of %d tokens: empty split window", n)
        return None
    return int(rng.integers(lo, hi + 1))


@dataclass
class SegmentProbeResult:
    layers: tuple[int, ...]
    k_list: tuple[int, ...]
    recall: np.ndarray                  # (len(layers), len(k_list))
    n_docs: int
    n_skipped: int
    splits: list[int] = field(default_factory=list)

    def table(self) -> dict[int, dict[int, float]]:
        return {l: {k: float(self.recall[i, j]) for j, k in enumerate(self.k_list)}
                for i, l in enumerate(self.layers)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "k", "recall"])
        for i, l in enumerate(self.layers):
            for j, k in enumerate(self.k_list):
                w.writerow([l, k, repr(float(self.recall[i, j]))])
        return buf.getvalue()


def layerwise_mean_embedder(model: Model, method: str = "va") -> LayerwiseEmbedder:
    """Single-layer mean pooling at every layer 1..L from one forward pass."""
    if method not in ("va", "hs"):
        raise ConfigError(f"probe method must be 'va' or 'hs', got {method!r}")
    opts = TraceOptions(record_values=True) if method == "va" else TraceOptions(record_hidden=True)
    L = model.config.n_layers

    def run(ids: Sequence[int]) -> np.ndarray:
        tr = forward(model.weights, model.config, ids, opts)
        if method == "va":
            rows = [pool_va(tr, [l]).vector for l in range(1, L + 1)]
        else:
            rows = [pool_hidden(tr, [l], "mean").vector for l in range(1, L + 1)]
        return np.stack(rows).astype(F32)

    return run


def _map(fn, items, threads: int) -> list:
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def segment_match_probe(documents: Sequence[Sequence[int]], cfg: SegmentProbeConfig,
                        embedder: LayerwiseEmbedder, threads: int = 1) -> SegmentProbeResult:
    """Recall@k of retrieving each document's suffix from its prefix, per layer.

    Every suffix in the corpus is a candidate for every prefix; prefix ``i``
    is correct only when suffix ``i`` is retrieved.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    pairs, splits, skipped = [], [], 0
    for doc in documents:
        ids = list(doc)[:cfg.max_tokens]
        t = sample_split(len(ids), cfg, rng)
        if t is None:
            skipped += 1
            continue
        pairs.append((ids[:t], ids[t:]))
        splits.append(t)
    if len(pairs) < 2:
        raise InputError(f"segment matching needs >= 2 usable documents, got {len(pairs)} "
                         f"({skipped} skipped)")

    pre = _map(embedder, [p for p, _ in pairs], threads)
    suf = _map(embedder, [s for _, s in pairs], threads)
    pre = np.stack(pre)             # (M, n_layers, dim)
    suf = np.stack(suf)
    m, n_layers = pre.shape[0], pre.shape[1]
    recall = np.zeros((n_layers, len(cfg.k_list)), dtype=F64)
    for li in range(n_layers):
        sim = similarity_matrix(pre[:, li, :], suf[:, li, :])
        for i in range(m):
            ranking = stable_rank_desc(sim[i])
            for j, k in enumerate(cfg.k_list):
                recall[li, j] += recall_at_k(ranking, i, k)
    recall /= m
    return SegmentProbeResult(tuple(range(1, n_layers + 1)), tuple(cfg.k_list), recall, m, skipped, splits)


@dataclass
class LogitLensResult:
    layers: tuple[int, ...]
    offsets: tuple[int, ...]
    mrr: np.ndarray                     # (len(layers), len(offsets))
    n_instances: int
    n_skipped: int
    prefix_lengths: list[int] = field(default_factory=list)

    @property
    def final(self) -> dict[int, float]:
        """Best layer per offset."""
        return {k: float(self.mrr[:, j].max()) for j, k in enumerate(self.offsets)}

    def best_layer(self) -> dict[int, int]:
        return {k: self.layers[int(np.argmax(self.mrr[:, j]))] for j, k in enumerate(self.offsets)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "offset", "mrr"])
        for i, l in enumerate(self.layers):
            for j, k in enumerate(self.offsets):
                w.writerow([l, k, repr(float(self.mrr[i, j]))])
        return buf.getvalue()


def _lens_instance(model: Model, ids: list[int], t: int, cfg: LogitLensConfig) -> np.ndarray:
    """Ranks of the true token, shape ``(L, len(offsets))``."""
    max_off = max(cfg.offsets)
    seq = ids[:t + max_off]
    tr = forward_prefix_restricted(model.weights, model.config, seq, t, TraceOptions(record_attn_out=True))
    L = model.config.n_layers
    ranks = np.zeros((L, len(cfg.offsets)), dtype=np.int64)
    for j, k in enumerate(cfg.offsets):
        pos = t + k - 1             # 0-based index of position t+k
        true_tok = ids[t + k]       # token x_{t+k+1}
        for l in range(1, L + 1):
            scores = unembed_scores(model.weights, tr.attn_out_at(l)[pos], cfg.temperature)
            ranks[l - 1, j] = rank_of(scores, true_tok)
    return ranks


def logit_lens_probe(model: Model, documents: Sequence[Sequence[int]], cfg: LogitLensConfig,
                     threads: int = 1) -> LogitLensResult:
    """MRR@top_n of continuation tokens read through the unembedding from attention outputs.

    For a sampled prefix length ``t``, position ``t+k`` attends to the prefix
    only; its attention sublayer output at layer ``l`` is unembedded and the
    rank of the token at position ``t+k+1`` is recorded.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    max_off = max(cfg.offsets)
    jobs, skipped, lengths = [], 0, []
    for doc in documents:
        ids = list(doc)[:cfg.truncate_tokens]
        lengths.append(len(ids))
        hi = min(cfg.prefix_hi, len(ids) - max_off - 1, model.config.max_seq_len - max_off)
        if hi < cfg.prefix_lo:
            skipped += 1
            continue
        jobs.append((ids, int(rng.integers(cfg.prefix_lo, hi + 1))))
    if not jobs:
        stats = (f"{len(lengths)} documents, lengths {min(lengths)}..{max(lengths)}" if lengths
                 else "empty corpus")
        raise InputError(f"no usable logit-lens instance: need >= {cfg.prefix_lo + max_off + 1} tokens; {stats}")

    ranks = _map(lambda job: _lens_instance(model, job[0], job[1], cfg), jobs, threads)
    ranks = np.stack(ranks)         # (M, L, n_off)
    L = model.config.n_layers
    mrr = np.zeros((L, len(cfg.offsets)), dtype=F64)
    for l in range(L):
        for j in range(len(cfg.offsets)):
            mrr[l, j] = mean_reciprocal_rank(ranks[:, l, j].tolist(), cfg.top_n)
    return LogitLensResult(tuple(range(1, L + 1)), tuple(cfg.offsets), mrr, len(jobs), skipped,
                           [t for _, t in jobs])
