"""Single-layer sweeps and the default layer-set selection policy."""

from __future__ import annotations

import csv
import io
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .corpus_io.tokenizer import TokenizerSpec
from .errors import SelectionError, SpecError
from .evaluation import DevTask, Encoder
from .numerics import F32
from .pooling import LayerSet, PoolSpec, pool_hidden, pool_va, prepare_tokens, trace_options_for
from .transformer import Model, forward

# Published default sets for the two studied backbones.
PRESETS: dict[str, tuple[int, ...]] = {
    "llama2_7b": tuple(range(20, 28)),
    "qwen3_8b": (26, 27, 29, 30, 31),
}


def preset(name: str) -> LayerSet:
    try:
        return LayerSet.explicit(PRESETS[name])
    except KeyError:
        raise SpecError(f"unknown layer preset {name!r}; known: {sorted(PRESETS)}") from None


def parse_layer_set(text: str) -> LayerSet:
    """``full``, ``half``, ``explicit:1,2,3`` or ``preset:<name>``."""
    text = text.strip()
    if text in ("full", "half"):
        return LayerSet(text)
    kind, _, rest = text.partition(":")
    if kind == "preset":
        return preset(rest)
    if kind == "explicit":
        try:
            return LayerSet.explicit([int(x) for x in rest.split(",") if x.strip()])
        except ValueError:
            raise SpecError(f"bad explicit layer list {rest!r}") from None
    raise SpecError(f"cannot parse layer set {text!r}")


@dataclass(frozen=True)
class LayerScoreMatrix:
    layers: tuple[int, ...]
    tasks: tuple[str, ...]
    scores: np.ndarray          # (len(layers), len(tasks)), higher is better

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.shape != (len(self.layers), len(self.tasks)):
            raise SpecError(f"score matrix shape {s.shape} does not match "
                            f"{len(self.layers)} layers x {len(self.tasks)} tasks")
        if not np.all(np.isfinite(s)):
            raise SpecError("score matrix has non-finite entries")
        object.__setattr__(self, "scores", s)

    def column(self, task: str) -> np.ndarray:
        try:
            return self.scores[:, self.tasks.index(task)]
        except ValueError:
            raise SelectionError(f"task {task!r} not in score matrix {self.tasks}") from None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "task", "score"])
        for i, l in enumerate(self.layers):
            for j, t in enumerate(self.tasks):
                w.writerow([l, t, repr(float(self.scores[i, j]))])
        return buf.getvalue()


@dataclass(frozen=True)
class SelectionPolicy:
    anchor_task: str = "retrieval"
    delta: float = 2.0
    min_layers: int = 3
    max_layers: int = 8
    veto_fraction: float = 0.1

    def __post_init__(self):
        if not self.delta >= 0:
            raise SpecError("delta must be >= 0")
        if not 1 <= self.min_layers <= self.max_layers:
            raise SpecError("need 1 <= min_layers <= max_layers")
        if not 0 <= self.veto_fraction <= 1:
            raise SpecError("veto_fraction must be in [0, 1]")


def vetoed_layers(m: LayerScoreMatrix, policy: SelectionPolicy) -> set[int]:
    """Layers in the bottom ``veto_fraction`` on at least half of the non-anchor tasks.

    "Bottom" on a task means fewer than ``ceil(veto_fraction * n_layers)``
    layers score strictly lower and the layer is not tied with the task
    maximum, so a flat task vetoes nothing.
    """
    others = [t for t in m.tasks if t != policy.anchor_task]
    k = math.ceil(policy.veto_fraction * len(m.layers))
    if not others or k == 0:
        return set()
    strikes = dict.fromkeys(m.layers, 0)
    for t in others:
        col = m.column(t)
        top = col.max()
        for i, l in enumerate(m.layers):
            if col[i] < top and np.sum(col < col[i]) < k:
                strikes[l] += 1
    return {l for l, s in strikes.items() if 2 * s >= len(others)}


def candidate_layers(m: LayerScoreMatrix, policy: SelectionPolicy) -> list[int]:
    """Layers within ``delta`` of the best anchor score (before the veto)."""
    anchor = m.column(policy.anchor_task)
    best = anchor.max()
    return [l for i, l in enumerate(m.layers) if anchor[i] >= best - policy.delta]


def select_layers(m: LayerScoreMatrix, policy: SelectionPolicy | None = None) -> LayerSet:
    policy = policy or SelectionPolicy()
    if policy.min_layers > len(m.layers):
        raise SelectionError(f"min_layers {policy.min_layers} exceeds the {len(m.layers)} swept layers")
    anchor = dict(zip(m.layers, m.column(policy.anchor_task)))
    vetoed = vetoed_layers(m, policy)
    chosen = [l for l in candidate_layers(m, policy) if l not in vetoed]
    if not chosen:
        raise SelectionError("no layer survives the veto; try a larger delta or a smaller veto_fraction")

    def by_anchor(ls):
        return sorted(ls, key=lambda l: (-anchor[l], l))

    chosen = by_anchor(chosen)[:policy.max_layers]
    if len(chosen) < policy.min_layers:
        rest = by_anchor([l for l in m.layers if l not in chosen and l not in vetoed])
        rest += by_anchor([l for l in m.layers if l not in chosen and l in vetoed])
        chosen += rest[:policy.min_layers - len(chosen)]
    return LayerSet.explicit(chosen)


LayerEncoder = Callable[[int], Encoder]


def sweep_layers(layers: Sequence[int], tasks: Sequence[DevTask], encoder_for_layer: LayerEncoder,
                 threads: int = 1) -> LayerScoreMatrix:
    """Score every task with single-layer embeddings ``S={l}`` for each layer."""
    def row(l: int) -> list[float]:
        enc = encoder_for_layer(l)
        return [t.score(enc) for t in tasks]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            rows = list(ex.map(row, layers))
    else:
        rows = [row(l) for l in layers]
    return LayerScoreMatrix(tuple(layers), tuple(t.name for t in tasks), np.array(rows, dtype=np.float64))


def model_layer_encoder(model: Model, tokenizer: TokenizerSpec, method: str = "va") -> LayerEncoder:
    """Encoder factory with one forward pass per distinct text shared by all layers.

    ``method`` is ``va`` (value aggregation) or ``hs`` (hidden-state mean).
    """
    if method not in ("va", "hs"):
        raise SpecError(f"sweep method must be 'va' or 'hs', got {method!r}")
    pool_method = "va" if method == "va" else "hs_mean"
    spec = PoolSpec(pool_method)
    L = model.config.n_layers
    cache: dict[str, np.ndarray] = {}
    lock = threading.Lock()

    def all_layers(text: str) -> np.ndarray:
        with lock:
            hit = cache.get(text)
        if hit is not None:
            return hit
        ids, _ = prepare_tokens(model, tokenizer, text, spec)
        tr = forward(model.weights, model.config, ids, trace_options_for(pool_method))
        pool = pool_va if method == "va" else (lambda t, s: pool_hidden(t, s, "mean"))
        out = np.stack([pool(tr, [l]).vector for l in range(1, L + 1)]).astype(F32)
        with lock:
            cache[text] = out
        return out

    def for_layer(layer: int) -> Encoder:
        if not 1 <= layer <= L:
            raise SpecError(f"layer {layer} outside 1..{L}")
        return lambda texts: np.stack([all_layers(t)[layer - 1] for t in texts])

    return for_layer
