"""Sentence embeddings pooled from a forward trace.

Hidden-state baselines pool the residual stream. Value aggregation (``va``)
mean-pools the per-token value vectors over tokens and a layer set. The
weighted variants take the last token's attention head outputs (``wva_*``),
or the last token's attention sublayer output after the output projection
(``aligned_wva``). All per-layer summaries are averaged over the layer set.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus_io.tokenizer import TokenizerSpec, tokenize
from .errors import InputError, SpecError, TraceError
from .numerics import F32, F64
from .transformer import ForwardTrace, Model, TraceOptions, forward

METHODS = ("hs_mean", "last_token", "weighted_mean", "echo_mean", "va", "wva_last", "wva_prompted",
           "aligned_wva")


@dataclass(frozen=True)
class LayerSet:
    kind: str = "full"
    layers: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in ("full", "half", "explicit"):
            raise SpecError(f"unknown layer set kind {self.kind!r}")
        if self.kind == "explicit":
            if not self.layers:
                raise SpecError("explicit layer set is empty")
            object.__setattr__(self, "layers", tuple(sorted(set(int(l) for l in self.layers))))

    @classmethod
    def full(cls) -> "LayerSet":
        return cls("full")

    @classmethod
    def half(cls) -> "LayerSet":
        return cls("half")

    @classmethod
    def explicit(cls, layers: Sequence[int]) -> "LayerSet":
        return cls("explicit", tuple(layers))

    def resolve(self, n_layers: int) -> tuple[int, ...]:
        if self.kind == "full":
            return tuple(range(1, n_layers + 1))
        if self.kind == "half":
            return tuple(range(math.ceil(n_layers / 2), n_layers + 1))
        bad = [l for l in self.layers if not 1 <= l <= n_layers]
        if bad:
            raise SpecError(f"layers {bad} outside 1..{n_layers}")
        return self.layers

    def describe(self) -> str:
        if self.kind == "explicit":
            return "explicit:" + ",".join(map(str, self.layers))
        return self.kind


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    prefix: str = ""
    suffix: str = ""
    echo: bool = False


TEMPLATES = {
    "none": PromptTemplate("none"),
    "prompt_eol": PromptTemplate("prompt_eol", "This sentence: ", " means in one word:"),
    "future_eol": PromptTemplate("future_eol", "Forecasting the subsequent tokens ", " in one word:"),
    "echo": PromptTemplate("echo", echo=True),
}


def get_template(name: str) -> PromptTemplate:
    try:
        return TEMPLATES[name]
    except KeyError:
        raise SpecError(f"unknown template {name!r}; choose from {sorted(TEMPLATES)}") from None


@dataclass(frozen=True)
class PoolSpec:
    method: str
    layer_set: LayerSet = field(default_factory=LayerSet.full)
    template: PromptTemplate = TEMPLATES["none"]

    def __post_init__(self):
        if self.method not in METHODS:
            raise SpecError(f"unknown pooling method {self.method!r}; choose from {METHODS}")
        if self.method == "echo_mean" and not self.template.echo:
            raise SpecError("echo_mean requires the echo template")
        if self.method == "wva_last" and self.template.name != "none":
            raise SpecError("wva_last is the prompt-free variant; use wva_prompted with a template")

    def to_dict(self) -> dict:
        return {"method": self.method, "layers": self.layer_set.describe(),
                "template": dataclasses.asdict(self.template)}


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    method: str
    layers: tuple[int, ...]
    spec: PoolSpec | None = None
    model_id: str | None = None

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    content_span: tuple[int, int]   # character span of the pooled copy of the sentence


def normalize_sentence(sentence: str) -> str:
    """Trim and collapse whitespace runs to single spaces."""
    return " ".join(sentence.split())


def render_prompt(template: PromptTemplate, sentence: str) -> RenderedPrompt:
    s = normalize_sentence(sentence)
    if not s:
        raise InputError("sentence is empty after trimming")
    if template.echo:
        text = f"{s} {s}"
        return RenderedPrompt(text, (len(s) + 1, len(text)))
    text = f"{template.prefix}{s}{template.suffix}"
    start = len(template.prefix)
    return RenderedPrompt(text, (start, start + len(s)))


def _as_layers(trace: ForwardTrace, layer_set) -> tuple[int, ...]:
    if isinstance(layer_set, LayerSet):
        layers = layer_set.resolve(trace.n_layers)
    else:
        layers = tuple(layer_set)
    if not layers:
        raise SpecError("empty layer set")
    bad = [l for l in layers if not 1 <= l <= trace.n_layers]
    if bad:
        raise SpecError(f"layers {bad} outside 1..{trace.n_layers}")
    return layers


def _layer_mean(per_layer: list[np.ndarray]) -> np.ndarray:
    acc = np.zeros_like(per_layer[0], dtype=F64)
    for v in per_layer:
        acc += v
    return (acc / len(per_layer)).astype(F32)


def positional_weights(n: int) -> np.ndarray:
    """Linear position weights ``w_n = n / sum(1..N)`` for 1-based positions."""
    pos = np.arange(1, n + 1, dtype=F64)
    return pos / pos.sum()


def pool_hidden(trace: ForwardTrace, layer_set=None, weighting: str = "mean",
                span: tuple[int, int] | None = None) -> Embedding:
    """Pool residual-stream hidden states.

    ``mean`` averages tokens (optionally only ``span``, a half-open token
    range) then layers; ``last`` returns the final-layer state of the last
    token; ``positional`` is the linearly position-weighted mean of the final
    layer. The layer set is ignored for ``last`` and ``positional``.
    """
    trace.require("hidden")
    L, n = trace.n_layers, trace.n_tokens
    if weighting == "last":
        return Embedding(trace.hidden_at(L)[n - 1].copy(), "last_token", (L,))
    if weighting == "positional":
        w = positional_weights(n)
        vec = (w @ trace.hidden_at(L).astype(F64)).astype(F32)
        return Embedding(vec, "weighted_mean", (L,))
    if weighting != "mean":
        raise SpecError(f"unknown hidden-state weighting {weighting!r}")
    layers = _as_layers(trace, layer_set if layer_set is not None else LayerSet.full())
    lo, hi = span if span is not None else (0, n)
    if not 0 <= lo < hi <= n:
        raise SpecError(f"token span {span} invalid for {n} tokens")
    per_layer = [trace.hidden_at(l)[lo:hi].astype(F64).mean(axis=0) for l in layers]
    return Embedding(_layer_mean(per_layer), "hs_mean", layers)


def token_values(trace: ForwardTrace, layer: int) -> np.ndarray:
    """``(N, n_kv*d_head)``: each row concatenates the distinct value heads of one token."""
    v = trace.values_at(layer)            # (n_kv, N, d_head)
    return v.transpose(1, 0, 2).reshape(trace.n_tokens, -1)


def pool_va(trace: ForwardTrace, layer_set) -> Embedding:
    trace.require("values")
    layers = _as_layers(trace, layer_set)
    per_layer = [token_values(trace, l).astype(F64).mean(axis=0) for l in layers]
    return Embedding(_layer_mean(per_layer), "va", layers)


def last_token_head_outputs(trace: ForwardTrace, layer: int) -> np.ndarray:
    """Concatenated head outputs of the last token at ``layer`` (length ``H*d_head``)."""
    if trace.head_out is not None:
        return trace.head_out_at(layer)[:, -1, :].reshape(-1)
    if trace.attn is None or trace.values is None:
        raise TraceError("WVA needs head_out, or attn weights plus values, in the trace")
    alpha = trace.attn_at(layer)[:, -1, :].astype(F64)     # (H, N)
    vals = trace.values_at(layer).astype(F64)               # (n_kv, N, d_head)
    n_heads, n_kv = alpha.shape[0], vals.shape[0]
    z = [alpha[h] @ vals[h * n_kv // n_heads] for h in range(n_heads)]
    return np.concatenate(z).astype(F32)


def pool_wva(trace: ForwardTrace, layer_set) -> Embedding:
    layers = _as_layers(trace, layer_set)
    per_layer = [last_token_head_outputs(trace, l).astype(F64) for l in layers]
    return Embedding(_layer_mean(per_layer), "wva", layers)


def pool_aligned_wva(trace: ForwardTrace, layer_set) -> Embedding:
    trace.require("attn_out")
    layers = _as_layers(trace, layer_set)
    per_layer = [trace.attn_out_at(l)[-1].astype(F64) for l in layers]
    return Embedding(_layer_mean(per_layer), "aligned_wva", layers)


_TRACE_NEEDS = {
    "hs_mean": TraceOptions(record_hidden=True),
    "last_token": TraceOptions(record_hidden=True),
    "weighted_mean": TraceOptions(record_hidden=True),
    "echo_mean": TraceOptions(record_hidden=True),
    "va": TraceOptions(record_values=True),
    "wva_last": TraceOptions(record_head_outputs=True),
    "wva_prompted": TraceOptions(record_head_outputs=True),
    "aligned_wva": TraceOptions(record_attn_out=True),
}


def trace_options_for(method: str) -> TraceOptions:
    return _TRACE_NEEDS[method]


def pool_trace(trace: ForwardTrace, spec: PoolSpec, span: tuple[int, int] | None = None) -> np.ndarray:
    m = spec.method
    if m == "hs_mean":
        return pool_hidden(trace, spec.layer_set, "mean").vector
    if m == "last_token":
        return pool_hidden(trace, None, "last").vector
    if m == "weighted_mean":
        return pool_hidden(trace, None, "positional").vector
    if m == "echo_mean":
        return pool_hidden(trace, LayerSet.explicit([trace.n_layers]), "mean", span=span).vector
    if m == "va":
        return pool_va(trace, spec.layer_set).vector
    if m in ("wva_last", "wva_prompted"):
        return pool_wva(trace, spec.layer_set).vector
    return pool_aligned_wva(trace, spec.layer_set).vector


def prepare_tokens(model: Model, tokenizer: TokenizerSpec, sentence: str,
                   spec: PoolSpec) -> tuple[list[int], tuple[int, int]]:
    """Render, tokenize and length-check; returns ids and the pooled token span."""
    rendered = render_prompt(spec.template, sentence)
    ids = tokenize(tokenizer, rendered.text)
    start, end = rendered.content_span
    span = (len(tokenize(tokenizer, rendered.text[:start])), len(tokenize(tokenizer, rendered.text[:end])))
    if not ids:
        raise InputError("sentence produced no tokens")
    if len(ids) > model.config.max_seq_len:
        raise InputError(f"{len(ids)} tokens after applying template {spec.template.name!r} "
                         f"exceed max_seq_len {model.config.max_seq_len}")
    return ids, span


def embed(model: Model, tokenizer: TokenizerSpec, sentence: str, spec: PoolSpec) -> Embedding:
    ids, span = prepare_tokens(model, tokenizer, sentence, spec)
    trace = forward(model.weights, model.config, ids, trace_options_for(spec.method))
    vec = pool_trace(trace, spec, span)
    if spec.method in ("last_token", "weighted_mean", "echo_mean"):
        layers = (model.config.n_layers,)
    else:
        layers = spec.layer_set.resolve(model.config.n_layers)
    return Embedding(vec, spec.method, layers, spec, model.model_id)


def embed_many(model: Model, tokenizer: TokenizerSpec, sentences: Sequence[str], spec: PoolSpec,
               threads: int = 1) -> np.ndarray:
    """Stack of embeddings in input order; ``threads > 1`` fans out across sentences."""
    def one(s: str) -> np.ndarray:
        return embed(model, tokenizer, s, spec).vector

    if threads <= 1 or len(sentences) < 2:
        rows = [one(s) for s in sentences]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            rows = list(ex.map(one, sentences))
    return np.stack(rows) if rows else np.zeros((0, embedding_dim(model, spec)), dtype=F32)


def embedding_dim(model: Model, spec: PoolSpec) -> int:
    c = model.config
    if spec.method == "va":
        return c.n_kv_heads * c.d_head
    if spec.method in ("wva_last", "wva_prompted"):
        return c.n_heads * c.d_head
    return c.d_model
