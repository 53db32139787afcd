"""Instrumented pre-norm decoder-only transformer.

Layer numbering follows the residual stream: ``hidden[0]`` is the embedding
output and transformer blocks are layers ``1..L``. Per-layer trace arrays
(values, attention, head outputs, sublayer outputs) only exist for blocks,
so they are stored with a leading axis of length ``L`` and read through the
1-based accessors on :class:`ForwardTrace`.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError, TraceError
from .numerics import F32, F64, MASKED, layer_norm, matmul, rms_norm, rope_apply, softmax_rows

RNG_ALGORITHM = "numpy.random.PCG64/standard_normal"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    d_head: int
    d_ff: int
    vocab_size: int
    max_seq_len: int = 256
    norm_kind: str = "rms"
    activation: str = "gelu"
    pos_kind: str = "rope"
    rope_theta: float = 10000.0
    eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d_model", "n_layers", "n_heads", "n_kv_heads", "d_head", "d_ff", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(
                f"d_model ({self.d_model}) must equal n_heads*d_head ({self.n_heads}*{self.d_head})")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_kv_heads ({self.n_kv_heads}) must divide n_heads ({self.n_heads})")
        if self.d_ff < self.d_model:
            raise ConfigError("d_ff must be >= d_model")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.norm_kind not in ("rms", "layernorm"):
            raise ConfigError(f"unknown norm_kind {self.norm_kind!r}")
        if self.activation not in ("gelu", "silu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.pos_kind not in ("rope", "learned"):
            raise ConfigError(f"unknown pos_kind {self.pos_kind!r}")
        if self.pos_kind == "rope" and self.d_head % 2:
            raise ConfigError(f"rotary embedding needs an even d_head, got {self.d_head}")
        if not self.eps > 0:
            raise ConfigError("eps must be positive")

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.d_head

    def kv_group(self, head: int) -> int:
        """KV head read by query head ``head`` (0-based, contiguous grouping)."""
        return head * self.n_kv_heads // self.n_heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model_config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class LayerWeights:
    wq: np.ndarray    # d x H*d_head
    wk: np.ndarray    # d x n_kv*d_head
    wv: np.ndarray    # d x n_kv*d_head
    wo: np.ndarray    # H*d_head x d
    w1: np.ndarray    # d x d_ff
    w2: np.ndarray    # d_ff x d
    attn_norm: np.ndarray
    ffn_norm: np.ndarray


@dataclass(frozen=True)
class ModelWeights:
    token_embedding: np.ndarray
    layers: tuple
    final_norm: np.ndarray
    unembed: np.ndarray
    learned_pos: Optional[np.ndarray] = None

    def tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """Yield ``(archive name, array)`` pairs in canonical order."""
        yield "embed.tokens", self.token_embedding
        if self.learned_pos is not None:
            yield "embed.pos", self.learned_pos
        for l, lw in enumerate(self.layers, start=1):
            yield f"layers.{l}.attn.norm", lw.attn_norm
            yield f"layers.{l}.attn.wq", lw.wq
            yield f"layers.{l}.attn.wk", lw.wk
            yield f"layers.{l}.attn.wv", lw.wv
            yield f"layers.{l}.attn.wo", lw.wo
            yield f"layers.{l}.ffn.norm", lw.ffn_norm
            yield f"layers.{l}.ffn.w1", lw.w1
            yield f"layers.{l}.ffn.w2", lw.w2
        yield "final.norm", self.final_norm
        yield "unembed", self.unembed

    @classmethod
    def from_tensors(cls, tensors: dict, config: ModelConfig) -> "ModelWeights":
        layers = []
        for l in range(1, config.n_layers + 1):
            p = f"layers.{l}."
            layers.append(LayerWeights(
                wq=tensors[p + "attn.wq"], wk=tensors[p + "attn.wk"], wv=tensors[p + "attn.wv"],
                wo=tensors[p + "attn.wo"], w1=tensors[p + "ffn.w1"], w2=tensors[p + "ffn.w2"],
                attn_norm=tensors[p + "attn.norm"], ffn_norm=tensors[p + "ffn.norm"],
            ))
        w = cls(token_embedding=tensors["embed.tokens"], layers=tuple(layers),
                final_norm=tensors["final.norm"], unembed=tensors["unembed"],
                learned_pos=tensors.get("embed.pos"))
        check_weights(w, config)
        return w


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, c = config.d_model, config
    shapes = {"embed.tokens": (c.vocab_size, d)}
    if c.pos_kind == "learned":
        shapes["embed.pos"] = (c.max_seq_len, d)
    for l in range(1, c.n_layers + 1):
        p = f"layers.{l}."
        shapes.update({
            p + "attn.norm": (d,),
            p + "attn.wq": (d, c.n_heads * c.d_head),
            p + "attn.wk": (d, c.kv_dim),
            p + "attn.wv": (d, c.kv_dim),
            p + "attn.wo": (c.n_heads * c.d_head, d),
            p + "ffn.norm": (d,),
            p + "ffn.w1": (d, c.d_ff),
            p + "ffn.w2": (c.d_ff, d),
        })
    shapes["final.norm"] = (d,)
    shapes["unembed"] = (c.vocab_size, d)
    return shapes


def check_weights(weights: ModelWeights, config: ModelConfig) -> None:
    if len(weights.layers) != config.n_layers:
        raise ConfigError(f"weights have {len(weights.layers)} layers, config says {config.n_layers}")
    expected = expected_shapes(config)
    got = dict(weights.tensors())
    if set(got) != set(expected):
        raise ConfigError(f"tensor set mismatch: missing {sorted(set(expected) - set(got))}, "
                          f"extra {sorted(set(got) - set(expected))}")
    for name, arr in got.items():
        if tuple(arr.shape) != expected[name]:
            raise ConfigError(f"{name}: shape {tuple(arr.shape)}, expected {expected[name]}")
        if arr.dtype != F32:
            raise ConfigError(f"{name}: dtype {arr.dtype}, expected float32")
        if not np.all(np.isfinite(arr)):
            raise ConfigError(f"{name}: non-finite entries")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=F32)
    a.setflags(write=False)
    return a


def init_random(config: ModelConfig, seed: int) -> ModelWeights:
    """Seeded Gaussian weights with std ``1/sqrt(d_model)``; norm gains are ones.

    Tensors are drawn in canonical archive order from a single PCG64 stream,
    so a (config, seed) pair always yields bit-identical weights.
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    scale = 1.0 / math.sqrt(config.d_model)
    drawn = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith("norm"):
            drawn[name] = _frozen(np.ones(shape, dtype=F32))
        else:
            drawn[name] = _frozen(rng.standard_normal(shape, dtype=F64) * scale)
    return ModelWeights.from_tensors(drawn, config)


@dataclass(frozen=True)
class Model:
    """Weights, their config and a stable identifier used in caches and reports."""

    config: ModelConfig
    weights: ModelWeights
    model_id: str

    @classmethod
    def random(cls, config: ModelConfig, seed: int, model_id: str | None = None) -> "Model":
        mid = model_id or (f"toy-d{config.d_model}-L{config.n_layers}-H{config.n_heads}"
                           f"-kv{config.n_kv_heads}-s{seed}")
        return cls(config, init_random(config, seed), mid)


@dataclass(frozen=True)
class TraceOptions:
    record_hidden: bool = False
    record_values: bool = False
    record_attn_weights: bool = False
    record_head_outputs: bool = False
    record_attn_out: bool = False
    record_ffn_out: bool = False
    record_logits: bool = False

    def __post_init__(self):
        if not any(dataclasses.astuple(self)):
            raise ConfigError("TraceOptions: at least one record_* flag must be set")

    @classmethod
    def everything(cls) -> "TraceOptions":
        return cls(*([True] * len(dataclasses.fields(cls))))


@dataclass
class ForwardTrace:
    n_tokens: int
    n_layers: int
    hidden: Optional[np.ndarray] = None      # (L+1, N, d)
    values: Optional[np.ndarray] = None      # (L, n_kv, N, d_head)
    attn: Optional[np.ndarray] = None        # (L, H, N, N)
    head_out: Optional[np.ndarray] = None    # (L, H, N, d_head)
    attn_out: Optional[np.ndarray] = None    # (L, N, d)
    ffn_out: Optional[np.ndarray] = None     # (L, N, d)
    logits: Optional[np.ndarray] = None      # (N, vocab)
    mask: Optional[np.ndarray] = field(default=None, repr=False)

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise TraceError(f"trace is missing fields {missing}; re-run forward with them recorded")

    def _slot(self, layer: int) -> int:
        if not 1 <= layer <= self.n_layers:
            raise TraceError(f"layer {layer} outside 1..{self.n_layers}")
        return layer - 1

    def hidden_at(self, layer: int) -> np.ndarray:
        self.require("hidden")
        if not 0 <= layer <= self.n_layers:
            raise TraceError(f"layer {layer} outside 0..{self.n_layers}")
        return self.hidden[layer]

    def values_at(self, layer: int) -> np.ndarray:
        self.require("values")
        return self.values[self._slot(layer)]

    def attn_at(self, layer: int) -> np.ndarray:
        self.require("attn")
        return self.attn[self._slot(layer)]

    def head_out_at(self, layer: int) -> np.ndarray:
        self.require("head_out")
        return self.head_out[self._slot(layer)]

    def attn_out_at(self, layer: int) -> np.ndarray:
        self.require("attn_out")
        return self.attn_out[self._slot(layer)]

    def ffn_out_at(self, layer: int) -> np.ndarray:
        self.require("ffn_out")
        return self.ffn_out[self._slot(layer)]


def causal_mask(n: int) -> np.ndarray:
    """Boolean ``allowed[n, j]``: query n may read key j iff j <= n."""
    return np.tril(np.ones((n, n), dtype=bool))


def prefix_mask(n: int, prefix_len: int) -> np.ndarray:
    """Causal inside the prefix; every later query reads the prefix keys only."""
    if not 1 <= prefix_len < n:
        raise InputError(f"prefix length {prefix_len} must satisfy 1 <= t < N={n}")
    allowed = causal_mask(n)
    allowed[prefix_len:, :] = False
    allowed[prefix_len:, :prefix_len] = True
    return allowed


def _norm(config: ModelConfig, x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    if config.norm_kind == "rms":
        return rms_norm(x, gain, config.eps)
    return layer_norm(x, gain, config.eps)


def _activate(config: ModelConfig, x: np.ndarray) -> np.ndarray:
    x64 = x.astype(F64)
    if config.activation == "gelu":
        # tanh approximation
        y = 0.5 * x64 * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x64 + 0.044715 * x64 ** 3)))
    else:
        y = x64 / (1.0 + np.exp(-x64))
    return y.astype(F32)


def _check_tokens(config: ModelConfig, tokens: Sequence[int]) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64).ravel()
    if ids.size < 1:
        raise InputError("empty token sequence")
    if ids.size > config.max_seq_len:
        raise InputError(f"sequence of {ids.size} tokens exceeds max_seq_len {config.max_seq_len}")
    bad = ids[(ids < 0) | (ids >= config.vocab_size)]
    if bad.size:
        raise InputError(f"token id {int(bad[0])} outside vocabulary of size {config.vocab_size}")
    return ids


def forward(weights: ModelWeights, config: ModelConfig, tokens: Sequence[int],
            opts: TraceOptions | None = None, mask: np.ndarray | None = None) -> ForwardTrace:
    """Run the model over ``tokens`` and record the signals selected in ``opts``.

    ``mask`` is a boolean ``(N, N)`` array of allowed (query, key) pairs and
    defaults to causal. Query head ``h`` reads KV head ``h * n_kv // H``.
    """
    opts = opts or TraceOptions.everything()
    ids = _check_tokens(config, tokens)
    n = ids.size
    c = config
    L, H, G, dh = c.n_layers, c.n_heads, c.n_kv_heads, c.d_head
    if mask is None:
        mask = causal_mask(n)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n, n):
        raise InputError(f"mask shape {mask.shape} does not match sequence length {n}")

    tr = ForwardTrace(n_tokens=n, n_layers=L, mask=mask)
    if opts.record_hidden:
        tr.hidden = np.empty((L + 1, n, c.d_model), dtype=F32)
    if opts.record_values:
        tr.values = np.empty((L, G, n, dh), dtype=F32)
    if opts.record_attn_weights:
        tr.attn = np.empty((L, H, n, n), dtype=F32)
    if opts.record_head_outputs:
        tr.head_out = np.empty((L, H, n, dh), dtype=F32)
    if opts.record_attn_out:
        tr.attn_out = np.empty((L, n, c.d_model), dtype=F32)
    if opts.record_ffn_out:
        tr.ffn_out = np.empty((L, n, c.d_model), dtype=F32)

    x = weights.token_embedding[ids].astype(F32)
    if c.pos_kind == "learned":
        x = (x.astype(F64) + weights.learned_pos[:n].astype(F64)).astype(F32)
    if tr.hidden is not None:
        tr.hidden[0] = x

    positions = np.arange(n)
    scale = 1.0 / math.sqrt(dh)
    for li, lw in enumerate(weights.layers):
        h_in = _norm(c, x, lw.attn_norm)
        q = matmul(h_in, lw.wq).reshape(n, H, dh)
        k = matmul(h_in, lw.wk).reshape(n, G, dh)
        v = matmul(h_in, lw.wv).reshape(n, G, dh)
        if c.pos_kind == "rope":
            q = rope_apply(q, positions, c.rope_theta)
            k = rope_apply(k, positions, c.rope_theta)
        z = np.empty((n, H, dh), dtype=F32)
        for head in range(H):
            g = c.kv_group(head)
            scores = (q[:, head, :].astype(F64) @ k[:, g, :].astype(F64).T) * scale
            scores[~mask] = MASKED
            alpha = softmax_rows(scores)
            z[:, head, :] = (alpha.astype(F64) @ v[:, g, :].astype(F64)).astype(F32)
            if tr.attn is not None:
                tr.attn[li, head] = alpha
        a = matmul(z.reshape(n, H * dh), lw.wo)
        mid = (x.astype(F64) + a.astype(F64)).astype(F32)
        f = matmul(_activate(c, matmul(_norm(c, mid, lw.ffn_norm), lw.w1)), lw.w2)
        x = (x.astype(F64) + a.astype(F64) + f.astype(F64)).astype(F32)

        if tr.values is not None:
            tr.values[li] = v.transpose(1, 0, 2)
        if tr.head_out is not None:
            tr.head_out[li] = z.transpose(1, 0, 2)
        if tr.attn_out is not None:
            tr.attn_out[li] = a
        if tr.ffn_out is not None:
            tr.ffn_out[li] = f
        if tr.hidden is not None:
            tr.hidden[li + 1] = x

    if opts.record_logits:
        final = _norm(c, x, weights.final_norm)
        tr.logits = matmul(final, weights.unembed.T)
    return tr


def forward_prefix_restricted(weights: ModelWeights, config: ModelConfig, tokens: Sequence[int],
                              prefix_len: int, opts: TraceOptions | None = None) -> ForwardTrace:
    """Forward pass where positions after ``prefix_len`` attend to prefix keys only.

    A continuation position does not see itself or other continuation
    positions, so its head output is a weighted sum of prefix values.
    """
    n = len(tokens)
    if not 1 <= prefix_len < n:
        raise InputError(f"prefix length {prefix_len} must satisfy 1 <= t < N={n}")
    return forward(weights, config, tokens, opts, mask=prefix_mask(n, prefix_len))


def unembed_scores(weights: ModelWeights, v, temperature: float = 1.0) -> np.ndarray:
    """Logits ``U v / temperature`` in float64 (used for ranking)."""
    if not temperature > 0:
        raise InputError(f"temperature must be > 0, got {temperature}")
    v = np.asarray(v, dtype=F64).ravel()
    if v.size != weights.unembed.shape[1]:
        raise InputError(f"vector dim {v.size} != d_model {weights.unembed.shape[1]}")
    return (weights.unembed.astype(F64) @ v) / temperature


def logits_from_vector(weights: ModelWeights, v, temperature: float = 1.0) -> np.ndarray:
    """Vocabulary distribution from an internal vector via the unembedding (no final norm)."""
    s = unembed_scores(weights, v, temperature)
    e = np.exp(s - s.max())
    return e / e.sum()
