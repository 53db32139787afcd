"""Whitespace tokenizer with UTF-8 byte fallback.

Word ids occupy ``[0, len(vocab))``; the 256 byte-fallback ids follow, so
byte ``b`` maps to ``len(vocab) + b``. A word missing from the vocabulary is
emitted as one id per UTF-8 byte. When detokenizing, a run of byte ids is
decoded back into a single word.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from ..errors import ConfigError, InputError

N_BYTE_IDS = 256


@dataclass(frozen=True)
class TokenizerSpec:
    vocab: Mapping[str, int]
    byte_offset: int

    def __post_init__(self):
        ids = sorted(self.vocab.values())
        if ids != list(range(len(ids))):
            raise ConfigError("tokenizer vocab ids must be dense in [0, len(vocab))")
        if any(not w or any(ch.isspace() for ch in w) for w in self.vocab):
            raise ConfigError("tokenizer vocab entries must be non-empty and contain no whitespace")
        if self.byte_offset != len(ids):
            raise ConfigError("byte-fallback ids must start right after the vocab ids")
        object.__setattr__(self, "_inverse", {i: w for w, i in self.vocab.items()})

    @property
    def vocab_size(self) -> int:
        return self.byte_offset + N_BYTE_IDS

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "TokenizerSpec":
        uniq = sorted(set(words))
        return cls({w: i for i, w in enumerate(uniq)}, len(uniq))

    def to_json(self) -> str:
        doc = {"vocab": dict(sorted(self.vocab.items(), key=lambda kv: kv[1])),
               "byte_fallback": N_BYTE_IDS, "casing": "preserve"}
        return json.dumps(doc, ensure_ascii=False, indent=1) + "\n"


def load_tokenizer(path) -> TokenizerSpec:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"tokenizer file not found: {path}") from None
    vocab = doc.get("vocab")
    if not isinstance(vocab, dict):
        raise ConfigError(f"{path}: tokenizer JSON needs a 'vocab' object")
    return TokenizerSpec({str(k): int(v) for k, v in vocab.items()}, len(vocab))


def save_tokenizer(spec: TokenizerSpec, path) -> None:
    Path(path).write_text(spec.to_json(), encoding="utf-8")


def tokenize(spec: TokenizerSpec, text: str) -> list[int]:
    ids: list[int] = []
    for word in text.split():
        wid = spec.vocab.get(word)
        if wid is not None:
            ids.append(wid)
        else:
            ids.extend(spec.byte_offset + b for b in word.encode("utf-8"))
    return ids


def detokenize(spec: TokenizerSpec, ids: Iterable[int]) -> str:
    words: list[str] = []
    pending = bytearray()
    for i in ids:
        i = int(i)
        if not 0 <= i < spec.vocab_size:
            raise InputError(f"token id {i} outside [0, {spec.vocab_size})")
        if i >= spec.byte_offset:
            pending.append(i - spec.byte_offset)
            continue
        if pending:
            words.append(pending.decode("utf-8", errors="replace"))
            pending.clear()
        words.append(spec._inverse[i])
    if pending:
        words.append(pending.decode("utf-8", errors="replace"))
    return " ".join(words)
