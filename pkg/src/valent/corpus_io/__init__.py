"""Persistence: weight archives, tokenizer, corpora, embedding cache."""

from importlib import resources
from pathlib import Path

from .archive import archive_bytes, decode_archive, load_model, read_archive, write_archive
from .cache import load_cached, read_cache, spec_fingerprint, write_cache
from .corpora import (RetrievalSet, StsPair, file_digest, load_probe_corpus, load_retrieval,
                      load_sts)
from .tokenizer import TokenizerSpec, detokenize, load_tokenizer, save_tokenizer, tokenize


def bundled(name: str) -> Path:
    """Path of a data file shipped inside the package."""
    return Path(str(resources.files("valent") / "data" / name))


__all__ = [
    "RetrievalSet", "StsPair", "TokenizerSpec", "archive_bytes", "bundled", "decode_archive",
    "detokenize", "file_digest", "load_cached", "load_model", "load_probe_corpus", "load_retrieval",
    "load_sts", "load_tokenizer", "read_archive", "read_cache", "save_tokenizer", "spec_fingerprint",
    "tokenize", "write_archive", "write_cache",
]
