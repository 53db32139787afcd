"""Loaders for the three corpus formats.

* STS: TSV lines ``sentence_a<TAB>sentence_b<TAB>gold``
* retrieval / rerank: JSON lines, each a record with ``type`` in
  ``{"query", "doc", "qrel"}``. Queries and docs carry ``id`` and ``text``;
  qrels carry ``query_id``, ``doc_id`` and ``relevance`` (>= 0).
* probe corpus: UTF-8 plain text, documents separated by blank lines
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import CorpusError, DanglingQrelError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StsPair:
    sentence_a: str
    sentence_b: str
    gold: float


@dataclass
class RetrievalSet:
    queries: dict[str, str] = field(default_factory=dict)
    docs: dict[str, str] = field(default_factory=dict)
    qrels: dict[tuple[str, str], float] = field(default_factory=dict)

    def relevant(self, query_id: str) -> dict[str, float]:
        return {d: r for (q, d), r in self.qrels.items() if q == query_id}

    def validate(self) -> None:
        for (q, d) in self.qrels:
            if q not in self.queries:
                raise DanglingQrelError(f"qrel references unknown query {q!r}", q, d)
            if d not in self.docs:
                raise DanglingQrelError(f"qrel references unknown doc {d!r}", q, d)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _read_lines(path) -> list[str]:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise CorpusError(f"corpus file not found: {path}", path=str(path)) from None
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path} is not valid UTF-8: {exc}", path=str(path)) from None


def load_sts(path) -> list[StsPair]:
    pairs = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CorpusError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}",
                              path=str(path), line=lineno)
        try:
            gold = float(parts[2])
        except ValueError:
            raise CorpusError(f"{path}:{lineno}: gold score {parts[2]!r} is not a number",
                              path=str(path), line=lineno) from None
        if not math.isfinite(gold):
            raise CorpusError(f"{path}:{lineno}: gold score must be finite", path=str(path), line=lineno)
        if not parts[0].strip() or not parts[1].strip():
            raise CorpusError(f"{path}:{lineno}: empty sentence", path=str(path), line=lineno)
        pairs.append(StsPair(parts[0], parts[1], gold))
    log.info("loaded %d STS pairs from %s", len(pairs), path)
    return pairs


def load_retrieval(path) -> RetrievalSet:
    rs = RetrievalSet()
    qrel_lines = {}
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc.msg})", path=str(path), line=lineno) from None
        kind = rec.get("type") if isinstance(rec, dict) else None
        try:
            if kind in ("query", "doc"):
                rid, text = str(rec["id"]), rec["text"]
                if not isinstance(text, str) or not text.strip():
                    raise CorpusError(f"{path}:{lineno}: {kind} {rid!r} has empty text",
                                      path=str(path), line=lineno)
                table = rs.queries if kind == "query" else rs.docs
                if rid in table:
                    raise CorpusError(f"{path}:{lineno}: duplicate {kind} id {rid!r}", path=str(path), line=lineno)
                table[rid] = text
            elif kind == "qrel":
                key = (str(rec["query_id"]), str(rec["doc_id"]))
                rel = float(rec.get("relevance", 1))
                if not (math.isfinite(rel) and rel >= 0):
                    raise CorpusError(f"{path}:{lineno}: relevance must be finite and >= 0",
                                      path=str(path), line=lineno)
                rs.qrels[key] = rel
                qrel_lines[key] = lineno
            else:
                raise CorpusError(f"{path}:{lineno}: unknown record type {kind!r}", path=str(path), line=lineno)
        except KeyError as exc:
            raise CorpusError(f"{path}:{lineno}: {kind} record lacks field {exc.args[0]!r}",
                              path=str(path), line=lineno) from None
    try:
        rs.validate()
    except DanglingQrelError as exc:
        key = (exc.query_id, exc.doc_id)
        raise DanglingQrelError(f"{path}:{qrel_lines[key]}: {exc}", exc.query_id, exc.doc_id,
                                path=str(path), line=qrel_lines[key]) from None
    log.info("loaded %d queries, %d docs, %d qrels from %s", len(rs.queries), len(rs.docs), len(rs.qrels), path)
    return rs


def load_probe_corpus(path) -> list[str]:
    docs, current = [], []
    for line in _read_lines(path):
        if line.strip():
            current.append(line.strip())
        elif current:
            docs.append(" ".join(current))
            current = []
    if current:
        docs.append(" ".join(current))
    log.info("loaded %d probe documents from %s", len(docs), path)
    return docs
