"""Embedding cache: JSON lines of ``{id, model_id, fingerprint, dim, vector}``.

``vector`` is base64 of the little-endian float32 bytes. ``fingerprint`` is
a short sha256 over the canonical JSON of the pool spec plus the model id,
so cached vectors from a different recipe or model are never mixed up.
"""

from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from ..errors import CorpusError

_LE_F32 = np.dtype("<f4")


def spec_fingerprint(spec_dict: dict, model_id: str) -> str:
    blob = json.dumps({"spec": spec_dict, "model_id": model_id}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def encode_record(item_id: str, vector: np.ndarray, model_id: str, fingerprint: str) -> str:
    vec = np.ascontiguousarray(vector, dtype=_LE_F32).ravel()
    rec = {
        "id": item_id,
        "model_id": model_id,
        "fingerprint": fingerprint,
        "dim": int(vec.size),
        "vector": base64.b64encode(vec.tobytes()).decode("ascii"),
    }
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def write_cache(path, records: Iterable[tuple[str, np.ndarray]], model_id: str, fingerprint: str,
                append: bool = False) -> int:
    """Write (or append) records; a single writer per file is assumed."""
    n = 0
    with open(path, "a" if append else "w", encoding="utf-8", newline="\n") as fh:
        for item_id, vec in records:
            fh.write(encode_record(item_id, vec, model_id, fingerprint) + "\n")
            n += 1
    return n


def read_cache(path) -> Iterator[dict]:
    """Yield decoded records with ``vector`` as a float32 array; validates ``dim``."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                raw = base64.b64decode(rec["vector"], validate=True)
                dim = int(rec["dim"])
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise CorpusError(f"{path}:{lineno}: bad cache record ({exc})", path=str(path), line=lineno) from None
            vec = np.frombuffer(raw, dtype=_LE_F32).astype(np.float32)
            if vec.size != dim or len(raw) != 4 * dim:
                raise CorpusError(f"{path}:{lineno}: dim {dim} but vector decodes to {len(raw)} bytes",
                                  path=str(path), line=lineno)
            rec["vector"] = vec
            yield rec


def load_cached(path, fingerprint: str) -> dict[str, np.ndarray]:
    if not Path(path).exists():
        return {}
    return {r["id"]: r["vector"] for r in read_cache(path) if r["fingerprint"] == fingerprint}
