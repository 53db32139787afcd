"""Tensor archive: ``u64 header_len | JSON manifest | 64-byte aligned f32 blobs``.

Layout (all little-endian):

* bytes ``[0, 8)``: unsigned manifest length ``H``
* bytes ``[8, 8+H)``: UTF-8 JSON manifest with ``format_version``,
  ``model_config``, ``model_id``, ``rng`` and ``tensors``; each tensor entry
  is ``{"dtype": "f32", "shape": [...], "offset": o, "byte_len": b}`` where
  ``o`` is an absolute file offset and a multiple of 64
* raw float32 data; gaps between tensors are zero padding

The manifest is serialised with sorted keys and no whitespace so writing the
same model twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import (ArchiveError, ConfigError, OverlappingTensorsError, TensorShapeMismatchError,
                      TruncatedBlobError)
from ..transformer import RNG_ALGORITHM, Model, ModelConfig, ModelWeights, expected_shapes

FORMAT_VERSION = 1
ALIGN = 64
LAYER_INDEXING = "layers.{l} is 1-based; layer 0 is the embedding output"
_LE_F32 = np.dtype("<f4")


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _manifest_bytes(config: ModelConfig, model_id: str, entries: dict) -> bytes:
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": config.to_dict(),
        "model_id": model_id,
        "rng": RNG_ALGORITHM,
        "layer_indexing": LAYER_INDEXING,
        "tensors": entries,
    }
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")


def archive_bytes(weights: ModelWeights, config: ModelConfig, model_id: str) -> bytes:
    tensors = list(weights.tensors())
    data_start = _align(8 + 256)
    # offsets depend on the manifest length and vice versa; iterate to a fixed point
    while True:
        entries, off = {}, data_start
        for name, arr in tensors:
            nbytes = arr.size * 4
            entries[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": off, "byte_len": nbytes}
            off = _align(off + nbytes)
        header = _manifest_bytes(config, model_id, entries)
        needed = _align(8 + len(header))
        if needed <= data_start:
            break
        data_start = needed

    last = entries[tensors[-1][0]]
    buf = bytearray(last["offset"] + last["byte_len"])   # no trailing padding
    buf[0:8] = struct.pack("<Q", len(header))
    buf[8:8 + len(header)] = header
    for name, arr in tensors:
        e = entries[name]
        raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        buf[e["offset"]:e["offset"] + e["byte_len"]] = raw
    return bytes(buf)


def write_archive(weights: ModelWeights, config: ModelConfig, path, model_id: str | None = None) -> str:
    """Write the archive and return its sha256 hex digest."""
    data = archive_bytes(weights, config, model_id or "unnamed")
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_manifest(data: bytes) -> tuple[dict, int]:
    if len(data) < 8:
        raise TruncatedBlobError("file shorter than the 8-byte header length field")
    (hlen,) = struct.unpack("<Q", data[:8])
    if 8 + hlen > len(data):
        raise TruncatedBlobError(f"manifest length {hlen} runs past end of file ({len(data)} bytes)")
    try:
        manifest = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"manifest is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(manifest, dict):
        raise ArchiveError("manifest must be a JSON object")
    return manifest, 8 + hlen


def decode_archive(data: bytes) -> tuple[ModelWeights, ModelConfig, dict]:
    manifest, header_end = read_manifest(data)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ArchiveError(f"unsupported format_version {manifest.get('format_version')!r}")
    for key in ("model_config", "tensors"):
        if key not in manifest:
            raise ArchiveError(f"manifest lacks {key!r}")
    try:
        config = ModelConfig.from_dict(manifest["model_config"])
    except ConfigError as exc:
        raise TensorShapeMismatchError(f"invalid model_config: {exc}") from None

    entries = manifest["tensors"]
    expected = expected_shapes(config)
    if set(entries) != set(expected):
        raise TensorShapeMismatchError(
            f"tensor names do not match model_config: missing {sorted(set(expected) - set(entries))}, "
            f"unexpected {sorted(set(entries) - set(expected))}")

    spans = []
    for name, e in entries.items():
        if e.get("dtype") != "f32":
            raise ArchiveError(f"{name}: unsupported dtype {e.get('dtype')!r}")
        shape, off, blen = tuple(e["shape"]), int(e["offset"]), int(e["byte_len"])
        if shape != expected[name]:
            raise TensorShapeMismatchError(f"{name}: shape {list(shape)} but config implies {list(expected[name])}")
        if blen != int(np.prod(shape)) * 4:
            raise TensorShapeMismatchError(f"{name}: byte_len {blen} does not match shape {list(shape)}")
        if off < header_end:
            raise OverlappingTensorsError(f"{name}: offset {off} overlaps the manifest")
        if off % ALIGN:
            raise ArchiveError(f"{name}: offset {off} is not {ALIGN}-byte aligned")
        if off + blen > len(data):
            raise TruncatedBlobError(f"truncated blob: {name} needs bytes [{off}, {off + blen}) "
                                     f"but file has {len(data)}")
        spans.append((off, off + blen, name))
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise OverlappingTensorsError(f"tensors {n0} and {n1} overlap at byte {s1}")

    tensors = {}
    for name, e in entries.items():
        arr = np.frombuffer(data, dtype=_LE_F32, count=int(np.prod(e["shape"])), offset=int(e["offset"]))
        arr = arr.astype(np.float32).reshape(e["shape"])
        if not np.all(np.isfinite(arr)):
            raise ArchiveError(f"{name}: non-finite values")
        arr.setflags(write=False)
        tensors[name] = arr
    weights = ModelWeights.from_tensors(tensors, config)
    return weights, config, manifest


def read_archive(path) -> tuple[ModelWeights, ModelConfig]:
    weights, config, _ = decode_archive(Path(path).read_bytes())
    return weights, config


def load_model(path) -> Model:
    """Read an archive into a :class:`Model`; the id comes from the manifest or the file digest."""
    data = Path(path).read_bytes()
    weights, config, manifest = decode_archive(data)
    model_id = manifest.get("model_id") or "sha256:" + hashlib.sha256(data).hexdigest()[:16]
    return Model(config, weights, model_id)
