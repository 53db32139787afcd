import hashlib
import json
import struct

import numpy as np
import pytest

from conftest import make_config
from valent.corpus_io import (TokenizerSpec, archive_bytes, bundled, decode_archive, detokenize, load_cached,
                              load_model, load_probe_corpus, load_retrieval, load_sts, load_tokenizer, read_cache,
                              spec_fingerprint, tokenize, write_archive, write_cache)
from valent.errors import (CorpusError, DanglingQrelError, InputError, OverlappingTensorsError,
                           TensorShapeMismatchError, TruncatedBlobError)
from valent.transformer import Model

MINI_STS_SHA256 = "d75bf8a4389f2a5e8cad4e58a64423372a10f5b22939df6533d00f2d952cb87a"


def oracle_decode(data: bytes) -> dict:
    """Independent byte-layout reader: header length, JSON, then raw LE float32 blobs."""
    hlen = int.from_bytes(data[:8], "little")
    manifest = json.loads(data[8:8 + hlen])
    out = {}
    for name, e in manifest["tensors"].items():
        n = e["byte_len"] // 4
        vals = struct.unpack(f"<{n}f", data[e["offset"]:e["offset"] + e["byte_len"]])
        out[name] = (e["shape"], vals)
    return out


def tiny_model():
    cfg = make_config(d=4, L=1, H=2, vocab=3)
    return Model.random(cfg, 0)


def test_archive_layout_matches_oracle():
    m = tiny_model()
    data = archive_bytes(m.weights, m.config, m.model_id)
    oracle = oracle_decode(data)
    for name, arr in m.weights.tensors():
        shape, vals = oracle[name]
        assert shape == list(arr.shape)
        assert np.array_equal(np.array(vals, dtype=np.float32), arr.ravel())
    manifest = json.loads(data[8:8 + int.from_bytes(data[:8], "little")])
    assert all(e["offset"] % 64 == 0 for e in manifest["tensors"].values())
    assert manifest["rng"].startswith("numpy.random.PCG64")


def test_hand_built_two_tensor_file():
    """A file assembled by hand from the documented layout decodes correctly."""
    cfg = make_config(d=4, L=1, H=2, vocab=3)
    m = Model.random(cfg, 1)
    data = bytearray(archive_bytes(m.weights, cfg, "hand"))
    hlen = int.from_bytes(data[:8], "little")
    manifest = json.loads(data[8:8 + hlen])
    e = manifest["tensors"]["unembed"]
    data[e["offset"]:e["offset"] + 4] = struct.pack("<f", 2.5)
    w, _, _ = decode_archive(bytes(data))
    assert w.unembed[0, 0] == 2.5


def _patch(data: bytes, fn) -> bytes:
    hlen = int.from_bytes(data[:8], "little")
    manifest = json.loads(data[8:8 + hlen])
    fn(manifest)
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    assert len(body) <= hlen
    body = body + b" " * (hlen - len(body))
    return data[:8] + body + data[8 + hlen:]


def test_archive_corruption_errors():
    m = tiny_model()
    data = archive_bytes(m.weights, m.config, m.model_id)
    with pytest.raises(TruncatedBlobError, match="truncated blob"):
        decode_archive(data[:-8])

    def past_eof(man):
        man["tensors"]["unembed"]["offset"] = (len(data) // 64 + 2) * 64
    with pytest.raises(TruncatedBlobError, match="truncated blob"):
        decode_archive(_patch(data, past_eof))

    def overlap(man):
        t = man["tensors"]
        t["final.norm"]["offset"] = t["embed.tokens"]["offset"]
    with pytest.raises(OverlappingTensorsError):
        decode_archive(_patch(data, overlap))

    def reshape(man):
        man["tensors"]["unembed"]["shape"] = [4, 3]
    with pytest.raises(TensorShapeMismatchError):
        decode_archive(_patch(data, reshape))


def test_write_and_load_model(tmp_path):
    m = tiny_model()
    digest = write_archive(m.weights, m.config, tmp_path / "a.vta", m.model_id)
    assert digest == hashlib.sha256((tmp_path / "a.vta").read_bytes()).hexdigest()
    loaded = load_model(tmp_path / "a.vta")
    assert loaded.model_id == m.model_id and loaded.config == m.config


def test_tokenizer_examples():
    tok = TokenizerSpec({"a": 0, "b": 1}, 2)
    assert tokenize(tok, "a b") == [0, 1]
    assert detokenize(tok, [0, 1]) == "a b"
    assert tokenize(tok, "é") == [2 + 0xC3, 2 + 0xA9]
    assert detokenize(tok, tokenize(tok, "a é b")) == "a é b"
    with pytest.raises(InputError):
        detokenize(tok, [tok.vocab_size])


def test_tokenizer_round_trip_file(tmp_path):
    tok = TokenizerSpec.from_words(["x", "y", "z"])
    from valent.corpus_io import save_tokenizer
    save_tokenizer(tok, tmp_path / "t.json")
    assert load_tokenizer(tmp_path / "t.json") == tok


def test_bundled_mini_sts_digest():
    path = bundled("mini_sts.tsv")
    assert hashlib.sha256(path.read_bytes()).hexdigest() == MINI_STS_SHA256
    pairs = load_sts(path)
    assert len(pairs) == 64
    assert all(0 <= p.gold <= 5 for p in pairs)


def test_bundled_sets_load():
    rs = load_retrieval(bundled("mini_retrieval.jsonl"))
    assert len(rs.queries) == 8 and len(rs.docs) == 24
    rr = load_retrieval(bundled("mini_rerank.jsonl"))
    assert all(len(rr.relevant(q)) == 5 for q in rr.queries)
    docs = load_probe_corpus(bundled("probe_corpus.txt"))
    assert len(docs) == 10 and all(len(d.split()) > 200 for d in docs)


def test_sts_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "s.tsv"
    p.write_text("a\tb\t1\nc\td\te\tf\n")
    with pytest.raises(CorpusError) as exc:
        load_sts(p)
    assert exc.value.line == 2
    p.write_text("a\tb\t1\nc\td\thigh\n")
    with pytest.raises(CorpusError, match=":2:"):
        load_sts(p)
    with pytest.raises(CorpusError, match="not found"):
        load_sts(tmp_path / "missing.tsv")


def test_dangling_qrel(tmp_path):
    p = tmp_path / "r.jsonl"
    p.write_text('{"type":"query","id":"q","text":"x"}\n{"type":"doc","id":"d","text":"y"}\n'
                 '{"type":"qrel","query_id":"q","doc_id":"zz","relevance":1}\n')
    with pytest.raises(DanglingQrelError) as exc:
        load_retrieval(p)
    assert exc.value.doc_id == "zz" and exc.value.to_dict()["doc_id"] == "zz"


def test_embedding_cache_round_trip(tmp_path):
    fp = spec_fingerprint({"method": "va"}, "m")
    assert fp != spec_fingerprint({"method": "va"}, "m2")
    vecs = [("a", np.array([1.5, -2.0], np.float32)), ("b", np.array([0.25, 3.0], np.float32))]
    write_cache(tmp_path / "c.jsonl", vecs, "m", fp)
    write_cache(tmp_path / "c.jsonl", [("c", np.zeros(2, np.float32))], "m", "other", append=True)
    got = load_cached(tmp_path / "c.jsonl", fp)
    assert set(got) == {"a", "b"} and np.array_equal(got["a"], vecs[0][1])
    (tmp_path / "bad.jsonl").write_text('{"id":"a","model_id":"m","fingerprint":"f","dim":3,"vector":"AAAAAA=="}\n')
    with pytest.raises(CorpusError):
        list(read_cache(tmp_path / "bad.jsonl"))
