import numpy as np
import pytest

from conftest import make_config
from valent.corpus_io import TokenizerSpec, load_tokenizer, bundled
from valent.errors import InputError, SpecError, TraceError
from valent.pooling import (LayerSet, PoolSpec, embed, embed_many, embedding_dim, get_template, pool_aligned_wva,
                            pool_hidden, pool_va, pool_wva, prepare_tokens, render_prompt)
from valent.transformer import Model, TraceOptions, forward

WORDS = "the cat sat on a mat dog ran This sentence: means in one word: Forecasting subsequent tokens".split()


@pytest.fixture
def tok():
    return TokenizerSpec.from_words(WORDS)


@pytest.fixture
def model(tok):
    return Model.random(make_config(d=16, L=4, H=4, kv=2, vocab=tok.vocab_size), 5)


def test_layer_set_resolution():
    assert LayerSet.full().resolve(4) == (1, 2, 3, 4)
    assert LayerSet.half().resolve(4) == (2, 3, 4)
    assert LayerSet.half().resolve(5) == (3, 4, 5)
    assert LayerSet.explicit([3, 1, 3]).layers == (1, 3)
    with pytest.raises(SpecError):
        LayerSet.explicit([5]).resolve(4)
    with pytest.raises(SpecError):
        LayerSet.explicit([])


def test_templates_render():
    r = render_prompt(get_template("prompt_eol"), "the  cat ")
    assert r.text == "This sentence: the cat means in one word:"
    assert r.text[r.content_span[0]:r.content_span[1]] == "the cat"
    r = render_prompt(get_template("future_eol"), "a dog")
    assert r.text == "Forecasting the subsequent tokens a dog in one word:"
    r = render_prompt(get_template("echo"), "a dog")
    assert r.text == "a dog a dog" and r.content_span == (6, 11)
    with pytest.raises(InputError):
        render_prompt(get_template("none"), "   ")


def test_spec_constraints():
    with pytest.raises(SpecError):
        PoolSpec("echo_mean")
    with pytest.raises(SpecError):
        PoolSpec("wva_last", template=get_template("prompt_eol"))
    with pytest.raises(SpecError):
        PoolSpec("max_pool")


def test_echo_span_covers_second_copy(model, tok):
    ids, span = prepare_tokens(model, tok, "the cat sat", PoolSpec("echo_mean", template=get_template("echo")))
    assert len(ids) == 6 and span == (3, 6)


@pytest.mark.parametrize("method", ["hs_mean", "last_token", "weighted_mean", "va", "wva_last", "aligned_wva"])
def test_embedding_dims(model, tok, method):
    e = embed(model, tok, "the cat sat on a mat", PoolSpec(method, LayerSet.half()))
    assert e.dim == embedding_dim(model, e.spec)
    assert e.model_id == model.model_id
    c = model.config
    if method == "va":
        assert e.dim == c.n_kv_heads * c.d_head
    elif method == "wva_last":
        assert e.dim == c.n_heads * c.d_head
    else:
        assert e.dim == c.d_model


def test_trailing_whitespace_does_not_change_embedding(model, tok):
    spec = PoolSpec("va")
    assert np.array_equal(embed(model, tok, "the cat sat", spec).vector,
                          embed(model, tok, "the cat   sat \t", spec).vector)


def test_aligned_wva_matches_prompted_trace(model, tok):
    spec = PoolSpec("aligned_wva", LayerSet.explicit([3]), get_template("future_eol"))
    ids, _ = prepare_tokens(model, tok, "a dog ran", spec)
    tr = forward(model.weights, model.config, ids, TraceOptions(record_attn_out=True))
    assert np.array_equal(embed(model, tok, "a dog ran", spec).vector, tr.attn_out_at(3)[-1])


def test_aligned_wva_over_set_is_layer_mean(model, tok):
    tr = forward(model.weights, model.config, [1, 2, 3], TraceOptions(record_attn_out=True))
    want = np.mean([tr.attn_out_at(l)[-1].astype(float) for l in (2, 3, 4)], axis=0)
    assert np.max(np.abs(pool_aligned_wva(tr, [2, 3, 4]).vector - want)) <= 1e-6


def test_wva_fallback_from_attention_and_values(model):
    full = forward(model.weights, model.config, [4, 5, 6, 7], TraceOptions.everything())
    partial = forward(model.weights, model.config, [4, 5, 6, 7],
                      TraceOptions(record_attn_weights=True, record_values=True))
    assert np.max(np.abs(pool_wva(full, [1, 4]).vector - pool_wva(partial, [1, 4]).vector)) <= 1e-6


def test_missing_trace_fields(model):
    tr = forward(model.weights, model.config, [1, 2], TraceOptions(record_hidden=True))
    with pytest.raises(TraceError):
        pool_va(tr, [1])
    with pytest.raises(TraceError):
        pool_aligned_wva(tr, [1])
    with pytest.raises(TraceError):
        pool_wva(tr, [1])
    with pytest.raises(SpecError):
        pool_hidden(tr, [9])


def test_pooling_does_not_mutate_trace(model):
    tr = forward(model.weights, model.config, [1, 2, 3], TraceOptions.everything())
    before = {k: getattr(tr, k).copy() for k in ("hidden", "values", "head_out", "attn_out")}
    pool_va(tr, [1, 2]); pool_wva(tr, [3]); pool_aligned_wva(tr, [4]); pool_hidden(tr, [1], "positional")
    for k, v in before.items():
        assert np.array_equal(getattr(tr, k), v)


def test_over_length_names_template(tok):
    m = Model.random(make_config(d=8, L=2, H=2, vocab=tok.vocab_size, max_seq_len=8), 0)
    with pytest.raises(InputError, match="prompt_eol"):
        embed(m, tok, "the cat sat", PoolSpec("aligned_wva", template=get_template("prompt_eol")))


def test_embed_many_threads_match_serial(model, tok):
    sents = ["the cat", "a dog ran", "on a mat", "the dog sat on the cat"]
    spec = PoolSpec("wva_prompted", LayerSet.full(), get_template("prompt_eol"))
    assert embed_many(model, tok, sents, spec, 1).tobytes() == embed_many(model, tok, sents, spec, 4).tobytes()


def test_bundled_tokenizer_covers_templates():
    tok = load_tokenizer(bundled("tokenizer.json"))
    for w in "This sentence: means in one word: Forecasting the subsequent tokens".split():
        assert w in tok.vocab
