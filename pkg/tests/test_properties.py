"""Property-based checks of the numeric and metric invariants."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from valent.metrics import average_precision, mrr_at_n, ndcg_at_k, recall_at_k, spearman
from valent.numerics import cosine, rope_apply, softmax_rows, stable_rank_desc
from valent.pooling import LayerSet, PoolSpec, embedding_dim, pool_aligned_wva, pool_va
from valent.transformer import Model, ModelConfig, TraceOptions, forward

finite = st.floats(-50, 50, allow_nan=False, width=32)


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 12)), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = softmax_rows(x)
    assert np.all(p >= 0)
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-6)


@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.sampled_from([2, 4, 8, 16])), elements=finite),
       st.integers(0, 500))
def test_rope_preserves_pair_norms(x, pos):
    y = rope_apply(x, pos).astype(np.float64)
    x = x.astype(np.float64)
    assert np.allclose(np.hypot(x[:, 0::2], x[:, 1::2]), np.hypot(y[:, 0::2], y[:, 1::2]), atol=1e-6 * (1 + np.abs(x).max()))
    assert np.array_equal(rope_apply(x.astype(np.float32), 0), x.astype(np.float32))


@given(arrays(np.float64, 6, elements=st.floats(0.1, 10)), arrays(np.float64, 6, elements=st.floats(0.1, 10)),
       st.floats(0.01, 100), st.floats(0.01, 100))
def test_cosine_scale_invariance(a, b, alpha, beta):
    assert abs(cosine(a, b) - cosine(alpha * a, beta * b)) <= 1e-6


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=40))
def test_stable_rank_is_a_sorted_permutation(s):
    r = stable_rank_desc(s)
    assert sorted(r.tolist()) == list(range(len(s)))
    assert all(s[r[i]] > s[r[i + 1]] or (s[r[i]] == s[r[i + 1]] and r[i] < r[i + 1]) for i in range(len(s) - 1))


@given(st.lists(st.integers(0, 20), min_size=3, max_size=30), st.lists(st.integers(0, 20), min_size=3, max_size=30))
def test_spearman_invariant_under_monotone_maps(x, y):
    n = min(len(x), len(y))
    x, y = np.array(x[:n], float), np.array(y[:n], float)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return
    base = spearman(x, y)
    assert abs(spearman(np.exp(x / 5), y ** 3 + 2 * y) - base) <= 1e-12
    assert -1 <= base <= 1


@given(st.lists(st.integers(0, 3), min_size=1, max_size=15), st.integers(1, 20))
def test_ranking_metrics_are_bounded(rels, k):
    assert 0 <= ndcg_at_k(rels, k) <= 1 + 1e-12
    ap = average_precision(rels)
    assert ap is None or 0 < ap <= 1


@given(st.permutations(list(range(8))), st.integers(0, 7))
def test_recall_monotone_in_k(ranking, target):
    vals = [recall_at_k(ranking, target, k) for k in range(1, 9)]
    assert vals == sorted(vals) and vals[-1] == 1


@given(st.integers(1, 1000), st.integers(1, 200))
def test_mrr_bounds(rank, n):
    v = mrr_at_n(rank, n)
    assert v == (1 / rank if rank <= n else 0.0)


@st.composite
def model_configs(draw):
    H = draw(st.sampled_from([1, 2, 4]))
    kv = draw(st.sampled_from([g for g in (1, 2, 4) if H % g == 0 and g <= H]))
    dh = draw(st.sampled_from([2, 4]))
    return ModelConfig(d_model=H * dh, n_layers=draw(st.integers(1, 3)), n_heads=H, n_kv_heads=kv, d_head=dh,
                       d_ff=2 * H * dh, vocab_size=12)


@settings(max_examples=40, deadline=None)
@given(model_configs(), st.integers(0, 2**31), st.lists(st.integers(0, 11), min_size=1, max_size=8))
def test_embedding_dims_and_trace_invariants(cfg, seed, ids):
    m = Model.random(cfg, seed)
    tr = forward(m.weights, cfg, ids, TraceOptions.everything())
    for method in ("hs_mean", "va", "wva_last", "aligned_wva"):
        assert embedding_dim(m, PoolSpec(method)) == (
            cfg.n_kv_heads * cfg.d_head if method == "va" else
            cfg.n_heads * cfg.d_head if method == "wva_last" else cfg.d_model)
    assert pool_va(tr, LayerSet.full()).vector.shape == (cfg.kv_dim,)
    assert pool_aligned_wva(tr, [cfg.n_layers]).vector.shape == (cfg.d_model,)
    assert np.all(np.abs(tr.attn.sum(axis=-1) - 1) <= 1e-6)
    for l in range(1, cfg.n_layers + 1):
        x = tr.hidden_at(l).astype(np.float64)
        rhs = tr.hidden_at(l - 1).astype(np.float64) + tr.attn_out_at(l) + tr.ffn_out_at(l)
        assert np.all(np.abs(x - rhs) <= 1e-5 * (1 + np.abs(x).max(axis=1, keepdims=True)))
