import numpy as np
import pytest

from conftest import make_config
from valent.errors import ConfigError, InputError
from valent.probes import (LogitLensConfig, SegmentProbeConfig, layerwise_mean_embedder, logit_lens_probe,
                           sample_split, segment_match_probe, split_window)
from valent.transformer import Model


def test_split_window_and_skips():
    cfg = SegmentProbeConfig(min_tokens=8)
    assert split_window(100, cfg) == (25, 75)
    assert split_window(10, cfg) == (3, 7)
    rng = np.random.Generator(np.random.PCG64(0))
    assert sample_split(5, cfg, rng) is None
    draws = {sample_split(10, cfg, rng) for _ in range(200)}
    assert draws == {3, 4, 5, 6, 7}


def test_config_validation():
    with pytest.raises(ConfigError):
        SegmentProbeConfig(split_lo=0.8, split_hi=0.2)
    with pytest.raises(ConfigError):
        LogitLensConfig(temperature=0)
    with pytest.raises(ConfigError):
        LogitLensConfig(offsets=())


def test_segment_probe_requires_two_documents():
    with pytest.raises(InputError):
        segment_match_probe([[1] * 20, [2] * 3], SegmentProbeConfig(), lambda ids: np.ones((1, 2)))


def test_segment_probe_real_model_properties():
    m = Model.random(make_config(d=16, L=3, H=4, kv=2, vocab=50), 0)
    rng = np.random.default_rng(0)
    docs = [rng.integers(0, 50, size=int(rng.integers(20, 40))).tolist() for _ in range(8)] + [[1, 2]]
    cfg = SegmentProbeConfig(k_list=(1, 3, 8), seed=4)
    a = segment_match_probe(docs, cfg, layerwise_mean_embedder(m, "va"))
    b = segment_match_probe(docs, cfg, layerwise_mean_embedder(m, "va"), threads=4)
    assert a.recall.tobytes() == b.recall.tobytes() and a.splits == b.splits
    assert a.n_docs == 8 and a.n_skipped == 1
    assert np.all(np.diff(a.recall, axis=1) >= 0)
    assert np.all(a.recall[:, -1] == 1.0)     # k = number of candidates
    assert a.to_csv().splitlines()[0] == "layer,k,recall"
    hs = segment_match_probe(docs, cfg, layerwise_mean_embedder(m, "hs"))
    assert hs.recall.shape == (3, 3)


def test_logit_lens_properties():
    m = Model.random(make_config(d=16, L=3, H=4, vocab=30), 2)
    rng = np.random.default_rng(1)
    docs = [rng.integers(0, 30, size=40).tolist() for _ in range(6)] + [[1] * 5]
    cfg = LogitLensConfig(prefix_lo=10, prefix_hi=30, offsets=(1, 2))
    res = logit_lens_probe(m, docs, cfg)
    assert res.n_instances == 6 and res.n_skipped == 1
    assert all(10 <= t <= 37 for t in res.prefix_lengths)
    for j, k in enumerate(cfg.offsets):
        assert np.all(res.mrr[:, j] <= res.final[k])
        assert res.final[k] == res.mrr[res.best_layer()[k] - 1, j]
    assert np.all((res.mrr >= 0) & (res.mrr <= 1))
    again = logit_lens_probe(m, docs, cfg, threads=3)
    assert again.mrr.tobytes() == res.mrr.tobytes()


def test_logit_lens_cutoff_gives_zero():
    m = Model.random(make_config(d=8, L=2, H=2, vocab=400), 0)
    docs = [list(range(i, i + 30)) for i in range(4)]
    res = logit_lens_probe(m, docs, LogitLensConfig(prefix_lo=5, prefix_hi=10, offsets=(1,), top_n=1))
    assert np.all((res.mrr == 0) | (res.mrr <= 1))
    tight = logit_lens_probe(m, docs, LogitLensConfig(prefix_lo=5, prefix_hi=10, offsets=(1,), top_n=400))
    assert np.all(tight.mrr >= res.mrr)


def test_logit_lens_no_usable_instance_reports_stats():
    m = Model.random(make_config(d=8, L=2, H=2, vocab=20), 0)
    with pytest.raises(InputError, match="lengths 5..9"):
        logit_lens_probe(m, [[1] * 5, [2] * 9], LogitLensConfig())
