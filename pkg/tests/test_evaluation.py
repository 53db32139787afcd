import numpy as np
import pytest

from valent.corpus_io.corpora import RetrievalSet, StsPair
from valent.errors import MetricError
from valent.evaluation import DevTask, evaluate_rerank, evaluate_retrieval, evaluate_sts

VECS = {"apple": [1, 0, 0], "fruit": [0.9, 0.1, 0], "car": [0, 1, 0], "road": [0, 0.8, 0.6], "sky": [0, 0, 1]}


def encode(texts):
    return np.array([VECS[t] for t in texts], dtype=np.float32)


def test_sts_ranks_cosines():
    pairs = [StsPair("apple", "fruit", 5), StsPair("apple", "car", 1), StsPair("car", "road", 4)]
    assert evaluate_sts(encode, pairs).spearman == pytest.approx(1.0)


def test_retrieval_and_rerank():
    rs = RetrievalSet({"q1": "apple", "q2": "car", "q3": "sky"},
                      {"d1": "fruit", "d2": "road", "d3": "sky"},
                      {("q1", "d1"): 1, ("q2", "d2"): 1, ("q2", "d1"): 0})
    res = evaluate_retrieval(encode, rs)
    assert res.n_skipped == 1 and res.score == 1.0
    rr = evaluate_rerank(encode, rs)
    assert rr.per_query == {"q1": 1.0, "q2": 1.0} and rr.n_skipped == 1


def test_all_queries_skipped():
    rs = RetrievalSet({"q": "apple"}, {"d": "car"}, {})
    with pytest.raises(MetricError):
        evaluate_retrieval(encode, rs)


def test_dev_task_scores_in_points_and_flat_sts_scores_zero():
    pairs = [StsPair("apple", "fruit", 5), StsPair("car", "road", 1)]
    assert DevTask("s", "sts", pairs).score(encode) == pytest.approx(100.0)
    flat = [StsPair("apple", "apple", 5), StsPair("car", "car", 1)]
    assert DevTask("s", "sts", flat).score(encode) == 0.0
    with pytest.raises(MetricError):
        DevTask("x", "cluster", None).score(encode)
