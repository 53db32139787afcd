import collections

import numpy as np
import pytest

from valent.transformer import Model, ModelConfig

_outcomes: dict[int, list[str]] = collections.defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _outcomes[marker.args[0]].append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        res = _outcomes[n]
        ok = all(r == "passed" for r in res)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({res.count('passed')}/{len(res)} tests)")


def make_config(d=16, L=2, H=4, kv=None, vocab=40, **kw) -> ModelConfig:
    return ModelConfig(d_model=d, n_layers=L, n_heads=H, n_kv_heads=kv or H, d_head=d // H,
                       d_ff=2 * d, vocab_size=vocab, **kw)


@pytest.fixture
def small_model() -> Model:
    return Model.random(make_config(), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
