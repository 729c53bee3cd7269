import numpy as np
import pytest

from ctxgen.corpus import Example, collate
from ctxgen.model import Model, ModelConfig

TINY_CARDS = (2, 3)


def tiny_model(variant, seed=0, scale=1.0, V=12, N=4, **kw):
    """V=12, N=4 model with weights ~ U(-scale, scale) (biases included)."""
    cfg = ModelConfig(variant, V, hidden_size=N, context_cardinalities=TINY_CARDS,
                      dropout=kw.pop("dropout", 0.0), **kw)
    m = Model(cfg)
    rng = np.random.default_rng(seed)
    for name in m.params:
        m.params[name][...] = rng.uniform(-scale, scale, m.params[name].shape)
    return m


def tiny_batch(seed=0, n=4, length=6, V=12, cards=TINY_CARDS):
    """``n`` examples of ``length`` tokens (BOS, words, EOS) over a V-token vocabulary."""
    rng = np.random.default_rng(seed)
    exs = []
    for _ in range(n):
        words = tuple(int(w) for w in rng.integers(3, V, length - 2))
        ctx = tuple(int(rng.integers(k)) for k in cards)
        exs.append(Example((1, *words, 2), ctx))
    return exs, collate(exs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting: one PASS / FAIL line per criterion in the terminal summary --------

_CRITERIA: dict = {}



@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    prev = _CRITERIA.get(n, (title, True, ""))
    ok = prev[1] and not rep.failed
    detail = getattr(item, "criterion_detail", "") or prev[2]
    if rep.failed and rep.when == "setup":
        detail = "setup failed"
    _CRITERIA[n] = (title, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
