import numpy as np
import pytest

from spanbandit.dataset import Dataset, Example, Span

_criteria: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        _criteria.append((marker.args[0], "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _criteria:
        terminalreporter.write_line(f"{status}  {name}" + (f"  [{detail}]" if detail else ""))


def random_example(rng: np.random.Generator, n: int | None = None, vocab: int = 12, ex_id: str = "x") -> Example:
    """Random tokens; a small vocabulary makes question overlap common."""
    n = int(rng.integers(1, 51)) if n is None else n
    words = [f"w{i}" for i in range(vocab)] + ["The", "a", ",", "."]
    ctx = tuple(words[k] for k in rng.integers(0, len(words), size=n))
    q = tuple(words[k] for k in rng.integers(0, len(words), size=int(rng.integers(1, 6))))
    i = int(rng.integers(0, n))
    j = int(rng.integers(i, n))
    return Example(ex_id, q, ctx, Span(i, j))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset():
    exs = [
        Example("a", ("who", "is", "k1"), ("k1", "bob", "k1", "x", "y"), Span(1, 1)),
        Example("b", ("where", "k2"), ("z", "k2", "paris", "france", "k2"), Span(2, 3)),
        Example("c", ("what",), ("the", "cat", "sat"), Span(1, 2), (Span(1, 2), Span(1, 1))),
    ]
    return Dataset(tuple(exs), name="tiny")
