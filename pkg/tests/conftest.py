import numpy as np
import pytest

from cltr_lab.core import QueryList
from cltr_lab.dataset import generate_synthetic, prepare, split_queries, train_initial_ranker


def make_list(qid, relevance, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    n = len(relevance)
    return QueryList(qid, [f"{qid}-d{i}" for i in range(n)], rng.standard_normal((n, dim)), relevance)


@pytest.fixture(scope="session")
def small_dataset():
    raw = generate_synthetic(200, 15, 8, 0.15, seed=3, label_noise=0.3, query_shift=1.0)
    train, test = split_queries(raw, 0.3, seed=3)
    initial = train_initial_ranker(train, 30, seed=3)
    return prepare(train, initial, 10, test)


def pytest_terminal_summary(terminalreporter):
    from importlib import import_module

    try:
        results = import_module("test_acceptance").RESULTS
    except ImportError:
        return
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
