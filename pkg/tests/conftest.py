import numpy as np
import pytest

from graphmc import GraphLaplacian, WeightedGraph, build_laplacian

from oracles import random_graph

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def path3():
    return build_laplacian(WeightedGraph(np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], float)))


def random_laplacian(rng, m, density=0.5) -> GraphLaplacian:
    return build_laplacian(WeightedGraph(random_graph(rng, m, density)))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
