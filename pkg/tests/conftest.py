import time

import numpy as np
import pytest

from nodeinject.generator import GniaTrainConfig, gnia_train
from nodeinject.graph import (CONTINUOUS, DISCRETE, TEST, TRAIN, VAL, attribute_bounds, from_edges,
                              split_nodes)
from nodeinject.models import SurrogateModel, train_surrogate
from nodeinject.synthetic import attack_suite

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_graph(rng, n, d, p=0.3, attr_kind=CONTINUOUS, num_classes=2, split=True):
    """Erdos-Renyi graph with random attributes and labels; every split non-empty."""
    iu = np.triu_indices(n, 1)
    keep = rng.random(len(iu[0])) < p
    edges = np.stack([iu[0][keep], iu[1][keep]], axis=1)
    if attr_kind == DISCRETE:
        X = (rng.random((n, d)) < 0.4).astype(float)
    else:
        X = rng.normal(size=(n, d))
    y = rng.integers(num_classes, size=n)
    y[:num_classes] = np.arange(num_classes)
    g = from_edges(n, edges, X, y, attr_kind, num_classes=num_classes)
    return split_nodes(g, int(rng.integers(1000))) if split else g


def random_model(rng, d, h, K, kind="gcn", scale=1.0):
    return SurrogateModel(kind, rng.normal(scale=scale, size=(d, h)), rng.normal(scale=scale, size=(h, K)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------- synthetic suite


@pytest.fixture(scope="session")
def suite():
    return attack_suite(seed=0)


@pytest.fixture(scope="session")
def suite_bounds(suite):
    return attribute_bounds(suite)


@pytest.fixture(scope="session")
def gcn(suite):
    return train_surrogate(suite, kind="gcn", seed=0)


@pytest.fixture(scope="session")
def appnp(suite):
    return train_surrogate(suite, kind="appnp", seed=0)


class GniaCache:
    """Trains each G-NIA variant on the suite at most once per session."""

    def __init__(self, g, model, bounds):
        self.g, self.model, self.bounds = g, model, bounds
        self._done = {}
        self.seconds = {}

    def get(self, variant="full"):
        if variant not in self._done:
            flags = {"full": {}, "no_joint": {"no_joint": True}, "no_edge": {"no_edge": True},
                     "no_attr": {"no_attr": True}}[variant]
            cfg = GniaTrainConfig(seed=0, **flags)
            start = time.perf_counter()
            self._done[variant] = gnia_train(self.g, self.model, self.g.nodes_in(TRAIN),
                                             self.g.nodes_in(VAL), self.bounds, 1, cfg)
            self.seconds[variant] = time.perf_counter() - start
        return self._done[variant]


@pytest.fixture(scope="session")
def gnia_cache(suite, gcn, suite_bounds):
    return GniaCache(suite, gcn, suite_bounds)


@pytest.fixture(scope="session")
def suite_test_targets(suite):
    return suite.nodes_in(TEST)
