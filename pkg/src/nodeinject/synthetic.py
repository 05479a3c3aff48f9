"""Stochastic-block-model graphs with class-correlated attributes, for tests and demos."""
from __future__ import annotations

import networkx as nx
import numpy as np

from .graph import (CONTINUOUS, DISCRETE, Graph, from_edges, largest_connected_component,
                    split_nodes)


def sbm_graph(n: int = 200, num_classes: int = 2, p_in: float = 0.1, p_out: float = 0.01,
              d: int = 16, signal: float = 1.0, noise: float = 1.0, attr_kind: str = CONTINUOUS,
              density: float = 0.15, seed: int = 0) -> Graph:
    """Planted-partition graph; class c nodes are the c-th block.

    Continuous attributes are Gaussian around a per-class mean of scale
    ``signal``. Discrete attributes are Bernoulli, with each class owning a
    disjoint slice of features that fire more often.
    """
    rng = np.random.default_rng(seed)
    sizes = [n // num_classes + (1 if c < n % num_classes else 0) for c in range(num_classes)]
    probs = [[p_in if a == b else p_out for b in range(num_classes)] for a in range(num_classes)]
    nxg = nx.stochastic_block_model(sizes, probs, seed=int(rng.integers(2**31)))
    y = np.repeat(np.arange(num_classes), sizes)
    if attr_kind == DISCRETE:
        base = np.full((num_classes, d), density * 0.5)
        for c, cols in enumerate(np.array_split(np.arange(d), num_classes)):
            base[c, cols] = min(1.0, density * 2.0)
        X = (rng.random((n, d)) < base[y]).astype(np.float64)
    else:
        means = rng.normal(0.0, signal, size=(num_classes, d))
        X = means[y] + rng.normal(0.0, noise, size=(n, d))
    edges = np.array(nxg.edges(), dtype=np.int64).reshape(-1, 2)
    return from_edges(n, edges, X, y, attr_kind, num_classes=num_classes)


# Parameters of the attack benchmark graph: sparse enough (mean degree ~6.5) that
# an edge to the target itself is needed to flip it, and a 2-layer GCN still
# classifies it near perfectly.
SUITE_PARAMS = dict(n=200, num_classes=2, p_in=0.06, p_out=0.005, d=8, signal=0.5)


def attack_suite(seed: int = 0) -> Graph:
    """The benchmark SBM graph, reduced to its LCC and split 64/16/20."""
    g = sbm_graph(seed=seed, **SUITE_PARAMS)
    return split_nodes(largest_connected_component(g), seed)
