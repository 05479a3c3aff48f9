"""Attributed graphs, file IO, preprocessing and single-node injection."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", VAL: "val", TEST: "test"}

CONTINUOUS = "continuous"
DISCRETE = "discrete"
_KIND_TOKENS = {"cont": CONTINUOUS, "disc": DISCRETE}


class GraphFormatError(ValueError):
    pass


class InjectionError(ValueError):
    pass


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Graph:
    """Immutable undirected attributed graph.

    ``adjacency`` is a symmetric 0/1 CSR matrix with an empty diagonal.
    ``split`` holds one of TRAIN/VAL/TEST per node.
    """

    adjacency: sp.csr_matrix
    X: np.ndarray
    y: np.ndarray
    attr_kind: str = CONTINUOUS
    split: np.ndarray | None = None
    num_classes: int | None = None
    _degree: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        adj = sp.csr_matrix(self.adjacency, dtype=np.float64)
        adj.sort_indices()
        X = np.array(self.X, dtype=np.float64)
        y = np.array(self.y, dtype=np.int64)
        n = adj.shape[0]
        if adj.shape != (n, n):
            raise GraphFormatError("adjacency must be square")
        if X.ndim != 2 or X.shape[0] != n:
            raise GraphFormatError(f"attribute matrix has {X.shape[0]} rows for {n} nodes")
        if y.shape != (n,):
            raise GraphFormatError("need exactly one label per node")
        if (adj != adj.T).nnz or adj.diagonal().any() or np.any(adj.data != 1.0):
            raise GraphFormatError("adjacency must be symmetric 0/1 with zero diagonal")
        if self.attr_kind not in (CONTINUOUS, DISCRETE):
            raise GraphFormatError(f"unknown attribute kind {self.attr_kind!r}")
        if self.attr_kind == DISCRETE and not np.isin(X, (0.0, 1.0)).all():
            raise GraphFormatError("discrete attributes must be 0/1")
        K = int(self.num_classes) if self.num_classes is not None else int(y.max()) + 1 if n else 0
        if n and (y.min() < 0 or y.max() >= K):
            raise GraphFormatError(f"labels must lie in 0..{K - 1}")
        split = np.full(n, TRAIN, dtype=np.int8) if self.split is None else np.array(self.split, dtype=np.int8)
        if split.shape != (n,) or not np.isin(split, (TRAIN, VAL, TEST)).all():
            raise GraphFormatError("every node needs exactly one split tag")
        for a in (adj.data, adj.indices, adj.indptr):
            a.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "X", _freeze(X))
        object.__setattr__(self, "y", _freeze(y))
        object.__setattr__(self, "split", _freeze(split))
        object.__setattr__(self, "num_classes", K)
        object.__setattr__(self, "_degree", _freeze(np.diff(adj.indptr).astype(np.int64)))

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.num_classes

    @property
    def degree(self) -> np.ndarray:
        return self._degree

    def neighbors(self, i: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[i] : a.indptr[i + 1]]

    def nodes_in(self, which: int) -> np.ndarray:
        return np.flatnonzero(self.split == which)

    def with_split(self, split: np.ndarray) -> "Graph":
        return Graph(self.adjacency, self.X, self.y, self.attr_kind, split, self.num_classes)

    def with_labels(self, y: np.ndarray) -> "Graph":
        return Graph(self.adjacency, self.X, y, self.attr_kind, self.split, self.num_classes)

    def checksum(self) -> int:
        return graph_checksum(self)

    def edges(self) -> np.ndarray:
        """Upper-triangle edge list, shape (E, 2)."""
        coo = sp.triu(self.adjacency, k=1).tocoo()
        return np.stack([coo.row, coo.col], axis=1).astype(np.int64)


# ----------------------------------------------------------------- checksum

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, h: int = _FNV_OFFSET) -> int:
    # vectorised FNV-1a is not possible (sequential), but graphs here are small
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


def canonical_bytes(g: Graph) -> bytes:
    """Serialization hashed by :func:`graph_checksum` (layout in README)."""
    parts = [
        struct.pack("<QQQB", g.n, g.d, g.K, 1 if g.attr_kind == DISCRETE else 0),
        g.adjacency.indptr.astype("<i8").tobytes(),
        g.adjacency.indices.astype("<i8").tobytes(),
        g.X.astype("<f8").tobytes(),
        g.y.astype("<i8").tobytes(),
        g.split.astype("u1").tobytes(),
    ]
    return b"".join(parts)


def graph_checksum(g: Graph) -> int:
    return fnv1a64(canonical_bytes(g))


# ----------------------------------------------------------------------- IO


def from_edges(n: int, edges, X, y, attr_kind: str = CONTINUOUS, split=None,
               num_classes: int | None = None) -> Graph:
    """Build a graph from an arbitrary edge list: symmetrized, deduplicated, loop-free."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        raise GraphFormatError(f"node id out of range for n={n}")
    e = e[e[:, 0] != e[:, 1]]
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    adj.data[:] = 1.0
    adj.eliminate_zeros()
    return Graph(adj, X, y, attr_kind, split, num_classes)


def load_graph(edge_path, attr_path, label_path, attr_kind: str | None = None,
               num_classes: int | None = None) -> Graph:
    """Read the three-file text format described in the README."""
    attr_lines = Path(attr_path).read_text().splitlines()
    if not attr_lines:
        raise GraphFormatError("empty attribute file")
    head = attr_lines[0].split()
    if len(head) != 3 or head[2] not in _KIND_TOKENS:
        raise GraphFormatError(f"bad attribute header {attr_lines[0]!r}")
    try:
        n, d = int(head[0]), int(head[1])
    except ValueError as exc:
        raise GraphFormatError(f"bad attribute header {attr_lines[0]!r}") from exc
    kind = _KIND_TOKENS[head[2]]
    if attr_kind is not None and attr_kind != kind:
        raise GraphFormatError(f"file declares {kind} attributes, caller asked for {attr_kind}")
    rows = [ln for ln in attr_lines[1:] if ln.strip()]
    if len(rows) != n:
        raise GraphFormatError(f"expected {n} attribute rows, found {len(rows)}")
    try:
        X = np.array([[float(v) for v in ln.split()] for ln in rows], dtype=np.float64).reshape(n, d)
    except ValueError as exc:
        raise GraphFormatError(f"bad attribute row: {exc}") from exc
    if kind == DISCRETE and not np.isin(X, (0.0, 1.0)).all():
        raise GraphFormatError("discrete attribute file contains values other than 0/1")

    labels = [ln for ln in Path(label_path).read_text().splitlines() if ln.strip()]
    if len(labels) != n:
        raise GraphFormatError(f"expected {n} labels, found {len(labels)}")
    try:
        y = np.array([int(v) for v in labels], dtype=np.int64)
    except ValueError as exc:
        raise GraphFormatError(f"bad label: {exc}") from exc
    if num_classes is not None and (y >= num_classes).any():
        raise GraphFormatError(f"label >= K={num_classes}")

    edges = []
    for lineno, ln in enumerate(Path(edge_path).read_text().splitlines(), 1):
        if not ln.strip():
            continue
        tok = ln.split("\t") if "\t" in ln else ln.split()
        if len(tok) != 2:
            raise GraphFormatError(f"edge line {lineno}: expected 'src<TAB>dst'")
        try:
            edges.append((int(tok[0]), int(tok[1])))
        except ValueError as exc:
            raise GraphFormatError(f"edge line {lineno}: {exc}") from exc
    return from_edges(n, edges, X, y, kind, num_classes=num_classes)


def write_graph(g: Graph, edge_path, attr_path, label_path) -> None:
    with open(edge_path, "w") as fh:
        for u, v in g.edges():
            fh.write(f"{u}\t{v}\n")
    token = "disc" if g.attr_kind == DISCRETE else "cont"
    with open(attr_path, "w") as fh:
        fh.write(f"{g.n} {g.d} {token}\n")
        for row in g.X:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    with open(label_path, "w") as fh:
        fh.writelines(f"{int(c)}\n" for c in g.y)


def save_npz(g: Graph, path) -> None:
    """Binary bundle used between CLI stages (keeps split tags)."""
    np.savez(path, indptr=g.adjacency.indptr, indices=g.adjacency.indices, X=g.X, y=g.y,
             split=g.split, kind=np.array(g.attr_kind), K=np.array(g.K))


def load_npz(path) -> Graph:
    z = np.load(path, allow_pickle=False)
    n = len(z["indptr"]) - 1
    adj = sp.csr_matrix((np.ones(len(z["indices"])), z["indices"], z["indptr"]), shape=(n, n))
    return Graph(adj, z["X"], z["y"], str(z["kind"]), z["split"], int(z["K"]))


# ------------------------------------------------------------ preprocessing


def subgraph(g: Graph, nodes) -> Graph:
    nodes = np.sort(np.asarray(nodes, dtype=np.int64))
    adj = g.adjacency[nodes][:, nodes]
    return Graph(adj, g.X[nodes], g.y[nodes], g.attr_kind, g.split[nodes], g.num_classes)


def largest_connected_component(g: Graph) -> Graph:
    """Induced subgraph on the largest component; ties go to the smallest node id."""
    _, comp = connected_components(g.adjacency, directed=False)
    sizes = np.bincount(comp)
    best = sizes.max()
    # components are labelled in order of their smallest member
    first_seen = {}
    for i, c in enumerate(comp):
        first_seen.setdefault(c, i)
    winner = min((c for c in range(len(sizes)) if sizes[c] == best), key=first_seen.__getitem__)
    return subgraph(g, np.flatnonzero(comp == winner))


def split_nodes(g: Graph, seed: int, test_frac: float = 0.2, val_frac: float = 0.2) -> Graph:
    """Random train/val/test tags: ``test_frac`` held out, then ``val_frac`` of the rest."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(g.n)
    n_test = int(round(test_frac * g.n))
    n_val = int(round(val_frac * (g.n - n_test)))
    split = np.full(g.n, TRAIN, dtype=np.int8)
    split[perm[:n_test]] = TEST
    split[perm[n_test : n_test + n_val]] = VAL
    return g.with_split(split)


def normalize_adjacency(obj) -> sp.csr_matrix:
    """D^-1/2 (A + I) D^-1/2 for a Graph or a PerturbedView (soft weights allowed)."""
    if isinstance(obj, PerturbedView):
        adj = obj.adjacency()
    else:
        adj = obj.adjacency
    n = adj.shape[0]
    a_tilde = (adj + sp.identity(n, format="csr")).tocsr()
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    s = sp.diags(1.0 / np.sqrt(deg))
    return (s @ a_tilde @ s).tocsr()


def candidate_set(g: Graph, targets) -> np.ndarray:
    """Targets plus their one-hop neighbours, ascending."""
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if targets.size == 0:
        raise ValueError("need at least one target")
    if targets.min() < 0 or targets.max() >= g.n:
        raise ValueError("target id out of range")
    parts = [targets] + [g.neighbors(t) for t in targets]
    return np.unique(np.concatenate(parts))


@dataclass(frozen=True)
class AttributeBounds:
    lo: np.ndarray
    hi: np.ndarray
    l0_budget: int | None = None

    def __post_init__(self):
        if np.any(self.lo > self.hi):
            raise ValueError("lo must not exceed hi")
        if self.l0_budget is not None and self.l0_budget < 1:
            raise ValueError("l0_budget must be >= 1")


def attribute_bounds(g: Graph) -> AttributeBounds:
    lo = g.X.min(axis=0)
    hi = g.X.max(axis=0)
    budget = None
    if g.attr_kind == DISCRETE:
        budget = max(1, int(round(float(np.count_nonzero(g.X, axis=1).mean()))))
    return AttributeBounds(lo, hi, budget)


# ---------------------------------------------------------------- injection


@dataclass(frozen=True, eq=False)
class InjectionPlan:
    """One malicious node: attributes, candidate endpoints and edge weights."""

    a_inj: np.ndarray
    candidates: np.ndarray
    e_inj: np.ndarray
    delta: int
    hardened: bool = False

    def __post_init__(self):
        object.__setattr__(self, "a_inj", _freeze(np.array(self.a_inj, dtype=np.float64).ravel()))
        object.__setattr__(self, "candidates", _freeze(np.array(self.candidates, dtype=np.int64).ravel()))
        object.__setattr__(self, "e_inj", _freeze(np.array(self.e_inj, dtype=np.float64).ravel()))
        if len(self.e_inj) != len(self.candidates):
            raise InjectionError("e_inj must have one weight per candidate")

    @property
    def edges_to(self) -> np.ndarray:
        return self.candidates[self.e_inj > 0]

    def to_json(self) -> dict:
        return {
            "a_inj": self.a_inj.tolist(),
            "candidates": self.candidates.tolist(),
            "e_inj": self.e_inj.tolist(),
            "delta": self.delta,
            "hardened": self.hardened,
        }


def plan_violations(plan: InjectionPlan, g: Graph, bounds: AttributeBounds, tol: float = 1e-9) -> list[str]:
    """Every constraint the plan breaks; empty list means valid."""
    out = []
    if plan.delta < 1:
        out.append("delta must be >= 1")
    if len(plan.a_inj) != g.d:
        out.append(f"a_inj has length {len(plan.a_inj)}, graph has d={g.d}")
        return out
    if plan.candidates.size and (plan.candidates.min() < 0 or plan.candidates.max() >= g.n):
        out.append("candidate id out of range")
    if len(np.unique(plan.candidates)) != len(plan.candidates):
        out.append("duplicate candidates")
    if np.any(plan.e_inj < -tol):
        out.append("negative edge weight")
    if not np.all(np.isfinite(plan.a_inj)):
        out.append("non-finite attributes")
    if plan.hardened:
        ones = int(np.sum(plan.e_inj == 1.0))
        if not np.isin(plan.e_inj, (0.0, 1.0)).all() or ones != min(plan.delta, len(plan.candidates)):
            out.append(f"hardened plan needs exactly min(delta, m)={min(plan.delta, len(plan.candidates))} edges, has {ones}")
    if g.attr_kind == DISCRETE:
        if plan.hardened:
            if not np.isin(plan.a_inj, (0.0, 1.0)).all():
                out.append("discrete attributes must be 0/1")
            elif bounds.l0_budget is not None and plan.a_inj.sum() > bounds.l0_budget:
                out.append(f"attribute L0 {int(plan.a_inj.sum())} exceeds budget {bounds.l0_budget}")
    elif np.any(plan.a_inj < bounds.lo - tol) or np.any(plan.a_inj > bounds.hi + tol):
        out.append("attributes outside [lo, hi]")
    return out


@dataclass(frozen=True, eq=False)
class PerturbedView:
    """The base graph plus one injected node (index ``n``); the base is never copied or changed."""

    base: Graph
    plan: InjectionPlan

    @property
    def n(self) -> int:
        return self.base.n + 1

    @property
    def inj(self) -> int:
        return self.base.n

    @property
    def X(self) -> np.ndarray:
        return np.vstack([self.base.X, self.plan.a_inj[None, :]])

    def adjacency(self) -> sp.csr_matrix:
        """(n+1) x (n+1) weighted adjacency; injected row/column carry e_inj."""
        base = self.base.adjacency
        n = self.base.n
        keep = self.plan.e_inj != 0
        c = self.plan.candidates[keep]
        w = self.plan.e_inj[keep]
        coo = base.tocoo()
        rows = np.concatenate([coo.row, c, np.full(len(c), n)])
        cols = np.concatenate([coo.col, np.full(len(c), n), c])
        vals = np.concatenate([coo.data, w, w])
        return sp.csr_matrix((vals, (rows, cols)), shape=(n + 1, n + 1))

    def degree(self) -> np.ndarray:
        return np.asarray(self.adjacency().sum(axis=1)).ravel()


def inject_node(g: Graph, plan: InjectionPlan, bounds: AttributeBounds | None = None) -> PerturbedView:
    if len(plan.a_inj) != g.d:
        raise InjectionError(f"a_inj has length {len(plan.a_inj)}, expected {g.d}")
    if plan.candidates.size and (plan.candidates.min() < 0 or plan.candidates.max() >= g.n):
        raise InjectionError("candidate id out of range")
    if plan.hardened:
        problems = plan_violations(plan, g, bounds or attribute_bounds(g))
        if problems:
            raise InjectionError("; ".join(problems))
    return PerturbedView(g, plan)
