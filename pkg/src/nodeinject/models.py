"""Two-layer GCN and APPNP surrogates, their training, and attack-side representations."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import TRAIN, VAL, Graph, PerturbedView, normalize_adjacency

log = logging.getLogger(__name__)

GCN = "gcn"
APPNP = "appnp"
CHECKPOINT_MAGIC = b"NIJ-SURROGATE"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(eq=False)
class SurrogateModel:
    """Trained weights plus caches for the clean graph they were fitted on.

    Treat as immutable once trained; attacks only read from it.
    """

    kind: str
    W0: np.ndarray
    W1: np.ndarray
    alpha: float = 0.1
    steps: int = 10
    graph_checksum: int | None = None
    _clean: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in (GCN, APPNP):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == APPNP and not (0.0 < self.alpha <= 1.0 and self.steps >= 0):
            raise ValueError("APPNP needs 0 < alpha <= 1 and steps >= 0")
        self.W0 = np.asarray(self.W0, dtype=np.float64)
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        if self.W0.shape[1] != self.W1.shape[0]:
            raise ValueError("W0 and W1 disagree on the hidden width")

    @property
    def d(self) -> int:
        return self.W0.shape[0]

    @property
    def hidden(self) -> int:
        return self.W0.shape[1]

    @property
    def K(self) -> int:
        return self.W1.shape[1]

    # -- clean-graph caches (the attacker's fixed view of the original graph)

    def clean(self, g: Graph) -> dict:
        key = id(g)
        cache = self._clean.get(key)
        if cache is None or cache["graph"] is not g:
            a_hat = normalize_adjacency(g)
            xw0 = g.X @ self.W0
            if self.kind == GCN:
                hidden = np.maximum(a_hat @ xw0, 0.0)
            else:
                hidden = np.maximum(xw0, 0.0)
            probs = _softmax(_dense_logits(self, a_hat, g.X))
            cache = {"graph": g, "a_hat": a_hat, "xw0": xw0, "hidden": hidden, "probs": probs}
            self._clean = {key: cache}
        return cache

    def predict(self, obj) -> np.ndarray:
        """Class probabilities for a Graph or PerturbedView."""
        return forward(self, obj)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _dense_logits(model: SurrogateModel, a_hat, X: np.ndarray) -> np.ndarray:
    xw0 = X @ model.W0
    if model.kind == GCN:
        h = np.maximum(a_hat @ xw0, 0.0)
        return a_hat @ (h @ model.W1)
    h = np.maximum(xw0, 0.0) @ model.W1
    z = h
    for _ in range(model.steps):
        z = (1.0 - model.alpha) * (a_hat @ z) + model.alpha * h
    return z


# ------------------------------------------------------ differentiable path


def receptive_field(g: Graph, nodes, radius: int) -> np.ndarray:
    """All nodes within ``radius`` hops of ``nodes`` (sorted)."""
    seen = np.zeros(g.n, dtype=bool)
    frontier = np.unique(np.atleast_1d(nodes))
    seen[frontier] = True
    adj = g.adjacency
    for _ in range(radius):
        if not len(frontier):
            break
        nxt = np.unique(adj[frontier].indices)
        frontier = nxt[~seen[nxt]]
        seen[frontier] = True
    return np.flatnonzero(seen)


class InjectionForward:
    """Differentiable forward pass of one model on base graph + one injected node.

    Built once per (model, graph, targets); each call takes the injected
    attribute row (1 x d) and candidate edge weights (1 x m or m x 1) as
    tensors. Soft weights enter the normalization directly: the injected
    node's degree is 1 + sum(e) and every candidate's degree grows by its
    weight.

    With ``local=True`` only the receptive field of the targets is computed
    (2 hops for GCN, P hops for APPNP); degrees still come from the full graph,
    so target rows are exact.
    """

    def __init__(self, model: SurrogateModel, g: Graph, targets, candidates, local: bool = True):
        self.model = model
        targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
        candidates = np.asarray(candidates, dtype=np.int64)
        radius = 2 if model.kind == GCN else max(model.steps, 1)
        nodes = receptive_field(g, targets, radius) if local else np.arange(g.n)
        if not np.isin(candidates, nodes).all():
            nodes = np.union1d(nodes, candidates)
        self.nodes = nodes
        local_id = np.full(g.n, -1, dtype=np.int64)
        local_id[nodes] = np.arange(len(nodes))
        self.targets = local_id[targets]
        self.candidates = candidates
        cand = local_id[candidates]
        sub = g.adjacency[nodes][:, nodes].tocoo()
        n = len(nodes)
        m = len(cand)
        self.n_local = n
        self.inj = n
        self.m = m
        loops = np.arange(n + 1)
        rows = np.concatenate([sub.row, cand, np.full(m, n), loops])
        cols = np.concatenate([sub.col, np.full(m, n), cand, loops])
        self.pattern = ad.SparsePattern(rows, cols, (n + 1, n + 1))
        self._fixed_edges = Tensor(np.ones((sub.nnz, 1)))
        self._loops = Tensor(np.ones((n + 1, 1)))
        outside = np.zeros(n + 1)
        outside[:n] = g.degree[nodes] - np.diff(g.adjacency[nodes][:, nodes].indptr)
        self._outside_degree = Tensor(outside.reshape(-1, 1))
        self._X = g.X[nodes]
        self._xw0 = Tensor(self._X @ model.W0)

    def _values(self, e_col: Tensor) -> Tensor:
        p = self.pattern
        vals = ad.concat_rows([self._fixed_edges, e_col, e_col, self._loops])
        deg = ad.add(ad.segment_sum(vals, p.rows, p.shape[0]), self._outside_degree)
        s = ad.power(deg, -0.5)
        return ad.mul(ad.mul(vals, ad.take_rows(s, p.rows)), ad.take_rows(s, p.cols))

    def logits(self, a_inj: Tensor, e_inj: Tensor, params: tuple[Tensor, Tensor] | None = None) -> Tensor:
        """Logit rows for every local node plus the injected one (last row)."""
        if e_inj.shape == (1, self.m):
            e_inj = ad.transpose(e_inj)
        if e_inj.shape != (self.m, 1):
            raise ValueError(f"edge weights must have {self.m} entries, got shape {e_inj.shape}")
        if a_inj.shape != (1, self.model.d):
            raise ValueError(f"attributes must be 1 x {self.model.d}, got {a_inj.shape}")
        vals = self._values(e_inj)
        prop = lambda t: ad.spmm_pattern(self.pattern, vals, t)  # noqa: E731
        if params is None:
            W0, W1 = Tensor(self.model.W0), Tensor(self.model.W1)
            base = self._xw0
        else:
            W0, W1 = params
            base = ad.matmul(Tensor(self._X), W0)
        xw0 = ad.concat_rows([base, ad.matmul(a_inj, W0)])
        return _logits_from(self.model, xw0, prop, W1)

    def target_probs(self, a_inj: Tensor, e_inj: Tensor, params=None) -> Tensor:
        """Probability rows of the targets, in the order given."""
        return ad.row_softmax(ad.take_rows(self.logits(a_inj, e_inj, params), self.targets))


def soft_forward(model: SurrogateModel, g: Graph, candidates, a_inj: Tensor, e_inj: Tensor) -> Tensor:
    """Probabilities on the full (n+1)-node perturbed graph, differentiable in a_inj and e_inj."""
    fwd = InjectionForward(model, g, np.arange(g.n), candidates, local=False)
    return ad.row_softmax(fwd.logits(a_inj, e_inj))


def _logits_from(model: SurrogateModel, xw0: Tensor, prop, W1: Tensor) -> Tensor:
    if model.kind == GCN:
        h = ad.relu(prop(xw0))
        return prop(ad.matmul(h, W1))
    h = ad.matmul(ad.relu(xw0), W1)
    z = h
    for _ in range(model.steps):
        z = ad.add(ad.scale(prop(z), 1.0 - model.alpha), ad.scale(h, model.alpha))
    return z


# -------------------------------------------------------------- public ops


def forward(model: SurrogateModel, obj) -> np.ndarray:
    """Probability rows for every node of a Graph or PerturbedView (no gradients)."""
    if isinstance(obj, PerturbedView):
        if obj.base.d != model.d:
            raise ValueError(f"graph has d={obj.base.d}, model expects {model.d}")
        a_hat = normalize_adjacency(obj)
        return _softmax(_dense_logits(model, a_hat, obj.X))
    if obj.d != model.d:
        raise ValueError(f"graph has d={obj.d}, model expects {model.d}")
    return model.clean(obj)["probs"]


def gcn_forward(model: SurrogateModel, obj) -> np.ndarray:
    if model.kind != GCN:
        raise ValueError("gcn_forward needs a GCN model")
    return forward(model, obj)


def appnp_forward(model: SurrogateModel, obj) -> np.ndarray:
    if model.kind != APPNP:
        raise ValueError("appnp_forward needs an APPNP model")
    return forward(model, obj)


def hidden_representation(model: SurrogateModel, obj, nodes) -> np.ndarray:
    """Layer-1 activations (after aggregation for GCN); a node group gives its mean row."""
    nodes = np.atleast_1d(np.asarray(nodes, dtype=np.int64))
    if isinstance(obj, PerturbedView):
        xw0 = obj.X @ model.W0
        h = np.maximum(normalize_adjacency(obj) @ xw0, 0.0) if model.kind == GCN else np.maximum(xw0, 0.0)
    else:
        h = model.clean(obj)["hidden"]
    return h[nodes].mean(axis=0)


def class_representation(model: SurrogateModel, y_t, k_t) -> np.ndarray:
    """Columns y_t and k_t of W0 @ W1, concatenated (length 2d).

    For groups pass arrays of labels; the columns are averaged.
    """
    W = model.W0 @ model.W1
    y_t = np.atleast_1d(y_t)
    k_t = np.atleast_1d(k_t)
    if max(y_t.max(), k_t.max()) >= model.K:
        raise ValueError("class index out of range")
    return np.concatenate([W[:, y_t].mean(axis=1), W[:, k_t].mean(axis=1)])


def transform_injected(model: SurrogateModel, a_inj):
    """relu(a_inj @ W0): the injected node's representation before it has edges."""
    if isinstance(a_inj, Tensor):
        return ad.relu(ad.matmul(a_inj, Tensor(model.W0)))
    return np.maximum(np.asarray(a_inj, dtype=np.float64) @ model.W0, 0.0)


def most_likely_class(model: SurrogateModel, g: Graph, t) -> int:
    """Runner-up class on the clean graph; a group uses its mean probability row."""
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    probs = model.clean(g)["probs"][t].mean(axis=0).copy()
    labels = g.y[t]
    y_t = int(np.bincount(labels).argmax())
    probs[y_t] = -np.inf
    return int(np.argmax(probs))


# ------------------------------------------------------------------ training


@dataclass
class SurrogateConfig:
    kind: str = GCN
    hidden: int = 64
    lr: float = 1e-2
    weight_decay: float = 5e-4
    epochs: int = 300
    patience: int = 30
    alpha: float = 0.1
    steps: int = 10
    seed: int = 0
    rms_decay: float = 0.99
    rms_eps: float = 1e-8


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def train_surrogate(g: Graph, cfg: SurrogateConfig | None = None, **overrides) -> SurrogateModel:
    """Full-batch cross-entropy training on TRAIN nodes; keeps the best-validation weights."""
    cfg = replace(cfg or SurrogateConfig(), **overrides)
    train = g.nodes_in(TRAIN)
    val = g.nodes_in(VAL)
    if not len(train):
        raise ValueError("graph has no training nodes")
    rng = np.random.default_rng(cfg.seed)
    W0 = Tensor(_glorot(rng, g.d, cfg.hidden), requires_grad=True)
    W1 = Tensor(_glorot(rng, cfg.hidden, g.K), requires_grad=True)
    shell = SurrogateModel(cfg.kind, W0.data, W1.data, cfg.alpha, cfg.steps)
    a_hat = normalize_adjacency(g)
    X = Tensor(g.X)
    opt = ad.RMSprop([W0, W1], lr=cfg.lr, decay=cfg.rms_decay, eps=cfg.rms_eps,
                     weight_decay=cfg.weight_decay)
    eval_nodes = val if len(val) else train
    best = (-1.0, W0.data.copy(), W1.data.copy())
    stale = 0
    for epoch in range(cfg.epochs):
        opt.zero_grad()
        with ad.GradTape() as tape:
            logits = _logits_from(shell, ad.matmul(X, W0), lambda t: ad.spmm(a_hat, t), W1)
            logp = ad.row_log_softmax(logits)
            picked = ad.take_elements(logp, train, g.y[train])
            loss = ad.scale(ad.reduce_sum(picked), -1.0 / len(train))
        if not np.isfinite(loss.item()):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        tape.backward(loss)
        opt.step()
        shell.W0, shell.W1 = W0.data, W1.data
        pred = _dense_logits(shell, a_hat, g.X)[eval_nodes].argmax(axis=1)
        acc = float((pred == g.y[eval_nodes]).mean())
        if acc > best[0]:
            best = (acc, W0.data.copy(), W1.data.copy())
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.debug("surrogate early stop at epoch %d (val acc %.3f)", epoch, best[0])
                break
    return SurrogateModel(cfg.kind, best[1], best[2], cfg.alpha, cfg.steps, g.checksum())


def accuracy(model: SurrogateModel, g: Graph, nodes) -> float:
    nodes = np.asarray(nodes, dtype=np.int64)
    return float((forward(model, g)[nodes].argmax(axis=1) == g.y[nodes]).mean())


# --------------------------------------------------------------- checkpoint


def save_model(model: SurrogateModel, path) -> None:
    header = {"magic": CHECKPOINT_MAGIC.decode(), "version": CHECKPOINT_VERSION, "kind": model.kind,
              "d": model.d, "h": model.hidden, "K": model.K, "alpha": model.alpha, "P": model.steps,
              "graph_checksum": model.graph_checksum}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        ad.write_tensor(fh, model.W0)
        ad.write_tensor(fh, model.W1)


def load_model(path) -> SurrogateModel:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        if header.get("magic") != CHECKPOINT_MAGIC.decode() or header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} surrogate checkpoint")
        W0 = ad.read_tensor(fh).data
        W1 = ad.read_tensor(fh).data
    if W0.shape != (header["d"], header["h"]) or W1.shape != (header["h"], header["K"]):
        raise ValueError(f"{path}: tensor shapes disagree with header")
    return SurrogateModel(header["kind"], W0, W1, header["alpha"], header["P"], header.get("graph_checksum"))
