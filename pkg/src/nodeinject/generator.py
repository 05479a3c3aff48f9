"""G-NIA: a trained generator of malicious node attributes and edges.

Attributes come from a two-layer network over the target representation and
the class representations. Edges are scored per candidate by a second network
that also sees the generated attributes (through the surrogate's feature
transform), then selected with Gumbel-Top-k.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import AttributeBounds, Graph, InjectionPlan, candidate_set
from .gumbel import GumbelConfig, gumbel_topk, harden
from .models import (InjectionForward, SurrogateModel, class_representation, most_likely_class,
                     transform_injected)
from .opti import AttackOutcome, attack_loss, evaluate_plan, harden_attributes, map_attributes, margins

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "NIJ-GNIA"
CHECKPOINT_VERSION = 1
PARAM_NAMES = ("Wa0", "ba0", "Wa1", "ba1", "We0", "be0", "We1", "be1")


@dataclass
class GniaParams:
    Wa0: np.ndarray
    ba0: np.ndarray
    Wa1: np.ndarray
    ba1: np.ndarray
    We0: np.ndarray
    be0: np.ndarray
    We1: np.ndarray
    be1: np.ndarray

    @property
    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, k) for k in PARAM_NAMES]

    def copy(self) -> "GniaParams":
        return GniaParams(*(a.copy() for a in self.arrays))

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(getattr(self, k), requires_grad=requires_grad) for k in PARAM_NAMES}


def init_params(d: int, h: int, h_a: int = 512, h_e: int = 512, seed: int = 0) -> GniaParams:
    rng = np.random.default_rng(seed)

    def glorot(i, o):
        lim = np.sqrt(6.0 / (i + o))
        return rng.uniform(-lim, lim, size=(i, o))

    attr_in = h + 2 * d
    edge_in = h + h + 2 * d + h
    return GniaParams(
        glorot(attr_in, h_a), np.zeros((1, h_a)), glorot(h_a, d), np.zeros((1, d)),
        glorot(edge_in, h_e), np.zeros((1, h_e)), glorot(h_e, 1), np.zeros((1, 1)),
    )


@dataclass
class GniaTrainConfig:
    lr: float = 1e-3
    max_epochs: int = 2000
    patience: int = 100
    batch_size: int = 32
    gumbel: GumbelConfig = field(default_factory=lambda: GumbelConfig(tau=1.0, eps=1.0, decay=0.99))
    seed: int = 0
    h_a: int = 512
    h_e: int = 512
    no_attr: bool = False
    no_edge: bool = False
    no_joint: bool = False
    rms_decay: float = 0.99
    rms_eps: float = 1e-8

    def __post_init__(self):
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")

    def to_json(self) -> dict:
        out = asdict(self)
        out["gumbel"] = asdict(self.gumbel)
        return out


def edge_budget_multi(n_targets: int, avg_degree: float, m: int) -> int:
    """max(1, floor(min(n_t * D_avg, m / 2)))."""
    return max(1, int(np.floor(min(n_targets * avg_degree, 0.5 * m))))


class AttackInstance:
    """One target (or target group) with everything the generator reads from the clean graph."""

    def __init__(self, model: SurrogateModel, g: Graph, targets, delta: int):
        self.targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
        self.labels = g.y[self.targets]
        self.delta = int(delta)
        clean = model.clean(g)
        self.candidates = candidate_set(g, self.targets)
        self.k = np.array([most_likely_class(model, g, t) for t in self.targets])
        self.r_t = clean["hidden"][self.targets].mean(axis=0, keepdims=True)
        self.u_t = class_representation(model, self.labels, self.k).reshape(1, -1)
        self.r_c = clean["hidden"][self.candidates]
        self._fwd: InjectionForward | None = None
        self._model = model
        self._g = g

    @property
    def m(self) -> int:
        return len(self.candidates)

    @property
    def k_edges(self) -> int:
        return min(self.delta, self.m)

    @property
    def fwd(self) -> InjectionForward:
        if self._fwd is None:
            self._fwd = InjectionForward(self._model, self._g, self.targets, self.candidates)
        return self._fwd


def _attr_logits(p: dict[str, Tensor], inst: AttackInstance) -> Tensor:
    x = Tensor(np.concatenate([inst.r_t, inst.u_t], axis=1))
    hidden = ad.relu(ad.add_bias(ad.matmul(x, p["Wa0"]), p["ba0"]))
    return ad.add_bias(ad.matmul(hidden, p["Wa1"]), p["ba1"])


def _edge_scores(p: dict[str, Tensor], model: SurrogateModel, inst: AttackInstance, a_inj: Tensor,
                 no_joint: bool) -> Tensor:
    if no_joint:
        r_inj = Tensor(np.zeros((1, model.hidden)))
    else:
        # Bound-corner attributes give r_inj norms ~10x those of r_c; unscaled, the
        # shared block swamps the per-candidate differences the scores depend on.
        r_inj = ad.row_normalize(transform_injected(model, a_inj))
    shared = ad.concat_cols([r_inj, Tensor(inst.r_t), Tensor(inst.u_t)])
    x = ad.concat_cols([ad.repeat_rows(shared, inst.m), Tensor(inst.r_c)])
    hidden = ad.relu(ad.add_bias(ad.matmul(x, p["We0"]), p["be0"]))
    scores = ad.add_bias(ad.matmul(hidden, p["We1"]), p["be1"])
    return ad.transpose(scores)


def random_attributes(g: Graph, rng: np.random.Generator) -> np.ndarray:
    return g.X[rng.integers(g.n)].copy()


def random_edges(m: int, k: int, rng: np.random.Generator) -> np.ndarray:
    e = np.zeros(m)
    e[rng.choice(m, size=min(k, m), replace=False)] = 1.0
    return e


def generate_attributes(params, model: SurrogateModel, g: Graph, inst: AttackInstance,
                        bounds: AttributeBounds, tau: float = 1.0, eps: float = 0.0,
                        rng: np.random.Generator | None = None) -> Tensor:
    """Soft attribute row for the injected node."""
    p = params.tensors() if isinstance(params, GniaParams) else params
    return map_attributes(_attr_logits(p, inst), g, bounds, tau, eps, rng)


def generate_edges(params, model: SurrogateModel, inst: AttackInstance, a_inj: Tensor,
                   tau: float = 1.0, eps: float = 0.0, rng: np.random.Generator | None = None,
                   no_joint: bool = False) -> Tensor:
    """Relaxed k-hot edge weights over the instance's candidates, k = min(delta, m)."""
    if inst.m == 0:
        raise ValueError("empty candidate set")
    p = params.tensors() if isinstance(params, GniaParams) else params
    scores = _edge_scores(p, model, inst, a_inj, no_joint)
    return gumbel_topk(scores, inst.k_edges, tau, eps, rng=rng)


def gnia_forward(params, model: SurrogateModel, g: Graph, inst: AttackInstance,
                 bounds: AttributeBounds, mode: str = "train", tau: float = 1.0, eps: float = 0.0,
                 rng: np.random.Generator | None = None, no_attr: bool = False,
                 no_edge: bool = False, no_joint: bool = False):
    """Attributes, then edges, then the surrogate on the perturbed graph.

    Returns ``(plan, loss)``. In ``train`` mode the plan is soft and the loss
    is a tape-connected tensor; in ``infer`` mode both parts are hardened and
    the loss is a float.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if (no_attr or no_edge) and rng is None:
        rng = np.random.default_rng()
    if no_attr:
        a_soft = Tensor(random_attributes(g, rng).reshape(1, -1))
    else:
        a_soft = generate_attributes(params, model, g, inst, bounds, tau, eps, rng)
    if no_edge:
        e_soft = Tensor(random_edges(inst.m, inst.k_edges, rng).reshape(1, -1))
    else:
        e_soft = generate_edges(params, model, inst, a_soft, tau, eps, rng, no_joint)
    rows = np.arange(len(inst.targets))
    if mode == "train":
        loss = attack_loss(inst.fwd.target_probs(a_soft, e_soft), rows, inst.labels)
        plan = InjectionPlan(a_soft.data, inst.candidates, e_soft.data, inst.delta, hardened=False)
        return plan, loss
    plan = _harden_plan(a_soft, e_soft, g, inst, bounds)
    probs = inst.fwd.target_probs(Tensor(plan.a_inj), Tensor(plan.e_inj)).data
    return plan, float(margins(probs, rows, inst.labels).sum())


def _harden_plan(a_soft: Tensor, e_soft: Tensor, g: Graph, inst: AttackInstance,
                 bounds: AttributeBounds) -> InjectionPlan:
    return InjectionPlan(harden_attributes(a_soft.data, g, bounds), inst.candidates,
                         harden(e_soft, inst.k_edges), inst.delta, hardened=True)


def generate_plan(params: GniaParams, model: SurrogateModel, g: Graph, targets, delta: int,
                  bounds: AttributeBounds, no_joint: bool = False) -> InjectionPlan:
    """Hardened plan from one forward pass of the generator (no surrogate evaluation)."""
    inst = AttackInstance(model, g, targets, delta)
    p = params.tensors()
    a_soft = generate_attributes(p, model, g, inst, bounds)
    e_soft = generate_edges(p, model, inst, a_soft, no_joint=no_joint)
    return _harden_plan(a_soft, e_soft, g, inst, bounds)


def gnia_infer(params: GniaParams, model: SurrogateModel, g: Graph, targets, delta: int,
               bounds: AttributeBounds, no_joint: bool = False) -> AttackOutcome:
    """Attack by a single generator pass; success is re-checked on the surrogate."""
    start = time.perf_counter()
    plan = generate_plan(params, model, g, targets, delta, bounds, no_joint)
    wall = time.perf_counter() - start
    loss, flags = evaluate_plan(model, g, plan, targets)
    return AttackOutcome(np.atleast_1d(targets), plan, loss, flags, wall, 0)


@dataclass
class TrainReport:
    epochs_run: int
    best_epoch: int
    best_val_rate: float
    history: list[float]


def _val_rate(params, model, g, instances, bounds, cfg, rng) -> float:
    p = params.tensors()
    wins = 0
    for inst in instances:
        plan, _ = gnia_forward(p, model, g, inst, bounds, "infer", cfg.gumbel.tau, 0.0, rng,
                               cfg.no_attr, cfg.no_edge, cfg.no_joint)
        probs = inst.fwd.target_probs(Tensor(plan.a_inj), Tensor(plan.e_inj)).data
        wins += bool(np.all(probs.argmax(axis=1) != inst.labels))
    return wins / max(len(instances), 1)


def gnia_train(g: Graph, model: SurrogateModel, train_targets, val_targets, bounds: AttributeBounds,
               delta, cfg: GniaTrainConfig | None = None) -> tuple[GniaParams, TrainReport]:
    """RMSprop over minibatches of attack instances with early stopping on validation.

    ``train_targets``/``val_targets`` are lists of node ids or of node groups.
    ``delta`` is an int or a callable mapping a target group to its budget.
    Returns the parameters from the epoch with the best hardened validation
    misclassification rate.
    """
    cfg = cfg or GniaTrainConfig()
    tr = [np.atleast_1d(t) for t in train_targets]
    va = [np.atleast_1d(t) for t in val_targets]
    if {tuple(t) for t in tr} & {tuple(t) for t in va}:
        raise ValueError("training and validation targets must be disjoint")
    budget = delta if callable(delta) else (lambda _t: delta)
    train_inst = [AttackInstance(model, g, t, budget(t)) for t in tr]
    val_inst = [AttackInstance(model, g, t, budget(t)) for t in va]

    params = init_params(g.d, model.hidden, cfg.h_a, cfg.h_e, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    eval_rng = np.random.default_rng([cfg.seed, 2])
    tensors = params.tensors(requires_grad=True)
    trainable = [tensors[k] for k in PARAM_NAMES]
    opt = ad.RMSprop(trainable, lr=cfg.lr, decay=cfg.rms_decay, eps=cfg.rms_eps)
    sync = lambda: GniaParams(*(t.data for t in trainable))  # noqa: E731

    best_rate = _val_rate(sync(), model, g, val_inst, bounds, cfg, eval_rng)
    best_params, best_epoch = sync().copy(), 0
    history = []
    stale = 0
    epoch = 0
    needs_grad = not (cfg.no_attr and cfg.no_edge)
    for epoch in range(1, cfg.max_epochs + 1):
        eps = cfg.gumbel.decayed(epoch - 1)
        order = rng.permutation(len(train_inst))
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_inst[i] for i in order[start : start + cfg.batch_size]]
            if not needs_grad:
                break
            opt.zero_grad()
            with ad.GradTape() as tape:
                losses = [gnia_forward(tensors, model, g, inst, bounds, "train", cfg.gumbel.tau, eps,
                                       rng, cfg.no_attr, cfg.no_edge, cfg.no_joint)[1] for inst in batch]
                total = ad.scale(ad.reduce_sum(ad.concat_rows(losses)), 1.0 / len(batch))
            if not np.isfinite(total.item()):
                raise FloatingPointError(f"non-finite attack loss in epoch {epoch}")
            tape.backward(total)
            opt.step()
        rate = _val_rate(sync(), model, g, val_inst, bounds, cfg, eval_rng)
        history.append(rate)
        if rate > best_rate:
            best_rate, best_params, best_epoch = rate, sync().copy(), epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    log.info("G-NIA stopped after %d epochs; best validation rate %.3f at epoch %d",
             epoch, best_rate, best_epoch)
    return best_params, TrainReport(epoch, best_epoch, best_rate, history)


# --------------------------------------------------------------- checkpoint


def save_params(params: GniaParams, path, attr_kind: str, h: int, K: int, extra: dict | None = None) -> None:
    d = params.Wa1.shape[1]
    header = {"magic": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION, "d": d, "h": h, "K": K,
              "h_a": params.Wa0.shape[1], "h_e": params.We0.shape[1], "attr_kind": attr_kind,
              "tensors": list(PARAM_NAMES)}
    if extra:
        header["extra"] = extra
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode() + b"\n")
        for arr in params.arrays:
            ad.write_tensor(fh, arr)


def load_params(path) -> tuple[GniaParams, dict]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        if header.get("magic") != CHECKPOINT_MAGIC or header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} G-NIA checkpoint")
        arrays = [ad.read_tensor(fh).data for _ in PARAM_NAMES]
    params = GniaParams(*arrays)
    d, h = header["d"], header["h"]
    if params.Wa0.shape != (h + 2 * d, header["h_a"]) or params.We0.shape != (3 * h + 2 * d, header["h_e"]):
        raise ValueError(f"{path}: tensor shapes disagree with header")
    return params, header
