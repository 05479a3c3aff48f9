"""Attack objective and the per-instance optimisation attacker (OPTI)."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import (DISCRETE, AttributeBounds, Graph, InjectionPlan, candidate_set, inject_node)
from .gumbel import GumbelConfig, gumbel_topk, harden
from .models import InjectionForward, SurrogateModel, forward


def attack_loss(Z, targets, labels) -> Tensor:
    """Sum over targets of P(true class) - max P(other class).

    A target's term is negative exactly when it is misclassified.
    """
    Z = Z if isinstance(Z, Tensor) else Tensor(Z)
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.min() < 0 or labels.max() >= Z.shape[1]:
        raise ValueError("label out of range")
    true = ad.take_elements(Z, targets, labels)
    rows = ad.take_rows(Z, targets)
    other = ad.masked_row_max(rows, labels)
    return ad.reduce_sum(ad.sub(true, other))


def margins(probs: np.ndarray, targets, labels) -> np.ndarray:
    targets = np.atleast_1d(targets)
    labels = np.atleast_1d(labels)
    rows = probs[targets].copy()
    true = rows[np.arange(len(targets)), labels]
    rows[np.arange(len(targets)), labels] = -np.inf
    return true - rows.max(axis=1)


def evaluate_plan(model: SurrogateModel, g: Graph, plan: InjectionPlan, targets):
    """Loss and per-target misclassification flags of a plan, computed from scratch."""
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    probs = forward(model, inject_node(g, plan))
    m = margins(probs, targets, g.y[targets])
    flags = probs[targets].argmax(axis=1) != g.y[targets]
    return float(m.sum()), flags


def map_attributes(raw: Tensor, g: Graph, bounds: AttributeBounds, tau: float, eps: float,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Unconstrained scores -> soft attribute row inside the feasible set.

    Continuous: lo + sigmoid(raw) * (hi - lo). Discrete: Gumbel-Top-k with the L0 budget.
    """
    if g.attr_kind == DISCRETE:
        k = min(bounds.l0_budget or 1, g.d)
        return gumbel_topk(raw, k, tau, eps, rng=rng)
    span = Tensor((bounds.hi - bounds.lo).reshape(1, -1))
    return ad.add(ad.mul(ad.sigmoid(raw), span), Tensor(bounds.lo.reshape(1, -1)))


def harden_attributes(soft: np.ndarray, g: Graph, bounds: AttributeBounds) -> np.ndarray:
    soft = np.asarray(soft, dtype=np.float64).ravel()
    if g.attr_kind == DISCRETE:
        return harden(soft, min(bounds.l0_budget or 1, g.d))
    return np.clip(soft, bounds.lo, bounds.hi)


@dataclass
class OptiConfig:
    lr: float = 0.1  # continuous logits must reach the bound corners within the budget
    max_iters: int = 1000
    gumbel: GumbelConfig = field(default_factory=lambda: GumbelConfig(tau=1.0, eps=1.0, decay=0.99))
    restarts: int = 1
    tol: float = 1e-6
    patience: int = 50
    seed: int = 0
    rms_decay: float = 0.99
    rms_eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class AttackOutcome:
    targets: np.ndarray
    plan: InjectionPlan
    loss: float
    success: np.ndarray
    wall_time: float
    iterations: int = 0

    @property
    def misclassified(self) -> bool:
        return bool(np.all(self.success))


def opti_attack(model: SurrogateModel, g: Graph, targets, bounds: AttributeBounds, delta: int,
                cfg: OptiConfig | None = None) -> AttackOutcome:
    """Optimise one injected node's attributes and edges for these targets.

    Free variables are attribute scores and per-candidate edge scores. Each
    step evaluates the relaxed plan on the surrogate, descends the attack loss
    with RMSprop, and scores the hardened version of the current draw; the best
    hardened plan seen across iterations and restarts is returned.
    """
    cfg = cfg or OptiConfig()
    if delta < 1:
        raise ValueError("edge budget delta must be >= 1")
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    labels = g.y[targets]
    start = time.perf_counter()
    cands = candidate_set(g, targets)
    m = len(cands)
    if m == 0:
        raise ValueError("empty candidate set")
    k_edges = min(delta, m)
    gcfg = cfg.gumbel
    fwd = InjectionForward(model, g, targets, cands)
    local_rows = np.arange(len(targets))

    best_loss = np.inf
    best_plan = None
    iters_run = 0
    for restart in range(cfg.restarts):
        rng = np.random.default_rng([cfg.seed, restart])
        attr_scores = Tensor(np.zeros((1, g.d)), requires_grad=True)
        edge_scores = Tensor(np.zeros((1, m)), requires_grad=True)
        opt = ad.RMSprop([attr_scores, edge_scores], lr=cfg.lr, decay=cfg.rms_decay, eps=cfg.rms_eps)
        restart_best = np.inf
        stale = 0
        for it in range(cfg.max_iters):
            iters_run += 1
            eps = gcfg.decayed(it)
            opt.zero_grad()
            with ad.GradTape() as tape:
                a_soft = map_attributes(attr_scores, g, bounds, gcfg.tau, eps, rng)
                e_soft = gumbel_topk(edge_scores, k_edges, gcfg.tau, eps, rng=rng)
                loss = attack_loss(fwd.target_probs(a_soft, e_soft), local_rows, labels)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite attack loss at iteration {it}")

            a_hard = harden_attributes(a_soft.data, g, bounds)
            e_hard = harden(e_soft, k_edges)
            hard_loss = float(margins(fwd.target_probs(Tensor(a_hard), Tensor(e_hard)).data,
                                      local_rows, labels).sum())
            if hard_loss < best_loss:
                best_loss = hard_loss
                best_plan = InjectionPlan(a_hard, cands, e_hard, delta, hardened=True)
            if hard_loss < restart_best - cfg.tol:
                restart_best = hard_loss
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
            tape.backward(loss)
            opt.step()

    wall = time.perf_counter() - start
    final_loss, flags = evaluate_plan(model, g, best_plan, targets)
    return AttackOutcome(targets, best_plan, final_loss, flags, wall, iters_run)
