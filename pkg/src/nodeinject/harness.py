"""Baselines, target groups, scenario runs, JSON-lines records and reports."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .generator import GniaParams, edge_budget_multi, generate_plan
from .graph import (DISCRETE, TEST, AttributeBounds, Graph, InjectionPlan, attribute_bounds,
                    candidate_set, fnv1a64, inject_node, plan_violations)
from .models import SurrogateModel, forward, most_likely_class
from .opti import OptiConfig, opti_attack

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SINGLE, MULTI, BLACK_BOX = "single_target", "multi_target", "black_box"
METHODS = ("random", "mostattr", "prefedge", "opti", "gnia")


# ------------------------------------------------------------------ metrics


def misclassification_rate(records) -> float:
    """Fraction of attacks whose every target ended up misclassified."""
    flags = [r["success"] if isinstance(r, dict) else bool(np.all(r)) for r in records]
    if not flags:
        raise ValueError("no records")
    return float(np.mean(flags))


# ---------------------------------------------------------------- baselines


def _attribute_donors(g: Graph, bounds: AttributeBounds, pool=None) -> np.ndarray:
    pool = np.arange(g.n) if pool is None else np.asarray(pool, dtype=np.int64)
    if g.attr_kind == DISCRETE and bounds.l0_budget is not None:
        pool = pool[np.count_nonzero(g.X[pool], axis=1) <= bounds.l0_budget]
    return pool


def _uniform_edges(m: int, delta: int, rng) -> np.ndarray:
    e = np.zeros(m)
    e[rng.choice(m, size=min(delta, m), replace=False)] = 1.0
    return e


def random_attack(g: Graph, targets, delta: int, rng: np.random.Generator,
                  bounds: AttributeBounds | None = None) -> InjectionPlan:
    """Attributes of a uniformly drawn node; delta uniformly drawn candidates."""
    bounds = bounds or attribute_bounds(g)
    cands = candidate_set(g, targets)
    donor = rng.choice(_attribute_donors(g, bounds))
    return InjectionPlan(g.X[donor], cands, _uniform_edges(len(cands), delta, rng), delta, hardened=True)


def most_attr_attack(g: Graph, model: SurrogateModel, targets, delta: int, rng: np.random.Generator,
                     bounds: AttributeBounds | None = None) -> InjectionPlan:
    """Attributes of a random node from the runner-up class; edges as in random_attack."""
    bounds = bounds or attribute_bounds(g)
    k_t = most_likely_class(model, g, targets)
    pool = _attribute_donors(g, bounds, np.flatnonzero(g.y == k_t))
    if not len(pool):
        log.warning("no usable node of class %d; falling back to random attributes", k_t)
        return random_attack(g, targets, delta, rng, bounds)
    cands = candidate_set(g, targets)
    donor = rng.choice(pool)
    return InjectionPlan(g.X[donor], cands, _uniform_edges(len(cands), delta, rng), delta, hardened=True)


def pref_edge_attack(g: Graph, targets, delta: int, rng: np.random.Generator,
                     bounds: AttributeBounds | None = None) -> InjectionPlan:
    """Candidates drawn without replacement with probability proportional to degree."""
    bounds = bounds or attribute_bounds(g)
    cands = candidate_set(g, targets)
    w = np.maximum(g.degree[cands], 1).astype(np.float64)
    e = np.zeros(len(cands))
    e[rng.choice(len(cands), size=min(delta, len(cands)), replace=False, p=w / w.sum())] = 1.0
    donor = rng.choice(_attribute_donors(g, bounds))
    return InjectionPlan(g.X[donor], cands, e, delta, hardened=True)


# ------------------------------------------------------------ target groups


def two_hop_reach(g: Graph) -> sp.csr_matrix:
    a = g.adjacency
    return ((a + a @ a) > 0).tocsr()


def build_target_groups(g: Graph, seed: int | None = None, size: int = 3) -> list[np.ndarray]:
    """Greedy disjoint packing of node triples whose pairwise distance is at most 2.

    Nodes are visited in ascending id (or in a seeded random order when
    ``seed`` is given); each picks the lexicographically smallest valid
    partners among unused nodes.
    """
    if size != 3:
        raise ValueError("only groups of three are supported")
    reach = two_hop_reach(g)
    order = np.arange(g.n) if seed is None else np.random.default_rng(seed).permutation(g.n)
    used = np.zeros(g.n, dtype=bool)
    groups = []

    def near(u):
        return set(reach.indices[reach.indptr[u] : reach.indptr[u + 1]].tolist()) - {u}

    for u in order:
        if used[u]:
            continue
        ball = sorted(v for v in near(u) if not used[v])
        found = None
        for i, v in enumerate(ball):
            nv = near(v)
            for w in ball[i + 1 :]:
                if w in nv:
                    found = (v, w)
                    break
            if found:
                break
        if found:
            grp = np.array(sorted((int(u),) + found), dtype=np.int64)
            used[grp] = True
            groups.append(grp)
    return groups


def split_items(items, seed: int, test_frac: float = 0.2, val_frac: float = 0.2):
    """Split a list 64/16/20 into (train, val, test) like the node split."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(items))
    n_test = int(round(test_frac * len(items)))
    n_val = int(round(val_frac * (len(items) - n_test)))
    pick = lambda idx: [items[i] for i in idx]  # noqa: E731
    return pick(perm[n_test + n_val :]), pick(perm[n_test : n_test + n_val]), pick(perm[:n_test])


def multi_target_delta(g: Graph) -> Callable:
    avg = float(g.degree.mean())
    return lambda targets: edge_budget_multi(len(np.atleast_1d(targets)), avg,
                                             len(candidate_set(g, targets)))


# ----------------------------------------------------------------- scenario


@dataclass
class Scenario:
    kind: str = SINGLE
    surrogate_kind: str = "gcn"
    victim_kind: str = "gcn"

    def __post_init__(self):
        if self.kind not in (SINGLE, MULTI, BLACK_BOX):
            raise ValueError(f"unknown scenario {self.kind!r}")
        if self.kind == BLACK_BOX and self.surrogate_kind == self.victim_kind:
            raise ValueError("black-box scenario needs a victim of a different kind than the surrogate")

    def delta_for(self, g: Graph) -> Callable:
        if self.kind == MULTI:
            return multi_target_delta(g)
        return lambda _targets: 1


@dataclass
class AttackContext:
    """Everything an attacker may read. The victim model is deliberately absent."""

    graph: Graph
    surrogate: SurrogateModel
    bounds: AttributeBounds
    gnia_params: GniaParams | None = None
    opti_cfg: OptiConfig = field(default_factory=OptiConfig)
    no_joint: bool = False


def craft(method: str, ctx: AttackContext, targets, delta: int, rng: np.random.Generator):
    """Run one attacker; returns ``(plan, wall_time)`` with time covering only the attack call."""
    g = ctx.graph
    start = time.perf_counter()
    if method == "random":
        plan = random_attack(g, targets, delta, rng, ctx.bounds)
    elif method == "mostattr":
        plan = most_attr_attack(g, ctx.surrogate, targets, delta, rng, ctx.bounds)
    elif method == "prefedge":
        plan = pref_edge_attack(g, targets, delta, rng, ctx.bounds)
    elif method == "opti":
        cfg = ctx.opti_cfg
        cfg = OptiConfig(**{**asdict(cfg), "gumbel": cfg.gumbel, "seed": int(rng.integers(2**31))})
        plan = opti_attack(ctx.surrogate, g, targets, ctx.bounds, delta, cfg).plan
    elif method == "gnia":
        if ctx.gnia_params is None:
            raise ValueError("gnia method needs trained parameters")
        plan = generate_plan(ctx.gnia_params, ctx.surrogate, g, targets, delta, ctx.bounds, ctx.no_joint)
    else:
        raise ValueError(f"unknown method {method!r}")
    return plan, time.perf_counter() - start


class VictimOracle:
    """Victim wrapper used only by the harness; every access is logged."""

    def __init__(self, model: SurrogateModel, source: str | None = None):
        self._model = model
        self.source = source
        self.calls: list[str] = []

    def predict(self, obj, caller: str) -> np.ndarray:
        self.calls.append(caller)
        return forward(self._model, obj)


def plan_digest(plan: InjectionPlan) -> str:
    payload = plan.a_inj.astype("<f8").tobytes() + plan.candidates.astype("<i8").tobytes() \
        + plan.e_inj.astype("<f8").tobytes()
    return f"{fnv1a64(payload):016x}"


def attack_record(scenario: str, method: str, targets, flags, loss: float, wall: float,
                  plan: InjectionPlan, include_plan: bool = True) -> dict:
    rec = {
        "schema_version": SCHEMA_VERSION,
        "scenario": scenario,
        "method": method,
        "target_ids": [int(t) for t in np.atleast_1d(targets)],
        "success": bool(np.all(flags)),
        "target_success": [bool(f) for f in np.atleast_1d(flags)],
        "loss": float(loss),
        "wall_time": float(wall),
        "plan_digest": plan_digest(plan),
    }
    if include_plan:
        rec["plan"] = plan.to_json()
    return rec


def _margin_sum(probs, targets, labels) -> float:
    rows = probs[targets].copy()
    idx = np.arange(len(targets))
    true = rows[idx, labels]
    rows[idx, labels] = -np.inf
    return float((true - rows.max(axis=1)).sum())


def run_scenario(scenario: Scenario, method: str, ctx: AttackContext, victim: VictimOracle,
                 target_sets=None, seed: int = 0, out_dir=None, validate: bool = True) -> dict:
    """Attack every target (group), evaluate on the victim, return the manifest.

    Attacks are crafted first with only ``ctx``; the victim is consulted
    afterwards. Records go to ``<out_dir>/<scenario>-<method>-<seed>.jsonl``
    when ``out_dir`` is given.
    """
    g = ctx.graph
    if target_sets is None:
        target_sets = [np.array([t]) for t in g.nodes_in(TEST)]
    target_sets = [np.atleast_1d(np.asarray(t, dtype=np.int64)) for t in target_sets]
    delta_of = scenario.delta_for(g)
    rng = np.random.default_rng(seed)
    crafted = []
    for targets in target_sets:
        delta = delta_of(targets)
        plan, wall = craft(method, ctx, targets, delta, rng)
        if validate:
            problems = plan_violations(plan, g, ctx.bounds)
            if problems:
                raise AssertionError(f"{method} produced an invalid plan: {problems}")
        crafted.append((targets, plan, wall))

    clean = victim.predict(g, caller="harness:clean")
    records = []
    clean_flags = []
    for targets, plan, wall in crafted:
        labels = g.y[targets]
        probs = victim.predict(inject_node(g, plan, ctx.bounds), caller="harness:evaluate")
        flags = probs[targets].argmax(axis=1) != labels
        clean_flags.append(bool(np.all(clean[targets].argmax(axis=1) != labels)))
        records.append(attack_record(scenario.kind, method, targets, flags,
                                     _margin_sum(probs, targets, labels), wall, plan))

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "scenario": asdict(scenario),
        "method": method,
        "seed": seed,
        "dataset_digest": f"{g.checksum():016x}",
        "n_attacks": len(records),
        "misclassification_rate": misclassification_rate(records) if records else 0.0,
        "clean_rate": float(np.mean(clean_flags)) if clean_flags else 0.0,
        "mean_wall_time": float(np.mean([r["wall_time"] for r in records])) if records else 0.0,
        "victim_source": victim.source,
        "opti_config": asdict(ctx.opti_cfg) if method == "opti" else None,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = f"{scenario.kind}-{method}-{seed}"
        write_records(records, out / f"{stem}.jsonl")
        (out / f"{stem}.manifest.json").write_text(json.dumps(manifest, indent=2))
        manifest["records_path"] = str(out / f"{stem}.jsonl")
    manifest["records"] = records
    return manifest


def write_records(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_records(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                if rec.get("schema_version") != SCHEMA_VERSION:
                    raise ValueError(f"{path}: unsupported record schema {rec.get('schema_version')}")
                out.append(rec)
    return out


# ------------------------------------------------------------------- report

REPORT_ROWS = ("clean", "random", "mostattr", "prefedge", "nipa", "afgsm", "opti", "gnia")
ROW_LABELS = {"clean": "Clean", "random": "Random", "mostattr": "MostAttr", "prefedge": "PrefEdge",
              "nipa": "NIPA", "afgsm": "AFGSM", "opti": "OPTI", "gnia": "G-NIA"}
EXTERNAL = {"nipa", "afgsm"}


def report(manifests: list[dict]) -> str:
    """Markdown table: one row per method, one column per (scenario, victim)."""
    columns: list[str] = []
    cells: dict[tuple[str, str], str] = {}
    for man in manifests:
        sc = man["scenario"]
        col = f"{sc['kind']} / {sc['victim_kind']}"
        if col not in columns:
            columns.append(col)
        cells[(man["method"], col)] = f"{100 * man['misclassification_rate']:.2f}%"
        cells.setdefault(("clean", col), f"{100 * man['clean_rate']:.2f}%")
    lines = ["| Method | " + " | ".join(columns) + " |", "|---" * (len(columns) + 1) + "|"]
    for row in REPORT_ROWS:
        vals = [cells.get((row, c), "" if row in EXTERNAL else "-") for c in columns]
        lines.append(f"| {ROW_LABELS[row]} | " + " | ".join(vals) + " |")
    lines.append("")
    lines.append("NIPA and AFGSM are external baselines from their own publications and are not run here.")
    return "\n".join(lines)
