"""Command-line entry point: ``nodeinject <command> ...``.

Relative paths are resolved against ``$NODEINJECT_DATA`` when it is set.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import generator, harness, models
from .graph import (TEST, TRAIN, VAL, attribute_bounds, largest_connected_component, load_graph,
                    load_npz, save_npz, split_nodes)
from .gumbel import GumbelConfig
from .opti import OptiConfig, evaluate_plan, opti_attack
from .synthetic import SUITE_PARAMS, sbm_graph

DATA_ENV = "NODEINJECT_DATA"
log = logging.getLogger("nodeinject")


def _path(p: str | None) -> Path | None:
    if p is None:
        return None
    path = Path(p)
    root = os.environ.get(DATA_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _targets(spec: str, g) -> list[np.ndarray]:
    """'test', 'val', 'train', 'groups:test', or a comma list like '3,7' / '1+2+5,9'."""
    named = {"train": TRAIN, "val": VAL, "test": TEST}
    if spec in named:
        return [np.array([t]) for t in g.nodes_in(named[spec])]
    if spec.startswith("groups:"):
        part = spec.split(":", 1)[1]
        groups = harness.build_target_groups(g)
        tr, va, te = harness.split_items(groups, seed=0)
        return {"train": tr, "val": va, "test": te}[part]
    return [np.array([int(x) for x in item.split("+")]) for item in spec.split(",") if item]


def _emit(records, out: Path | None) -> None:
    lines = "".join(json.dumps(r) + "\n" for r in records)
    if out is None:
        sys.stdout.write(lines)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(lines)


def cmd_synth(a):
    g = sbm_graph(n=a.nodes, num_classes=a.classes, p_in=a.p_in, p_out=a.p_out, d=a.dim,
                  signal=a.signal, attr_kind=a.attr_kind, seed=a.seed)
    g = split_nodes(largest_connected_component(g), a.seed)
    save_npz(g, _path(a.out))
    print(json.dumps({"n": g.n, "d": g.d, "K": g.K, "checksum": f"{g.checksum():016x}"}))


def cmd_prep(a):
    g = load_graph(_path(a.edges), _path(a.attrs), _path(a.labels))
    g = split_nodes(largest_connected_component(g), a.seed)
    save_npz(g, _path(a.out))
    print(json.dumps({"n": g.n, "d": g.d, "K": g.K, "checksum": f"{g.checksum():016x}"}))


def cmd_train_surrogate(a):
    g = load_npz(_path(a.graph))
    cfg = models.SurrogateConfig(kind=a.kind, hidden=a.hidden, lr=a.lr, epochs=a.epochs,
                                 patience=a.patience, seed=a.seed)
    m = models.train_surrogate(g, cfg)
    models.save_model(m, _path(a.out))
    print(json.dumps({"kind": a.kind, "val_accuracy": models.accuracy(m, g, g.nodes_in(VAL)),
                      "test_accuracy": models.accuracy(m, g, g.nodes_in(TEST))}))


def _gnia_cfg(a) -> generator.GniaTrainConfig:
    return generator.GniaTrainConfig(
        lr=a.lr, max_epochs=a.max_epochs, patience=a.patience, seed=a.seed,
        gumbel=GumbelConfig(tau=a.tau, eps=a.eps, decay=a.decay),
        no_attr=a.no_attr, no_edge=a.no_edge, no_joint=a.no_joint)


def _train_gnia(g, m, cfg, multi: bool):
    bounds = attribute_bounds(g)
    if multi:
        tr, va, _ = harness.split_items(harness.build_target_groups(g), seed=cfg.seed)
        delta = harness.multi_target_delta(g)
    else:
        tr, va, delta = g.nodes_in(TRAIN), g.nodes_in(VAL), 1
    return generator.gnia_train(g, m, tr, va, bounds, delta, cfg)


def cmd_gnia_train(a):
    g = load_npz(_path(a.graph))
    m = models.load_model(_path(a.model))
    cfg = _gnia_cfg(a)
    params, rep = _train_gnia(g, m, cfg, a.scenario == harness.MULTI)
    manifest = {"config": cfg.to_json(), "seed": a.seed, "epochs_run": rep.epochs_run,
                "best_epoch": rep.best_epoch, "best_val_rate": rep.best_val_rate}
    generator.save_params(params, _path(a.out), g.attr_kind, m.hidden, m.K, extra=manifest)
    print(json.dumps(manifest))


def cmd_attack(a):
    g = load_npz(_path(a.graph))
    m = models.load_model(_path(a.model))
    bounds = attribute_bounds(g)
    params = generator.load_params(_path(a.gnia))[0] if a.gnia else None
    ctx = harness.AttackContext(g, m, bounds, params,
                                OptiConfig(lr=a.opti_lr, max_iters=a.max_iters, seed=a.seed))
    rng = np.random.default_rng(a.seed)
    records = []
    for targets in _targets(a.targets, g):
        delta = a.delta if a.delta else harness.multi_target_delta(g)(targets)
        if a.method == "opti":
            out = opti_attack(m, g, targets, bounds, delta, ctx.opti_cfg)
            plan, wall = out.plan, out.wall_time
        else:
            plan, wall = harness.craft(a.method, ctx, targets, delta, rng)
        loss, flags = evaluate_plan(m, g, plan, targets)
        label = harness.SINGLE if len(targets) == 1 else harness.MULTI
        records.append(harness.attack_record(label, a.method, targets, flags, loss, wall, plan))
    _emit(records, _path(a.out))


def cmd_gnia_infer(a):
    a.method = "gnia"
    cmd_attack(a)


def cmd_eval(a):
    g = load_npz(_path(a.graph))
    surrogate = models.load_model(_path(a.model))
    params = generator.load_params(_path(a.gnia))[0] if a.gnia else None
    ctx = harness.AttackContext(g, surrogate, attribute_bounds(g), params,
                                OptiConfig(max_iters=a.max_iters))
    victim_path = _path(a.victim) if a.victim else _path(a.model)
    victim_model = models.load_model(victim_path)
    scenario = harness.Scenario(a.scenario, surrogate.kind, victim_model.kind)
    targets = _targets("groups:test" if a.scenario == harness.MULTI else "test", g)
    victim = harness.VictimOracle(victim_model, str(victim_path))
    man = harness.run_scenario(scenario, a.method, ctx, victim, targets, a.seed, _path(a.out))
    man.pop("records")
    print(json.dumps(man))


def cmd_ablate(a):
    g = load_npz(_path(a.graph))
    m = models.load_model(_path(a.model))
    bounds = attribute_bounds(g)
    variants = {"full": {}, "no_joint": {"no_joint": True}, "no_edge": {"no_edge": True},
                "no_attr": {"no_attr": True}}
    rows = {}
    test = [np.array([t]) for t in g.nodes_in(TEST)]
    for name, flags in variants.items():
        for k in ("no_attr", "no_edge", "no_joint"):
            setattr(a, k, flags.get(k, False))
        cfg = _gnia_cfg(a)
        params, _ = _train_gnia(g, m, cfg, False)
        rows[name] = ablation_rate(params, m, g, test, bounds, cfg, seed=a.seed)
    print(json.dumps(rows))


def ablation_rate(params, m, g, target_sets, bounds, cfg, seed: int = 0) -> float:
    """Hardened misclassification rate of a (possibly ablated) generator on the surrogate."""
    rng = np.random.default_rng(seed)
    wins = []
    for targets in target_sets:
        inst = generator.AttackInstance(m, g, targets, 1)
        plan, _ = generator.gnia_forward(params.tensors(), m, g, inst, bounds, "infer",
                                         cfg.gumbel.tau, 0.0, rng, cfg.no_attr, cfg.no_edge, cfg.no_joint)
        wins.append(bool(np.all(evaluate_plan(m, g, plan, targets)[1])))
    return float(np.mean(wins))


def cmd_report(a):
    paths = sorted(Path(_path(a.manifests)).glob("*.manifest.json"))
    print(harness.report([json.loads(p.read_text()) for p in paths]))


def _gnia_flags(p):
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--eps", type=float, default=1.0)
    p.add_argument("--decay", type=float, default=0.99)
    p.add_argument("--max-epochs", type=int, default=2000)
    p.add_argument("--patience", type=int, default=100)
    p.add_argument("--no-attr", action="store_true")
    p.add_argument("--no-edge", action="store_true")
    p.add_argument("--no-joint", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nodeinject", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic SBM graph bundle")
    s.add_argument("--out", required=True)
    s.add_argument("--nodes", type=int, default=200)
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--p-in", type=float, default=SUITE_PARAMS["p_in"])
    s.add_argument("--p-out", type=float, default=SUITE_PARAMS["p_out"])
    s.add_argument("--dim", type=int, default=SUITE_PARAMS["d"])
    s.add_argument("--signal", type=float, default=SUITE_PARAMS["signal"])
    s.add_argument("--attr-kind", default="continuous", choices=["continuous", "discrete"])
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prep", help="load text files, keep the LCC, split nodes")
    s.add_argument("--edges", required=True)
    s.add_argument("--attrs", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_prep)

    s = sub.add_parser("train-surrogate", help="train a GCN or APPNP")
    s.add_argument("--graph", required=True)
    s.add_argument("--kind", default="gcn", choices=["gcn", "appnp"])
    s.add_argument("--hidden", type=int, default=64)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--epochs", type=int, default=300)
    s.add_argument("--patience", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_surrogate)

    s = sub.add_parser("attack", help="run one attacker, one JSON record per attack")
    s.add_argument("method", choices=list(harness.METHODS))
    s.add_argument("--graph", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--gnia")
    s.add_argument("--targets", default="test")
    s.add_argument("--delta", type=int, default=1, help="0 selects the multi-target rule")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-iters", type=int, default=1000)
    s.add_argument("--opti-lr", type=float, default=0.1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_attack)

    g = sub.add_parser("gnia", help="train or run the generator")
    gsub = g.add_subparsers(dest="gnia_command", required=True)
    s = gsub.add_parser("train")
    s.add_argument("--graph", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--scenario", default=harness.SINGLE, choices=[harness.SINGLE, harness.MULTI])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    _gnia_flags(s)
    s.set_defaults(func=cmd_gnia_train)
    s = gsub.add_parser("infer")
    s.add_argument("--graph", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--gnia", required=True)
    s.add_argument("--targets", default="test")
    s.add_argument("--delta", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-iters", type=int, default=1000)
    s.add_argument("--opti-lr", type=float, default=0.1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gnia_infer)

    s = sub.add_parser("eval", help="run a scenario and write records + manifest")
    s.add_argument("--graph", required=True)
    s.add_argument("--model", required=True, help="surrogate checkpoint the attacker uses")
    s.add_argument("--victim", help="victim checkpoint (defaults to the surrogate)")
    s.add_argument("--scenario", default=harness.SINGLE,
                   choices=[harness.SINGLE, harness.MULTI, harness.BLACK_BOX])
    s.add_argument("--method", default="gnia", choices=list(harness.METHODS))
    s.add_argument("--gnia")
    s.add_argument("--max-iters", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and score G-NIA ablations")
    s.add_argument("--graph", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--seed", type=int, default=0)
    _gnia_flags(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="markdown table from manifest files")
    s.add_argument("--manifests", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
