"""The ten acceptance criteria; each test prints one PASS/FAIL line.

The lines are also collected into the terminal summary (see conftest).
"""
import builtins
import time

import numpy as np
import pytest

from bruteforce import successful_plans
from conftest import ACCEPTANCE_LINES, random_graph
from gradcheck import PRIMITIVE_CASES, check, gnia_chain_error
from nodeinject import autodiff as ad
from nodeinject import harness
from nodeinject.cli import ablation_rate
from nodeinject.generator import GniaTrainConfig, edge_budget_multi, gnia_infer, init_params
from nodeinject.graph import (DISCRETE, TEST, attribute_bounds, candidate_set, from_edges,
                              plan_violations, split_nodes)
from nodeinject.gumbel import TAU_GRID, gumbel_softmax, gumbel_topk, harden, topk_noise
from nodeinject.models import SurrogateModel, accuracy, forward, gcn_forward, save_model, train_surrogate
from nodeinject.opti import OptiConfig, opti_attack
from nodeinject.synthetic import SUITE_PARAMS, sbm_graph


def record(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:>2} ({name}): {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# ------------------------------------------------------------ shared runs


@pytest.fixture(scope="module")
def timing_targets(suite):
    """Every test target first, then train/val nodes up to 100 attacks."""
    rest = np.setdiff1d(np.arange(suite.n), suite.nodes_in(TEST))
    return np.concatenate([suite.nodes_in(TEST), rest[: 100 - len(suite.nodes_in(TEST))]])


@pytest.fixture(scope="module")
def opti_runs(suite, gcn, suite_bounds, timing_targets):
    """OPTI with default settings on each timing target (node id -> outcome)."""
    return {int(t): opti_attack(gcn, suite, [t], suite_bounds, 1, OptiConfig(seed=int(t)))
            for t in timing_targets}


def _random_rate(g, model, bounds, targets, seed=0):
    rng = np.random.default_rng(seed)
    wins = []
    for t in targets:
        plan = harness.random_attack(g, [t], 1, rng, bounds)
        wins.append(bool(forward(model, harness.inject_node(g, plan, bounds))[t].argmax() != g.y[t]))
    return float(np.mean(wins))


# --------------------------------------------------------------- criteria


def test_c01_gradient_integrity():
    start = time.perf_counter()
    seeds = range(50)
    prim = 0.0
    for s in seeds:
        for build in PRIMITIVE_CASES.values():
            fn, arrays = build(np.random.default_rng(s))
            prim = max(prim, check(fn, *arrays))
    chain = max(gnia_chain_error(s) for s in seeds)
    wall = time.perf_counter() - start
    ok = prim < 1e-4 and chain < 1e-4 and wall < 60
    record(1, "gradient integrity", ok,
           f"{len(PRIMITIVE_CASES)} primitives max rel err {prim:.1e}, G-NIA chain max {chain:.1e} "
           f"over {len(seeds)} seeds (< 1e-4), {wall:.1f}s (< 60s)")


def _dense_gcn(adj, X, W0, W1):
    a = adj + np.eye(len(adj))
    s = 1 / np.sqrt(a.sum(1))
    a = s[:, None] * a * s[None, :]
    z = a @ np.maximum(a @ X @ W0, 0) @ W1
    z = np.exp(z - z.max(1, keepdims=True))
    return z / z.sum(1, keepdims=True)


def test_c02_gcn_dense_oracle():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 51))
        g = random_graph(rng, n, 5, p=float(rng.uniform(0.02, 0.5)), num_classes=min(3, n), split=False)
        m = SurrogateModel("gcn", rng.normal(size=(5, 8)), rng.normal(size=(8, g.K)))
        worst = max(worst, np.abs(gcn_forward(m, g) - _dense_gcn(g.adjacency.toarray(), g.X, m.W0, m.W1)).max())
    record(2, "GCN oracle equivalence", worst < 1e-10, f"max abs diff {worst:.1e} on 50 graphs n<=50 (< 1e-10)")


def test_c03_gumbel_reductions():
    rng = np.random.default_rng(0)
    cases = bad = 0
    worst_mass = top = 0.0
    for L in range(1, 9):
        for tau in TAU_GRID:
            z = rng.normal(scale=3, size=(1, L))
            cases += 1
            plain = ad.row_softmax(ad.scale(ad.Tensor(z), 1.0 / tau)).data
            bad += not np.array_equal(gumbel_softmax(z, tau, 0.0).data, plain)
            noise = topk_noise(1, L, rng)
            bad += not np.array_equal(gumbel_topk(z, 1, tau, 1.0, noise=noise).data,
                                      gumbel_softmax(z, tau, 1.0, noise=noise[0]).data)
            for k in range(1, L + 1):
                cases += 1
                out = gumbel_topk(z, k, tau, 1.0, rng=rng).data
                worst_mass = max(worst_mass, abs(out.sum() - k))
                top = max(top, out.max())
                bad += out.min() < 0
                bad += harden(out, k).sum() != k or not set(np.unique(harden(out, k))) <= {0.0, 1.0}
    ok = bad == 0 and worst_mass <= 1e-6
    record(3, "Gumbel reductions", ok,
           f"{cases} cases over L=1..8, every k, tau in {TAU_GRID}: {bad} violations, "
           f"max |mass-k| {worst_mass:.1e} (<= 1e-6); largest single entry {top:.3f} (see ledger)")


def micro_instances(count=25):
    """Seeded tiny discrete graphs with a random-weight GCN and a target that brute force can flip."""
    found = []
    for seed in range(500):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(6, 13)), int(rng.integers(1, 4))
        g = random_graph(rng, n, d, p=0.3, attr_kind=DISCRETE)
        m = SurrogateModel("gcn", rng.normal(size=(d, 4)), rng.normal(size=(4, 2)))
        g = g.with_labels(forward(m, g).argmax(1))
        b = attribute_bounds(g)
        for t in range(n):
            if successful_plans(m, g, [t], b):
                found.append((seed, g, m, b, t))
                break
        if len(found) == count:
            break
    return found


def test_c04_opti_micro_optimality():
    start = time.perf_counter()
    inst = micro_instances()
    hits = sum(opti_attack(m, g, [t], b, 1, OptiConfig(seed=seed)).misclassified for seed, g, m, b, t in inst)
    wall = time.perf_counter() - start
    ok = len(inst) >= 20 and hits >= 0.9 * len(inst) and wall < 600
    record(4, "OPTI micro optimality", ok,
           f"OPTI flips {hits}/{len(inst)} brute-force-flippable targets (>= 90%), n<=12, d<=3 discrete, "
           f"{wall:.1f}s (< 600s)")


def test_c05_scaled_efficacy(suite, gcn, suite_bounds, gnia_cache, opti_runs):
    start = time.perf_counter()
    test = suite.nodes_in(TEST)
    clean_acc = accuracy(gcn, suite, test)
    opti = float(np.mean([opti_runs[int(t)].misclassified for t in test]))
    params, rep = gnia_cache.get("full")
    gnia = float(np.mean([gnia_infer(params, gcn, suite, [t], 1, suite_bounds).misclassified for t in test]))
    rand = _random_rate(suite, gcn, suite_bounds, test)
    # attack time includes G-NIA training and the OPTI runs done in fixtures
    wall = (time.perf_counter() - start + gnia_cache.seconds["full"]
            + sum(opti_runs[int(t)].wall_time for t in test))
    ok = (clean_acc >= 0.9 and opti >= 0.9 and gnia >= 0.8 * opti and opti >= rand + 0.3
          and gnia >= rand + 0.3 and wall < 1800)
    record(5, "scaled attack efficacy", ok,
           f"SBM n={suite.n} {SUITE_PARAMS['num_classes']} classes, clean test acc {clean_acc:.3f} (>= 0.9); "
           f"OPTI {opti:.3f} (>= 0.9), G-NIA {gnia:.3f} (>= 0.8*OPTI = {0.8 * opti:.3f}), "
           f"Random {rand:.3f} (both >= Random+0.30); G-NIA trained {rep.epochs_run} epochs; {wall:.0f}s (< 1800s)")


def test_c06_efficiency_ratio(suite, gcn, suite_bounds, gnia_cache, opti_runs, timing_targets):
    params, _ = gnia_cache.get("full")
    gnia_infer(params, gcn, suite, [timing_targets[0]], 1, suite_bounds)  # warm caches
    gnia_t = np.mean([gnia_infer(params, gcn, suite, [t], 1, suite_bounds).wall_time for t in timing_targets])
    opti_t = np.mean([opti_runs[int(t)].wall_time for t in timing_targets])
    ratio = opti_t / gnia_t
    record(6, "efficiency ratio", ratio >= 100,
           f"{len(timing_targets)} attacks: G-NIA {gnia_t * 1e3:.2f} ms vs OPTI {opti_t * 1e3:.0f} ms per attack, "
           f"ratio {ratio:.0f}x (>= 100x)")


def test_c07_ablation_direction(suite, gcn, suite_bounds, gnia_cache):
    test = [np.array([t]) for t in suite.nodes_in(TEST)]
    rates = {}
    for variant, flags in (("full", {}), ("no_joint", {"no_joint": True}), ("no_edge", {"no_edge": True}),
                           ("no_attr", {"no_attr": True})):
        params, _ = gnia_cache.get(variant)
        rates[variant] = ablation_rate(params, gcn, suite, test, suite_bounds, GniaTrainConfig(**flags), seed=0)
    gaps = (rates["full"] - rates["no_joint"], rates["no_joint"] - rates["no_edge"],
            rates["no_joint"] - rates["no_attr"])
    ok = min(gaps) >= 0.05
    record(7, "ablation direction", ok,
           "full {full:.3f} / no_joint {no_joint:.3f} / no_edge {no_edge:.3f} / no_attr {no_attr:.3f}; ".format(**rates)
           + "gaps full-no_joint {:+.3f}, no_joint-no_edge {:+.3f}, no_joint-no_attr {:+.3f} (each >= 0.05)".format(*gaps))


def test_c08_multi_target_rules():
    hand = [((3, 3.7, 30), 11), ((1, 3.7, 30), 3), ((3, 3.7, 10), 5), ((2, 0.2, 30), 1), ((3, 8.0, 2), 1),
            ((3, 2.0, 13), 6)]
    bad = [(args, want, edge_budget_multi(*args)) for args, want in hand if edge_budget_multi(*args) != want]
    # path 0-1-2-3-4 plus 5 hanging off 2: group (0,1,2) has m = 4 candidates, mean degree 10/6
    g = from_edges(6, [(0, 1), (1, 2), (2, 3), (3, 4), (2, 5)], np.zeros((6, 1)), [0] * 6)
    rule = harness.multi_target_delta(g)(np.array([0, 1, 2]))
    m = len(candidate_set(g, [0, 1, 2]))
    bad += [] if rule == 2 and m == 5 else [("graph rule", 2, rule)]
    groups = [[True, True, True], [True, True, False], [False, False, False], [True, True, True]]
    rate = harness.misclassification_rate(groups)
    ok = not bad and rate == 0.5
    record(8, "multi-target rules", ok,
           f"{len(hand) + 1} hand-computed budgets (incl. D_avg=3.7, n_t=3, m=30 -> 11), {len(bad)} mismatches; "
           f"all-or-nothing rate on [3/3, 2/3, 0/3, 3/3] = {rate} (expect 0.5)")


def test_c09_black_box_transfer(suite, gcn, appnp, suite_bounds, gnia_cache, tmp_path, monkeypatch):
    victim_file = tmp_path / "victim-appnp.bin"
    save_model(appnp, victim_file)
    params, _ = gnia_cache.get("full")
    ctx = harness.AttackContext(suite, gcn, suite_bounds, params)
    opened, early = [], []
    real_open, real_craft = builtins.open, harness.craft

    def spy_open(path, *a, **kw):
        opened.append(str(path))
        return real_open(path, *a, **kw)

    results = {}
    for method in ("gnia", "opti"):
        victim = harness.VictimOracle(appnp, str(victim_file))

        def audited(m, c, targets, delta, rng, victim=victim):
            early.extend(victim.calls)
            monkeypatch.setattr(builtins, "open", spy_open)
            try:
                return real_craft(m, c, targets, delta, rng)
            finally:
                monkeypatch.setattr(builtins, "open", real_open)

        monkeypatch.setattr(harness, "craft", audited)
        man = harness.run_scenario(harness.Scenario(harness.BLACK_BOX, "gcn", "appnp"), method, ctx, victim, seed=0)
        results[method] = (man["misclassification_rate"], man["clean_rate"], set(victim.calls))
    clean = results["gnia"][1]
    audit_ok = not early and str(victim_file) not in opened and all(
        r[2] == {"harness:clean", "harness:evaluate"} for r in results.values())
    ok = audit_ok and all(r[0] >= clean + 0.2 for r in results.values())
    record(9, "black-box transfer", ok,
           f"GCN surrogate -> APPNP victim: clean {clean:.3f}, G-NIA {results['gnia'][0]:.3f}, "
           f"OPTI {results['opti'][0]:.3f} (each >= clean+0.20); audit: {len(early)} victim calls during crafting, "
           f"victim checkpoint opened by attackers: {str(victim_file) in opened}")


def test_c10_immutability_and_budgets(suite, gcn, suite_bounds, gnia_cache):
    disc = split_nodes(sbm_graph(n=80, p_in=0.12, p_out=0.02, d=6, attr_kind=DISCRETE, seed=3), 3)
    disc_model = train_surrogate(disc, seed=0, epochs=60)
    worlds = [
        (suite, harness.AttackContext(suite, gcn, suite_bounds, gnia_cache.get("full")[0], OptiConfig(max_iters=5))),
        (disc, harness.AttackContext(disc, disc_model, attribute_bounds(disc),
                                     init_params(disc.d, disc_model.hidden, 32, 32, seed=1), OptiConfig(max_iters=5))),
    ]
    rng = np.random.default_rng(2024)
    groups = {id(g): harness.build_target_groups(g) for g, _ in worlds}
    mutations = violations = 0
    counts = {}
    start = time.perf_counter()
    for i in range(1000):
        g, ctx = worlds[0] if i % 4 else worlds[1]
        before = g.checksum()
        method = harness.METHODS[int(rng.integers(len(harness.METHODS)))]
        if rng.random() < 0.3 and groups[id(g)]:
            targets = groups[id(g)][int(rng.integers(len(groups[id(g)])))]
            delta = harness.multi_target_delta(g)(targets)
        else:
            targets = np.array([int(rng.integers(g.n))])
            delta = int(rng.integers(1, 4))
        plan, _ = harness.craft(method, ctx, targets, delta, rng)
        forward(ctx.surrogate, harness.inject_node(g, plan, ctx.bounds))
        violations += bool(plan_violations(plan, g, ctx.bounds)) or plan.e_inj.sum() > delta
        mutations += g.checksum() != before
        counts[method] = counts.get(method, 0) + 1
    wall = time.perf_counter() - start
    ok = mutations == 0 and violations == 0
    record(10, "immutability and budgets", ok,
           f"1000 randomized attacks {dict(sorted(counts.items()))} on a continuous and a discrete graph: "
           f"{mutations} base-graph mutations, {violations} budget/bounds violations ({wall:.0f}s)")
