"""Acceptance suite: every criterion at its pinned tolerance, one printed
pass/fail line each (run with -s to see them)."""

import json
import math
import os
import time

import numpy as np
import pytest

from crossplan import cli, cost, embed, fuzz, ir, mcts, rules, workload
from crossplan.catalog import Catalog
from crossplan.errors import FrontierExplosion
from crossplan.executor import execute
from crossplan.ir import Cmp, Col, Filter, HashJoin, Lit, MLExpr, Plan, Project, RelNode, TableScan
from crossplan.plandoc import build_plan
from crossplan.rules import RuleId
from crossplan.tables import INT64, schema, table_create, vector
from crossplan.workload import ID_TEMPLATES, OOD_TEMPLATES


def _report(name: str, ok: bool, detail: str):
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# 1. rule equivalence suite


def test_criterion_1_rule_equivalence():
    t0 = time.time()
    failures = []
    for rule in RuleId:
        checked, fails = fuzz.fuzz_rule(rule, 100, seed=424)
        assert checked == 100
        failures.extend(fails)
    elapsed = time.time() - t0
    _report(
        "criterion-1 rule-equivalence",
        not failures and elapsed < 120,
        f"11 rules x 100 fuzzed pairs, {len(failures)} failures, {elapsed:.0f}s (< 120s)",
    )


# ---------------------------------------------------------------------------
# 2. pair-model split + pushdown reproduction with measured speedup


def test_criterion_2_split_pushdown_speedup():
    t_start = time.time()
    cat = Catalog()
    workload.gen_data("movielens_mini", 1.0, 42, cat)
    plan = build_plan(workload.sample_query("ml_pair_tt", 0, cat), cat)
    t0 = time.time()
    base_out, _ = execute(plan, cat)
    t_unopt = time.time() - t0
    config = mcts.MctsConfig(budget=200, seed=42, max_depth=8)
    forest = mcts.SearchForest(theta=config.theta)
    best, rep = mcts.optimize_reusable(plan, forest, cat, config)
    t0 = time.time()
    opt_out, _ = execute(best, cat)
    t_opt = time.time() - t0
    from crossplan.tables import tables_equal

    assert tables_equal(base_out, opt_out, rtol=1e-6, atol=1e-9)
    names = rep.rules_applied
    trace_ok = (
        "R4_1" in names
        and any(r in names for r in ("R1_4", "R2_1"))
        and names.count("R1_3") >= 2
    )
    speedup = t_unopt / t_opt
    elapsed = time.time() - t_start
    _report(
        "criterion-2 split+pushdown reproduction",
        trace_ok and speedup >= 10.0 and elapsed < 60,
        f"trace={names}, measured speedup {speedup:.1f}x (>= 10x), {elapsed:.0f}s (< 60s)",
    )


# ---------------------------------------------------------------------------
# 3. ablation: combined rules beat every single category


_CATEGORIES = {
    "O1": (RuleId.R1_1, RuleId.R1_2, RuleId.R1_3, RuleId.R1_4),
    "O2": (RuleId.R2_1,),
    "O3": (RuleId.R3_1, RuleId.R3_2, RuleId.R3_3),
    "O4": (RuleId.R4_1, RuleId.R4_2, RuleId.R4_4),
}


def _search_cost(plan, cat, allowed, seed=7, budget=150):
    config = mcts.MctsConfig(
        budget=budget, seed=seed, max_depth=8, allowed_rules=tuple(allowed)
    )
    forest = mcts.SearchForest(theta=config.theta)
    _, rep = mcts.optimize_reusable(plan, forest, cat, config)
    return rep.best_cost


def _forest_filter_query(cat_budget=1_000_000):
    rng = np.random.default_rng(77)
    cat = Catalog(memory_budget_bytes=cat_budget)
    workload.gen_data("retail_mini", 0.2, 77, cat)
    from crossplan.workload import _random_tree
    from crossplan import mlfn

    trees = tuple(_random_tree(rng, workload.TXN_VEC, 7) for _ in range(300))
    forest = mlfn.Forest(trees)
    cat.forests["ff.f"] = forest
    g = ir.build_graph(
        [("x", (workload.TXN_VEC,))],
        {"df": {"kind": "decision_forest", "weight": "ff.f", "agg": "sigmoid_sum"}},
        [("x", "df", 0)], ["df"], cat,
    )
    del cat.forests["ff.f"]
    cat.register_model("ff", g, forests={"f": forest})
    plan = Plan(
        {
            0: RelNode(TableScan("txn")),
            1: RelNode(TableScan("customer")),
            2: RelNode(HashJoin(("customer_id",), ("customer_id",)), (0, 1)),
            3: RelNode(
                Filter(Cmp("ge", MLExpr("g", (Col("txn_vec"),)), Lit(0.5)), 0.5), (2,)
            ),
            4: RelNode(Project((("txn_id", Col("txn_id")),)), (3,)),
        },
        4,
        {"g": cat.model("ff")},
    )
    assert ir.validate(plan, cat) == []
    return plan, cat


def test_criterion_3_ablation_trend():
    results = {}
    # pair-model query
    cat = Catalog()
    workload.gen_data("movielens_mini", 0.2, 7, cat)
    tt = build_plan(workload.sample_query("ml_pair_tt", 3, cat), cat)
    combined_tt = _search_cost(tt, cat, tuple(RuleId))
    singles_tt = {name: _search_cost(tt, cat, allowed) for name, allowed in _CATEGORIES.items()}
    results["pair-model"] = (combined_tt, singles_tt)
    # forest-filter query with an over-budget forest
    ff, ff_cat = _forest_filter_query()
    combined_ff = _search_cost(ff, ff_cat, tuple(RuleId))
    singles_ff = {name: _search_cost(ff, ff_cat, allowed) for name, allowed in _CATEGORIES.items()}
    results["forest-filter"] = (combined_ff, singles_ff)
    ok = True
    details = []
    for qname, (combined, singles) in results.items():
        best_single = min(singles.values())
        ok = ok and combined < best_single
        details.append(
            f"{qname}: combined {combined:.3g} < best single {best_single:.3g} "
            f"({ {k: round(v, 1) for k, v in singles.items()} })"
        )
    _report("criterion-3 ablation trend", ok, "; ".join(details))


# ---------------------------------------------------------------------------
# 4. empirical regret against the exhaustive oracle


def test_criterion_4_regret_vs_oracle():
    t0 = time.time()
    cat = Catalog()
    workload.gen_data("movielens_mini", 0.05, 11, cat)
    workload.gen_data("retail_mini", 0.05, 11, cat)
    tids = sorted(ID_TEMPLATES)
    gaps = []
    i = 0
    while len(gaps) < 100 and i < 160:
        tid = tids[i % len(tids)]
        plan = build_plan(workload.sample_query(tid, 500 + i, cat), cat)
        i += 1
        config = mcts.MctsConfig(budget=100, seed=i, max_depth=4, exhaustive_cap=4000)
        try:
            _, oracle_rep = mcts.optimize_baseline("exhaustive", plan, cat, config)
        except FrontierExplosion:
            continue  # not exhaustive-feasible at this cap
        forest = mcts.SearchForest(theta=config.theta)
        _, rep = mcts.optimize_reusable(plan, forest, cat, config)
        assert rep.best_cost >= oracle_rep.best_cost - 1e-9  # oracle lower-bounds
        gaps.append(
            (rep.best_cost - oracle_rep.best_cost) / rep.best_cost
            if rep.best_cost > 0
            else 0.0
        )
    elapsed = time.time() - t0
    mean_gap = float(np.mean(gaps))
    dist = {
        "mean": round(mean_gap, 4),
        "p50": round(float(np.percentile(gaps, 50)), 4),
        "p90": round(float(np.percentile(gaps, 90)), 4),
        "max": round(float(np.max(gaps)), 4),
        "n": len(gaps),
    }
    _report(
        "criterion-4 regret vs oracle",
        len(gaps) >= 100 and mean_gap <= 0.05 and elapsed < 900,
        f"mean relative gap {mean_gap*100:.2f}% (<= 5%), distribution {dist}, {elapsed:.0f}s (< 900s)",
    )


# ---------------------------------------------------------------------------
# 5. reuse benefit: collisions and optimization-time reduction


def test_criterion_5_reuse_benefit():
    t_start = time.time()
    cat = Catalog()
    workload.gen_data("movielens_mini", 0.05, 12, cat)
    workload.gen_data("retail_mini", 0.05, 12, cat)
    id_tids = sorted(ID_TEMPLATES)
    id_plans = [
        build_plan(workload.sample_query(id_tids[i % len(id_tids)], 900 + i, cat), cat)
        for i in range(200)
    ]
    forest = mcts.SearchForest(theta=0.95)
    collisions = []
    t0 = time.time()
    for i, plan in enumerate(id_plans):
        config = mcts.MctsConfig(budget=30, seed=i, max_depth=6)
        _, rep = mcts.optimize_reusable(plan, forest, cat, config)
        collisions.append(rep.collision)
    t_reusable = time.time() - t0
    t0 = time.time()
    for i, plan in enumerate(id_plans):
        config = mcts.MctsConfig(budget=30, seed=i, max_depth=6)
        mcts.optimize_baseline("vanilla_mcts", plan, cat, config)
    t_vanilla = time.time() - t0
    warm_rate = float(np.mean(collisions[50:]))
    ratio = t_reusable / t_vanilla

    ood_tids = sorted(OOD_TEMPLATES)
    ood_plans = [
        build_plan(workload.sample_query(ood_tids[i % len(ood_tids)], 3000 + i, cat), cat)
        for i in range(100)
    ]
    ood_forest = mcts.SearchForest(theta=0.95)
    ood_collisions = []
    for i, plan in enumerate(ood_plans):
        config = mcts.MctsConfig(budget=30, seed=i, max_depth=6)
        _, rep = mcts.optimize_reusable(plan, ood_forest, cat, config)
        ood_collisions.append(rep.collision)
    first, second = float(np.mean(ood_collisions[:50])), float(np.mean(ood_collisions[50:]))
    elapsed = time.time() - t_start
    ok = (
        warm_rate >= 0.70
        and ratio < 0.6
        and second > first
        and float(np.mean(ood_collisions)) > 0
        and elapsed < 1200
    )
    _report(
        "criterion-5 reuse benefit",
        ok,
        f"warm collision rate {warm_rate:.2f} (>= 0.70), opt-time ratio {ratio:.2f} (< 0.6), "
        f"ood halves {first:.2f} -> {second:.2f} (increasing), {elapsed:.0f}s (< 1200s)",
    )


# ---------------------------------------------------------------------------
# 6. calibrated cost model: rank fidelity and q-error


def test_criterion_6_rank_fidelity():
    t_start = time.time()
    model = cost.calibrate(cost.run_microbench(seed=5), cost.default_cost_model())
    cat = Catalog()
    workload.gen_data("movielens_mini", 0.4, 13, cat)
    workload.gen_data("retail_mini", 0.4, 13, cat)

    def measure(plan):
        best = None
        for _ in range(2):
            _, stats = execute(plan, cat)
            ns = stats.total_wall_ns
            best = ns if best is None else min(best, ns)
        return best

    tids = sorted(ID_TEMPLATES)
    pairs = 0
    correct = 0
    qerrs = []
    i = 0
    while pairs < 50 and i < 120:
        tid = tids[i % len(tids)]
        plan = build_plan(workload.sample_query(tid, 700 + i, cat), cat)
        i += 1
        opt, _ = mcts.optimize_baseline("heuristic", plan, cat, model=model)
        if ir.plan_fingerprint(opt) == ir.plan_fingerprint(plan):
            continue
        est_a = cost.estimate_cost(plan, cat, model).total
        est_b = cost.estimate_cost(opt, cat, model).total
        t_a, t_b = measure(plan), measure(opt)
        pairs += 1
        if (est_a < est_b) == (t_a < t_b):
            correct += 1
        qerrs += [cost.q_error(t_a, est_a), cost.q_error(t_b, est_b)]
    fidelity = correct / pairs
    median_q = float(np.median(qerrs))
    elapsed = time.time() - t_start
    _report(
        "criterion-6 cost-model rank fidelity",
        pairs >= 50 and fidelity >= 0.80 and median_q <= 3.0,
        f"{pairs} executed pairs, fidelity {fidelity:.2f} (>= 0.80), "
        f"median q-error {median_q:.2f} (<= 3), {elapsed:.0f}s",
    )


# ---------------------------------------------------------------------------
# 7. search micro-correctness and report determinism


def test_criterion_7_micro_correctness(tmp_path):
    # UCB argmax equals an independent scalar recomputation
    rng = np.random.default_rng(0)
    actions = list(RuleId)
    mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        parent = mcts.SearchNode(None, None, None, None, None, 0, 0.0)
        children = {}
        for i in range(k):
            child = mcts.SearchNode(None, None, None, None, None, 1, 0.0)
            child.action = actions[i]
            child.n = int(rng.integers(0, 6))
            child.r = float(rng.normal() * rng.integers(1, 10))
            children[actions[i]] = child
        parent.children = children
        parent.n = max(sum(c.n for c in children.values()), 1)
        c = float(rng.uniform(0.1, 3.0))
        got = mcts.select(parent, c)
        best, best_score = None, -math.inf
        for action in sorted(children, key=lambda a: a.value):
            ch = children[action]
            score = (
                math.inf if ch.n == 0
                else ch.r / ch.n + c * math.sqrt(math.log(parent.n) / ch.n)
            )
            if score > best_score:
                best, best_score = ch, score
        mismatches += got is not best

    # visit conservation on a real search
    cat = Catalog()
    workload.gen_data("movielens_mini", 0.05, 20, cat)
    plan = build_plan(workload.sample_query("ml_trending", 1, cat), cat)
    forest = mcts.SearchForest()
    config = mcts.MctsConfig(budget=37, seed=3, max_depth=6)
    mcts.optimize_reusable(plan, forest, cat, config)
    conserve_ok = forest.roots[0].n == 37

    # byte-identical deterministic bench reports for a fixed seed
    ws = str(tmp_path / "ws")
    assert cli.main(["--workspace", ws, "--scale", "0.05", "--seed", "9", "gen-data"]) == 0
    assert cli.main(["--workspace", ws, "--seed", "9", "gen-workload", "--count", "6"]) == 0
    docs = []
    for run in range(2):
        out = str(tmp_path / f"rep{run}")
        assert cli.main(
            ["--workspace", ws, "--budget", "20", "--seed", "9", "bench",
             os.path.join(ws, "manifest.json"), "--strategies", "reusable,heuristic",
             "--out", out]
        ) == 0
        with open(out + "_det.json") as f:
            docs.append(f.read())
    det_ok = docs[0] == docs[1]
    _report(
        "criterion-7 search micro-correctness",
        mismatches == 0 and conserve_ok and det_ok,
        f"ucb mismatches {mismatches}/1000, visit conservation {conserve_ok}, "
        f"deterministic bench report {det_ok}",
    )


# ---------------------------------------------------------------------------
# 8. label-refinement kernel suite


def test_criterion_8_wl_suite():
    cat = Catalog()
    workload.gen_data("movielens_mini", 0.05, 21, cat)
    plan = build_plan(workload.sample_query("ml_trending", 2, cat), cat)
    rng = np.random.default_rng(4)
    ctx = embed.LabelContext()
    base = embed.embed_plan(plan, ctx, cat)
    ids = list(plan.rels)
    iso_ok = True
    for _ in range(100):
        mapping = dict(zip(ids, (int(x) for x in rng.permutation(ids))))
        remapped = Plan(
            {
                mapping[nid]: RelNode(n.op, tuple(mapping[c] for c in n.inputs))
                for nid, n in plan.rels.items()
            },
            mapping[plan.root],
            dict(plan.graphs),
        )
        fv = embed.embed_plan(remapped, embed.LabelContext(), cat)
        if embed.similarity(base, fv) != pytest.approx(1.0, abs=1e-12):
            iso_ok = False

    # hand-traced refinement counts on the three-node star
    fv = embed.wl_features(
        ["a", "b", "c"], {"a": ("b", "c"), "b": (), "c": ()},
        {"a": "root", "b": "leaf", "c": "leaf"}, iterations=2,
    )
    norm = math.sqrt(3 * 1 + 3 * 4)
    trace_ok = sorted(round(v, 12) for _, v in fv.entries) == pytest.approx(
        sorted([1 / norm] * 3 + [2 / norm] * 3)
    )

    ctx2 = embed.LabelContext(rho=0.10)
    a = embed.init_label_model("matmul", 1000, ctx2)
    same = embed.init_label_model("matmul", 1100, ctx2) == a
    different = embed.init_label_model("matmul", 1101, ctx2) != a
    _report(
        "criterion-8 label-refinement kernel",
        iso_ok and trace_ok and same and different,
        f"isomorphism(100 perms)={iso_ok}, hand trace={trace_ok}, "
        f"rho boundary 1100 same={same} / 1101 different={different}",
    )


# ---------------------------------------------------------------------------
# 9. tiled rewrite rescues an over-budget weight


def test_criterion_9_memory_motivation():
    rng = np.random.default_rng(31)
    budget = 1_500_000
    cat = Catalog(memory_budget_bytes=budget, tile_width=64)
    n, k, m = 100, 512, 512
    cat.register_table(
        "feats",
        table_create(
            schema([("id", INT64), ("x", vector(k))]),
            [[i, rng.normal(size=k)] for i in range(n)],
        ),
    )
    w = rng.normal(size=(k, m)) / np.sqrt(k)  # 2 MiB > budget
    cat.params["enc.w"] = w
    g = ir.build_graph(
        [("x", (k,))], {"mm": {"kind": "matmul", "weight": "enc.w"}},
        [("x", "mm", 0)], ["mm"], cat,
    )
    del cat.params["enc.w"]
    cat.register_model("enc", g, {"w": w})
    plan = Plan(
        {
            0: RelNode(TableScan("feats")),
            1: RelNode(
                Project((("id", Col("id")), ("y", MLExpr("g", (Col("x"),))))), (0,)
            ),
        },
        1,
        {"g": cat.model("enc")},
    )
    assert w.nbytes > budget
    _, unopt_stats = execute(plan, cat, batch_size=64)

    heur, heur_rep = mcts.optimize_baseline("heuristic", plan, cat)
    config = mcts.MctsConfig(budget=60, seed=2, max_depth=4)
    forest = mcts.SearchForest()
    searched, search_rep = mcts.optimize_reusable(plan, forest, cat, config)

    def tiled(p):
        return any(
            isinstance(nd.op, TableScan) and nd.op.table.startswith("$tiles/")
            for nd in p.rels.values()
        )

    _, heur_stats = execute(heur, cat, batch_size=64)
    _, search_stats = execute(searched, cat, batch_size=64)
    ok = (
        tiled(heur)
        and tiled(searched)
        and unopt_stats.peak_estimated_bytes > budget
        and heur_stats.peak_estimated_bytes < budget
        and search_stats.peak_estimated_bytes < budget
    )
    _report(
        "criterion-9 tiled rewrite under memory budget",
        ok,
        f"heuristic tiled={tiled(heur)} ({heur_rep.rules_applied}), "
        f"search tiled={tiled(searched)} ({search_rep.rules_applied}), peak bytes "
        f"unopt {unopt_stats.peak_estimated_bytes} > budget {budget} > "
        f"tiled {max(heur_stats.peak_estimated_bytes, search_stats.peak_estimated_bytes)}",
    )
