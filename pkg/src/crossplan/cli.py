"""Command-line entry point.

Subcommands: gen-data, gen-workload, register-model, run, explain,
calibrate, bench, verify. State lives in a workspace directory (see
:mod:`crossplan.store`). Exit codes: 0 success, 1 usage error, 2 data or
validation error. All errors print one line with the prefix ``error:``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import statistics
import sys
import time

import numpy as np

from . import cost, embed, fuzz, ir, mcts, plandoc, rules, store, workload
from .catalog import Catalog
from .errors import CrossplanError
from .executor import execute
from .tables import canonical_rows, dump_csv

DEFAULTS = {
    "seed": 0,
    "budget": 100,
    "depth": 8,
    "rollout_max_steps": 16,
    "reward_mode": "relative",
    "theta": 0.95,
    "batch_size": 1024,
    "memory_budget_bytes": 256 * 1024 * 1024,
    "strategy": "reusable",
    "scale": 1.0,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_config_file(path: str) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def _effective_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config and os.path.exists(args.config):
        for k, v in _load_config_file(args.config).items():
            if k in cfg:
                cfg[k] = type(DEFAULTS[k])(v)
    for key in DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            cfg[key] = flag
    return cfg


def _mcts_config(cfg: dict, seed_offset: int = 0) -> mcts.MctsConfig:
    return mcts.MctsConfig(
        budget=cfg["budget"],
        max_depth=cfg["depth"],
        rollout_max_steps=cfg["rollout_max_steps"],
        reward_mode=cfg["reward_mode"],
        seed=cfg["seed"] + seed_offset,
        theta=cfg["theta"],
    )


def _load_workspace(args) -> Catalog:
    return store.load_catalog(args.workspace)


def _cost_model(args, cat: Catalog) -> cost.CostModel:
    path = os.path.join(args.workspace, "cost_model.json")
    if os.path.exists(path):
        with open(path) as f:
            return cost.cost_model_from_doc(json.load(f))
    return cost.default_cost_model(cat.memory_budget_bytes)


def _optimize(strategy, plan, cat, config, model, forest=None):
    if strategy == "reusable":
        forest = forest or mcts.SearchForest(theta=config.theta)
        return mcts.optimize_reusable(plan, forest, cat, config, model)
    return mcts.optimize_baseline(strategy, plan, cat, config, model)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args, cfg):
    cat = Catalog(memory_budget_bytes=cfg["memory_budget_bytes"])
    datasets = (
        ["movielens_mini", "retail_mini"] if args.dataset == "both" else [args.dataset]
    )
    for ds in datasets:
        workload.gen_data(ds, cfg["scale"], cfg["seed"], cat)
    os.makedirs(args.workspace, exist_ok=True)
    store.save_catalog(cat, args.workspace)
    print(f"generated {', '.join(datasets)} at scale {cfg['scale']} -> {args.workspace}")
    return 0


def _cmd_gen_workload(args, cfg):
    cat = _load_workspace(args)
    if args.split == "id":
        pool = list(workload.ID_TEMPLATES)
    elif args.split == "ood":
        pool = list(workload.OOD_TEMPLATES)
    else:
        pool = sorted(workload.TEMPLATES)
    qdir = os.path.join(args.workspace, "queries")
    os.makedirs(qdir, exist_ok=True)
    entries = []
    for i in range(args.count):
        tid = pool[i % len(pool)]
        seed = cfg["seed"] + i
        doc = workload.sample_query(tid, seed, cat)
        qid = f"q{i:04d}_{tid}"
        fn = os.path.join("queries", f"{qid}.json")
        with open(os.path.join(args.workspace, fn), "w") as f:
            json.dump(doc, f)
        entries.append({
            "id": qid, "file": fn, "template": tid, "seed": seed,
            "declared_filters": doc["declared_filters"],
        })
    store.save_catalog(cat, args.workspace)  # persist sampled models
    manifest = {"queries": entries, "split": args.split, "seed": cfg["seed"]}
    with open(os.path.join(args.workspace, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    print(f"wrote {len(entries)} queries and manifest.json -> {args.workspace}")
    return 0


def _cmd_register_model(args, cfg):
    cat = _load_workspace(args)
    with open(args.model) as f:
        doc = json.load(f)
    name = plandoc.register_model_doc(doc, cat, base_dir=os.path.dirname(args.model) or ".")
    store.save_catalog(cat, args.workspace)
    print(f"registered model {name}")
    return 0


def _cmd_run(args, cfg):
    cat = _load_workspace(args)
    with open(args.query) as f:
        doc = json.load(f)
    plan = plandoc.build_plan(doc, cat)
    model = _cost_model(args, cat)
    config = _mcts_config(cfg)
    best, report = _optimize(cfg["strategy"], plan, cat, config, model)
    result, stats = execute(best, cat, batch_size=cfg["batch_size"])
    out = dump_csv(result)
    if args.sort:
        rows = canonical_rows(result)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(result.schema.names)
        from .tables import _cell_to_csv

        for row in rows:
            w.writerow(
                _cell_to_csv(t, v) for (_, t), v in zip(result.schema.columns, row)
            )
        out = buf.getvalue()
    sys.stdout.write(out)
    rep_doc = report.to_doc()
    rep_doc["exec_wall_ns"] = stats.total_wall_ns
    rep_doc["rows"] = result.row_count
    print(json.dumps(rep_doc, sort_keys=True), file=sys.stderr)
    return 0


def _cmd_explain(args, cfg):
    cat = _load_workspace(args)
    with open(args.query) as f:
        doc = json.load(f)
    plan = plandoc.build_plan(doc, cat)
    sys.stdout.write("-- plan --\n")
    sys.stdout.write(rules.explain(plan, cat))
    if args.strategy:
        model = _cost_model(args, cat)
        config = _mcts_config(cfg)
        best, report = _optimize(args.strategy, plan, cat, config, model)
        sys.stdout.write(f"-- optimized ({args.strategy}) --\n")
        sys.stdout.write(f"rules: {' '.join(report.rules_applied) or '(none)'}\n")
        sys.stdout.write(rules.explain(best, cat))
    return 0


def _cmd_calibrate(args, cfg):
    samples = cost.run_microbench(seed=cfg["seed"])
    model = cost.calibrate(samples, cost.default_cost_model(cfg["memory_budget_bytes"]))
    residuals = cost.calibration_residuals(samples, model)
    os.makedirs(args.workspace, exist_ok=True)
    with open(os.path.join(args.workspace, "cost_model.json"), "w") as f:
        json.dump(cost.cost_model_to_doc(model), f, indent=1, sort_keys=True)
    rel = [abs(r) / max(1.0, s[3]) for r, s in zip(residuals, samples)]
    print(
        f"calibrated over {len(samples)} samples; median |residual|/measured = "
        f"{statistics.median(rel):.3f} -> cost_model.json"
    )
    return 0


BENCH_COLUMNS = (
    "query_id", "template_id", "strategy", "opt_ns", "exec_ns", "total_ns",
    "est_cost", "collision", "rules_applied",
)


def _cmd_bench(args, cfg):
    cat = _load_workspace(args)
    with open(args.manifest) as f:
        manifest = json.load(f)
    model = _cost_model(args, cat)
    strategies = args.strategies.split(",") if args.strategies else ["unoptimized", "reusable"]
    rows = []
    for strategy in strategies:
        forest = mcts.SearchForest(theta=cfg["theta"]) if strategy == "reusable" else None
        for i, entry in enumerate(manifest["queries"]):
            with open(os.path.join(args.workspace, entry["file"])) as f:
                doc = json.load(f)
            plan = plandoc.build_plan(doc, cat)
            config = _mcts_config(cfg, seed_offset=i)
            t0 = time.perf_counter_ns()
            best, report = _optimize(strategy, plan, cat, config, model, forest)
            opt_ns = time.perf_counter_ns() - t0
            if args.execute:
                _, stats = execute(best, cat, batch_size=cfg["batch_size"])
                exec_ns = stats.total_wall_ns
            else:
                exec_ns = 0
            rows.append({
                "query_id": entry["id"],
                "template_id": entry["template"],
                "strategy": strategy,
                "opt_ns": opt_ns,
                "exec_ns": exec_ns,
                "total_ns": opt_ns + exec_ns,
                "est_cost": report.best_cost,
                "collision": report.collision,
                "rules_applied": "+".join(report.rules_applied),
            })
    doc = _bench_report(rows)
    base = args.out or os.path.join(args.workspace, "bench")
    with open(base + ".csv", "w") as f:
        w = csv.DictWriter(f, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    with open(base + ".json", "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
    with open(base + "_det.json", "w") as f:
        json.dump(canonical_bench_doc(doc), f, indent=1, sort_keys=True)
    print(f"bench complete: {len(rows)} rows -> {base}.csv / .json")
    return 0


def _bench_report(rows: list[dict]) -> dict:
    aggregates: dict[str, dict] = {}
    by_strategy: dict[str, list[dict]] = {}
    for row in rows:
        by_strategy.setdefault(row["strategy"], []).append(row)
    unopt_exec = {
        r["query_id"]: r["exec_ns"]
        for r in by_strategy.get("unoptimized", ())
        if r["exec_ns"] > 0
    }
    for strategy, srows in by_strategy.items():
        opt = [r["opt_ns"] for r in srows]
        exe = [r["exec_ns"] for r in srows]
        agg = {
            "queries": len(srows),
            "mean_opt_ns": statistics.fmean(opt),
            "median_opt_ns": statistics.median(opt),
            "mean_exec_ns": statistics.fmean(exe),
            "collision_rate": statistics.fmean(
                [1.0 if r["collision"] else 0.0 for r in srows]
            ),
        }
        speedups = [
            unopt_exec[r["query_id"]] / r["exec_ns"]
            for r in srows
            if r["exec_ns"] > 0 and unopt_exec.get(r["query_id"])
        ]
        if speedups and strategy != "unoptimized":
            agg["mean_speedup_vs_unoptimized"] = statistics.fmean(speedups)
        aggregates[strategy] = agg
    return {"rows": rows, "aggregates": aggregates}


_TIMING_KEYS = ("opt_ns", "exec_ns", "total_ns")


def canonical_bench_doc(doc: dict) -> dict:
    """Deterministic view of a bench report: wall-clock fields stripped,
    aggregates restricted to timing-free statistics."""
    rows = [
        {k: v for k, v in row.items() if k not in _TIMING_KEYS} for row in doc["rows"]
    ]
    aggregates = {
        strategy: {
            "queries": agg["queries"],
            "collision_rate": agg["collision_rate"],
        }
        for strategy, agg in doc["aggregates"].items()
    }
    return {"rows": rows, "aggregates": aggregates}


def _cmd_verify(args, cfg):
    rule_set = (
        [rules.RuleId[r] for r in args.rules.split(",")] if args.rules else list(rules.RuleId)
    )
    failed = False
    for rule in rule_set:
        checked, failures = fuzz.fuzz_rule(rule, args.pairs, seed=cfg["seed"])
        status = "ok" if not failures else f"FAILED ({len(failures)})"
        print(f"{rule.name}: {checked} pairs {status}")
        for f in failures[:5]:
            print(f"  error: {f.rule} seed={f.seed} {f.binding}: {f.detail}")
        failed = failed or bool(failures)
    return 2 if failed else 0


# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    p = _Parser(prog="crossplan", description=__doc__)
    p.add_argument("--workspace", default="workspace")
    p.add_argument("--config", default="crossplan.conf")
    p.add_argument("--seed", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--reward-mode", dest="reward_mode", choices=("relative", "absolute"))
    p.add_argument("--theta", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--scale", type=float)
    p.add_argument("--dump-config", action="store_true")
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen-data")
    g.add_argument("--dataset", choices=("movielens_mini", "retail_mini", "both"), default="both")

    w = sub.add_parser("gen-workload")
    w.add_argument("--count", type=int, default=20)
    w.add_argument("--split", choices=("id", "ood", "all"), default="id")

    m = sub.add_parser("register-model")
    m.add_argument("model")

    r = sub.add_parser("run")
    r.add_argument("query")
    r.add_argument("--strategy", dest="strategy", choices=mcts.STRATEGIES)
    r.add_argument("--sort", action="store_true", help="canonical row order")

    e = sub.add_parser("explain")
    e.add_argument("query")
    e.add_argument("--strategy", choices=mcts.STRATEGIES)

    sub.add_parser("calibrate")

    b = sub.add_parser("bench")
    b.add_argument("manifest")
    b.add_argument("--strategies")
    b.add_argument("--out")
    b.add_argument("--execute", action="store_true")

    v = sub.add_parser("verify")
    v.add_argument("--pairs", type=int, default=25)
    v.add_argument("--rules")
    return p


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "gen-workload": _cmd_gen_workload,
    "register-model": _cmd_register_model,
    "run": _cmd_run,
    "explain": _cmd_explain,
    "calibrate": _cmd_calibrate,
    "bench": _cmd_bench,
    "verify": _cmd_verify,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    cfg = _effective_config(args)
    if args.dump_config:
        for k in sorted(cfg):
            print(f"{k} = {cfg[k]}")
        if not args.command:
            return 0
    if not args.command:
        parser.print_usage()
        return 1
    try:
        return _COMMANDS[args.command](args, cfg)
    except CrossplanError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
