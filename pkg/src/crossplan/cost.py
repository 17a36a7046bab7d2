"""Analytical plan costing: cardinality estimation from catalog statistics,
per-operator cost constants with an out-of-memory penalty for oversized
resident weights, least-squares calibration against measured latencies, and
the q-error metric.

Costs are abstract units by default; ``calibrate`` fits the constants to
nanoseconds so the same formulas can also predict wall time. Search rewards
use units, which keeps shared search trees calibration-invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import ir, mlfn
from .catalog import Catalog
from .errors import NonPositive
from .tables import ColumnStats, Schema

OP_KINDS = (
    "scan", "filter", "project", "hash_join", "cross_join",
    "aggregate", "union", "expand",
)


@dataclass(frozen=True)
class CostModel:
    per_row: Mapping[str, float]
    per_flop: float = 0.05
    per_probe: float = 2.0
    per_build_row: float = 4.0
    # a resident weight beyond the budget means thrashing or failure; the
    # penalty must dominate the bookkeeping overhead of the tiled form
    oom_penalty: float = 100.0
    memory_budget_bytes: int = 256 * 1024 * 1024
    default_ml_selectivity: float = 0.5
    expand_fanout: float = 4.0

    def __post_init__(self):
        if self.oom_penalty < 1.0:
            raise ValueError("oom penalty factor must be >= 1")
        for k, v in self.per_row.items():
            if v <= 0:
                raise ValueError(f"per-row constant for {k} must be positive")


def default_cost_model(memory_budget_bytes: int | None = None) -> CostModel:
    return CostModel(
        per_row={
            "scan": 1.0, "filter": 1.5, "project": 1.5, "hash_join": 2.0,
            "cross_join": 1.0, "aggregate": 3.0, "union": 0.5, "expand": 1.5,
        },
        memory_budget_bytes=memory_budget_bytes or 256 * 1024 * 1024,
    )


@dataclass
class CostEstimate:
    total: float
    per_node: dict[int, float]
    rows: dict[int, float]
    flags: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# column statistics propagation


def _colstats_selectivity(cs: ColumnStats, op: str, value) -> float:
    n = sum(cs.counts) if cs.counts else max(1, cs.distinct)
    if op == "eq":
        return min(1.0, 1.0 / cs.distinct) if cs.distinct else 0.5
    if op == "ne":
        return 1.0 - (min(1.0, 1.0 / cs.distinct) if cs.distinct else 0.5)
    if cs.min is None or cs.max is None:
        return 0.5
    v = float(value)
    if cs.max == cs.min:
        below = 1.0 if v > cs.min else 0.0
        at_or_below = 1.0 if v >= cs.min else 0.0
    else:
        from .tables import _histogram_cdf

        below = at_or_below = _histogram_cdf(cs, n, v)
        if v >= cs.max:
            at_or_below = 1.0
    if op == "lt":
        return below
    if op == "le":
        return at_or_below
    if op == "ge":
        return 1.0 - below
    if op == "gt":
        return 1.0 - at_or_below
    return 0.5


def propagate_stats(plan: ir.Plan, catalog: Catalog) -> dict[int, dict[str, ColumnStats]]:
    """Best-effort per-node column statistics, following renames and bare
    column passthrough; computed columns have no stats."""
    out: dict[int, dict[str, ColumnStats]] = {}
    for nid in ir.topo_order(plan):
        node = plan.rels[nid]
        op = node.op
        if isinstance(op, ir.TableScan):
            out[nid] = dict(catalog.table_stats(op.table).columns)
        elif isinstance(op, ir.Filter):
            out[nid] = out[node.inputs[0]]
        elif isinstance(op, ir.Project):
            child = out[node.inputs[0]]
            cols = {}
            for name, e in op.outputs:
                if isinstance(e, ir.Col) and e.name in child:
                    cols[name] = child[e.name]
            out[nid] = cols
        elif isinstance(op, (ir.HashJoin, ir.CrossJoin)):
            left = dict(out[node.inputs[0]])
            right = out[node.inputs[1]]
            for name, cs in right.items():
                key = name
                if key in left:
                    key = key + "_r"
                left.setdefault(key, cs)
            out[nid] = left
        elif isinstance(op, ir.Aggregate):
            child = out[node.inputs[0]]
            out[nid] = {k: child[k] for k in op.group_keys if k in child}
        elif isinstance(op, ir.Union):
            out[nid] = out[node.inputs[0]]
        elif isinstance(op, ir.Expand):
            out[nid] = out[node.inputs[0]]
        else:
            out[nid] = {}
    return out


def predicate_selectivity(
    expr: ir.Expr,
    col_stats: Mapping[str, ColumnStats],
    default_ml: float,
    flags: list[str] | None = None,
) -> float:
    """Composable selectivity estimate for a boolean expression."""
    flags = flags if flags is not None else []
    if isinstance(expr, ir.Logic):
        subs = [
            predicate_selectivity(a, col_stats, default_ml, flags) for a in expr.args
        ]
        if expr.op == "and":
            return float(np.prod(subs))
        if expr.op == "or":
            return 1.0 - float(np.prod([1.0 - s for s in subs]))
        return 1.0 - subs[0]
    if isinstance(expr, ir.Lit):
        return 1.0 if expr.value is True else 0.0
    if isinstance(expr, ir.Cmp):
        if ir.expr_graph_ids(expr):
            return default_ml
        col, literal = None, None
        left, right = expr.left, expr.right
        op = expr.op
        if isinstance(left, ir.Col) and isinstance(right, ir.Lit):
            col, literal = left, right
        elif isinstance(right, ir.Col) and isinstance(left, ir.Lit):
            col, literal = right, left
            op = {"gt": "lt", "lt": "gt", "ge": "le", "le": "ge"}.get(op, op)
        else:
            flags.append("cmp-without-stats")
            return 0.5
        cs = col_stats.get(col.name)
        if cs is None or not isinstance(literal.value, (int, float)):
            flags.append(f"no-stats:{col.name}")
            return 0.5
        return _colstats_selectivity(cs, op, literal.value)
    if ir.expr_graph_ids(expr):
        return default_ml
    flags.append("opaque-pred")
    return 0.5


# ---------------------------------------------------------------------------
# cardinality


def estimate_cardinality(
    plan: ir.Plan, catalog: Catalog, model: CostModel | None = None
) -> dict[int, float]:
    model = model or default_cost_model()
    col_stats = propagate_stats(plan, catalog)
    rows: dict[int, float] = {}
    for nid in ir.topo_order(plan):
        node = plan.rels[nid]
        op = node.op
        kids = [rows[c] for c in node.inputs]
        if isinstance(op, ir.TableScan):
            rows[nid] = float(catalog.table(op.table).row_count)
        elif isinstance(op, ir.Filter):
            if op.selectivity is not None:
                sel = op.selectivity
            else:
                sel = predicate_selectivity(
                    op.pred,
                    col_stats[node.inputs[0]],
                    model.default_ml_selectivity,
                )
            rows[nid] = kids[0] * sel
        elif isinstance(op, ir.Project):
            rows[nid] = kids[0]
        elif isinstance(op, ir.HashJoin):
            left_stats = col_stats[node.inputs[0]]
            right_stats = col_stats[node.inputs[1]]
            denom = 1.0
            for lk, rk in zip(op.left_keys, op.right_keys):
                nl = left_stats[lk].distinct if lk in left_stats else 0
                nr = right_stats[rk].distinct if rk in right_stats else 0
                denom *= max(nl, nr, 1)
            rows[nid] = kids[0] * kids[1] / denom
        elif isinstance(op, ir.CrossJoin):
            rows[nid] = kids[0] * kids[1]
        elif isinstance(op, ir.Aggregate):
            if not op.group_keys:
                rows[nid] = 1.0 if kids[0] > 0 else 0.0
            else:
                cs = col_stats[node.inputs[0]]
                groups = 1.0
                for k in op.group_keys:
                    groups *= cs[k].distinct if k in cs and cs[k].distinct else 16.0
                rows[nid] = min(kids[0], groups)
        elif isinstance(op, ir.Union):
            rows[nid] = kids[0] + kids[1]
        elif isinstance(op, ir.Expand):
            rows[nid] = kids[0] * model.expand_fanout
        else:
            rows[nid] = kids[0] if kids else 0.0
    return rows


# ---------------------------------------------------------------------------
# cost


def _node_weight_bytes(node: ir.RelNode, graphs, catalog: Catalog) -> int:
    total = 0
    seen = set()
    for gid in ir.rel_graph_ids(node):
        for mnode in graphs[gid].nodes.values():
            for ref in mnode.param_refs():
                if ref not in seen:
                    seen.add(ref)
                    total += catalog.resident_param_bytes(ref)
    return total


def estimate_cost(
    plan: ir.Plan,
    catalog: Catalog,
    model: CostModel | None = None,
) -> CostEstimate:
    model = model or default_cost_model(catalog.memory_budget_bytes)
    rows = estimate_cardinality(plan, catalog, model)
    schemas = ir.plan_schemas(plan, catalog)
    per_node: dict[int, float] = {}
    flags: list[str] = []
    for nid in ir.topo_order(plan):
        node = plan.rels[nid]
        op = node.op
        kids = node.inputs
        rows_out = rows[nid]
        rows_in = sum(rows[c] for c in kids)
        if isinstance(op, ir.TableScan):
            cost = rows_out * model.per_row["scan"]
        elif isinstance(op, (ir.Filter, ir.Project)):
            flops = ir.rel_flops(node, schemas[kids[0]], plan.graphs, catalog)
            cost = rows_in * (model.per_row[op.kind] + flops * model.per_flop)
        elif isinstance(op, ir.Expand):
            flops = ir.rel_flops(node, schemas[kids[0]], plan.graphs, catalog)
            cost = rows_out * model.per_row["expand"] + rows_in * flops * model.per_flop
        elif isinstance(op, ir.HashJoin):
            build = min(rows[kids[0]], rows[kids[1]])
            probe = max(rows[kids[0]], rows[kids[1]])
            cost = (
                build * model.per_build_row
                + probe * model.per_probe
                + rows_out * model.per_row["hash_join"]
            )
        elif isinstance(op, ir.CrossJoin):
            cost = rows_out * model.per_row["cross_join"]
        elif isinstance(op, ir.Aggregate):
            flops = ir.rel_flops(node, schemas[kids[0]], plan.graphs, catalog)
            cost = (
                rows_in * (model.per_row["aggregate"] + flops * model.per_flop)
                + rows_out * model.per_row["aggregate"]
            )
        elif isinstance(op, ir.Union):
            cost = rows_out * model.per_row["union"]
        else:
            cost = rows_out * 1.0
        if _node_weight_bytes(node, plan.graphs, catalog) > model.memory_budget_bytes:
            cost *= model.oom_penalty
        per_node[nid] = cost
    return CostEstimate(
        total=float(sum(per_node.values())), per_node=per_node, rows=rows, flags=flags
    )


# ---------------------------------------------------------------------------
# calibration


def calibrate(
    samples: Sequence[tuple[str, float, float, float]],
    base: CostModel | None = None,
) -> CostModel:
    """Least-squares fit of per-row and per-flop constants from
    (op_kind, rows, flops, measured_ns) samples; constants clamped positive.
    With no samples the base model is returned unchanged."""
    base = base or default_cost_model()
    if not samples:
        return base
    kinds = sorted({k for k, _, _, _ in samples})
    use_flops = any(f > 0 for _, _, f, _ in samples)
    cols = {k: i for i, k in enumerate(kinds)}
    width = len(kinds) + (1 if use_flops else 0)
    a = np.zeros((len(samples), width))
    y = np.zeros(len(samples))
    for i, (kind, rows_n, flops, ns) in enumerate(samples):
        a[i, cols[kind]] = rows_n
        if use_flops:
            a[i, -1] = flops
        y[i] = ns
    # relative least squares: scale each equation by its measurement so
    # cheap operators are not drowned by expensive ones
    scale = np.maximum(np.abs(y), 1.0)
    sol, *_ = np.linalg.lstsq(a / scale[:, None], y / scale, rcond=None)
    eps = 1e-9
    per_row = dict(base.per_row)
    for k, i in cols.items():
        per_row[k] = max(float(sol[i]), eps)
    per_flop = max(float(sol[-1]), eps) if use_flops else base.per_flop
    return replace(
        base,
        per_row=per_row,
        per_flop=per_flop,
        per_probe=per_row.get("hash_join", base.per_probe),
        per_build_row=2.0 * per_row.get("hash_join", base.per_probe / 2.0),
    )


def calibration_residuals(
    samples: Sequence[tuple[str, float, float, float]], model: CostModel
) -> list[float]:
    out = []
    for kind, rows_n, flops, ns in samples:
        pred = model.per_row.get(kind, 1.0) * rows_n + model.per_flop * flops
        out.append(ns - pred)
    return out


def q_error(actual: float, predicted: float) -> float:
    if actual <= 0 or predicted <= 0:
        raise NonPositive(f"q_error needs positive inputs, got {actual}, {predicted}")
    return max(actual / predicted, predicted / actual)


def cost_model_to_doc(model: CostModel) -> dict:
    return {
        "per_row": dict(model.per_row),
        "per_flop": model.per_flop,
        "per_probe": model.per_probe,
        "per_build_row": model.per_build_row,
        "oom_penalty": model.oom_penalty,
        "memory_budget_bytes": model.memory_budget_bytes,
        "default_ml_selectivity": model.default_ml_selectivity,
        "expand_fanout": model.expand_fanout,
    }


def cost_model_from_doc(doc: Mapping) -> CostModel:
    return CostModel(
        per_row=dict(doc["per_row"]),
        per_flop=doc["per_flop"],
        per_probe=doc["per_probe"],
        per_build_row=doc["per_build_row"],
        oom_penalty=doc["oom_penalty"],
        memory_budget_bytes=doc["memory_budget_bytes"],
        default_ml_selectivity=doc.get("default_ml_selectivity", 0.5),
        expand_fanout=doc.get("expand_fanout", 4.0),
    )


# ---------------------------------------------------------------------------
# built-in micro-benchmarks for calibration


def run_microbench(seed: int = 0, repeat: int = 3) -> list[tuple[str, float, float, float]]:
    """Time small single-purpose plans and harvest (op kind, rows, flops,
    wall ns) samples from their per-operator stats."""
    from . import executor  # local import: cost must not depend on executor
    from .catalog import Catalog
    from .tables import FLOAT64, INT64, schema, table_create, vector

    rng = np.random.default_rng(seed)
    samples: list[tuple[str, float, float, float]] = []
    for n in (2000, 8000):
        cat = Catalog()
        dim = 32
        rows = [
            [i, int(rng.integers(0, 50)), float(rng.normal()), rng.normal(size=dim)]
            for i in range(n)
        ]
        cat.register_table(
            "t",
            table_create(
                schema([
                    ("id", INT64), ("k", INT64), ("v", FLOAT64), ("x", vector(dim)),
                ]),
                rows,
            ),
        )
        cat.register_table(
            "d",
            table_create(
                schema([("k", INT64), ("w", FLOAT64)]),
                [[i, float(rng.normal())] for i in range(50)],
            ),
        )
        w = rng.normal(size=(dim, 64)) / np.sqrt(dim)
        cat.params["bench.w"] = w
        graph = ir.build_graph(
            [("x", (dim,))], {"mm": {"kind": "matmul", "weight": "bench.w"}},
            [("x", "mm", 0)], ["mm"], cat,
        )
        del cat.params["bench.w"]
        cat.register_model("bench", graph, {"w": w})
        plans = {
            "filter": ir.Plan(
                {0: ir.RelNode(ir.TableScan("t")),
                 1: ir.RelNode(ir.Filter(ir.Cmp("gt", ir.Col("v"), ir.Lit(0.0))), (0,))},
                1,
            ),
            "project": ir.Plan(
                {0: ir.RelNode(ir.TableScan("t")),
                 1: ir.RelNode(ir.Project((("a", ir.Arith("add", ir.Col("v"), ir.Lit(1.0))),)), (0,))},
                1,
            ),
            "ml": ir.Plan(
                {0: ir.RelNode(ir.TableScan("t")),
                 1: ir.RelNode(ir.Project((("y", ir.MLExpr("g", (ir.Col("x"),))),)), (0,))},
                1, {"g": cat.model("bench")},
            ),
            "hash_join": ir.Plan(
                {0: ir.RelNode(ir.TableScan("t")), 1: ir.RelNode(ir.TableScan("d")),
                 2: ir.RelNode(ir.HashJoin(("k",), ("k",)), (0, 1))},
                2,
            ),
            "aggregate": ir.Plan(
                {0: ir.RelNode(ir.TableScan("t")),
                 1: ir.RelNode(ir.Aggregate(("k",), (ir.AggSpec("m", "avg", ir.Col("v")),)), (0,))},
                1,
            ),
            "union": ir.Plan(
                {0: ir.RelNode(ir.TableScan("t")), 1: ir.RelNode(ir.TableScan("t")),
                 2: ir.RelNode(ir.Union(), (0, 1))},
                2,
            ),
            "cross_join": ir.Plan(
                {0: ir.RelNode(ir.TableScan("t")), 1: ir.RelNode(ir.TableScan("d")),
                 2: ir.RelNode(ir.Project((("w", ir.Col("w")),)), (1,)),
                 3: ir.RelNode(ir.CrossJoin(), (0, 2))},
                3,
            ),
            "expand": ir.Plan(
                {0: ir.RelNode(ir.TableScan("t")),
                 1: ir.RelNode(ir.Expand("e", ir.Call("vec_elems", (ir.Col("x"),))), (0,))},
                1,
            ),
        }
        for pname, plan in plans.items():
            best: dict[int, tuple[str, float, float, float]] = {}
            for _ in range(repeat):
                _, stats = executor.execute(plan, cat)
                for nid, op_stats in stats.per_node.items():
                    rows_n = _calibration_rows(op_stats)
                    flops = float(op_stats.ml_flops)
                    cur = (op_stats.kind, float(rows_n), flops, float(op_stats.wall_ns))
                    if nid not in best or cur[3] < best[nid][3]:
                        best[nid] = cur
            samples.extend(best.values())
    return samples


def _calibration_rows(op_stats) -> float:
    """Row count in the same units the cost formulas charge per kind."""
    kind = op_stats.kind
    if kind in ("filter", "project"):
        return op_stats.rows_in
    if kind in ("hash_join", "aggregate"):
        return op_stats.rows_in + op_stats.rows_out
    return op_stats.rows_out  # scan, cross_join, union, expand
