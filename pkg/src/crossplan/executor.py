"""Vectorized execution of plans over the catalog.

Each operator materializes its result; expression evaluation (including ML
graph dispatch) runs in fixed-size internal chunks whose boundaries do not
depend on the requested batch size, so results are bit-identical for any
``batch_size``. ``execute_reference`` is a deliberately simple row-at-a-time
interpreter kept independent of the vectorized path so equivalence can be
cross-checked.

``batch_size`` parameterizes the residency accounting:
``ExecStats.peak_estimated_bytes`` models a batch-pipelined engine
(weights + operator state + one batch per edge), not this materializing
executor's actual allocation, so that plans with tiled parameter relations
show their memory advantage.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import ir, mlfn
from .catalog import Catalog
from .errors import CrossplanError, EvalError
from .tables import Datatype, Schema, Table, vector

# ---------------------------------------------------------------------------
# stats


@dataclass
class OpStats:
    kind: str
    rows_in: int = 0
    rows_out: int = 0
    wall_ns: int = 0
    ml_flops: int = 0
    resident_bytes: int = 0


@dataclass
class ExecStats:
    per_node: dict[int, OpStats] = field(default_factory=dict)
    total_wall_ns: int = 0
    peak_estimated_bytes: int = 0

    def to_doc(self) -> dict:
        return {
            "total_wall_ns": self.total_wall_ns,
            "peak_estimated_bytes": self.peak_estimated_bytes,
            "per_node": {
                str(nid): {
                    "kind": s.kind,
                    "rows_in": s.rows_in,
                    "rows_out": s.rows_out,
                    "wall_ns": s.wall_ns,
                    "ml_flops": s.ml_flops,
                    "resident_bytes": s.resident_bytes,
                }
                for nid, s in self.per_node.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_doc(), sort_keys=True)


# ---------------------------------------------------------------------------
# column helpers


def _col_take(dtype: Datatype, col, idx: np.ndarray):
    if dtype.kind in ("text", "tensor"):
        return [col[i] for i in idx]
    return col[idx]


def _col_concat(dtype: Datatype, parts: list):
    if dtype.kind in ("text", "tensor"):
        out = []
        for p in parts:
            out.extend(p)
        return out
    if not parts:
        return _empty_col(dtype)
    return np.concatenate(parts)


def _empty_col(dtype: Datatype):
    if dtype.kind == "int64":
        return np.zeros(0, dtype=np.int64)
    if dtype.kind == "float64":
        return np.zeros(0, dtype=np.float64)
    if dtype.kind == "bool":
        return np.zeros(0, dtype=np.bool_)
    if dtype.kind == "vector":
        return np.zeros((0, dtype.dim), dtype=np.float64)
    return []


def _row_bytes(table: Table) -> float:
    return table.nbytes() / table.row_count if table.row_count else 0.0


# ---------------------------------------------------------------------------
# batched expression evaluation


class _EvalCtx:
    def __init__(self, catalog: Catalog, graphs, row_offset: int = 0):
        self.catalog = catalog
        self.graphs = graphs
        self.row_offset = row_offset


@lru_cache(maxsize=512)
def _parse_tree(doc_text: str) -> mlfn.Tree:
    return mlfn.Tree.from_doc(json.loads(doc_text))


def _runs(items: list) -> list[tuple[int, int]]:
    """Maximal runs of identical (by ``is`` or equality) adjacent items."""
    runs = []
    start = 0
    for i in range(1, len(items)):
        if items[i] is not items[start] and items[i] != items[start]:
            runs.append((start, i))
            start = i
    if items:
        runs.append((start, len(items)))
    return runs


def _as_batch(v) -> np.ndarray:
    if isinstance(v, list):  # tensor column
        return np.stack(v)
    arr = np.asarray(v, dtype=np.float64)
    return arr.reshape(-1, 1) if arr.ndim == 1 else arr


def _eval(expr: ir.Expr, cols: dict, n: int, ctx: _EvalCtx):
    if isinstance(expr, ir.Col):
        return cols[expr.name]
    if isinstance(expr, ir.Lit):
        v = expr.value
        if isinstance(v, bool):
            return np.full(n, v, dtype=np.bool_)
        if isinstance(v, int):
            return np.full(n, v, dtype=np.int64)
        if isinstance(v, float):
            return np.full(n, v, dtype=np.float64)
        if isinstance(v, str):
            return [v] * n
        if isinstance(v, tuple):
            return np.tile(np.asarray(v, dtype=np.float64), (n, 1))
        raise EvalError(f"bad literal {v!r}")
    if isinstance(expr, ir.Arith):
        a = _eval(expr.left, cols, n, ctx)
        b = _eval(expr.right, cols, n, ctx)
        a2 = a[:, None] if getattr(b, "ndim", 1) == 2 and getattr(a, "ndim", 1) == 1 else a
        b2 = b[:, None] if getattr(a, "ndim", 1) == 2 and getattr(b, "ndim", 1) == 1 else b
        if expr.op == "add":
            return a2 + b2
        if expr.op == "sub":
            return a2 - b2
        if expr.op == "mul":
            return a2 * b2
        if expr.op == "div":
            denom = np.asarray(b2, dtype=np.float64)
            if np.any(denom == 0):
                raise EvalError("division by zero")
            return np.asarray(a2, dtype=np.float64) / denom
        raise EvalError(f"bad arith op {expr.op}")
    if isinstance(expr, ir.Cmp):
        a = _eval(expr.left, cols, n, ctx)
        b = _eval(expr.right, cols, n, ctx)
        if isinstance(a, list) or isinstance(b, list):
            a_l = a if isinstance(a, list) else list(a)
            b_l = b if isinstance(b, list) else list(b)
            pairs = zip(a_l, b_l)
            ops = {
                "gt": lambda x, y: x > y, "lt": lambda x, y: x < y,
                "ge": lambda x, y: x >= y, "le": lambda x, y: x <= y,
                "eq": lambda x, y: x == y, "ne": lambda x, y: x != y,
            }
            return np.fromiter((ops[expr.op](x, y) for x, y in pairs), dtype=np.bool_, count=n)
        op = expr.op
        if op == "gt":
            return np.asarray(a > b)
        if op == "lt":
            return np.asarray(a < b)
        if op == "ge":
            return np.asarray(a >= b)
        if op == "le":
            return np.asarray(a <= b)
        if op == "eq":
            return np.asarray(a == b)
        return np.asarray(a != b)
    if isinstance(expr, ir.Logic):
        vals = [_eval(a, cols, n, ctx) for a in expr.args]
        if expr.op == "not":
            return ~vals[0]
        out = vals[0]
        for v in vals[1:]:
            out = (out & v) if expr.op == "and" else (out | v)
        return out
    if isinstance(expr, ir.IfExpr):
        cond = _eval(expr.cond, cols, n, ctx)
        a = _eval(expr.then, cols, n, ctx)
        b = _eval(expr.orelse, cols, n, ctx)
        return _select(cond, a, b, n)
    if isinstance(expr, ir.SwitchExpr):
        out = _eval(expr.default, cols, n, ctx)
        for cond_e, val_e in reversed(expr.cases):
            cond = _eval(cond_e, cols, n, ctx)
            out = _select(cond, _eval(val_e, cols, n, ctx), out, n)
        return out
    if isinstance(expr, ir.Call):
        return _eval_call(expr, cols, n, ctx)
    if isinstance(expr, ir.MLExpr):
        graph = ctx.graphs[expr.graph_id]
        batches = {}
        for (name, _), arg in zip(graph.inputs, expr.args):
            batches[name] = _as_batch(_eval(arg, cols, n, ctx))
        try:
            graph_out = mlfn.graph_execute(graph, batches, ctx.catalog)
        except CrossplanError as e:
            raise EvalError(f"graph {expr.graph_id}: {e}") from e
        result = next(iter(graph_out.values()))
        return result[:, 0] if result.shape[1:] == (1,) else result
    raise EvalError(f"unknown expression {expr!r}")


def _select(cond: np.ndarray, a, b, n: int):
    if isinstance(a, list) or isinstance(b, list):
        a_l = a if isinstance(a, list) else list(a)
        b_l = b if isinstance(b, list) else list(b)
        return [x if c else y for c, x, y in zip(cond, a_l, b_l)]
    a = np.asarray(a)
    b = np.asarray(b)
    if a.dtype != b.dtype and a.dtype.kind in "if" and b.dtype.kind in "if":
        a = a.astype(np.float64)
        b = b.astype(np.float64)
    if a.ndim == 2:
        return np.where(cond[:, None], a, b)
    return np.where(cond, a, b)


def _eval_call(expr: ir.Call, cols: dict, n: int, ctx: _EvalCtx):
    fn = expr.fn
    if fn == "row_number":
        return np.arange(ctx.row_offset, ctx.row_offset + n, dtype=np.int64)
    args = [_eval(a, cols, n, ctx) for a in expr.args]
    if fn == "vecmat_t":
        x, tiles = args
        out: list[np.ndarray | None] = [None] * n
        for start, stop in _runs_by_identity(tiles):
            t = tiles[start]
            y = x[start:stop] @ t.T
            for i in range(start, stop):
                out[i] = y[i - start]
        return out  # ragged 1-d blocks: a tensor column
    if fn == "vec_add":
        return args[0] + args[1]
    if fn == "vec_concat":
        parts = [a[:, None] if a.ndim == 1 else a for a in (np.asarray(x, dtype=np.float64) for x in args)]
        return np.hstack(parts)
    if fn == "vec_get":
        x, i = args
        i = np.asarray(i, dtype=np.int64)
        if np.any(i < 0) or np.any(i >= x.shape[1]):
            raise EvalError("vec_get index out of range")
        return x[np.arange(n), i]
    if fn == "euclid":
        d = args[0] - args[1]
        return np.sqrt(np.einsum("ij,ij->i", d, d))
    if fn == "tree_predict":
        trees, x = args
        out = np.zeros(n, dtype=np.float64)
        for start, stop in _runs(trees):
            tree = _parse_tree(trees[start])
            out[start:stop] = tree.predict_batch(x[start:stop])
        return out
    if fn == "sigmoid":
        return 1.0 / (1.0 + np.exp(-np.asarray(args[0], dtype=np.float64)))
    if fn == "vec_elems":
        return [row for row in args[0]]
    raise EvalError(f"unknown function {fn!r}")


def _runs_by_identity(items: list) -> list[tuple[int, int]]:
    runs = []
    start = 0
    for i in range(1, len(items)):
        if items[i] is not items[start]:
            runs.append((start, i))
            start = i
    if items:
        runs.append((start, len(items)))
    return runs


def _coerce_out(dtype: Datatype, value, n: int):
    if dtype.kind == "int64":
        return np.asarray(value, dtype=np.int64)
    if dtype.kind == "float64":
        return np.asarray(value, dtype=np.float64).reshape(n)
    if dtype.kind == "bool":
        return np.asarray(value, dtype=np.bool_)
    if dtype.kind == "text":
        return list(value)
    if dtype.kind == "vector":
        if isinstance(value, list):
            value = np.stack(value) if value else np.zeros((0, dtype.dim))
        return np.asarray(value, dtype=np.float64).reshape(n, dtype.dim)
    if dtype.kind == "tensor":
        if isinstance(value, np.ndarray):
            return [value[i] for i in range(n)]
        return list(value)
    raise CrossplanError(f"unhandled type {dtype}")


# chunk size for expression evaluation; fixed (never tied to batch_size) so
# results cannot depend on the caller's batching choice
_EVAL_CHUNK = 8192


def eval_expression(
    expr: ir.Expr,
    sch: Schema,
    table: Table,
    catalog: Catalog,
    graphs=None,
    out_type: Datatype | None = None,
):
    """Evaluate one expression over a whole table, chunked only to bound
    intermediate memory; returns a column in the canonical representation
    for its type."""
    graphs = graphs or {}
    out_type = out_type or ir.type_of_expr(expr, sch, graphs)
    n = table.row_count
    pieces = []
    for start in range(0, n, _EVAL_CHUNK):
        stop = min(start + _EVAL_CHUNK, n)
        cols = {
            name: table.columns[i][start:stop]
            for i, name in enumerate(sch.names)
        }
        ctx = _EvalCtx(catalog, graphs, row_offset=start)
        pieces.append(
            _coerce_out(out_type, _eval(expr, cols, stop - start, ctx), stop - start)
        )
    if not pieces:
        return _coerce_out(out_type, _empty_col(out_type), 0)
    return _col_concat(out_type, pieces)


# ---------------------------------------------------------------------------
# operators


def _param_bytes_of_node(node: ir.RelNode, graphs, catalog: Catalog) -> int:
    total = 0
    seen = set()
    for gid in ir.rel_graph_ids(node):
        for mnode in graphs[gid].nodes.values():
            for ref in mnode.param_refs():
                if ref in seen:
                    continue
                seen.add(ref)
                if ref in catalog.params:
                    total += catalog.params[ref].nbytes
                elif ref in catalog.forests:
                    obj = catalog.forests[ref]
                    trees = obj.trees if isinstance(obj, mlfn.Forest) else (obj,)
                    total += sum(len(t.feature) * 40 for t in trees)
    return total


def execute(plan: ir.Plan, catalog: Catalog, batch_size: int = 1024) -> tuple[Table, ExecStats]:
    errors = ir.validate(plan, catalog)
    if errors:
        raise CrossplanError("invalid plan: " + "; ".join(errors))
    schemas = ir.plan_schemas(plan, catalog)
    stats = ExecStats()
    results: dict[int, Table] = {}
    t_start = time.perf_counter_ns()
    for nid in ir.topo_order(plan):
        node = plan.rels[nid]
        children = [results[c] for c in node.inputs]
        t0 = time.perf_counter_ns()
        out = _run_op(node, schemas[nid], children, plan, catalog, batch_size)
        wall = time.perf_counter_ns() - t0
        results[nid] = out
        rows_in = sum(c.row_count for c in children)
        child_sch = schemas[node.inputs[0]] if node.inputs else None
        flops_per_row = (
            ir.rel_flops(node, child_sch, plan.graphs, catalog) if child_sch else 0
        )
        op_stats = OpStats(
            kind=node.op.kind,
            rows_in=rows_in,
            rows_out=out.row_count,
            wall_ns=wall,
            ml_flops=flops_per_row * (children[0].row_count if children else 0),
            resident_bytes=_resident_bytes(node, children, out, plan, catalog, batch_size),
        )
        stats.per_node[nid] = op_stats
    stats.total_wall_ns = time.perf_counter_ns() - t_start
    stats.peak_estimated_bytes = max(
        (s.resident_bytes for s in stats.per_node.values()), default=0
    )
    return results[plan.root], stats


def _resident_bytes(
    node: ir.RelNode,
    children: list[Table],
    out: Table,
    plan: ir.Plan,
    catalog: Catalog,
    batch_size: int,
) -> int:
    """Residency under a batch-pipelined model: parameters + operator state
    + one batch per input edge + one output batch."""
    total = _param_bytes_of_node(node, plan.graphs, catalog)
    op = node.op
    batch_of = lambda t: int(min(batch_size, max(t.row_count, 1)) * _row_bytes(t))
    if isinstance(op, ir.TableScan):
        # scans stream from storage: one row of working state
        return total + int(_row_bytes(out))
    if isinstance(op, ir.HashJoin) and len(children) == 2:
        sizes = [c.nbytes() for c in children]
        small = min(range(2), key=lambda i: (sizes[i], i))
        total += sizes[small]  # hash table over the build side
        total += batch_of(children[1 - small])
    elif isinstance(op, ir.CrossJoin) and len(children) == 2:
        # outer side resident, inner side streamed one row at a time (this
        # is how a tiled parameter relation is consumed)
        total += children[0].nbytes()
        total += int(_row_bytes(children[1]))
    else:
        total += sum(batch_of(c) for c in children)
    if isinstance(op, ir.Aggregate):
        total += out.nbytes()  # grouping state
    total += batch_of(out)
    return total


def _run_op(
    node: ir.RelNode,
    out_schema: Schema,
    children: list[Table],
    plan: ir.Plan,
    catalog: Catalog,
    batch_size: int,
) -> Table:
    op = node.op
    if isinstance(op, ir.TableScan):
        return catalog.table(op.table)
    if isinstance(op, ir.Filter):
        child = children[0]
        mask = eval_expression(
            op.pred, child.schema, child, catalog, plan.graphs
        )
        idx = np.flatnonzero(mask)
        cols = tuple(
            _col_take(t, c, idx) for (_, t), c in zip(child.schema.columns, child.columns)
        )
        return Table(child.schema, cols, len(idx))
    if isinstance(op, ir.Project):
        child = children[0]
        cols = []
        for (name, dtype), (_, expr) in zip(out_schema.columns, op.outputs):
            cols.append(
                eval_expression(
                    expr, child.schema, child, catalog, plan.graphs, dtype
                )
            )
        return Table(out_schema, tuple(cols), child.row_count)
    if isinstance(op, ir.HashJoin):
        return _hash_join(op, children[0], children[1], out_schema)
    if isinstance(op, ir.CrossJoin):
        return _cross_join(children[0], children[1], out_schema)
    if isinstance(op, ir.Aggregate):
        return _aggregate(op, children[0], out_schema, plan, catalog, batch_size)
    if isinstance(op, ir.Union):
        left, right = children
        cols = tuple(
            _col_concat(t, [lc, rc])
            for (_, t), lc, rc in zip(left.schema.columns, left.columns, right.columns)
        )
        return Table(left.schema, cols, left.row_count + right.row_count)
    if isinstance(op, ir.Expand):
        return _expand(op, children[0], out_schema, plan, catalog, batch_size)
    raise CrossplanError(f"unknown operator {op!r}")


def _key_rows(table: Table, keys: tuple[str, ...]) -> list[tuple]:
    cols = [table.column(k) for k in keys]
    out = []
    for i in range(table.row_count):
        out.append(tuple(c[i] if isinstance(c, list) else c[i].item() for c in cols))
    return out


def _hash_join(op: ir.HashJoin, left: Table, right: Table, out_schema: Schema) -> Table:
    # build on the smaller input; ties go left
    build_left = left.row_count <= right.row_count
    build, probe = (left, right) if build_left else (right, left)
    build_keys = op.left_keys if build_left else op.right_keys
    probe_keys = op.right_keys if build_left else op.left_keys
    ht: dict[tuple, list[int]] = {}
    for i, key in enumerate(_key_rows(build, build_keys)):
        ht.setdefault(key, []).append(i)
    li, ri = [], []
    for j, key in enumerate(_key_rows(probe, probe_keys)):
        for i in ht.get(key, ()):
            if build_left:
                li.append(i)
                ri.append(j)
            else:
                li.append(j)
                ri.append(i)
    lidx = np.asarray(li, dtype=np.int64)
    ridx = np.asarray(ri, dtype=np.int64)
    cols = [
        _col_take(t, c, lidx) for (_, t), c in zip(left.schema.columns, left.columns)
    ]
    cols += [
        _col_take(t, c, ridx) for (_, t), c in zip(right.schema.columns, right.columns)
    ]
    return Table(out_schema, tuple(cols), len(lidx))


def _cross_join(left: Table, right: Table, out_schema: Schema) -> Table:
    # right-major order keeps the (typically tiled-parameter) right column
    # in contiguous runs so downstream per-tile kernels batch well
    nl, nr = left.row_count, right.row_count
    lidx = np.tile(np.arange(nl, dtype=np.int64), nr)
    ridx = np.repeat(np.arange(nr, dtype=np.int64), nl)
    cols = [
        _col_take(t, c, lidx) for (_, t), c in zip(left.schema.columns, left.columns)
    ]
    cols += [
        _col_take(t, c, ridx) for (_, t), c in zip(right.schema.columns, right.columns)
    ]
    return Table(out_schema, tuple(cols), nl * nr)


def _aggregate(
    op: ir.Aggregate,
    child: Table,
    out_schema: Schema,
    plan: ir.Plan,
    catalog: Catalog,
    batch_size: int,
) -> Table:
    groups: dict[tuple, list[int]] = {}
    if op.group_keys:
        for i, key in enumerate(_key_rows(child, op.group_keys)):
            groups.setdefault(key, []).append(i)
    elif child.row_count:
        groups[()] = list(range(child.row_count))
    arg_values = {}
    for spec in op.aggs:
        if spec.arg is not None:
            arg_values[spec.name] = eval_expression(
                spec.arg, child.schema, child, catalog, plan.graphs
            )
    rows = []
    for key, idx in groups.items():
        row = list(key)
        for spec in op.aggs:
            row.append(_agg_value(spec, idx, arg_values, child))
        rows.append(row)
    cols: list[list] = [[] for _ in out_schema.columns]
    for row in rows:
        for c, v in enumerate(row):
            cols[c].append(v)
    packed = tuple(
        _pack_out(t, vals) for (_, t), vals in zip(out_schema.columns, cols)
    )
    return Table(out_schema, packed, len(rows))


def _pack_out(dtype: Datatype, vals: list):
    if dtype.kind == "int64":
        return np.asarray(vals, dtype=np.int64)
    if dtype.kind == "float64":
        return np.asarray(vals, dtype=np.float64)
    if dtype.kind == "bool":
        return np.asarray(vals, dtype=np.bool_)
    if dtype.kind == "vector":
        return np.stack(vals) if vals else np.zeros((0, dtype.dim))
    return list(vals)


def _agg_value(spec: ir.AggSpec, idx: list[int], arg_values: dict, child: Table):
    if spec.fn == "count":
        return len(idx)
    vals = arg_values[spec.name]
    if spec.fn == "concat":
        order_col = child.column(spec.order_by)
        ordered = sorted(idx, key=lambda i: order_col[i].item())
        pieces = []
        for i in ordered:
            v = vals[i]
            pieces.append(np.atleast_1d(np.asarray(v, dtype=np.float64)).ravel())
        out = np.concatenate(pieces) if pieces else np.zeros(0)
        if out.shape[0] != spec.out_dim:
            raise EvalError(
                f"concat aggregate assembled {out.shape[0]} values, declared {spec.out_dim}"
            )
        return out
    picked = vals[idx] if not isinstance(vals, list) else [vals[i] for i in idx]
    if spec.fn == "sum":
        return np.sum(picked)
    if spec.fn == "avg":
        return float(np.sum(np.asarray(picked, dtype=np.float64)) / len(idx))
    if spec.fn == "min":
        return np.min(picked)
    if spec.fn == "max":
        return np.max(picked)
    if spec.fn == "bit_and":
        arr = np.asarray(picked)
        out = arr[0]
        for v in arr[1:]:
            out = out & v
        return out
    raise CrossplanError(f"unknown aggregate {spec.fn!r}")


def _expand(
    op: ir.Expand,
    child: Table,
    out_schema: Schema,
    plan: ir.Plan,
    catalog: Catalog,
    batch_size: int,
) -> Table:
    lists = eval_expression(
        op.expr, child.schema, child, catalog, plan.graphs,
        out_type=Datatype("tensor", shape=(1,)),
    )
    counts = np.asarray([len(x) for x in lists], dtype=np.int64)
    idx = np.repeat(np.arange(child.row_count, dtype=np.int64), counts)
    cols = [
        _col_take(t, c, idx) for (_, t), c in zip(child.schema.columns, child.columns)
    ]
    flat = np.concatenate([np.asarray(x, dtype=np.float64) for x in lists]) if lists else np.zeros(0)
    cols.append(flat)
    return Table(out_schema, tuple(cols), int(counts.sum()))


# ---------------------------------------------------------------------------
# reference interpreter (the independent oracle)


def execute_reference(plan: ir.Plan, catalog: Catalog) -> Table:
    """Row-at-a-time interpreter with nested-loop joins. Slow and simple on
    purpose; used to cross-check the vectorized engine."""
    errors = ir.validate(plan, catalog)
    if errors:
        raise CrossplanError("invalid plan: " + "; ".join(errors))
    schemas = ir.plan_schemas(plan, catalog)

    def rows_of(nid: int) -> list[tuple]:
        node = plan.rels[nid]
        op = node.op
        if isinstance(op, ir.TableScan):
            return catalog.table(op.table).rows()
        if isinstance(op, ir.Filter):
            child_rows = rows_of(node.inputs[0])
            sch = schemas[node.inputs[0]]
            out = []
            for i, row in enumerate(child_rows):
                if _ref_eval(op.pred, row, sch, plan, catalog, i):
                    out.append(row)
            return out
        if isinstance(op, ir.Project):
            child_rows = rows_of(node.inputs[0])
            sch = schemas[node.inputs[0]]
            return [
                tuple(
                    _ref_eval(e, row, sch, plan, catalog, i) for _, e in op.outputs
                )
                for i, row in enumerate(child_rows)
            ]
        if isinstance(op, ir.HashJoin):
            lrows = rows_of(node.inputs[0])
            rrows = rows_of(node.inputs[1])
            lsch = schemas[node.inputs[0]]
            rsch = schemas[node.inputs[1]]
            lkeys = [lsch.index(k) for k in op.left_keys]
            rkeys = [rsch.index(k) for k in op.right_keys]
            out = []
            for lr in lrows:
                for rr in rrows:
                    if all(_scalar(lr[a]) == _scalar(rr[b]) for a, b in zip(lkeys, rkeys)):
                        out.append(lr + rr)
            return out
        if isinstance(op, ir.CrossJoin):
            lrows = rows_of(node.inputs[0])
            rrows = rows_of(node.inputs[1])
            return [lr + rr for lr in lrows for rr in rrows]
        if isinstance(op, ir.Aggregate):
            return _ref_aggregate(op, node, schemas, plan, catalog, rows_of)
        if isinstance(op, ir.Union):
            return rows_of(node.inputs[0]) + rows_of(node.inputs[1])
        if isinstance(op, ir.Expand):
            child_rows = rows_of(node.inputs[0])
            sch = schemas[node.inputs[0]]
            out = []
            for i, row in enumerate(child_rows):
                for v in _ref_eval(op.expr, row, sch, plan, catalog, i):
                    out.append(row + (float(v),))
            return out
        raise CrossplanError(f"unknown operator {op!r}")

    out_rows = rows_of(plan.root)
    sch = schemas[plan.root]
    cols: list[list] = [[] for _ in sch.columns]
    for row in out_rows:
        for c, v in enumerate(row):
            cols[c].append(v)
    packed = tuple(_pack_out(t, vals) for (_, t), vals in zip(sch.columns, cols))
    return Table(sch, packed, len(out_rows))


def _scalar(v):
    return v.item() if isinstance(v, np.generic) else v


def _ref_aggregate(op, node, schemas, plan, catalog, rows_of):
    child_rows = rows_of(node.inputs[0])
    sch = schemas[node.inputs[0]]
    key_idx = [sch.index(k) for k in op.group_keys]
    groups: dict[tuple, list[int]] = {}
    for i, row in enumerate(child_rows):
        key = tuple(_scalar(row[k]) for k in key_idx)
        if not op.group_keys and not child_rows:
            continue
        groups.setdefault(key, []).append(i)
    out = []
    for key, idxs in groups.items():
        row = list(key)
        for spec in op.aggs:
            if spec.fn == "count":
                row.append(len(idxs))
                continue
            vals = [
                _ref_eval(spec.arg, child_rows[i], sch, plan, catalog, i) for i in idxs
            ]
            if spec.fn == "concat":
                oidx = sch.index(spec.order_by)
                order = sorted(range(len(idxs)), key=lambda j: _scalar(child_rows[idxs[j]][oidx]))
                flat = []
                for j in order:
                    flat.extend(np.atleast_1d(np.asarray(vals[j], dtype=np.float64)).ravel())
                row.append(np.asarray(flat))
            elif spec.fn == "sum":
                row.append(np.sum(np.asarray(vals)))
            elif spec.fn == "avg":
                row.append(float(np.sum(np.asarray(vals, dtype=np.float64)) / len(vals)))
            elif spec.fn == "min":
                row.append(np.min(np.asarray(vals)))
            elif spec.fn == "max":
                row.append(np.max(np.asarray(vals)))
            elif spec.fn == "bit_and":
                acc = vals[0]
                for v in vals[1:]:
                    acc = acc & v
                row.append(acc)
            else:
                raise CrossplanError(f"unknown aggregate {spec.fn}")
        out.append(tuple(row))
    return out


def _ref_eval(expr, row, sch: Schema, plan, catalog, row_idx: int):
    """Scalar expression evaluation for the reference interpreter."""
    if isinstance(expr, ir.Col):
        return row[sch.index(expr.name)]
    if isinstance(expr, ir.Lit):
        v = expr.value
        return np.asarray(v, dtype=np.float64) if isinstance(v, tuple) else v
    if isinstance(expr, ir.Arith):
        a = _ref_eval(expr.left, row, sch, plan, catalog, row_idx)
        b = _ref_eval(expr.right, row, sch, plan, catalog, row_idx)
        if expr.op == "add":
            return a + b
        if expr.op == "sub":
            return a - b
        if expr.op == "mul":
            return a * b
        if np.any(np.asarray(b) == 0):
            raise EvalError("division by zero")
        return a / b if isinstance(a, np.ndarray) or isinstance(b, np.ndarray) else _scalar(a) / _scalar(b)
    if isinstance(expr, ir.Cmp):
        a = _scalar(_ref_eval(expr.left, row, sch, plan, catalog, row_idx))
        b = _scalar(_ref_eval(expr.right, row, sch, plan, catalog, row_idx))
        return {
            "gt": a > b, "lt": a < b, "ge": a >= b,
            "le": a <= b, "eq": a == b, "ne": a != b,
        }[expr.op]
    if isinstance(expr, ir.Logic):
        vals = [bool(_ref_eval(a, row, sch, plan, catalog, row_idx)) for a in expr.args]
        if expr.op == "not":
            return not vals[0]
        if expr.op == "and":
            return all(vals)
        return any(vals)
    if isinstance(expr, ir.IfExpr):
        c = _ref_eval(expr.cond, row, sch, plan, catalog, row_idx)
        t = _ref_eval(expr.then, row, sch, plan, catalog, row_idx)
        e = _ref_eval(expr.orelse, row, sch, plan, catalog, row_idx)
        return t if c else e
    if isinstance(expr, ir.SwitchExpr):
        for cond, val in expr.cases:
            if _ref_eval(cond, row, sch, plan, catalog, row_idx):
                return _ref_eval(val, row, sch, plan, catalog, row_idx)
        return _ref_eval(expr.default, row, sch, plan, catalog, row_idx)
    if isinstance(expr, ir.Call):
        return _ref_call(expr, row, sch, plan, catalog, row_idx)
    if isinstance(expr, ir.MLExpr):
        graph = plan.graphs[expr.graph_id]
        batches = {}
        for (name, _), arg in zip(graph.inputs, expr.args):
            v = _ref_eval(arg, row, sch, plan, catalog, row_idx)
            arr = np.asarray(v, dtype=np.float64).reshape(1, -1)
            batches[name] = arr
        out = next(iter(mlfn.graph_execute(graph, batches, catalog).values()))
        return float(out[0, 0]) if out.shape == (1, 1) else out[0]
    raise EvalError(f"unknown expression {expr!r}")


def _ref_call(expr: ir.Call, row, sch, plan, catalog, row_idx: int):
    fn = expr.fn
    if fn == "row_number":
        return row_idx
    args = [_ref_eval(a, row, sch, plan, catalog, row_idx) for a in expr.args]
    if fn == "vecmat_t":
        x, t = args
        return t @ x
    if fn == "vec_add":
        return args[0] + args[1]
    if fn == "vec_concat":
        return np.concatenate([np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in args])
    if fn == "vec_get":
        x, i = args
        i = int(i)
        if i < 0 or i >= len(x):
            raise EvalError("vec_get index out of range")
        return float(x[i])
    if fn == "euclid":
        return float(np.sqrt(np.sum((args[0] - args[1]) ** 2)))
    if fn == "tree_predict":
        tree = _parse_tree(args[0])
        x = np.asarray(args[1], dtype=np.float64)
        i = 0
        while tree.feature[i] >= 0:
            i = tree.left[i] if x[tree.feature[i]] < tree.threshold[i] else tree.right[i]
        return float(tree.value[i])
    if fn == "sigmoid":
        return float(1.0 / (1.0 + np.exp(-float(args[0]))))
    if fn == "vec_elems":
        return list(np.asarray(args[0], dtype=np.float64))
    raise EvalError(f"unknown function {fn!r}")
