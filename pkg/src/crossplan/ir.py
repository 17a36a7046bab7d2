"""Three-level plan representation.

The top level is a DAG of relational operators. Each operator is customized
by an expression tree (middle level) whose opaque leaves bind to ML
computation graphs (bottom level, :mod:`crossplan.mlfn`).

Plans are treated as immutable values: rewrites build new ``Plan`` objects
that share unchanged operators, expressions and graphs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import mlfn, tables
from .errors import (
    CrossplanError,
    CyclicGraph,
    DuplicateColumn,
    ShapeMismatch,
    UnknownColumn,
    UnsupportedFn,
    UntypedExpr,
)
from .tables import BOOL, FLOAT64, INT64, TEXT, Datatype, Schema, schema, tensor, vector

# ---------------------------------------------------------------------------
# expressions

ARITH_OPS = ("add", "sub", "mul", "div")
CMP_OPS = ("gt", "lt", "eq", "ne", "ge", "le")
LOGIC_OPS = ("and", "or", "not")


class Expr:
    __slots__ = ()


@dataclass(frozen=True)
class Col(Expr):
    name: str


@dataclass(frozen=True)
class Lit(Expr):
    value: object  # int | float | bool | str | tuple[float, ...] for vectors


@dataclass(frozen=True)
class Arith(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Cmp(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Logic(Expr):
    op: str
    args: tuple[Expr, ...]


@dataclass(frozen=True)
class IfExpr(Expr):
    cond: Expr
    then: Expr
    orelse: Expr


@dataclass(frozen=True)
class SwitchExpr(Expr):
    cases: tuple[tuple[Expr, Expr], ...]
    default: Expr


@dataclass(frozen=True)
class Call(Expr):
    fn: str
    args: tuple[Expr, ...]


@dataclass(frozen=True)
class MLExpr(Expr):
    """Opaque call of a bound ML computation graph."""

    graph_id: str
    args: tuple[Expr, ...]


def lit(v) -> Lit:
    if isinstance(v, (list, np.ndarray)):
        return Lit(tuple(float(x) for x in v))
    return Lit(v)


# ---------------------------------------------------------------------------
# relational operators


@dataclass(frozen=True)
class TableScan:
    table: str
    kind = "scan"
    arity = 0


@dataclass(frozen=True)
class Filter:
    pred: Expr
    selectivity: float | None = None  # declared ML-predicate selectivity
    kind = "filter"
    arity = 1


@dataclass(frozen=True)
class Project:
    outputs: tuple[tuple[str, Expr], ...]
    kind = "project"
    arity = 1


@dataclass(frozen=True)
class HashJoin:
    left_keys: tuple[str, ...]
    right_keys: tuple[str, ...]
    kind = "hash_join"
    arity = 2


@dataclass(frozen=True)
class CrossJoin:
    kind = "cross_join"
    arity = 2


AGG_FNS = ("sum", "count", "avg", "min", "max", "bit_and", "concat")


@dataclass(frozen=True)
class AggSpec:
    name: str
    fn: str
    arg: Expr | None = None
    order_by: str | None = None  # concat only: column fixing block order
    out_dim: int | None = None  # concat only: assembled vector width


@dataclass(frozen=True)
class Aggregate:
    group_keys: tuple[str, ...]
    aggs: tuple[AggSpec, ...]
    kind = "aggregate"
    arity = 1


@dataclass(frozen=True)
class Union:
    kind = "union"
    arity = 2


@dataclass(frozen=True)
class Expand:
    name: str
    expr: Expr  # must produce a list per row
    kind = "expand"
    arity = 1


RelOp = TableScan | Filter | Project | HashJoin | CrossJoin | Aggregate | Union | Expand


@dataclass(frozen=True)
class RelNode:
    op: RelOp
    inputs: tuple[int, ...] = ()


@dataclass
class Plan:
    """rels maps node id -> RelNode; graphs maps graph id -> MLGraph."""

    rels: dict[int, RelNode]
    root: int
    graphs: dict[str, mlfn.MLGraph] = field(default_factory=dict)

    def node(self, nid: int) -> RelNode:
        return self.rels[nid]

    def next_id(self) -> int:
        return max(self.rels) + 1 if self.rels else 0

    def copy(self) -> "Plan":
        return Plan(dict(self.rels), self.root, dict(self.graphs))


# ---------------------------------------------------------------------------
# builtin expression functions: name -> (argument checker, flops per row)

_LIST = "list"  # internal pseudo-kind for Expand sources


def _builtin_type(fn: str, args: list[Datatype]) -> Datatype | tuple:
    if fn == "row_number":
        if args:
            raise UntypedExpr("row_number takes no arguments")
        return INT64
    if fn == "vecmat_t":
        x, t = args
        if x.kind != "vector" or t.kind != "tensor" or len(t.shape) != 2:
            raise UntypedExpr(f"vecmat_t needs (vector, 2-d tensor), got {x}, {t}")
        if t.shape[1] != x.dim:
            raise UntypedExpr(f"vecmat_t inner dims differ: {x} vs {t}")
        return tensor((t.shape[0],))
    if fn == "vec_add":
        a, b = args
        if a.kind != "vector" or b.kind != "vector" or a.dim != b.dim:
            raise UntypedExpr(f"vec_add needs equal-width vectors, got {a}, {b}")
        return a
    if fn == "vec_concat":
        width = 0
        for a in args:
            if a.kind == "vector":
                width += a.dim
            elif a.is_numeric:
                width += 1
            else:
                raise UntypedExpr(f"vec_concat arg must be vector or numeric, got {a}")
        return vector(width)
    if fn == "vec_get":
        a, i = args
        if a.kind != "vector" or i.kind != "int64":
            raise UntypedExpr(f"vec_get needs (vector, int64), got {a}, {i}")
        return FLOAT64
    if fn == "euclid":
        a, b = args
        if a.kind != "vector" or b.kind != "vector" or a.dim != b.dim:
            raise UntypedExpr(f"euclid needs equal-width vectors, got {a}, {b}")
        return FLOAT64
    if fn == "tree_predict":
        t, x = args
        if t.kind != "text" or x.kind != "vector":
            raise UntypedExpr(f"tree_predict needs (text, vector), got {t}, {x}")
        return FLOAT64
    if fn == "sigmoid":
        (a,) = args
        if not a.is_numeric:
            raise UntypedExpr(f"sigmoid needs a numeric arg, got {a}")
        return FLOAT64
    if fn == "vec_elems":
        (a,) = args
        if a.kind != "vector":
            raise UntypedExpr(f"vec_elems needs a vector, got {a}")
        return (_LIST, FLOAT64)
    raise UntypedExpr(f"unknown function {fn!r}")


def builtin_flops(fn: str, args: list[Datatype]) -> int:
    """Static per-row flop cost of a builtin call (used for cost accounting)."""
    if fn == "vecmat_t":
        return 2 * args[0].dim * args[1].shape[0]
    if fn == "vec_add":
        return args[0].dim
    if fn == "euclid":
        return 3 * args[0].dim
    if fn == "tree_predict":
        return 8  # bounded by tree depth; refined at runtime
    if fn == "sigmoid":
        return 4
    if fn == "vec_get":
        return 1
    return 0


def expr_flops(expr: Expr, sch: Schema, graphs: Mapping[str, "mlfn.MLGraph"], catalog=None) -> int:
    """Static per-row ML work of an expression: bound graphs plus the
    numeric builtins that rewrites emit. Plain scalar operators count 0."""
    total = 0
    if isinstance(expr, MLExpr):
        g = graphs[expr.graph_id]
        total += mlfn.graph_flops(g, catalog)
        for a in expr.args:
            total += expr_flops(a, sch, graphs, catalog)
        return total
    if isinstance(expr, Call):
        arg_types = [type_of_expr(a, sch, graphs) for a in expr.args]
        total += builtin_flops(expr.fn, arg_types)
        for a in expr.args:
            total += expr_flops(a, sch, graphs, catalog)
        return total
    if isinstance(expr, (Arith, Cmp)):
        return expr_flops(expr.left, sch, graphs, catalog) + expr_flops(
            expr.right, sch, graphs, catalog
        )
    if isinstance(expr, Logic):
        return sum(expr_flops(a, sch, graphs, catalog) for a in expr.args)
    if isinstance(expr, IfExpr):
        return (
            expr_flops(expr.cond, sch, graphs, catalog)
            + expr_flops(expr.then, sch, graphs, catalog)
            + expr_flops(expr.orelse, sch, graphs, catalog)
        )
    if isinstance(expr, SwitchExpr):
        return sum(
            expr_flops(c, sch, graphs, catalog) + expr_flops(v, sch, graphs, catalog)
            for c, v in expr.cases
        ) + expr_flops(expr.default, sch, graphs, catalog)
    return 0


def rel_flops(node: RelNode, sch: Schema, graphs, catalog=None) -> int:
    """Per-input-row ML flops of a relational operator's expressions."""
    op = node.op
    if isinstance(op, Filter):
        return expr_flops(op.pred, sch, graphs, catalog)
    if isinstance(op, Project):
        return sum(expr_flops(e, sch, graphs, catalog) for _, e in op.outputs)
    if isinstance(op, Expand):
        return expr_flops(op.expr, sch, graphs, catalog)
    if isinstance(op, Aggregate):
        return sum(
            expr_flops(s.arg, sch, graphs, catalog) for s in op.aggs if s.arg is not None
        )
    return 0


# ---------------------------------------------------------------------------
# expression typing


def type_of_expr(expr: Expr, sch: Schema, graphs: Mapping[str, mlfn.MLGraph]) -> Datatype:
    t = _type_of(expr, sch, graphs)
    if isinstance(t, tuple):
        raise UntypedExpr("list-producing expression outside expand")
    return t


def _type_of(expr: Expr, sch: Schema, graphs) -> Datatype | tuple:
    if isinstance(expr, Col):
        return sch.typeof(expr.name)
    if isinstance(expr, Lit):
        v = expr.value
        if isinstance(v, bool):
            return BOOL
        if isinstance(v, int):
            return INT64
        if isinstance(v, float):
            return FLOAT64
        if isinstance(v, str):
            return TEXT
        if isinstance(v, tuple):
            return vector(len(v))
        raise UntypedExpr(f"unsupported literal {v!r}")
    if isinstance(expr, Arith):
        lt = type_of_expr(expr.left, sch, graphs)
        rt = type_of_expr(expr.right, sch, graphs)
        if lt.kind == "vector" and rt.kind == "vector":
            if lt.dim != rt.dim:
                raise UntypedExpr(f"vector arith width mismatch: {lt} vs {rt}")
            return lt
        if lt.kind == "vector" and rt.is_numeric:
            return lt
        if rt.kind == "vector" and lt.is_numeric:
            return rt
        if lt.is_numeric and rt.is_numeric:
            if expr.op == "div":
                return FLOAT64
            if lt.kind == "float64" or rt.kind == "float64":
                return FLOAT64
            return INT64
        raise UntypedExpr(f"arith over {lt} and {rt}")
    if isinstance(expr, Cmp):
        lt = type_of_expr(expr.left, sch, graphs)
        rt = type_of_expr(expr.right, sch, graphs)
        ok = (lt.is_numeric and rt.is_numeric) or lt == rt
        if not ok:
            raise UntypedExpr(f"comparison between {lt} and {rt}")
        return BOOL
    if isinstance(expr, Logic):
        if expr.op == "not" and len(expr.args) != 1:
            raise UntypedExpr("not takes one argument")
        for a in expr.args:
            if type_of_expr(a, sch, graphs) != BOOL:
                raise UntypedExpr("logic over non-bool argument")
        return BOOL
    if isinstance(expr, IfExpr):
        if type_of_expr(expr.cond, sch, graphs) != BOOL:
            raise UntypedExpr("if condition must be bool")
        return _common_type(
            type_of_expr(expr.then, sch, graphs),
            type_of_expr(expr.orelse, sch, graphs),
        )
    if isinstance(expr, SwitchExpr):
        t = type_of_expr(expr.default, sch, graphs)
        for cond, val in expr.cases:
            if type_of_expr(cond, sch, graphs) != BOOL:
                raise UntypedExpr("switch condition must be bool")
            t = _common_type(t, type_of_expr(val, sch, graphs))
        return t
    if isinstance(expr, Call):
        return _builtin_type(expr.fn, [type_of_expr(a, sch, graphs) for a in expr.args])
    if isinstance(expr, MLExpr):
        if expr.graph_id not in graphs:
            raise UntypedExpr(f"unbound ml graph {expr.graph_id!r}")
        g = graphs[expr.graph_id]
        if len(g.outputs) != 1:
            raise UntypedExpr(f"graph {expr.graph_id!r} must have exactly one output")
        if len(expr.args) != len(g.inputs):
            raise ShapeMismatch(
                f"graph {expr.graph_id!r} expects {len(g.inputs)} args, got {len(expr.args)}"
            )
        for a, (name, shape) in zip(expr.args, g.inputs):
            at = type_of_expr(a, sch, graphs)
            if not _matches_shape(at, shape):
                raise ShapeMismatch(
                    f"graph {expr.graph_id!r} input {name!r} wants {tuple(shape)}, got {at}"
                )
        out_shape = g.outputs[0][1]
        return _shape_to_type(out_shape)
    raise UntypedExpr(f"unknown expression {expr!r}")


def _common_type(a: Datatype, b: Datatype) -> Datatype:
    if a == b:
        return a
    if a.is_numeric and b.is_numeric:
        return FLOAT64
    raise UntypedExpr(f"branches disagree: {a} vs {b}")


def _matches_shape(t: Datatype, shape: Sequence[int]) -> bool:
    shape = tuple(shape)
    if t.kind == "vector":
        return shape == (t.dim,)
    if t.is_numeric:
        return shape == (1,)
    if t.kind == "tensor":
        return shape == t.shape
    return False


def _shape_to_type(shape: Sequence[int]) -> Datatype:
    shape = tuple(shape)
    if shape == (1,):
        return FLOAT64
    if len(shape) == 1:
        return vector(shape[0])
    return tensor(shape)


def expr_columns(expr: Expr) -> set[str]:
    """Source column names an expression reads."""
    out: set[str] = set()

    def walk(e: Expr):
        if isinstance(e, Col):
            out.add(e.name)
        elif isinstance(e, (Arith, Cmp)):
            walk(e.left)
            walk(e.right)
        elif isinstance(e, Logic):
            for a in e.args:
                walk(a)
        elif isinstance(e, IfExpr):
            walk(e.cond)
            walk(e.then)
            walk(e.orelse)
        elif isinstance(e, SwitchExpr):
            for c, v in e.cases:
                walk(c)
                walk(v)
            walk(e.default)
        elif isinstance(e, (Call, MLExpr)):
            for a in e.args:
                walk(a)

    walk(expr)
    return out


def expr_graph_ids(expr: Expr) -> set[str]:
    out: set[str] = set()

    def walk(e: Expr):
        if isinstance(e, MLExpr):
            out.add(e.graph_id)
            for a in e.args:
                walk(a)
        elif isinstance(e, (Arith, Cmp)):
            walk(e.left)
            walk(e.right)
        elif isinstance(e, Logic):
            for a in e.args:
                walk(a)
        elif isinstance(e, IfExpr):
            walk(e.cond)
            walk(e.then)
            walk(e.orelse)
        elif isinstance(e, SwitchExpr):
            for c, v in e.cases:
                walk(c)
                walk(v)
            walk(e.default)
        elif isinstance(e, Call):
            for a in e.args:
                walk(a)

    walk(expr)
    return out


def rel_graph_ids(node: RelNode) -> set[str]:
    op = node.op
    if isinstance(op, Filter):
        return expr_graph_ids(op.pred)
    if isinstance(op, Project):
        out: set[str] = set()
        for _, e in op.outputs:
            out |= expr_graph_ids(e)
        return out
    if isinstance(op, Expand):
        return expr_graph_ids(op.expr)
    if isinstance(op, Aggregate):
        out = set()
        for spec in op.aggs:
            if spec.arg is not None:
                out |= expr_graph_ids(spec.arg)
        return out
    return set()


# ---------------------------------------------------------------------------
# schema derivation


def derive_schema(
    op: RelOp,
    child_schemas: Sequence[Schema],
    graphs: Mapping[str, mlfn.MLGraph],
    catalog=None,
) -> Schema:
    if len(child_schemas) != op.arity:
        raise CrossplanError(
            f"{op.kind} expects {op.arity} inputs, got {len(child_schemas)}"
        )
    if isinstance(op, TableScan):
        if catalog is None or op.table not in catalog.tables:
            raise UnknownColumn(f"table {op.table!r} not in catalog")
        return catalog.tables[op.table].schema
    if isinstance(op, Filter):
        if type_of_expr(op.pred, child_schemas[0], graphs) != BOOL:
            raise UntypedExpr("filter predicate must be bool")
        return child_schemas[0]
    if isinstance(op, Project):
        cols = []
        seen = set()
        for name, e in op.outputs:
            if name in seen:
                raise DuplicateColumn(name)
            seen.add(name)
            cols.append((name, type_of_expr(e, child_schemas[0], graphs)))
        return schema(cols)
    if isinstance(op, HashJoin):
        left, right = child_schemas
        for k in op.left_keys:
            left.typeof(k)
        for k in op.right_keys:
            right.typeof(k)
        if len(op.left_keys) != len(op.right_keys) or not op.left_keys:
            raise CrossplanError("join key lists must be nonempty and equal length")
        cols = list(left.columns)
        taken = set(left.names)
        for name, t in right.columns:
            if name in taken:
                if name in op.right_keys:
                    name = name + "_r"
                    if name in taken:
                        raise DuplicateColumn(name)
                else:
                    raise DuplicateColumn(name)
            taken.add(name)
            cols.append((name, t))
        return schema(cols)
    if isinstance(op, CrossJoin):
        left, right = child_schemas
        overlap = set(left.names) & set(right.names)
        if overlap:
            raise DuplicateColumn(sorted(overlap)[0])
        return schema(list(left.columns) + list(right.columns))
    if isinstance(op, Aggregate):
        child = child_schemas[0]
        cols = [(k, child.typeof(k)) for k in op.group_keys]
        seen = set(op.group_keys)
        for spec in op.aggs:
            if spec.name in seen:
                raise DuplicateColumn(spec.name)
            seen.add(spec.name)
            cols.append((spec.name, _agg_type(spec, child, graphs)))
        return schema(cols)
    if isinstance(op, Union):
        left, right = child_schemas
        if left.columns != right.columns:
            raise CrossplanError("union inputs must have identical schemas")
        return left
    if isinstance(op, Expand):
        t = _type_of(op.expr, child_schemas[0], graphs)
        if not (isinstance(t, tuple) and t[0] == _LIST):
            raise UntypedExpr("expand expression must produce a list")
        if child_schemas[0].has(op.name):
            raise DuplicateColumn(op.name)
        return schema(list(child_schemas[0].columns) + [(op.name, t[1])])
    raise CrossplanError(f"unknown operator {op!r}")


def _agg_type(spec: AggSpec, child: Schema, graphs) -> Datatype:
    if spec.fn not in AGG_FNS:
        raise CrossplanError(f"unknown aggregate {spec.fn!r}")
    if spec.fn == "count":
        return INT64
    if spec.arg is None:
        raise UntypedExpr(f"aggregate {spec.fn} needs an argument")
    at = type_of_expr(spec.arg, child, graphs)
    if spec.fn == "concat":
        if spec.order_by is None or spec.out_dim is None:
            raise UntypedExpr("concat aggregate needs order_by and out_dim")
        child.typeof(spec.order_by)
        if at.kind not in ("vector", "tensor") and not at.is_numeric:
            raise UntypedExpr(f"concat aggregate over {at}")
        return vector(spec.out_dim)
    if spec.fn == "avg":
        if not at.is_numeric:
            raise UntypedExpr(f"avg over {at}")
        return FLOAT64
    if spec.fn == "bit_and":
        if at.kind not in ("int64", "bool"):
            raise UntypedExpr(f"bit_and over {at}")
        return at
    if not at.is_numeric:
        raise UntypedExpr(f"{spec.fn} over {at}")
    return at


def topo_order(plan: Plan) -> list[int]:
    """Children-first order over nodes reachable from the root."""
    seen: dict[int, int] = {}  # 0 = visiting, 1 = done
    order: list[int] = []

    def visit(nid: int, trail: tuple[int, ...]):
        state = seen.get(nid)
        if state == 1:
            return
        if state == 0:
            raise CyclicGraph(f"cycle through node {nid}")
        seen[nid] = 0
        if nid not in plan.rels:
            raise CrossplanError(f"dangling node id {nid}")
        for c in plan.rels[nid].inputs:
            visit(c, trail + (nid,))
        seen[nid] = 1
        order.append(nid)

    visit(plan.root, ())
    return order


def plan_schemas(plan: Plan, catalog) -> dict[int, Schema]:
    # memoized on the plan object (plans are immutable values); keyed by the
    # catalog identity since scans resolve their schemas there
    cache = plan.__dict__.setdefault("_schema_cache", {})
    if id(catalog) in cache:
        return cache[id(catalog)]
    out: dict[int, Schema] = {}
    for nid in topo_order(plan):
        node = plan.rels[nid]
        out[nid] = derive_schema(
            node.op, [out[c] for c in node.inputs], plan.graphs, catalog
        )
    cache[id(catalog)] = out
    return out


def output_schema(plan: Plan, catalog) -> Schema:
    return plan_schemas(plan, catalog)[plan.root]


# ---------------------------------------------------------------------------
# graph construction with shape/flop inference


def build_graph(
    inputs: Sequence[tuple[str, Sequence[int]]],
    node_specs: Mapping[str, Mapping],
    edges: Sequence[tuple[str, str, int]],
    outputs: Sequence[str],
    catalog,
) -> mlfn.MLGraph:
    """Assemble an :class:`mlfn.MLGraph`, inferring shapes and flops from the
    wiring and the catalog's parameter shapes."""
    inputs = tuple((n, tuple(s)) for n, s in inputs)
    edges = tuple((s, d, int(p)) for s, d, p in edges)
    shapes: dict[str, tuple[int, ...]] = {n: s for n, s in inputs}
    pending = dict(node_specs)
    nodes: dict[str, mlfn.MLNode] = {}

    def in_srcs(nid: str) -> list[str]:
        return [s for _, s in sorted((p, s) for s, d, p in edges if d == nid)]

    progress = True
    while pending and progress:
        progress = False
        for nid in sorted(pending):
            srcs = in_srcs(nid)
            if any(s not in shapes for s in srcs):
                continue
            node = _infer_node(nid, pending[nid], [shapes[s] for s in srcs], catalog)
            nodes[nid] = node
            shapes[nid] = node.output_shape
            del pending[nid]
            progress = True
    if pending:
        raise CyclicGraph(f"unresolvable nodes (cycle or missing input): {sorted(pending)}")
    out = tuple((o, shapes[o]) for o in outputs)
    return mlfn.MLGraph(nodes=nodes, edges=edges, inputs=inputs, outputs=out)


def _infer_node(nid: str, spec: Mapping, in_shapes: list[tuple[int, ...]], catalog) -> mlfn.MLNode:
    kind = spec["kind"]
    weight = spec.get("weight")
    bias = spec.get("bias")
    act = spec.get("act")
    agg = spec.get("agg")
    kernel = spec.get("kernel", "naive")
    threshold = spec.get("threshold")
    rate = spec.get("rate")

    def mk(out_shape, flops_override=None):
        node = mlfn.MLNode(
            kind=kind,
            input_shapes=tuple(in_shapes),
            output_shape=tuple(out_shape),
            weight_ref=weight,
            bias_ref=bias,
            act=act,
            agg=agg,
            rate=rate,
            threshold=threshold,
            kernel=kernel,
        )
        flops = flops_override if flops_override is not None else mlfn.node_flops(node, catalog)
        return replace(node, flops=flops)

    if kind == "matmul":
        w = catalog.param(weight)
        if w.ndim != 2 or in_shapes[0] != (w.shape[0],):
            raise ShapeMismatch(f"{nid}: matmul input {in_shapes[0]} vs weight {w.shape}")
        return mk((w.shape[1],))
    if kind == "matadd":
        if bias is not None:
            b = catalog.param(bias)
            if in_shapes[0] != (b.shape[0],):
                raise ShapeMismatch(f"{nid}: matadd input {in_shapes[0]} vs bias {b.shape}")
        elif len(in_shapes) != 2 or in_shapes[0] != in_shapes[1]:
            raise ShapeMismatch(f"{nid}: matadd inputs {in_shapes}")
        return mk(in_shapes[0])
    if kind in ("relu", "sigmoid", "tanh", "softmax", "binarize", "dropout"):
        return mk(in_shapes[0])
    if kind == "argmax":
        return mk((1,))
    if kind == "cos_sim":
        if len(in_shapes) != 2 or in_shapes[0] != in_shapes[1] or len(in_shapes[0]) != 1:
            raise ShapeMismatch(f"{nid}: cos_sim inputs {in_shapes}")
        return mk((1,))
    if kind == "concat":
        if any(len(s) != 1 for s in in_shapes):
            raise ShapeMismatch(f"{nid}: concat inputs {in_shapes}")
        return mk((sum(s[0] for s in in_shapes),))
    if kind == "embed":
        table = catalog.param(weight)
        if in_shapes[0] != (1,):
            raise ShapeMismatch(f"{nid}: embed id input must be (1,), got {in_shapes[0]}")
        return mk((table.shape[1],))
    if kind == "decision_forest":
        forest = catalog.forest(weight)
        if in_shapes[0][0] <= forest.max_feature():
            raise ShapeMismatch(f"{nid}: input dim {in_shapes[0]} too small for forest")
        if agg not in mlfn.FOREST_AGGS:
            raise CrossplanError(f"{nid}: forest agg must be one of {mlfn.FOREST_AGGS}")
        return mk((1,))
    if kind == "decision_tree":
        tree = catalog.forest(weight)
        if in_shapes[0][0] <= tree.max_feature():
            raise ShapeMismatch(f"{nid}: input dim {in_shapes[0]} too small for tree")
        return mk((1,))
    if kind in ("standard_scale", "minmax_scale"):
        a = catalog.param(weight)
        if in_shapes[0] != (a.shape[0],):
            raise ShapeMismatch(f"{nid}: scale input {in_shapes[0]} vs params {a.shape}")
        return mk(in_shapes[0])
    if kind == "dense_layer":
        w = catalog.param(weight)
        if w.ndim != 2 or in_shapes[0] != (w.shape[0],):
            raise ShapeMismatch(f"{nid}: dense input {in_shapes[0]} vs weight {w.shape}")
        return mk((w.shape[1],))
    if kind == "dist_centroids":
        c = catalog.param(weight)
        if in_shapes[0] != (c.shape[1],):
            raise ShapeMismatch(f"{nid}: input {in_shapes[0]} vs centroids {c.shape}")
        return mk((c.shape[0],))
    if kind == "conv":
        # declared but never executable; shape must be given explicitly
        return mk(tuple(spec.get("out_shape", in_shapes[0])), flops_override=0)
    raise CrossplanError(f"unknown ml function kind {kind!r}")


# ---------------------------------------------------------------------------
# fingerprints


def _h(*parts) -> bytes:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        if isinstance(p, bytes):
            h.update(p)
        else:
            h.update(str(p).encode())
        h.update(b"\x1f")
    return h.digest()


def _lit_token(v) -> str:
    if isinstance(v, bool):
        return f"b:{v}"
    if isinstance(v, int):
        return f"i:{v}"
    if isinstance(v, float):
        return f"f:{v!r}"
    if isinstance(v, str):
        return f"s:{v}"
    if isinstance(v, tuple):
        return "v:" + ",".join(repr(float(x)) for x in v)
    raise CrossplanError(f"bad literal {v!r}")


def graph_fingerprint(graph: mlfn.MLGraph) -> bytes:
    """Content hash of a graph, independent of node ids."""
    input_pos = {name: i for i, (name, _) in enumerate(graph.inputs)}
    memo: dict[str, bytes] = {}

    def fp(src: str) -> bytes:
        if src in input_pos:
            return _h("in", input_pos[src], graph.inputs[input_pos[src]][1])
        if src in memo:
            return memo[src]
        node = graph.nodes[src]
        arg_fps = [fp(s) for s in graph.node_inputs(src)]
        out = _h(
            node.kind, node.weight_ref, node.bias_ref, node.act, node.agg,
            node.kernel, node.threshold, node.output_shape, b"".join(arg_fps),
        )
        memo[src] = out
        return out

    return _h("graph", *[fp(o) for o, _ in graph.outputs])


_COMMUTATIVE_ARITH = ("add", "mul")
_FLIP_CMP = {"gt": "lt", "lt": "gt", "ge": "le", "le": "ge"}


def expr_fingerprint(expr: Expr, graphs: Mapping[str, mlfn.MLGraph]) -> bytes:
    if isinstance(expr, Col):
        return _h("col", expr.name)
    if isinstance(expr, Lit):
        return _h("lit", _lit_token(expr.value))
    if isinstance(expr, Arith):
        l = expr_fingerprint(expr.left, graphs)
        r = expr_fingerprint(expr.right, graphs)
        if expr.op in _COMMUTATIVE_ARITH and r < l:
            l, r = r, l
        return _h("arith", expr.op, l, r)
    if isinstance(expr, Cmp):
        l = expr_fingerprint(expr.left, graphs)
        r = expr_fingerprint(expr.right, graphs)
        op = expr.op
        if op in ("eq", "ne") and r < l:
            l, r = r, l
        elif op in _FLIP_CMP and r < l:
            l, r, op = r, l, _FLIP_CMP[op]
        return _h("cmp", op, l, r)
    if isinstance(expr, Logic):
        parts = [expr_fingerprint(a, graphs) for a in expr.args]
        if expr.op in ("and", "or"):
            parts.sort()
        return _h("logic", expr.op, *parts)
    if isinstance(expr, IfExpr):
        return _h(
            "if",
            expr_fingerprint(expr.cond, graphs),
            expr_fingerprint(expr.then, graphs),
            expr_fingerprint(expr.orelse, graphs),
        )
    if isinstance(expr, SwitchExpr):
        parts = [
            _h(expr_fingerprint(c, graphs), expr_fingerprint(v, graphs))
            for c, v in expr.cases
        ]
        return _h("switch", *parts, expr_fingerprint(expr.default, graphs))
    if isinstance(expr, Call):
        return _h("call", expr.fn, *[expr_fingerprint(a, graphs) for a in expr.args])
    if isinstance(expr, MLExpr):
        g = graphs.get(expr.graph_id)
        gfp = graph_fingerprint(g) if g is not None else _h("missing", expr.graph_id)
        return _h("ml", gfp, *[expr_fingerprint(a, graphs) for a in expr.args])
    raise CrossplanError(f"unknown expression {expr!r}")


def plan_fingerprint(plan: Plan) -> int:
    """64-bit structural digest; stable across runs and node-id assignment.

    Commutative expression operators and CrossJoin/Union children are
    canonicalized so that reorderings that cannot change results collide.
    """
    cached = plan.__dict__.get("_fp_cache")
    if cached is not None:
        return cached
    memo: dict[int, bytes] = {}

    def fp(nid: int) -> bytes:
        if nid in memo:
            return memo[nid]
        node = plan.rels[nid]
        kids = [fp(c) for c in node.inputs]
        op = node.op
        if isinstance(op, TableScan):
            out = _h("scan", op.table)
        elif isinstance(op, Filter):
            out = _h("filter", expr_fingerprint(op.pred, plan.graphs), *kids)
        elif isinstance(op, Project):
            parts = [
                _h(name, expr_fingerprint(e, plan.graphs)) for name, e in op.outputs
            ]
            out = _h("project", *parts, *kids)
        elif isinstance(op, HashJoin):
            out = _h("hash_join", op.left_keys, op.right_keys, *kids)
        elif isinstance(op, CrossJoin):
            out = _h("cross_join", *sorted(kids))
        elif isinstance(op, Aggregate):
            parts = [
                _h(s.name, s.fn, s.order_by, s.out_dim,
                   expr_fingerprint(s.arg, plan.graphs) if s.arg is not None else b"")
                for s in op.aggs
            ]
            out = _h("aggregate", op.group_keys, *parts, *kids)
        elif isinstance(op, Union):
            out = _h("union", *sorted(kids))
        elif isinstance(op, Expand):
            out = _h("expand", op.name, expr_fingerprint(op.expr, plan.graphs), *kids)
        else:
            raise CrossplanError(f"unknown operator {op!r}")
        memo[nid] = out
        return out

    result = int.from_bytes(fp(plan.root), "big")
    plan.__dict__["_fp_cache"] = result
    return result


# ---------------------------------------------------------------------------
# validation


def validate(plan: Plan, catalog) -> list[str]:
    """Full structural and type validation; returns all violations."""
    errors: list[str] = []
    if plan.root not in plan.rels:
        return [f"root {plan.root} is not a plan node"]
    try:
        order = topo_order(plan)
    except CyclicGraph as e:
        return [f"AcyclicityViolation: {e}"]
    except CrossplanError as e:
        return [str(e)]
    reachable = set(order)
    for nid in plan.rels:
        if nid not in reachable:
            errors.append(f"node {nid} unreachable from root")
    # arity
    for nid in order:
        node = plan.rels[nid]
        if len(node.inputs) != node.op.arity:
            errors.append(
                f"node {nid} ({node.op.kind}) has {len(node.inputs)} inputs, wants {node.op.arity}"
            )
    if errors:
        return errors
    # graph table hygiene
    used: set[str] = set()
    for nid in order:
        used |= rel_graph_ids(plan.rels[nid])
    for gid in used:
        if gid not in plan.graphs:
            errors.append(f"ml graph {gid!r} referenced but not bound")
    for gid in plan.graphs:
        if gid not in used:
            errors.append(f"ml graph {gid!r} bound but never referenced")
    for gid, g in plan.graphs.items():
        errors.extend(f"graph {gid!r}: {msg}" for msg in _validate_graph(g, catalog))
    # schemas and expression types
    schemas: dict[int, Schema] = {}
    for nid in order:
        node = plan.rels[nid]
        try:
            schemas[nid] = derive_schema(
                node.op, [schemas[c] for c in node.inputs], plan.graphs, catalog
            )
        except KeyError:
            errors.append(f"node {nid}: child schema unavailable")
            break
        except CrossplanError as e:
            errors.append(f"node {nid} ({node.op.kind}): {type(e).__name__}: {e}")
            break
    return errors


def _validate_graph(g: mlfn.MLGraph, catalog) -> list[str]:
    errors: list[str] = []
    try:
        g.topo_order()
    except CyclicGraph as e:
        return [f"AcyclicityViolation: {e}"]
    for nid, node in g.nodes.items():
        if node.kind == "conv":
            errors.append(f"UnsupportedFn: node {nid!r} is conv")
            continue
        for ref in node.param_refs():
            if not catalog.has_param(ref):
                errors.append(f"node {nid!r}: parameter {ref!r} not in catalog")
    if errors:
        return errors
    # recompute shape propagation and flop contract
    try:
        rebuilt = build_graph(
            g.inputs,
            {
                nid: {
                    "kind": n.kind, "weight": n.weight_ref, "bias": n.bias_ref,
                    "act": n.act, "agg": n.agg, "kernel": n.kernel,
                    "threshold": n.threshold, "rate": n.rate,
                }
                for nid, n in g.nodes.items()
            },
            g.edges,
            [o for o, _ in g.outputs],
            catalog,
        )
    except CrossplanError as e:
        return [f"{type(e).__name__}: {e}"]
    for nid, node in g.nodes.items():
        ref = rebuilt.nodes[nid]
        if node.output_shape != ref.output_shape or node.input_shapes != ref.input_shapes:
            errors.append(f"node {nid!r}: declared shapes disagree with wiring")
        if node.flops != ref.flops:
            errors.append(
                f"node {nid!r}: declared flops {node.flops} != contract {ref.flops}"
            )
    for (o, shape) in g.outputs:
        if o not in g.nodes:
            errors.append(f"output {o!r} is not a node")
    return errors


def prune(plan: Plan) -> Plan:
    """Drop unreachable operators and unreferenced graphs."""
    order = topo_order(plan)
    keep = set(order)
    rels = {nid: plan.rels[nid] for nid in order}
    used: set[str] = set()
    for nid in keep:
        used |= rel_graph_ids(plan.rels[nid])
    graphs = {gid: g for gid, g in plan.graphs.items() if gid in used}
    return Plan(rels, plan.root, graphs)
