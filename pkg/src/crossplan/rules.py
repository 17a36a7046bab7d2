"""Co-optimization rule catalog.

Each rule enumerates applicable bindings on a plan and applies one to
produce a result-equivalent plan. Rules are pure plan-to-plan functions;
the only catalog interaction is idempotent registration of derived
artifacts (weight slices, tile/tree/centroid relations).

Rule families:

* R1_*  relational rewrites around opaque ML expressions
* R2_1  factorization of a linear stage across a join
* R3_*  tensor-relational transformations (ML -> join/project/aggregate
        over parameter relations)
* R4_*  computation-graph rewrites (fusion/split, kernel choice,
        constant folding)

Set ``CROSSPLAN_CHECK_REWRITES=1`` to re-execute every rewritten plan on
row-truncated data and assert result equivalence after each application.
"""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass, replace

import numpy as np

from . import ir, mlfn
from .catalog import Catalog
from .errors import CrossplanError, EquivalenceViolation, InvalidBinding
from .ir import (
    AggSpec,
    Aggregate,
    Arith,
    Call,
    Cmp,
    Col,
    CrossJoin,
    Expand,
    Expr,
    Filter,
    HashJoin,
    IfExpr,
    Lit,
    Logic,
    MLExpr,
    Plan,
    Project,
    RelNode,
    SwitchExpr,
    TableScan,
    Union,
)


class RuleId(enum.Enum):
    """Universal action space for the optimizer, fixed across queries."""

    R1_1 = 0  # reorder adjacent filters
    R1_2 = 1  # filter pushdown/pullup through a join
    R1_3 = 2  # project pushdown/pullup through a join
    R1_4 = 3  # merge/split filters and projects
    R2_1 = 4  # factorize a linear stage across a join
    R3_1 = 5  # matmul -> relational over a tile relation
    R3_2 = 6  # decision forest -> relational over a tree relation
    R3_3 = 7  # centroid distances -> relational over a centroid relation
    R4_1 = 8  # fuse/split computation-graph stages
    R4_2 = 9  # kernel replacement
    R4_4 = 10  # constant folding


@dataclass(frozen=True)
class Binding:
    rule: RuleId
    site: tuple

    def describe(self) -> str:
        return f"{self.rule.name}{self.site!r}"


# ---------------------------------------------------------------------------
# generic plan surgery helpers


def _parents(plan: Plan) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {nid: [] for nid in plan.rels}
    for nid, node in plan.rels.items():
        for c in node.inputs:
            out[c].append(nid)
    return out


def _redirect(rels: dict[int, RelNode], old: int, new: int, root: int) -> int:
    """Point every edge into ``old`` at ``new``; returns the new root id."""
    for nid, node in list(rels.items()):
        if old in node.inputs:
            rels[nid] = RelNode(
                node.op, tuple(new if c == old else c for c in node.inputs)
            )
    return new if root == old else root


def _finish(plan: Plan, rels: dict[int, RelNode], root: int, graphs=None) -> Plan:
    out = Plan(rels, root, dict(graphs if graphs is not None else plan.graphs))
    return ir.prune(out)


def _uniq_col(taken: set[str], base: str) -> str:
    if base not in taken:
        return base
    i = 1
    while f"{base}{i}" in taken:
        i += 1
    return f"{base}{i}"


def _uniq_graph(plan: Plan, base: str) -> str:
    if base not in plan.graphs:
        return base
    i = 1
    while f"{base}_{i}" in plan.graphs:
        i += 1
    return f"{base}_{i}"


def _rename_cols(e: Expr, mapping: dict[str, str]) -> Expr:
    def fn(x: Expr) -> Expr:
        if isinstance(x, Col) and x.name in mapping:
            return Col(mapping[x.name])
        return x

    return _map_expr(e, fn)


def _map_expr(e: Expr, fn) -> Expr:
    """Bottom-up structural map over an expression tree."""
    if isinstance(e, (Col, Lit)):
        return fn(e)
    if isinstance(e, Arith):
        return fn(Arith(e.op, _map_expr(e.left, fn), _map_expr(e.right, fn)))
    if isinstance(e, Cmp):
        return fn(Cmp(e.op, _map_expr(e.left, fn), _map_expr(e.right, fn)))
    if isinstance(e, Logic):
        return fn(Logic(e.op, tuple(_map_expr(a, fn) for a in e.args)))
    if isinstance(e, IfExpr):
        return fn(
            IfExpr(_map_expr(e.cond, fn), _map_expr(e.then, fn), _map_expr(e.orelse, fn))
        )
    if isinstance(e, SwitchExpr):
        return fn(
            SwitchExpr(
                tuple((_map_expr(c, fn), _map_expr(v, fn)) for c, v in e.cases),
                _map_expr(e.default, fn),
            )
        )
    if isinstance(e, Call):
        return fn(Call(e.fn, tuple(_map_expr(a, fn) for a in e.args)))
    if isinstance(e, MLExpr):
        return fn(MLExpr(e.graph_id, tuple(_map_expr(a, fn) for a in e.args)))
    raise CrossplanError(f"unknown expression {e!r}")


def _expr_children(e: Expr) -> tuple[Expr, ...]:
    if isinstance(e, (Col, Lit)):
        return ()
    if isinstance(e, (Arith, Cmp)):
        return (e.left, e.right)
    if isinstance(e, Logic):
        return e.args
    if isinstance(e, IfExpr):
        return (e.cond, e.then, e.orelse)
    if isinstance(e, SwitchExpr):
        out = []
        for c, v in e.cases:
            out.extend((c, v))
        out.append(e.default)
        return tuple(out)
    if isinstance(e, (Call, MLExpr)):
        return e.args
    raise CrossplanError(f"unknown expression {e!r}")


def _expr_with_children(e: Expr, kids: tuple[Expr, ...]) -> Expr:
    if isinstance(e, (Col, Lit)):
        return e
    if isinstance(e, Arith):
        return Arith(e.op, kids[0], kids[1])
    if isinstance(e, Cmp):
        return Cmp(e.op, kids[0], kids[1])
    if isinstance(e, Logic):
        return Logic(e.op, kids)
    if isinstance(e, IfExpr):
        return IfExpr(kids[0], kids[1], kids[2])
    if isinstance(e, SwitchExpr):
        n = len(e.cases)
        cases = tuple((kids[2 * i], kids[2 * i + 1]) for i in range(n))
        return SwitchExpr(cases, kids[2 * n])
    if isinstance(e, Call):
        return Call(e.fn, kids)
    if isinstance(e, MLExpr):
        return MLExpr(e.graph_id, kids)
    raise CrossplanError(f"unknown expression {e!r}")


def _expr_get(e: Expr, path: tuple[int, ...]) -> Expr:
    for i in path:
        e = _expr_children(e)[i]
    return e


def _expr_set(e: Expr, path: tuple[int, ...], new: Expr) -> Expr:
    if not path:
        return new
    kids = list(_expr_children(e))
    kids[path[0]] = _expr_set(kids[path[0]], path[1:], new)
    return _expr_with_children(e, tuple(kids))


def _subexprs(e: Expr, path=()):  # preorder
    yield path, e
    for i, c in enumerate(_expr_children(e)):
        yield from _subexprs(c, path + (i,))


def _op_exprs(op) -> list[tuple[tuple, Expr]]:
    """Addressable expressions of an operator as (slot, expr) pairs."""
    if isinstance(op, Filter):
        return [(("pred",), op.pred)]
    if isinstance(op, Project):
        return [(("out", i), e) for i, (_, e) in enumerate(op.outputs)]
    if isinstance(op, Expand):
        return [(("expr",), op.expr)]
    if isinstance(op, Aggregate):
        return [
            (("agg", i), s.arg) for i, s in enumerate(op.aggs) if s.arg is not None
        ]
    return []


def _op_with_expr(op, slot: tuple, new: Expr):
    if slot[0] == "pred":
        return replace(op, pred=new)
    if slot[0] == "out":
        outs = list(op.outputs)
        name, _ = outs[slot[1]]
        outs[slot[1]] = (name, new)
        return replace(op, outputs=tuple(outs))
    if slot[0] == "expr":
        return replace(op, expr=new)
    if slot[0] == "agg":
        aggs = list(op.aggs)
        aggs[slot[1]] = replace(aggs[slot[1]], arg=new)
        return replace(op, aggs=tuple(aggs))
    raise CrossplanError(f"bad expression slot {slot!r}")


def _schemas_ok(plan: Plan, catalog: Catalog) -> bool:
    try:
        ir.plan_schemas(plan, catalog)
        return True
    except CrossplanError:
        return False


def _join_side_info(plan: Plan, catalog: Catalog, join_id: int):
    """Output-name partition of a join's schema: (left names, right-out ->
    right-in rename map)."""
    node = plan.rels[join_id]
    schemas = ir.plan_schemas(plan, catalog)
    left_names = list(schemas[node.inputs[0]].names)
    right_in = list(schemas[node.inputs[1]].names)
    out_names = list(schemas[join_id].names)
    right_out = out_names[len(left_names):]
    return set(left_names), dict(zip(right_out, right_in))


# ---------------------------------------------------------------------------
# R1_1 filter reorder


def _enum_r1_1(plan: Plan, catalog: Catalog) -> list[tuple]:
    out = []
    for nid in sorted(plan.rels):
        node = plan.rels[nid]
        if isinstance(node.op, Filter):
            child = node.inputs[0]
            if isinstance(plan.rels[child].op, Filter):
                out.append((nid, child))
    return out


def _apply_r1_1(plan: Plan, site: tuple, catalog: Catalog) -> Plan:
    upper_id, lower_id = site
    upper = plan.rels[upper_id]
    lower = plan.rels[lower_id]
    rels = dict(plan.rels)
    base = plan.next_id()
    new_lower = base
    new_upper = base + 1
    rels[new_lower] = RelNode(upper.op, lower.inputs)
    rels[new_upper] = RelNode(lower.op, (new_lower,))
    root = _redirect(rels, upper_id, new_upper, plan.root)
    return _finish(plan, rels, root)


# ---------------------------------------------------------------------------
# R1_2 filter pushdown / pullup


def _enum_r1_2(plan: Plan, catalog: Catalog) -> list[tuple]:
    out = []
    for nid in sorted(plan.rels):
        node = plan.rels[nid]
        if isinstance(node.op, Filter):
            child = node.inputs[0]
            cop = plan.rels[child].op
            if isinstance(cop, (HashJoin, CrossJoin)):
                cols = ir.expr_columns(node.op.pred)
                if not cols:
                    continue
                left_names, right_map = _join_side_info(plan, catalog, child)
                if cols <= left_names:
                    out.append(("down", nid, 0))
                elif cols <= set(right_map):
                    out.append(("down", nid, 1))
        if isinstance(node.op, (HashJoin, CrossJoin)):
            for side in (0, 1):
                if isinstance(plan.rels[node.inputs[side]].op, Filter):
                    out.append(("up", nid, side))
    return out


def _apply_r1_2(plan: Plan, site: tuple, catalog: Catalog) -> Plan:
    kind, nid, side = site
    rels = dict(plan.rels)
    if kind == "down":
        fnode = plan.rels[nid]
        join_id = fnode.inputs[0]
        join = plan.rels[join_id]
        left_names, right_map = _join_side_info(plan, catalog, join_id)
        pred = fnode.op.pred
        if side == 1:
            pred = _rename_cols(pred, right_map)
        base = plan.next_id()
        new_filter = base
        new_join = base + 1
        rels[new_filter] = RelNode(
            replace(fnode.op, pred=pred), (join.inputs[side],)
        )
        join_inputs = list(join.inputs)
        join_inputs[side] = new_filter
        rels[new_join] = RelNode(join.op, tuple(join_inputs))
        root = _redirect(rels, nid, new_join, plan.root)
        return _finish(plan, rels, root)
    # pull a side filter above the join
    join = plan.rels[nid]
    f_id = join.inputs[side]
    fnode = plan.rels[f_id]
    base = plan.next_id()
    new_join = base
    new_filter = base + 1
    join_inputs = list(join.inputs)
    join_inputs[side] = fnode.inputs[0]
    rels[new_join] = RelNode(join.op, tuple(join_inputs))
    pred = fnode.op.pred
    if side == 1:
        # column names may be renamed in the join output; map them forward
        tmp = Plan(dict(rels), new_join, dict(plan.graphs))
        left_names, right_map = _join_side_info(tmp, catalog, new_join)
        fwd = {v: k for k, v in right_map.items()}
        pred = _rename_cols(pred, fwd)
    rels[new_filter] = RelNode(replace(fnode.op, pred=pred), (new_join,))
    root = _redirect(rels, nid, new_filter, plan.root)
    return _finish(plan, rels, root)


# ---------------------------------------------------------------------------
# R1_3 project pushdown / pullup


def _computed(op: Project) -> list[tuple[str, Expr]]:
    return [(n, e) for n, e in op.outputs if not isinstance(e, Col)]


def _enum_r1_3(plan: Plan, catalog: Catalog) -> list[tuple]:
    out = []
    for nid in sorted(plan.rels):
        node = plan.rels[nid]
        if isinstance(node.op, Project):
            child = node.inputs[0]
            cop = plan.rels[child].op
            if isinstance(cop, (HashJoin, CrossJoin)):
                comp = _computed(node.op)
                if not comp:
                    continue
                left_names, right_map = _join_side_info(plan, catalog, child)
                cols = set()
                for _, e in comp:
                    cols |= ir.expr_columns(e)
                if cols and cols <= left_names:
                    out.append(("down", nid, 0))
                elif cols and cols <= set(right_map):
                    out.append(("down", nid, 1))
        if isinstance(node.op, (HashJoin, CrossJoin)):
            for side in (0, 1):
                if isinstance(plan.rels[node.inputs[side]].op, Project):
                    out.append(("up", nid, side))
    return out


def _apply_r1_3_down(plan: Plan, nid: int, side: int, catalog: Catalog) -> Plan:
    pnode = plan.rels[nid]
    join_id = pnode.inputs[0]
    join = plan.rels[join_id]
    schemas = ir.plan_schemas(plan, catalog)
    left_names, right_map = _join_side_info(plan, catalog, join_id)
    side_child = join.inputs[side]
    side_schema = schemas[side_child]
    out_names = set(schemas[join_id].names)
    comp = _computed(pnode.op)
    rename = right_map if side == 1 else {}
    taken = out_names | set(side_schema.names)
    # keep only side columns still read above: bare passthrough outputs of
    # the project plus this side's join keys
    keep = set()
    for n, e in pnode.op.outputs:
        if isinstance(e, Col):
            src = rename.get(e.name, e.name) if side == 1 else e.name
            keep.add(src)
    if isinstance(join.op, HashJoin):
        keep |= set(join.op.left_keys if side == 0 else join.op.right_keys)
    fresh: dict[str, str] = {}
    pushed_outputs = [(n, Col(n)) for n in side_schema.names if n in keep]
    for name, e in comp:
        # the pushed column must be nameable without clashing anywhere
        new_name = _uniq_col(taken, name)
        taken.add(new_name)
        fresh[name] = new_name
        pushed_outputs.append((new_name, _rename_cols(e, rename)))
    rels = dict(plan.rels)
    base = plan.next_id()
    pushed_id, new_join, new_top = base, base + 1, base + 2
    rels[pushed_id] = RelNode(Project(tuple(pushed_outputs)), (side_child,))
    join_inputs = list(join.inputs)
    join_inputs[side] = pushed_id
    rels[new_join] = RelNode(join.op, tuple(join_inputs))
    top_outputs = tuple(
        (n, Col(fresh[n]) if (n, e) in comp else e) for n, e in pnode.op.outputs
    )
    # the residual top project is elided when it is a pure same-name column
    # selection of the whole join output, so chained pushdowns stay visible;
    # kept at the root or under a union, where column order is part of the
    # contract
    tmp = Plan(dict(rels), new_join, dict(plan.graphs))
    join_names = set(ir.plan_schemas(tmp, catalog)[new_join].names)
    redundant = (
        all(isinstance(e, Col) and e.name == n for n, e in top_outputs)
        and {n for n, _ in top_outputs} == join_names
        and nid != plan.root
        and not any(
            isinstance(plan.rels[p].op, Union) for p in _parents(plan)[nid]
        )
    )
    if redundant:
        root = _redirect(rels, nid, new_join, plan.root)
    else:
        rels[new_top] = RelNode(Project(top_outputs), (new_join,))
        root = _redirect(rels, nid, new_top, plan.root)
    return _finish(plan, rels, root)


def _apply_r1_3_up(plan: Plan, nid: int, side: int, catalog: Catalog) -> Plan:
    join = plan.rels[nid]
    p_id = join.inputs[side]
    pnode = plan.rels[p_id]
    if isinstance(join.op, HashJoin):
        keys = join.op.left_keys if side == 0 else join.op.right_keys
        bare = {
            n for n, e in pnode.op.outputs if isinstance(e, Col) and e.name == n
        }
        if not set(keys) <= bare:
            raise InvalidBinding("join keys are not passed through unchanged")
    rels = dict(plan.rels)
    base = plan.next_id()
    new_join, new_top = base, base + 1
    join_inputs = list(join.inputs)
    join_inputs[side] = pnode.inputs[0]
    rels[new_join] = RelNode(join.op, tuple(join_inputs))
    tmp = Plan(dict(rels), new_join, dict(plan.graphs))
    schemas = ir.plan_schemas(tmp, catalog)
    other_schema = schemas[join_inputs[1 - side]]
    left_names, right_map = _join_side_info(tmp, catalog, new_join)
    if side == 0:
        other_out = [n for n in schemas[new_join].names if n not in left_names]
        top = list(pnode.op.outputs) + [(n, Col(n)) for n in other_out]
    else:
        fwd = {v: k for k, v in right_map.items()}
        top = [(n, Col(n)) for n in other_schema.names]
        for n, e in pnode.op.outputs:
            top.append((n, _rename_cols(e, fwd)))
    rels[new_top] = RelNode(Project(tuple(top)), (new_join,))
    root = _redirect(rels, nid, new_top, plan.root)
    return _finish(plan, rels, root)


def _apply_r1_3(plan: Plan, site: tuple, catalog: Catalog) -> Plan:
    kind, nid, side = site
    if kind == "down":
        return _apply_r1_3_down(plan, nid, side, catalog)
    return _apply_r1_3_up(plan, nid, side, catalog)


# ---------------------------------------------------------------------------
# R1_4 merge / split


def _enum_r1_4(plan: Plan, catalog: Catalog) -> list[tuple]:
    out = []
    for nid in sorted(plan.rels):
        node = plan.rels[nid]
        op = node.op
        if isinstance(op, Filter):
            child = node.inputs[0]
            if isinstance(plan.rels[child].op, Filter):
                out.append(("merge_filters", nid))
            if isinstance(op.pred, Logic) and op.pred.op == "and" and len(op.pred.args) >= 2:
                out.append(("split_filter", nid))
            if ir.expr_graph_ids(op.pred) and not isinstance(op.pred, Col):
                out.append(("split_filter_ml", nid))
        if isinstance(op, Project):
            child = node.inputs[0]
            if isinstance(plan.rels[child].op, Project):
                out.append(("merge_projects", nid))
            for i, (_, e) in enumerate(op.outputs):
                for path, sub in _subexprs(e):
                    if path and isinstance(sub, MLExpr):
                        out.append(("extract", nid, i, path))
    return out


def _apply_r1_4(plan: Plan, site: tuple, catalog: Catalog) -> Plan:
    kind = site[0]
    rels = dict(plan.rels)
    if kind == "merge_filters":
        nid = site[1]
        upper = plan.rels[nid]
        lower = plan.rels[upper.inputs[0]]
        merged = Logic("and", (upper.op.pred, lower.op.pred))
        new_id = plan.next_id()
        rels[new_id] = RelNode(Filter(merged), lower.inputs)
        root = _redirect(rels, nid, new_id, plan.root)
        return _finish(plan, rels, root)
    if kind == "split_filter":
        nid = site[1]
        node = plan.rels[nid]
        args = node.op.pred.args
        rest = args[1] if len(args) == 2 else Logic("and", args[1:])
        base = plan.next_id()
        lower, upper = base, base + 1
        rels[lower] = RelNode(Filter(rest), node.inputs)
        rels[upper] = RelNode(Filter(args[0]), (lower,))
        root = _redirect(rels, nid, upper, plan.root)
        return _finish(plan, rels, root)
    if kind == "split_filter_ml":
        # materialize the predicate as a column, filter on it, drop it
        nid = site[1]
        node = plan.rels[nid]
        schemas = ir.plan_schemas(plan, catalog)
        child_schema = schemas[node.inputs[0]]
        pname = _uniq_col(set(child_schema.names), "_pred")
        base = plan.next_id()
        proj, filt, drop = base, base + 1, base + 2
        outs = [(n, Col(n)) for n in child_schema.names] + [(pname, node.op.pred)]
        rels[proj] = RelNode(Project(tuple(outs)), node.inputs)
        rels[filt] = RelNode(Filter(Col(pname), node.op.selectivity), (proj,))
        rels[drop] = RelNode(
            Project(tuple((n, Col(n)) for n in child_schema.names)), (filt,)
        )
        root = _redirect(rels, nid, drop, plan.root)
        return _finish(plan, rels, root)
    if kind == "merge_projects":
        nid = site[1]
        upper = plan.rels[nid]
        lower = plan.rels[upper.inputs[0]]
        defs = dict(lower.op.outputs)

        def inline(x: Expr) -> Expr:
            if isinstance(x, Col) and x.name in defs:
                return defs[x.name]
            return x

        merged = tuple((n, _map_expr(e, inline)) for n, e in upper.op.outputs)
        new_id = plan.next_id()
        rels[new_id] = RelNode(Project(merged), lower.inputs)
        root = _redirect(rels, nid, new_id, plan.root)
        return _finish(plan, rels, root)
    if kind == "extract":
        nid, out_idx, path = site[1], site[2], site[3]
        node = plan.rels[nid]
        name, e = node.op.outputs[out_idx]
        sub = _expr_get(e, path)
        if not isinstance(sub, MLExpr):
            raise InvalidBinding("extraction site is not an ml expression")
        schemas = ir.plan_schemas(plan, catalog)
        child_schema = schemas[node.inputs[0]]
        cname = _uniq_col(set(child_schema.names), "_e")
        base = plan.next_id()
        lower, upper = base, base + 1
        new_outputs = list(node.op.outputs)
        new_outputs[out_idx] = (name, _expr_set(e, path, Col(cname)))
        # only pass through what the rewritten parent still reads
        needed = set()
        for _, oe in new_outputs:
            needed |= ir.expr_columns(oe)
        lower_outs = [
            (n, Col(n)) for n in child_schema.names if n in needed
        ] + [(cname, sub)]
        rels[lower] = RelNode(Project(tuple(lower_outs)), node.inputs)
        rels[upper] = RelNode(Project(tuple(new_outputs)), (lower,))
        root = _redirect(rels, nid, upper, plan.root)
        return _finish(plan, rels, root)
    raise InvalidBinding(f"unknown r1_4 site {site!r}")


# ---------------------------------------------------------------------------
# R2_1 linear-stage factorization across a join


def _concat_matmul_prefix(g: mlfn.MLGraph):
    """Match graphs of the form concat(inputs...) -> matmul -> rest; returns
    (concat id, matmul id) or None."""
    concat_id = None
    for nid, n in g.nodes.items():
        if n.kind == "concat":
            srcs = g.node_inputs(nid)
            if srcs == [name for name, _ in g.inputs]:
                concat_id = nid
                break
    if concat_id is None:
        return None
    input_names = {name for name, _ in g.inputs}
    for src, dst, _ in g.edges:
        if src in input_names and dst != concat_id:
            return None  # an input bypasses the concat
    consumers = [d for s, d, _ in g.edges if s == concat_id]
    if len(consumers) != 1:
        return None
    mm = consumers[0]
    if g.nodes[mm].kind != "matmul":
        return None
    return concat_id, mm


def _descendants(g: mlfn.MLGraph, start: str) -> set[str]:
    out = set()
    frontier = [start]
    while frontier:
        cur = frontier.pop()
        for s, d, _ in g.edges:
            if s == cur and d not in out:
                out.add(d)
                frontier.append(d)
    return out


def _enum_r2_1(plan: Plan, catalog: Catalog) -> list[tuple]:
    out = []
    schemas = None
    for nid in sorted(plan.rels):
        node = plan.rels[nid]
        if not isinstance(node.op, Project):
            continue
        child = node.inputs[0]
        if not isinstance(plan.rels[child].op, (HashJoin, CrossJoin)):
            continue
        if schemas is None:
            schemas = ir.plan_schemas(plan, catalog)
        left_names, right_map = _join_side_info(plan, catalog, child)
        for i, (name, e) in enumerate(node.op.outputs):
            if not isinstance(e, MLExpr):
                continue
            g = plan.graphs[e.graph_id]
            if _concat_matmul_prefix(g) is None:
                continue
            sides = []
            ok = True
            for a in e.args:
                cols = ir.expr_columns(a)
                if cols and cols <= left_names:
                    sides.append(0)
                elif cols and cols <= set(right_map):
                    sides.append(1)
                else:
                    ok = False
                    break
            if ok and 0 in sides and 1 in sides:
                out.append((nid, i))
    return out


def _partial_graph(
    g: mlfn.MLGraph,
    arg_idx: list[int],
    weight_ranges: list[tuple[int, int]],
    weight_ref: str,
    kernel: str,
    catalog: Catalog,
):
    """Build sum_i x_i . W[range_i] as a small graph over the given inputs."""
    inputs = [(f"x{j}", g.inputs[i][1]) for j, i in enumerate(arg_idx)]
    specs: dict[str, dict] = {}
    edges = []
    adds: list[str] = []
    for j, (i, (a, b)) in enumerate(zip(arg_idx, weight_ranges)):
        ref = catalog.derive_row_slice(weight_ref, a, b)
        specs[f"mm{j}"] = {"kind": "matmul", "weight": ref, "kernel": kernel}
        edges.append((f"x{j}", f"mm{j}", 0))
        adds.append(f"mm{j}")
    prev = adds[0]
    for j in range(1, len(adds)):
        specs[f"add{j}"] = {"kind": "matadd"}
        edges.append((prev, f"add{j}", 0))
        edges.append((adds[j], f"add{j}", 1))
        prev = f"add{j}"
    return ir.build_graph(inputs, specs, edges, [prev], catalog)


def _rest_graph(g: mlfn.MLGraph, mm_id: str, catalog: Catalog):
    """Subgraph strictly after the matmul, taking the matmul output as its
    input; None when the matmul is the graph output."""
    rest_nodes = _descendants(g, mm_id)
    if not rest_nodes:
        return None
    m = g.nodes[mm_id].output_shape
    inputs = [("y", m)]
    specs = {}
    edges = []
    for nid in rest_nodes:
        n = g.nodes[nid]
        specs[nid] = {
            "kind": n.kind, "weight": n.weight_ref, "bias": n.bias_ref,
            "act": n.act, "agg": n.agg, "kernel": n.kernel,
            "threshold": n.threshold, "rate": n.rate,
        }
    for s, d, p in g.edges:
        if d in rest_nodes:
            edges.append(("y" if s == mm_id else s, d, p))
    out = g.outputs[0][0]
    return ir.build_graph(inputs, specs, edges, [out], catalog)


def _apply_r2_1(plan: Plan, site: tuple, catalog: Catalog) -> Plan:
    nid, out_idx = site
    node = plan.rels[nid]
    name, e = node.op.outputs[out_idx]
    g = plan.graphs[e.graph_id]
    match = _concat_matmul_prefix(g)
    if match is None:
        raise InvalidBinding("graph is not concat -> matmul -> rest")
    concat_id, mm_id = match
    left_names, right_map = _join_side_info(plan, catalog, node.inputs[0])
    sides = []
    for a in e.args:
        cols = ir.expr_columns(a)
        sides.append(0 if cols <= left_names else 1)
    # weight row ranges follow the concatenation layout
    ranges = []
    off = 0
    for iname, shape in g.inputs:
        ranges.append((off, off + shape[0]))
        off += shape[0]
    mm = g.nodes[mm_id]
    schemas = ir.plan_schemas(plan, catalog)
    join_schema = schemas[node.inputs[0]]
    taken = set(join_schema.names)
    graphs = dict(plan.graphs)
    partial_cols: dict[int, str] = {}
    rels = dict(plan.rels)
    cur_src = node.inputs[0]
    base = plan.next_id()
    for side in (0, 1):
        idx = [i for i, s in enumerate(sides) if s == side]
        gid = _uniq_graph(Plan(rels, plan.root, graphs), f"{e.graph_id}_part{side}")
        graphs[gid] = _partial_graph(
            g, idx, [ranges[i] for i in idx], mm.weight_ref, mm.kernel, catalog
        )
        cname = _uniq_col(taken, f"_part{side}")
        taken.add(cname)
        outs = [(n2, Col(n2)) for n2 in join_schema.names]
        if side == 1:  # carry the first partial column through
            outs.append((partial_cols[0], Col(partial_cols[0])))
        partial_cols[side] = cname
        outs.append((cname, MLExpr(gid, tuple(e.args[i] for i in idx))))
        rels[base] = RelNode(Project(tuple(outs)), (cur_src,))
        cur_src = base
        base += 1
    m = mm.output_shape[0]
    if m == 1:
        combined: Expr = Arith("add", Col(partial_cols[0]), Col(partial_cols[1]))
    else:
        combined = Call("vec_add", (Col(partial_cols[0]), Col(partial_cols[1])))
    rest = _rest_graph(g, mm_id, catalog)
    if rest is not None:
        rest_gid = _uniq_graph(Plan(rels, plan.root, graphs), f"{e.graph_id}_rest")
        graphs[rest_gid] = rest
        combined = MLExpr(rest_gid, (combined,))
    new_outputs = list(node.op.outputs)
    new_outputs[out_idx] = (name, combined)
    rels[base] = RelNode(Project(tuple(new_outputs)), (cur_src,))
    root = _redirect(rels, nid, base, plan.root)
    return _finish(plan, rels, root, graphs)


# ---------------------------------------------------------------------------
# R3_* tensor-relational transformations


def _single_node_graph(g: mlfn.MLGraph, kind: str) -> mlfn.MLNode | None:
    if len(g.nodes) != 1:
        return None
    node = next(iter(g.nodes.values()))
    return node if node.kind == kind else None


def _enum_single_node_sites(plan: Plan, kind: str) -> list[tuple]:
    out = []
    for nid in sorted(plan.rels):
        node = plan.rels[nid]
        if not isinstance(node.op, Project):
            continue
        for i, (_, e) in enumerate(node.op.outputs):
            if isinstance(e, MLExpr) and len(e.args) == 1 and isinstance(e.args[0], Col):
                g = plan.graphs[e.graph_id]
                if _single_node_graph(g, kind) is not None:
                    out.append((nid, i))
    return out


def _relationalize(
    plan: Plan,
    site: tuple,
    catalog: Catalog,
    param_table: str,
    param_cols: tuple[str, str],
    block_expr_fn,
    agg_fn,
    final_fn,
) -> Plan:
    """Shared skeleton for tensor-relational rewrites: tag rows, cross join
    with the parameter relation, compute per-pair blocks, aggregate per row
    tag, join the assembled value back, and restore the original outputs."""
    nid, out_idx = site
    node = plan.rels[nid]
    name, e = node.op.outputs[out_idx]
    x_col = e.args[0].name
    schemas = ir.plan_schemas(plan, catalog)
    in_schema = schemas[node.inputs[0]]
    taken = set(in_schema.names) | set(param_cols)
    rid = _uniq_col(taken, "_rid")
    taken.add(rid)
    blk = _uniq_col(taken, "_blk")
    taken.add(blk)
    val = _uniq_col(taken, "_val")
    rels = dict(plan.rels)
    base = plan.next_id()
    tag, cj, pr, ag, jn, fin = base, base + 1, base + 2, base + 3, base + 4, base + 5
    scan = base + 6
    rels[scan] = RelNode(TableScan(param_table))
    tag_outs = [(n2, Col(n2)) for n2 in in_schema.names] + [
        (rid, Call("row_number", ()))
    ]
    rels[tag] = RelNode(Project(tuple(tag_outs)), node.inputs)
    rels[cj] = RelNode(CrossJoin(), (tag, scan))
    pr_outs = [
        (rid, Col(rid)),
        (param_cols[0], Col(param_cols[0])),
        (blk, block_expr_fn(x_col)),
    ]
    rels[pr] = RelNode(Project(tuple(pr_outs)), (cj,))
    rels[ag] = RelNode(
        Aggregate((rid,), (agg_fn(val, blk, param_cols[0]),)), (pr,)
    )
    rels[jn] = RelNode(HashJoin((rid,), (rid,)), (tag, ag))
    new_outputs = list(node.op.outputs)
    new_outputs[out_idx] = (name, final_fn(val))
    rels[fin] = RelNode(Project(tuple(new_outputs)), (jn,))
    root = _redirect(rels, nid, fin, plan.root)
    return _finish(plan, rels, root)


def _enum_r3_1(plan: Plan, catalog: Catalog) -> list[tuple]:
    sites = []
    for nid, i in _enum_single_node_sites(plan, "matmul"):
        e = plan.rels[nid].op.outputs[i][1]
        node = _single_node_graph(plan.graphs[e.graph_id], "matmul")
        w = catalog.param(node.weight_ref)
        if w.ndim == 2:
            sites.append((nid, i))
    return sites


def _apply_r3_1(plan: Plan, site: tuple, catalog: Catalog) -> Plan:
    nid, out_idx = site
    e = plan.rels[nid].op.outputs[out_idx][1]
    node = _single_node_graph(plan.graphs[e.graph_id], "matmul")
    if node is None:
        raise InvalidBinding("not a single-matmul graph")
    table = catalog.materialize(node.weight_ref)
    m = node.output_shape[0]
    return _relationalize(
        plan, site, catalog, table, ("col_id", "w_tile"),
        block_expr_fn=lambda x: Call("vecmat_t", (Col(x), Col("w_tile"))),
        agg_fn=lambda val, blk, order: AggSpec(val, "concat", Col(blk), order, m),
        final_fn=lambda val: Col(val) if m > 1 else Call("vec_get", (Col(val), Lit(0))),
    )


def _enum_r3_2(plan: Plan, catalog: Catalog) -> list[tuple]:
    return _enum_single_node_sites(plan, "decision_forest")


def _apply_r3_2(plan: Plan, site: tuple, catalog: Catalog) -> Plan:
    nid, out_idx = site
    e = plan.rels[nid].op.outputs[out_idx][1]
    node = _single_node_graph(plan.graphs[e.graph_id], "decision_forest")
    if node is None:
        raise InvalidBinding("not a single-forest graph")
    table = catalog.materialize_forest(node.weight_ref)
    if node.agg == "sigmoid_sum":
        agg = lambda val, blk, order: AggSpec(val, "sum", Col(blk))
        final = lambda val: Call("sigmoid", (Col(val),))
    else:  # majority vote over per-tree class signs
        agg = lambda val, blk, order: AggSpec(
            val,
            "sum",
            IfExpr(Cmp("gt", Col(blk), Lit(0.0)), Lit(1.0), Lit(-1.0)),
        )
        final = lambda val: IfExpr(
            Cmp("gt", Col(val), Lit(0.0)), Lit(1.0), Lit(-1.0)
        )
    return _relationalize(
        plan, site, catalog, table, ("tree_id", "tree"),
        block_expr_fn=lambda x: Call("tree_predict", (Col("tree"), Col(x))),
        agg_fn=agg,
        final_fn=final,
    )


def _enum_r3_3(plan: Plan, catalog: Catalog) -> list[tuple]:
    return _enum_single_node_sites(plan, "dist_centroids")


def _apply_r3_3(plan: Plan, site: tuple, catalog: Catalog) -> Plan:
    nid, out_idx = site
    e = plan.rels[nid].op.outputs[out_idx][1]
    node = _single_node_graph(plan.graphs[e.graph_id], "dist_centroids")
    if node is None:
        raise InvalidBinding("not a single distance-to-centroids graph")
    table = catalog.materialize_centroids(node.weight_ref)
    c = node.output_shape[0]
    return _relationalize(
        plan, site, catalog, table, ("centroid_id", "centroid"),
        block_expr_fn=lambda x: Call("euclid", (Col(x), Col("centroid"))),
        agg_fn=lambda val, blk, order: AggSpec(val, "concat", Col(blk), order, c),
        final_fn=lambda val: Col(val) if c > 1 else Call("vec_get", (Col(val), Lit(0))),
    )


# ---------------------------------------------------------------------------
# R4_1 fuse / split


def _graph_specs(g: mlfn.MLGraph):
    specs = {}
    for nid, n in g.nodes.items():
        specs[nid] = {
            "kind": n.kind, "weight": n.weight_ref, "bias": n.bias_ref,
            "act": n.act, "agg": n.agg, "kernel": n.kernel,
            "threshold": n.threshold, "rate": n.rate,
        }
    return specs


def _replace_graph(plan: Plan, old_gid: str, new_graph: mlfn.MLGraph) -> Plan:
    new_gid = _uniq_graph(plan, old_gid + "x")
    graphs = dict(plan.graphs)
    graphs[new_gid] = new_graph

    def rebind(x: Expr) -> Expr:
        if isinstance(x, MLExpr) and x.graph_id == old_gid:
            return MLExpr(new_gid, x.args)
        return x

    rels = {}
    for nid, node in plan.rels.items():
        op = node.op
        for slot, e in _op_exprs(op):
            op = _op_with_expr(op, slot, _map_expr(e, rebind))
        rels[nid] = RelNode(op, node.inputs)
    return ir.prune(Plan(rels, plan.root, graphs))


_FUSABLE_ACTS = ("relu", "sigmoid", "tanh")


def _consumers(g: mlfn.MLGraph, nid: str) -> list[str]:
    return [d for s, d, _ in g.edges if s == nid]


def _enum_r4_1(plan: Plan, catalog: Catalog) -> list[tuple]:
    # expression splits come first (fan-in cuts before chain cuts): they are
    # the semantically meaningful sites, and the configurator breaks cost
    # ties by enumeration order
    out = []
    for nid in sorted(plan.rels):
        node = plan.rels[nid]
        if not isinstance(node.op, Project):
            continue
        for i, (_, e) in enumerate(node.op.outputs):
            if isinstance(e, MLExpr):
                g = plan.graphs[e.graph_id]
                for cut in _enum_cuts(g):
                    out.append(("split_expr", nid, i, cut))
    for gid in sorted(plan.graphs):
        g = plan.graphs[gid]
        for nid in sorted(g.nodes):
            if g.nodes[nid].kind == "dense_layer":
                out.append(("unfuse", gid, nid))
    for gid in sorted(plan.graphs):
        g = plan.graphs[gid]
        output_ids = {o for o, _ in g.outputs}
        for nid in sorted(g.nodes):
            n = g.nodes[nid]
            if n.kind == "matmul":
                cons = _consumers(g, nid)
                if len(cons) == 1 and g.nodes[cons[0]].kind == "matadd" and nid not in output_ids:
                    add = cons[0]
                    if g.nodes[add].bias_ref is None:
                        continue
                    cons2 = _consumers(g, add)
                    if (
                        len(cons2) == 1
                        and add not in output_ids
                        and g.nodes[cons2[0]].kind in _FUSABLE_ACTS
                    ):
                        out.append(("fuse", gid, nid))
    return out


def _enum_cuts(g: mlfn.MLGraph) -> list[tuple]:
    """Fan-in cuts and single-node-output cuts whose crossing edges are
    exactly the new sub-graph boundaries; fan-in cuts enumerate first."""
    cuts = []
    if len(g.outputs) != 1:
        return cuts
    out_node = g.outputs[0][0]
    input_names = {n for n, _ in g.inputs}
    anc = _ancestor_map(g)
    # fan-in cuts: a node whose input subtrees are disjoint non-input parts
    for v in sorted(g.nodes):
        srcs = g.node_inputs(v)
        if len(srcs) < 2 or any(s in input_names for s in srcs):
            continue
        parts = [anc[s] | {s} for s in srcs]
        ok = True
        for i in range(len(parts)):
            for j in range(i + 1, len(parts)):
                if parts[i] & parts[j]:
                    ok = False
        if not ok:
            continue
        for i, s in enumerate(srcs):
            for src, dst, _ in g.edges:
                if src in parts[i] and (dst not in parts[i] and dst != v):
                    ok = False
                if src == s and dst != v:
                    ok = False
        if ok:
            cuts.append(("fanin", v))
    for v in sorted(g.nodes):
        if v == out_node:
            continue
        s = anc[v] | {v}
        # only v's own output may cross out of s
        if any(src in s - {v} and dst not in s for src, dst, _ in g.edges if src in g.nodes):
            continue
        cuts.append(("after", v))
    return cuts


def _ancestor_map(g: mlfn.MLGraph) -> dict[str, set[str]]:
    anc: dict[str, set[str]] = {}
    for nid in g.topo_order():
        cur = set()
        for s in g.node_inputs(nid):
            if s in g.nodes:
                cur.add(s)
                cur |= anc[s]
        anc[nid] = cur
    return anc


def _subgraph(g: mlfn.MLGraph, nodes: set[str], output: str, catalog: Catalog):
    """Extract ``nodes`` as a standalone graph; crossing edges become inputs.
    Returns (graph, input sources) where each source is ('in', position) for
    an original graph input or ('node', id) for a cut producer."""
    input_pos = {name: i for i, (name, _) in enumerate(g.inputs)}
    ext_sources: list[tuple] = []
    ext_names: dict[str, str] = {}
    new_inputs = []
    specs = {}
    edges = []
    for nid in sorted(nodes):
        specs[nid] = _graph_specs(g)[nid]
    for s, d, p in g.edges:
        if d not in nodes:
            continue
        if s in nodes:
            edges.append((s, d, p))
            continue
        if s not in ext_names:
            name = f"a{len(ext_names)}"
            ext_names[s] = name
            if s in input_pos:
                shape = g.inputs[input_pos[s]][1]
                ext_sources.append(("in", input_pos[s]))
            else:
                shape = g.nodes[s].output_shape
                ext_sources.append(("node", s))
            new_inputs.append((name, shape))
        edges.append((ext_names[s], d, p))
    graph = ir.build_graph(new_inputs, specs, edges, [output], catalog)
    return graph, ext_sources


def _apply_r4_1(plan: Plan, site: tuple, catalog: Catalog) -> Plan:
    kind = site[0]
    if kind == "fuse":
        _, gid, mm_id = site
        g = plan.graphs[gid]
        add_id = _consumers(g, mm_id)[0]
        act_id = _consumers(g, add_id)[0]
        specs = _graph_specs(g)
        mm = g.nodes[mm_id]
        fused = {
            "kind": "dense_layer", "weight": mm.weight_ref,
            "bias": g.nodes[add_id].bias_ref, "act": g.nodes[act_id].kind,
            "kernel": mm.kernel,
        }
        for k in (mm_id, add_id, act_id):
            del specs[k]
        specs[act_id] = fused  # keep the chain-end id so outputs stay valid
        edges = []
        for s, d, p in g.edges:
            if (s, d) in ((mm_id, add_id), (add_id, act_id)):
                continue
            s2 = s
            d2 = d if d != mm_id else act_id
            edges.append((s2, d2, p))
        new_g = ir.build_graph(g.inputs, specs, edges, [o for o, _ in g.outputs], catalog)
        return _replace_graph(plan, gid, new_g)
    if kind == "unfuse":
        _, gid, dl_id = site
        g = plan.graphs[gid]
        dl = g.nodes[dl_id]
        specs = _graph_specs(g)
        del specs[dl_id]
        mm_id, add_id = f"{dl_id}_mm", f"{dl_id}_add"
        specs[mm_id] = {"kind": "matmul", "weight": dl.weight_ref, "kernel": dl.kernel}
        specs[add_id] = {"kind": "matadd", "bias": dl.bias_ref}
        specs[dl_id] = {"kind": dl.act}
        edges = []
        for s, d, p in g.edges:
            if d == dl_id:
                edges.append((s, mm_id, p))
            else:
                edges.append((s, d, p))
        edges.append((mm_id, add_id, 0))
        edges.append((add_id, dl_id, 0))
        new_g = ir.build_graph(g.inputs, specs, edges, [o for o, _ in g.outputs], catalog)
        return _replace_graph(plan, gid, new_g)
    if kind == "split_expr":
        return _apply_split_expr(plan, site, catalog)
    raise InvalidBinding(f"unknown r4_1 site {site!r}")


def _apply_split_expr(plan: Plan, site: tuple, catalog: Catalog) -> Plan:
    _, nid, out_idx, cut = site
    node = plan.rels[nid]
    name, e = node.op.outputs[out_idx]
    if not isinstance(e, MLExpr):
        raise InvalidBinding("split site is not an ml expression")
    g = plan.graphs[e.graph_id]
    anc = _ancestor_map(g)
    graphs = dict(plan.graphs)
    if cut[0] == "after":
        v = cut[1]
        s = anc[v] | {v}
        head_nodes = set(g.nodes) - s
        part, part_srcs = _subgraph(g, s, v, catalog)
        head, head_srcs = _subgraph(g, head_nodes, g.outputs[0][0], catalog)
        pid = _uniq_graph(Plan(plan.rels, plan.root, graphs), f"{e.graph_id}_p")
        graphs[pid] = part
        part_args = tuple(e.args[pos] for kind2, pos in part_srcs)
        hid = _uniq_graph(Plan(plan.rels, plan.root, graphs), f"{e.graph_id}_h")
        graphs[hid] = head
        head_args = []
        for kind2, ref in head_srcs:
            if kind2 == "in":
                head_args.append(e.args[ref])
            else:
                head_args.append(MLExpr(pid, part_args))
        new_expr: Expr = MLExpr(hid, tuple(head_args))
    else:  # fanin
        v = cut[1]
        srcs = g.node_inputs(v)
        head_nodes = _descendants(g, v) | {v}
        head, head_srcs = _subgraph(g, head_nodes, g.outputs[0][0], catalog)
        part_exprs: dict[str, Expr] = {}
        for s_id in srcs:
            part_nodes = anc[s_id] | {s_id}
            part, part_srcs = _subgraph(g, part_nodes, s_id, catalog)
            pid = _uniq_graph(Plan(plan.rels, plan.root, graphs), f"{e.graph_id}_p")
            graphs[pid] = part
            args = tuple(e.args[pos] for kind2, pos in part_srcs)
            part_exprs[s_id] = MLExpr(pid, args)
        head_args = []
        for kind2, ref in head_srcs:
            if kind2 == "in":
                head_args.append(e.args[ref])
            else:
                head_args.append(part_exprs[ref])
        new_expr = MLExpr(_uniq_graph(Plan(plan.rels, plan.root, graphs), f"{e.graph_id}_h"), tuple(head_args))
        graphs[new_expr.graph_id] = head
    rels = dict(plan.rels)
    new_outputs = list(node.op.outputs)
    new_outputs[out_idx] = (name, new_expr)
    new_id = plan.next_id()
    rels[new_id] = RelNode(Project(tuple(new_outputs)), node.inputs)
    root = _redirect(rels, nid, new_id, plan.root)
    return _finish(plan, rels, root, graphs)


# ---------------------------------------------------------------------------
# R4_2 kernel replacement


def _enum_r4_2(plan: Plan, catalog: Catalog) -> list[tuple]:
    out = []
    for gid in sorted(plan.graphs):
        for nid in sorted(plan.graphs[gid].nodes):
            n = plan.graphs[gid].nodes[nid]
            if n.kind in ("matmul", "dense_layer"):
                for kernel in mlfn.MATMUL_KERNELS:
                    if kernel != n.kernel:
                        out.append((gid, nid, kernel))
    return out


def _apply_r4_2(plan: Plan, site: tuple, catalog: Catalog) -> Plan:
    gid, nid, kernel = site
    g = plan.graphs[gid]
    if nid not in g.nodes or g.nodes[nid].kind not in ("matmul", "dense_layer"):
        raise InvalidBinding(f"no kernel-bearing node {nid!r} in {gid!r}")
    specs = _graph_specs(g)
    specs[nid] = dict(specs[nid], kernel=kernel)
    new_g = ir.build_graph(g.inputs, specs, g.edges, [o for o, _ in g.outputs], catalog)
    return _replace_graph(plan, gid, new_g)


# ---------------------------------------------------------------------------
# R4_4 constant folding


def _is_const(e: Expr) -> bool:
    if isinstance(e, Lit):
        return True
    if isinstance(e, Col):
        return False
    if isinstance(e, MLExpr):
        return False
    if isinstance(e, Call):
        return False  # row_number and friends are row-dependent
    kids = _expr_children(e)
    return bool(kids) and all(_is_const(k) for k in kids)


def _fold_const(e: Expr) -> Lit:
    # constant trees never touch columns, graphs or the catalog, so the
    # scalar reference evaluator can run without any row context
    from .executor import _ref_eval

    v = _ref_eval(e, (), None, None, None, 0)
    return ir.lit(v) if isinstance(v, (list, np.ndarray)) else Lit(v)


def _enum_r4_4(plan: Plan, catalog: Catalog) -> list[tuple]:
    out = []
    for nid in sorted(plan.rels):
        for slot, root_e in _op_exprs(plan.rels[nid].op):
            folded_prefixes: list[tuple] = []
            for path, sub in _subexprs(root_e):
                if any(path[: len(p)] == p for p in folded_prefixes):
                    continue
                if isinstance(sub, Lit):
                    continue
                if isinstance(sub, MLExpr) and all(_is_const(a) for a in sub.args):
                    out.append(("ml", nid, slot, path))
                    folded_prefixes.append(path)
                elif _is_const(sub):
                    out.append(("expr", nid, slot, path))
                    folded_prefixes.append(path)
    return out


def _apply_r4_4(plan: Plan, site: tuple, catalog: Catalog) -> Plan:
    kind, nid, slot, path = site
    node = plan.rels[nid]
    slot = tuple(slot)
    path = tuple(path)
    root_e = dict(_op_exprs(node.op))[slot]
    sub = _expr_get(root_e, path)
    if kind == "expr":
        if not _is_const(sub):
            raise InvalidBinding("site is not constant")
        folded = _fold_const(sub)
    else:
        if not (isinstance(sub, MLExpr) and all(_is_const(a) for a in sub.args)):
            raise InvalidBinding("ml site does not have constant arguments")
        g = plan.graphs[sub.graph_id]
        batches = {}
        for (iname, shape), a in zip(g.inputs, sub.args):
            v = _fold_const(a).value
            arr = np.asarray(v, dtype=np.float64).reshape((1,) + tuple(shape))
            batches[iname] = arr
        out = next(iter(mlfn.graph_execute(g, batches, catalog).values()))[0]
        folded = Lit(float(out[0])) if out.shape == (1,) else ir.lit(out)
    new_e = _expr_set(root_e, path, folded)
    rels = dict(plan.rels)
    new_id = plan.next_id()
    rels[new_id] = RelNode(_op_with_expr(node.op, slot, new_e), node.inputs)
    root = _redirect(rels, nid, new_id, plan.root)
    return _finish(plan, rels, root)


# ---------------------------------------------------------------------------
# public entry points

_ENUM = {
    RuleId.R1_1: _enum_r1_1,
    RuleId.R1_2: _enum_r1_2,
    RuleId.R1_3: _enum_r1_3,
    RuleId.R1_4: _enum_r1_4,
    RuleId.R2_1: _enum_r2_1,
    RuleId.R3_1: _enum_r3_1,
    RuleId.R3_2: _enum_r3_2,
    RuleId.R3_3: _enum_r3_3,
    RuleId.R4_1: _enum_r4_1,
    RuleId.R4_2: _enum_r4_2,
    RuleId.R4_4: _enum_r4_4,
}

_APPLY = {
    RuleId.R1_1: _apply_r1_1,
    RuleId.R1_2: _apply_r1_2,
    RuleId.R1_3: _apply_r1_3,
    RuleId.R1_4: _apply_r1_4,
    RuleId.R2_1: _apply_r2_1,
    RuleId.R3_1: _apply_r3_1,
    RuleId.R3_2: _apply_r3_2,
    RuleId.R3_3: _apply_r3_3,
    RuleId.R4_1: _apply_r4_1,
    RuleId.R4_2: _apply_r4_2,
    RuleId.R4_4: _apply_r4_4,
}


def enumerate_bindings(plan: Plan, rule: RuleId, catalog: Catalog) -> list[Binding]:
    """Complete, deterministic, duplicate-free binding list; every returned
    binding is guaranteed to apply (candidates that fail to produce a
    well-typed plan are filtered here, not at apply time).

    Results are memoized on the plan object: plans are immutable values, so
    repeated enumeration during search configuration is pure."""
    cache = plan.__dict__.setdefault("_bindings_cache", {})
    key = (rule, id(catalog))
    if key in cache:
        return cache[key]
    out = []
    seen = set()
    for site in _ENUM[rule](plan, catalog):
        if site in seen:
            continue
        seen.add(site)
        try:
            candidate = _APPLY[rule](plan, site, catalog)
        except CrossplanError:
            continue
        if _schemas_ok(candidate, catalog):
            out.append(Binding(rule, site))
    cache[key] = out
    return out


def apply_rule(plan: Plan, binding: Binding, catalog: Catalog, check: bool | None = None) -> Plan:
    try:
        new_plan = _APPLY[binding.rule](plan, binding.site, catalog)
    except InvalidBinding:
        raise
    except (CrossplanError, KeyError, IndexError, AttributeError, TypeError) as e:
        raise InvalidBinding(f"{binding.describe()}: {e}") from e
    if not _schemas_ok(new_plan, catalog):
        raise InvalidBinding(f"{binding.describe()}: rewrite does not type-check")
    if check if check is not None else _CHECK_REWRITES:
        _debug_equivalence(plan, new_plan, catalog, binding)
    return new_plan


_CHECK_REWRITES = os.environ.get("CROSSPLAN_CHECK_REWRITES", "") not in ("", "0")


def _debug_equivalence(plan: Plan, new_plan: Plan, catalog: Catalog, binding: Binding):
    from .executor import execute
    from .tables import Table, tables_equal

    sample = Catalog(catalog.memory_budget_bytes, catalog.tile_width)
    sample.params = catalog.params
    sample.forests = catalog.forests
    sample.models = catalog.models
    for name, t in catalog.tables.items():
        if name.startswith("$") or t.row_count <= 24:
            sample.tables[name] = t
        else:
            idx = np.arange(24)
            cols = tuple(
                [c[i] for i in idx] if isinstance(c, list) else c[idx]
                for c in t.columns
            )
            sample.tables[name] = Table(t.schema, cols, 24)
    a, _ = execute(plan, sample)
    b, _ = execute(new_plan, sample)
    if not tables_equal(a, b, rtol=1e-6, atol=1e-9):
        raise EquivalenceViolation(binding.describe())


# ---------------------------------------------------------------------------
# explain rendering


def render_expr(e: Expr) -> str:
    if isinstance(e, Col):
        return e.name
    if isinstance(e, Lit):
        if isinstance(e.value, tuple):
            return "[" + ", ".join(repr(x) for x in e.value) + "]"
        return repr(e.value)
    if isinstance(e, Arith):
        sym = {"add": "+", "sub": "-", "mul": "*", "div": "/"}[e.op]
        return f"({render_expr(e.left)} {sym} {render_expr(e.right)})"
    if isinstance(e, Cmp):
        sym = {"gt": ">", "lt": "<", "ge": ">=", "le": "<=", "eq": "=", "ne": "!="}[e.op]
        return f"({render_expr(e.left)} {sym} {render_expr(e.right)})"
    if isinstance(e, Logic):
        if e.op == "not":
            return f"not {render_expr(e.args[0])}"
        return "(" + f" {e.op} ".join(render_expr(a) for a in e.args) + ")"
    if isinstance(e, IfExpr):
        return f"if({render_expr(e.cond)}, {render_expr(e.then)}, {render_expr(e.orelse)})"
    if isinstance(e, SwitchExpr):
        cases = ", ".join(
            f"{render_expr(c)} -> {render_expr(v)}" for c, v in e.cases
        )
        return f"switch({cases}, default {render_expr(e.default)})"
    if isinstance(e, Call):
        return f"{e.fn}(" + ", ".join(render_expr(a) for a in e.args) + ")"
    if isinstance(e, MLExpr):
        return f"ml:{e.graph_id}(" + ", ".join(render_expr(a) for a in e.args) + ")"
    return repr(e)


def explain(plan: Plan, catalog: Catalog | None = None) -> str:
    """Stable text rendering of all three plan levels."""
    lines: list[str] = []
    seen: set[int] = set()

    def op_line(node: RelNode) -> str:
        op = node.op
        if isinstance(op, TableScan):
            return f"scan {op.table}"
        if isinstance(op, Filter):
            sel = f" sel={op.selectivity}" if op.selectivity is not None else ""
            return f"filter {render_expr(op.pred)}{sel}"
        if isinstance(op, Project):
            outs = ", ".join(f"{n} := {render_expr(e)}" for n, e in op.outputs)
            return f"project {outs}"
        if isinstance(op, HashJoin):
            keys = ", ".join(
                f"{l}={r}" for l, r in zip(op.left_keys, op.right_keys)
            )
            return f"hash_join on {keys}"
        if isinstance(op, CrossJoin):
            return "cross_join"
        if isinstance(op, Aggregate):
            aggs = ", ".join(
                f"{s.name} := {s.fn}({render_expr(s.arg) if s.arg is not None else '*'})"
                for s in op.aggs
            )
            keys = ", ".join(op.group_keys) or "-"
            return f"aggregate by [{keys}] {aggs}"
        if isinstance(op, Union):
            return "union"
        if isinstance(op, Expand):
            return f"expand {op.name} := {render_expr(op.expr)}"
        return repr(op)

    def walk(nid: int, depth: int):
        node = plan.rels[nid]
        pad = "  " * depth
        if nid in seen:
            lines.append(f"{pad}#{nid} (shared, see above)")
            return
        seen.add(nid)
        lines.append(f"{pad}#{nid} {op_line(node)}")
        for c in node.inputs:
            walk(c, depth + 1)

    walk(plan.root, 0)
    if plan.graphs:
        lines.append("graphs:")
        for gid in sorted(plan.graphs):
            g = plan.graphs[gid]
            lines.append(f"  {gid}: inputs={[s for _, s in g.inputs]} flops/row={mlfn.graph_flops(g)}")
            for nid in g.topo_order():
                n = g.nodes[nid]
                bits = [n.kind]
                if n.weight_ref:
                    bits.append(f"w={n.weight_ref}")
                if n.act:
                    bits.append(f"act={n.act}")
                if n.agg:
                    bits.append(f"agg={n.agg}")
                if n.kernel != "naive":
                    bits.append(f"kernel={n.kernel}")
                srcs = ",".join(g.node_inputs(nid))
                lines.append(f"    {nid} <- [{srcs}]: " + " ".join(bits))
    return "\n".join(lines) + "\n"
