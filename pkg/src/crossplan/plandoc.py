"""JSON interchange for plans, graphs and model registration documents.

The plan document is the canonical query input::

    {
      "tables": {name: columnar table doc, ...},          # optional, inline
      "graphs": {gid: graph doc | {"model": name}, ...},
      "plan": {"nodes": {id: node doc, ...}, "root": id}
    }

Expressions are nested JSON arrays, e.g. ``["and", ["gt", ["col","x"], ["lit",3]], ...]``.
"""

from __future__ import annotations

import json
import os
from typing import Mapping

import numpy as np

from . import ir, mlfn
from .catalog import Catalog
from .errors import CrossplanError, ParseError, UnknownModel, UnknownTable
from .tables import load_json_doc, dump_json_doc

# ---------------------------------------------------------------------------
# expressions

_ARITH = {"add", "sub", "mul", "div"}
_CMP = {"gt", "lt", "eq", "ne", "ge", "le"}


def expr_from_json(doc, path: str = "expr") -> ir.Expr:
    if not isinstance(doc, list) or not doc:
        raise ParseError(path, f"expression must be a nonempty array, got {doc!r}")
    head = doc[0]
    args = doc[1:]
    try:
        if head == "col":
            return ir.Col(str(args[0]))
        if head == "lit":
            v = args[0]
            if isinstance(v, list):
                return ir.Lit(tuple(float(x) for x in v))
            return ir.Lit(v)
        if head in _ARITH:
            return ir.Arith(head, expr_from_json(args[0], path), expr_from_json(args[1], path))
        if head in _CMP:
            return ir.Cmp(head, expr_from_json(args[0], path), expr_from_json(args[1], path))
        if head in ("and", "or", "not"):
            return ir.Logic(head, tuple(expr_from_json(a, path) for a in args))
        if head == "if":
            return ir.IfExpr(*(expr_from_json(a, path) for a in args[:3]))
        if head == "switch":
            cases = tuple(
                (expr_from_json(c, path), expr_from_json(v, path)) for c, v in args[0]
            )
            return ir.SwitchExpr(cases, expr_from_json(args[1], path))
        if head == "call":
            return ir.Call(str(args[0]), tuple(expr_from_json(a, path) for a in args[1:]))
        if head == "ml":
            return ir.MLExpr(str(args[0]), tuple(expr_from_json(a, path) for a in args[1:]))
    except (IndexError, TypeError, ValueError) as e:
        raise ParseError(path, f"malformed {head!r} expression: {e}") from None
    raise ParseError(path, f"unknown expression head {head!r}")


def expr_to_json(e: ir.Expr):
    if isinstance(e, ir.Col):
        return ["col", e.name]
    if isinstance(e, ir.Lit):
        v = list(e.value) if isinstance(e.value, tuple) else e.value
        return ["lit", v]
    if isinstance(e, ir.Arith):
        return [e.op, expr_to_json(e.left), expr_to_json(e.right)]
    if isinstance(e, ir.Cmp):
        return [e.op, expr_to_json(e.left), expr_to_json(e.right)]
    if isinstance(e, ir.Logic):
        return [e.op, *[expr_to_json(a) for a in e.args]]
    if isinstance(e, ir.IfExpr):
        return ["if", expr_to_json(e.cond), expr_to_json(e.then), expr_to_json(e.orelse)]
    if isinstance(e, ir.SwitchExpr):
        return [
            "switch",
            [[expr_to_json(c), expr_to_json(v)] for c, v in e.cases],
            expr_to_json(e.default),
        ]
    if isinstance(e, ir.Call):
        return ["call", e.fn, *[expr_to_json(a) for a in e.args]]
    if isinstance(e, ir.MLExpr):
        return ["ml", e.graph_id, *[expr_to_json(a) for a in e.args]]
    raise CrossplanError(f"cannot serialize {e!r}")


# ---------------------------------------------------------------------------
# graphs


def graph_from_doc(doc: Mapping, catalog: Catalog, path: str = "graph") -> mlfn.MLGraph:
    try:
        inputs = [(str(n), tuple(int(x) for x in s)) for n, s in doc["inputs"]]
        edges = [(str(s), str(d), int(p)) for s, d, p in doc.get("edges", [])]
        outputs = [str(o) for o in doc["outputs"]]
        nodes = {str(nid): dict(spec) for nid, spec in doc["nodes"].items()}
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(path, f"malformed graph doc: {e}") from None
    for spec in nodes.values():
        for key in ("weight", "bias"):
            ref = spec.get(key)
            if ref is not None and not catalog.has_param(ref):
                raise UnknownModel(f"{path}: parameter {ref!r} not registered")
    return ir.build_graph(inputs, nodes, edges, outputs, catalog)


def graph_to_doc(g: mlfn.MLGraph) -> dict:
    nodes = {}
    for nid, n in g.nodes.items():
        spec: dict = {"kind": n.kind}
        if n.weight_ref:
            spec["weight"] = n.weight_ref
        if n.bias_ref:
            spec["bias"] = n.bias_ref
        if n.act:
            spec["act"] = n.act
        if n.agg:
            spec["agg"] = n.agg
        if n.kernel != "naive":
            spec["kernel"] = n.kernel
        if n.threshold is not None:
            spec["threshold"] = n.threshold
        if n.rate is not None:
            spec["rate"] = n.rate
        if n.kind == "conv":
            spec["out_shape"] = list(n.output_shape)
        nodes[nid] = spec
    return {
        "inputs": [[n, list(s)] for n, s in g.inputs],
        "nodes": nodes,
        "edges": [[s, d, p] for s, d, p in g.edges],
        "outputs": [o for o, _ in g.outputs],
    }


# ---------------------------------------------------------------------------
# plans


_AGG_KEYS = {"name", "fn", "arg", "order_by", "out_dim"}


def _op_from_doc(doc: Mapping, path: str) -> tuple[ir.RelOp, list[str]]:
    kind = doc.get("kind")
    inputs = [str(i) for i in doc.get("inputs", [])]
    if kind == "scan":
        return ir.TableScan(str(doc["table"])), inputs
    if kind == "filter":
        sel = doc.get("selectivity")
        return ir.Filter(expr_from_json(doc["pred"], path), None if sel is None else float(sel)), inputs
    if kind == "project":
        outs = tuple((str(n), expr_from_json(e, path)) for n, e in doc["outputs"])
        return ir.Project(outs), inputs
    if kind == "hash_join":
        return (
            ir.HashJoin(tuple(doc["left_keys"]), tuple(doc["right_keys"])),
            inputs,
        )
    if kind == "cross_join":
        return ir.CrossJoin(), inputs
    if kind == "aggregate":
        aggs = []
        for a in doc["aggs"]:
            if set(a) - _AGG_KEYS:
                raise ParseError(path, f"unknown aggregate keys {set(a) - _AGG_KEYS}")
            aggs.append(
                ir.AggSpec(
                    name=str(a["name"]),
                    fn=str(a["fn"]),
                    arg=expr_from_json(a["arg"], path) if a.get("arg") is not None else None,
                    order_by=a.get("order_by"),
                    out_dim=a.get("out_dim"),
                )
            )
        return ir.Aggregate(tuple(doc.get("group", [])), tuple(aggs)), inputs
    if kind == "union":
        return ir.Union(), inputs
    if kind == "expand":
        return ir.Expand(str(doc["name"]), expr_from_json(doc["expr"], path)), inputs
    raise ParseError(path, f"unknown operator kind {kind!r}")


def _op_to_doc(op: ir.RelOp) -> dict:
    if isinstance(op, ir.TableScan):
        return {"kind": "scan", "table": op.table}
    if isinstance(op, ir.Filter):
        doc = {"kind": "filter", "pred": expr_to_json(op.pred)}
        if op.selectivity is not None:
            doc["selectivity"] = op.selectivity
        return doc
    if isinstance(op, ir.Project):
        return {
            "kind": "project",
            "outputs": [[n, expr_to_json(e)] for n, e in op.outputs],
        }
    if isinstance(op, ir.HashJoin):
        return {
            "kind": "hash_join",
            "left_keys": list(op.left_keys),
            "right_keys": list(op.right_keys),
        }
    if isinstance(op, ir.CrossJoin):
        return {"kind": "cross_join"}
    if isinstance(op, ir.Aggregate):
        aggs = []
        for s in op.aggs:
            a: dict = {"name": s.name, "fn": s.fn}
            if s.arg is not None:
                a["arg"] = expr_to_json(s.arg)
            if s.order_by is not None:
                a["order_by"] = s.order_by
            if s.out_dim is not None:
                a["out_dim"] = s.out_dim
            aggs.append(a)
        return {"kind": "aggregate", "group": list(op.group_keys), "aggs": aggs}
    if isinstance(op, ir.Union):
        return {"kind": "union"}
    if isinstance(op, ir.Expand):
        return {"kind": "expand", "name": op.name, "expr": expr_to_json(op.expr)}
    raise CrossplanError(f"cannot serialize operator {op!r}")


def build_plan(doc: Mapping, catalog: Catalog) -> ir.Plan:
    """Turn a plan document into a validated :class:`ir.Plan`. Inline tables
    are registered into the catalog if not already present; graph entries of
    the form ``{"model": name}`` bind a registered model."""
    for name, tdoc in (doc.get("tables") or {}).items():
        if name not in catalog.tables:
            catalog.register_table(name, load_json_doc(tdoc))
    graphs: dict[str, mlfn.MLGraph] = {}
    for gid, gdoc in (doc.get("graphs") or {}).items():
        if "model" in gdoc:
            graphs[gid] = catalog.model(gdoc["model"])
        else:
            graphs[gid] = graph_from_doc(gdoc, catalog, path=f"graphs.{gid}")
    try:
        node_docs = doc["plan"]["nodes"]
        root_key = str(doc["plan"]["root"])
    except (KeyError, TypeError) as e:
        raise ParseError("plan", f"missing plan section: {e}") from None
    ids = {key: i for i, key in enumerate(sorted(node_docs, key=str))}
    if root_key not in ids:
        raise ParseError("plan.root", f"root {root_key!r} is not a node")
    rels: dict[int, ir.RelNode] = {}
    for key, ndoc in node_docs.items():
        op, input_keys = _op_from_doc(ndoc, path=f"plan.nodes.{key}")
        for ik in input_keys:
            if ik not in ids:
                raise ParseError(f"plan.nodes.{key}", f"unknown input {ik!r}")
        rels[ids[key]] = ir.RelNode(op, tuple(ids[k] for k in input_keys))
    for nid, node in rels.items():
        if isinstance(node.op, ir.TableScan) and node.op.table not in catalog.tables:
            raise UnknownTable(node.op.table)
    plan = ir.Plan(rels, ids[root_key], graphs)
    # bind bare model references used directly in expressions
    for nid, node in list(plan.rels.items()):
        for gid in ir.rel_graph_ids(node):
            if gid not in plan.graphs:
                if gid in catalog.models:
                    plan.graphs[gid] = catalog.model(gid)
                else:
                    raise UnknownModel(gid)
    errors = ir.validate(plan, catalog)
    if errors:
        raise ParseError("plan", "; ".join(errors))
    return plan


def plan_to_doc(plan: ir.Plan) -> dict:
    nodes = {}
    for nid, node in plan.rels.items():
        ndoc = _op_to_doc(node.op)
        if node.inputs:
            ndoc["inputs"] = [str(i) for i in node.inputs]
        nodes[str(nid)] = ndoc
    return {
        "graphs": {gid: graph_to_doc(g) for gid, g in plan.graphs.items()},
        "plan": {"nodes": nodes, "root": str(plan.root)},
    }


def plan_to_json(plan: ir.Plan) -> str:
    return json.dumps(plan_to_doc(plan), sort_keys=True)


# ---------------------------------------------------------------------------
# model registration documents


def _load_tensor(spec, base_dir: str) -> np.ndarray:
    if isinstance(spec, Mapping) and "csv" in spec:
        path = os.path.join(base_dir, spec["csv"])
        rows = []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    rows.append([float(x) for x in line.split(",")])
        arr = np.asarray(rows, dtype=np.float64)
        return arr[0] if arr.shape[0] == 1 and spec.get("rank") == 1 else arr
    return np.asarray(spec, dtype=np.float64)


def register_model_doc(doc: Mapping, catalog: Catalog, base_dir: str = ".") -> str:
    """Register a model from its JSON document. Unqualified weight refs in
    the graph are namespaced with the model name."""
    try:
        name = str(doc["name"])
        gdoc = dict(doc["graph"])
    except (KeyError, TypeError) as e:
        raise ParseError("model", f"missing field: {e}") from None
    weights = {
        key: _load_tensor(spec, base_dir) for key, spec in (doc.get("weights") or {}).items()
    }
    forests: dict[str, mlfn.Forest | mlfn.Tree] = {}
    for key, fdoc in (doc.get("forests") or {}).items():
        forests[key] = mlfn.Forest.from_doc(fdoc)
    # namespace bare refs, then build with shapes inferred from the catalog
    nodes = {}
    for nid, spec in gdoc["nodes"].items():
        spec = dict(spec)
        for key in ("weight", "bias"):
            ref = spec.get(key)
            if ref is not None and "." not in ref:
                spec[key] = f"{name}.{ref}"
        nodes[nid] = spec
    gdoc["nodes"] = nodes
    for key, w in weights.items():
        catalog.params[f"{name}.{key}"] = w
    for key, f in forests.items():
        catalog.forests[f"{name}.{key}"] = f
    graph = graph_from_doc(gdoc, catalog, path=f"model.{name}")
    # register_model re-adds params; drop the temporaries first
    for key in weights:
        del catalog.params[f"{name}.{key}"]
    for key in forests:
        del catalog.forests[f"{name}.{key}"]
    catalog.register_model(name, graph, weights, forests)
    return name
