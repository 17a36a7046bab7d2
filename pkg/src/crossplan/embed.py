"""Weisfeiler-Lehman kernel embeddings of computation graphs and whole
plans, plus the flat cosine index over search-tree states.

A graph is embedded as the normalized frequency map of every label in every
node's refinement history: labels start from content-derived initial labels
and are refreshed ``wl_iterations`` times by hashing each node's label with
its children's sorted labels. Plans are embedded in two stages: each ML
graph is embedded first and contributes a shared "model label" (drawn from
a similarity-matched label pool), then the relational DAG is embedded with
those labels folded into the operator labels.

Numeric literals compared against columns are labeled by their (coarse)
histogram bucket rather than their value, so queries resampled from a
template collide in the state space while structurally different queries do
not.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import cost, ir
from .catalog import Catalog
from .errors import CrossplanError, CyclicGraph
from .tables import ColumnStats, histogram_bucket


@dataclass(frozen=True)
class FeatureVector:
    """L2-normalized sparse label-frequency map."""

    entries: tuple[tuple[str, float], ...]

    @classmethod
    def from_counts(cls, counts: Mapping[str, float]) -> "FeatureVector":
        norm = math.sqrt(sum(v * v for v in counts.values()))
        if norm == 0:
            return cls(())
        return cls(tuple(sorted((k, v / norm) for k, v in counts.items())))

    def as_dict(self) -> dict[str, float]:
        return dict(self.entries)


def similarity(a: FeatureVector, b: FeatureVector) -> float:
    da, db = a.as_dict(), b.as_dict()
    if len(db) < len(da):
        da, db = db, da
    return max(0.0, min(1.0, sum(v * db.get(k, 0.0) for k, v in da.items())))


def _h(label: str) -> str:
    return hashlib.blake2b(label.encode(), digest_size=8).hexdigest()


def wl_features(
    node_ids: Sequence,
    children: Mapping,
    init_labels: Mapping,
    iterations: int,
) -> FeatureVector:
    """Label-refinement feature extraction over an acyclic graph.

    Each refinement hashes the node's current label with the sorted labels
    of its children; counts accumulate every label in every node's history
    (the initial label plus one per iteration)."""
    _check_acyclic(node_ids, children)
    labels = {n: init_labels[n] for n in node_ids}
    history: dict = {n: [labels[n]] for n in node_ids}
    for _ in range(iterations):
        new_labels = {}
        for n in node_ids:
            kids = sorted(labels[c] for c in children.get(n, ()))
            new_labels[n] = _h(labels[n] + "(" + ",".join(kids) + ")")
            history[n].append(new_labels[n])
        labels = new_labels
    counts: dict[str, float] = {}
    for n in node_ids:
        for lab in history[n]:
            counts[lab] = counts.get(lab, 0.0) + 1.0
    return FeatureVector.from_counts(counts)


def _check_acyclic(node_ids, children):
    state: dict = {}

    def visit(n):
        s = state.get(n)
        if s == 1:
            return
        if s == 0:
            raise CyclicGraph(f"cycle through {n!r}")
        state[n] = 0
        for c in children.get(n, ()):
            visit(c)
        state[n] = 1

    for n in node_ids:
        visit(n)


# ---------------------------------------------------------------------------
# label assignment


@dataclass
class LabelContext:
    """Shared labeling state for one optimizer session.

    ``groups`` anchors per-function-kind flop values: two nodes of the same
    kind share a label when their flop counts differ by at most ``rho``
    relative to the anchored value. ``ml_labels`` pools whole-graph
    embeddings: a graph reuses an existing model label when its cosine
    similarity to the pool entry reaches ``tau_sim``."""

    wl_iterations: int = 3
    rho: float = 0.10
    tau_sim: float = 0.90
    filter_buckets: int = 4
    groups: dict[str, list[int]] = field(default_factory=dict)
    ml_labels: list[tuple[FeatureVector, str]] = field(default_factory=list)

    def __post_init__(self):
        if not (0 < self.rho < 1):
            raise CrossplanError("rho must be in (0, 1)")
        if not (0 < self.tau_sim <= 1):
            raise CrossplanError("tau_sim must be in (0, 1]")


def init_label_model(kind: str, flops: int, ctx: LabelContext) -> str:
    """Kind plus a flop anchor: anchors are created on first sight and
    matched within ``rho`` relative tolerance (binary search)."""
    group = ctx.groups.setdefault(kind, [])
    lo, hi = 0, len(group)
    while lo < hi:
        mid = (lo + hi) // 2
        if group[mid] < flops:
            lo = mid + 1
        else:
            hi = mid
    for idx in (lo - 1, lo):
        if 0 <= idx < len(group) and abs(flops - group[idx]) <= ctx.rho * group[idx]:
            return f"{kind}|{group[idx]}"
    group.insert(lo, flops)
    return f"{kind}|{flops}"


def graph_features(graph, ctx: LabelContext) -> FeatureVector:
    """Embed one ML graph; inputs participate as position-labeled leaves."""
    node_ids = list(graph.nodes) + [name for name, _ in graph.inputs]
    children = {nid: tuple(graph.node_inputs(nid)) for nid in graph.nodes}
    input_pos = {name: i for i, (name, _) in enumerate(graph.inputs)}
    init = {}
    for nid, node in graph.nodes.items():
        init[nid] = init_label_model(node.kind, node.flops, ctx)
    for name, shape in graph.inputs:
        init[name] = f"in|{input_pos[name]}"
    return wl_features(node_ids, children, init, ctx.wl_iterations)


def model_label(fv: FeatureVector, ctx: LabelContext) -> str:
    """Similarity-pooled label for a whole graph embedding."""
    best, best_sim = None, 0.0
    for stored, label in ctx.ml_labels:
        s = similarity(stored, fv)
        if s > best_sim:
            best, best_sim = label, s
    if best is not None and best_sim >= ctx.tau_sim:
        return best
    label = f"m{len(ctx.ml_labels)}"
    ctx.ml_labels.append((fv, label))
    return label


def _literal_token(
    value, col: str | None, stats: Mapping[str, ColumnStats], ctx: LabelContext
) -> str:
    if isinstance(value, bool) or isinstance(value, str):
        return repr(value)
    if isinstance(value, tuple):
        return f"vec{len(value)}"
    if col is not None and col in stats and stats[col].bucket_count:
        return f"b{histogram_bucket(stats[col], value, ctx.filter_buckets)}"
    # no histogram available: coarse magnitude bucket
    return f"~e{int(math.log10(abs(float(value)) + 1.0))}"


def expr_label(
    e: ir.Expr,
    ctx: LabelContext,
    stats: Mapping[str, ColumnStats],
    ml_of_graph: Mapping[str, str],
) -> str:
    def walk(x: ir.Expr, col_ctx: str | None) -> str:
        if isinstance(x, ir.Col):
            return x.name
        if isinstance(x, ir.Lit):
            return _literal_token(x.value, col_ctx, stats, ctx)
        if isinstance(x, ir.Arith):
            return f"({walk(x.left, None)}{x.op}{walk(x.right, None)})"
        if isinstance(x, ir.Cmp):
            left_col = x.left.name if isinstance(x.left, ir.Col) else None
            right_col = x.right.name if isinstance(x.right, ir.Col) else None
            return f"({walk(x.left, right_col)}{x.op}{walk(x.right, left_col)})"
        if isinstance(x, ir.Logic):
            parts = sorted(walk(a, None) for a in x.args) if x.op != "not" else [
                walk(x.args[0], None)
            ]
            return f"{x.op}({','.join(parts)})"
        if isinstance(x, ir.IfExpr):
            return f"if({walk(x.cond, None)},{walk(x.then, None)},{walk(x.orelse, None)})"
        if isinstance(x, ir.SwitchExpr):
            cases = ",".join(
                f"{walk(c, None)}:{walk(v, None)}" for c, v in x.cases
            )
            return f"switch({cases};{walk(x.default, None)})"
        if isinstance(x, ir.Call):
            return f"{x.fn}({','.join(walk(a, None) for a in x.args)})"
        if isinstance(x, ir.MLExpr):
            args = ",".join(walk(a, None) for a in x.args)
            return f"{ml_of_graph[x.graph_id]}({args})"
        raise CrossplanError(f"unknown expression {x!r}")

    return walk(e, None)


def init_label_query(
    node: ir.RelNode,
    ctx: LabelContext,
    stats: Mapping[str, ColumnStats],
    ml_of_graph: Mapping[str, str],
) -> str:
    op = node.op
    if isinstance(op, ir.TableScan):
        return f"scan|{op.table}"
    if isinstance(op, ir.Filter):
        return f"filter|{expr_label(op.pred, ctx, stats, ml_of_graph)}"
    if isinstance(op, ir.Project):
        outs = ",".join(
            f"{n}={expr_label(e, ctx, stats, ml_of_graph)}" for n, e in op.outputs
        )
        return f"project|{outs}"
    if isinstance(op, ir.HashJoin):
        keys = ",".join(f"{l}={r}" for l, r in zip(op.left_keys, op.right_keys))
        return f"hash_join|{keys}"
    if isinstance(op, ir.CrossJoin):
        return "cross_join"
    if isinstance(op, ir.Aggregate):
        aggs = ",".join(
            f"{s.name}={s.fn}({expr_label(s.arg, ctx, stats, ml_of_graph) if s.arg is not None else '*'})"
            for s in op.aggs
        )
        return f"aggregate|{','.join(op.group_keys)}|{aggs}"
    if isinstance(op, ir.Union):
        return "union"
    if isinstance(op, ir.Expand):
        return f"expand|{op.name}={expr_label(op.expr, ctx, stats, ml_of_graph)}"
    raise CrossplanError(f"unknown operator {op!r}")


def embed_plan(plan: ir.Plan, ctx: LabelContext, catalog: Catalog) -> FeatureVector:
    """Two-stage plan embedding: per-graph features feed shared model
    labels, then the relational DAG is embedded. Deterministic given the
    context state; independent of node-id assignment."""
    ml_of_graph = {
        gid: model_label(graph_features(plan.graphs[gid], ctx), ctx)
        for gid in sorted(plan.graphs)
    }
    col_stats = cost.propagate_stats(plan, catalog)
    init = {}
    children = {}
    for nid, node in plan.rels.items():
        input_stats = col_stats[node.inputs[0]] if node.inputs else {}
        init[nid] = init_label_query(node, ctx, input_stats, ml_of_graph)
        children[nid] = node.inputs
    return wl_features(list(plan.rels), children, init, ctx.wl_iterations)


# ---------------------------------------------------------------------------
# flat cosine index


class NodeIndex:
    """Exhaustive-scan nearest-neighbor index over frozen feature vectors."""

    def __init__(self, match_threshold: float = 0.95):
        if not (0 < match_threshold <= 1):
            raise CrossplanError("match threshold must be in (0, 1]")
        self.match_threshold = match_threshold
        self.entries: list[tuple[FeatureVector, object]] = []

    def insert(self, fv: FeatureVector, ref) -> None:
        self.entries.append((fv, ref))

    def query(self, fv: FeatureVector):
        """Best entry by cosine, or None when below the match threshold."""
        best, best_sim = None, -1.0
        for stored, ref in self.entries:
            s = similarity(stored, fv)
            if s > best_sim:
                best, best_sim = ref, s
        if best is None or best_sim < self.match_threshold:
            return None
        return best, best_sim

    def __len__(self):
        return len(self.entries)

    def to_jsonl(self, ref_to_doc=lambda r: r) -> str:
        lines = []
        for fv, ref in self.entries:
            lines.append(
                json.dumps(
                    {"vector": fv.as_dict(), "ref": ref_to_doc(ref)},
                    sort_keys=True,
                )
            )
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_jsonl(cls, text: str, match_threshold: float = 0.95, ref_from_doc=lambda r: r):
        idx = cls(match_threshold)
        for line in text.splitlines():
            if not line.strip():
                continue
            doc = json.loads(line)
            fv = FeatureVector(tuple(sorted(doc["vector"].items())))
            idx.insert(fv, ref_from_doc(doc["ref"]))
        return idx
