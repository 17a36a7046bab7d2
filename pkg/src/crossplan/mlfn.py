"""Batched ML primitives and computation-graph execution.

A batch is a float64 ndarray of shape ``(rows, *per_row_shape)``; every
function here is pure and operates on whole batches. All arithmetic is
float64 so that rewrite-equivalence tests can use tight tolerances, and the
blocked matmul kernel fixes its summation order for determinism.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    CrossplanError,
    CyclicGraph,
    DegenerateScale,
    EmptyForest,
    IndexOutOfRange,
    MissingInput,
    ShapeMismatch,
    UnsupportedFn,
)

MATMUL_KERNELS = ("naive", "blocked", "transposed_b")
_BLOCK = 64


def matmul(x: np.ndarray, w: np.ndarray, kernel: str = "naive") -> np.ndarray:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"matmul {x.shape} x {w.shape}")
    if kernel == "naive":
        return x @ w
    if kernel == "blocked":
        n, k = x.shape
        m = w.shape[1]
        out = np.zeros((n, m), dtype=np.float64)
        for start in range(0, k, _BLOCK):
            stop = min(start + _BLOCK, k)
            out += x[:, start:stop] @ w[start:stop, :]
        return out
    if kernel == "transposed_b":
        wt = np.ascontiguousarray(w.T)
        return x @ wt.T
    raise CrossplanError(f"unknown matmul kernel {kernel!r}")


def matadd_broadcast(y: np.ndarray, b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if y.ndim != 2 or y.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matadd {y.shape} + {b.shape}")
    return y + b


def activation(kind: str, x: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    if kind == "tanh":
        return np.tanh(x)
    if kind == "softmax":
        if x.ndim != 2 or x.shape[1] < 1:
            raise ShapeMismatch(f"softmax needs (n, d>=1), got {x.shape}")
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)
    if kind == "argmax":
        if x.ndim != 2 or x.shape[1] < 1:
            raise ShapeMismatch(f"argmax needs (n, d>=1), got {x.shape}")
        # ties broken by lowest index (numpy argmax guarantees this)
        return x.argmax(axis=1).astype(np.float64).reshape(-1, 1)
    if kind == "binarize":
        return (x > threshold).astype(np.float64)
    if kind == "none":
        return x
    raise CrossplanError(f"unknown activation {kind!r}")


def cos_sim(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if u.shape != v.shape or u.ndim != 2:
        raise ShapeMismatch(f"cos_sim {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    dot = np.einsum("ij,ij->i", u, v)
    denom = nu * nv
    out = np.zeros_like(dot)
    ok = denom > 0.0
    out[ok] = dot[ok] / denom[ok]  # zero-norm operand yields 0, not NaN
    return out.reshape(-1, 1)


def embed_lookup(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    idx = np.asarray(ids).reshape(-1)
    if not np.all(np.equal(np.mod(idx, 1), 0)):
        raise IndexOutOfRange("embedding ids must be integral")
    idx = idx.astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexOutOfRange(
            f"embedding id out of range [0, {table.shape[0]})"
        )
    return table[idx]


def scale(kind: str, x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """standard: (x - a) / b with b = sigma; minmax: (x - a) / (b - a)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if x.shape[1] != a.shape[0] or x.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"scale {x.shape} with params {a.shape}/{b.shape}")
    if kind == "standard":
        if np.any(b <= 0):
            raise DegenerateScale("sigma must be > 0")
        return (x - a) / b
    if kind == "minmax":
        if np.any(b <= a):
            raise DegenerateScale("hi must be > lo")
        return (x - a) / (b - a)
    raise CrossplanError(f"unknown scale kind {kind!r}")


def dense_layer(x: np.ndarray, w: np.ndarray, b: np.ndarray, act: str,
                kernel: str = "naive") -> np.ndarray:
    # defined as the exact unfused pipeline so fusion is bit-identical
    return activation(act, matadd_broadcast(matmul(x, w, kernel), b))


def dist_to_centroids(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    if centroids.ndim != 2 or centroids.shape[0] < 1:
        raise ShapeMismatch(f"centroid matrix must be (c>=1, d), got {centroids.shape}")
    if x.shape[1] != centroids.shape[1]:
        raise ShapeMismatch(f"dist {x.shape} vs centroids {centroids.shape}")
    diff = x[:, None, :] - centroids[None, :, :]
    return np.sqrt(np.einsum("ncd,ncd->nc", diff, diff))


# ---------------------------------------------------------------------------
# decision forests


@dataclass(frozen=True)
class Tree:
    """Binary decision tree in array form; node 0 is the root and
    feature < 0 marks a leaf whose prediction is in ``value``.

    Routing is strictly ``x[feature] < threshold`` goes left; a value equal
    to the threshold routes right. Tensor-relational rewrites rely on this.
    """

    feature: tuple[int, ...]
    threshold: tuple[float, ...]
    left: tuple[int, ...]
    right: tuple[int, ...]
    value: tuple[float, ...]

    def depth(self) -> int:
        def walk(i, d):
            if self.feature[i] < 0:
                return d
            return max(walk(self.left[i], d + 1), walk(self.right[i], d + 1))

        return walk(0, 0)

    def max_feature(self) -> int:
        return max((f for f in self.feature if f >= 0), default=-1)

    def predict_batch(self, x: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        val = np.asarray(self.value)
        idx = np.zeros(n, dtype=np.int64)
        for _ in range(self.depth()):
            at_leaf = feat[idx] < 0
            f = np.where(at_leaf, 0, feat[idx])
            go_left = x[np.arange(n), f] < thr[idx]
            nxt = np.where(go_left, left[idx], right[idx])
            idx = np.where(at_leaf, idx, nxt)
        return val[idx]

    def to_doc(self) -> dict:
        nodes = []
        for i in range(len(self.feature)):
            if self.feature[i] < 0:
                nodes.append({"value": self.value[i]})
            else:
                nodes.append({
                    "feature": self.feature[i], "threshold": self.threshold[i],
                    "left": self.left[i], "right": self.right[i],
                })
        return {"nodes": nodes}

    @classmethod
    def from_doc(cls, doc: dict) -> "Tree":
        feature, threshold, left, right, value = [], [], [], [], []
        for node in doc["nodes"]:
            if "value" in node:
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                value.append(float(node["value"]))
            else:
                feature.append(int(node["feature"]))
                threshold.append(float(node["threshold"]))
                left.append(int(node["left"]))
                right.append(int(node["right"]))
                value.append(0.0)
        return cls(tuple(feature), tuple(threshold), tuple(left), tuple(right), tuple(value))


@dataclass(frozen=True)
class Forest:
    trees: tuple[Tree, ...]

    def max_feature(self) -> int:
        return max(t.max_feature() for t in self.trees)

    def total_depth(self) -> int:
        return sum(t.depth() for t in self.trees)

    def to_doc(self) -> dict:
        return {"trees": [t.to_doc() for t in self.trees]}

    @classmethod
    def from_doc(cls, doc: dict) -> "Forest":
        return cls(tuple(Tree.from_doc(t) for t in doc["trees"]))


FOREST_AGGS = ("sigmoid_sum", "majority")


def forest_predict(forest: Forest, x: np.ndarray, agg: str) -> np.ndarray:
    if not forest.trees:
        raise EmptyForest("forest has no trees")
    if x.shape[1] <= forest.max_feature():
        raise ShapeMismatch(
            f"input dim {x.shape[1]} does not cover feature {forest.max_feature()}"
        )
    preds = np.stack([t.predict_batch(x) for t in forest.trees], axis=1)
    if agg == "sigmoid_sum":
        return activation("sigmoid", preds.sum(axis=1).reshape(-1, 1))
    if agg == "majority":
        votes = np.where(preds > 0.0, 1.0, -1.0).sum(axis=1)
        return np.where(votes > 0.0, 1.0, -1.0).reshape(-1, 1)
    raise CrossplanError(f"unknown forest aggregation {agg!r}")


# ---------------------------------------------------------------------------
# computation graphs


@dataclass(frozen=True)
class MLNode:
    """One atomic ML function instance with resolved shapes and flops."""

    kind: str
    input_shapes: tuple[tuple[int, ...], ...] = ()
    output_shape: tuple[int, ...] = ()
    flops: int = 0
    weight_ref: str | None = None
    bias_ref: str | None = None
    act: str | None = None
    agg: str | None = None
    rate: float | None = None
    threshold: float | None = None
    kernel: str = "naive"

    def param_refs(self) -> tuple[str, ...]:
        return tuple(r for r in (self.weight_ref, self.bias_ref) if r)


@dataclass(frozen=True)
class MLGraph:
    """DAG of atomic ML functions. ``edges`` are (src, dst, port) where src
    is a node id or a graph input name; ``outputs`` name producing nodes."""

    nodes: Mapping[str, MLNode]
    edges: tuple[tuple[str, str, int], ...]
    inputs: tuple[tuple[str, tuple[int, ...]], ...]
    outputs: tuple[tuple[str, tuple[int, ...]], ...]

    def input_names(self) -> list[str]:
        return [n for n, _ in self.inputs]

    def node_inputs(self, node_id: str) -> list[str]:
        srcs = sorted(
            ((port, src) for src, dst, port in self.edges if dst == node_id)
        )
        return [s for _, s in srcs]

    def topo_order(self) -> list[str]:
        indeg = {nid: 0 for nid in self.nodes}
        out_edges: dict[str, list[str]] = {}
        for src, dst, _ in self.edges:
            if src in self.nodes:
                indeg[dst] += 1
                out_edges.setdefault(src, []).append(dst)
        ready = sorted(nid for nid, d in indeg.items() if d == 0)
        order = []
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for dst in sorted(out_edges.get(nid, [])):
                indeg[dst] -= 1
                if indeg[dst] == 0:
                    ready.append(dst)
            ready.sort()
        if len(order) != len(self.nodes):
            raise CyclicGraph("ml graph has a cycle")
        return order


def _act_flops(act: str | None, m: int) -> int:
    if act in (None, "none"):
        return 0
    return 5 * m if act == "softmax" else m


def node_flops(node: MLNode, catalog=None) -> int:
    """Per-input-row flop count contract for each node kind."""
    kind = node.kind
    out = int(np.prod(node.output_shape)) if node.output_shape else 0
    if kind == "matmul":
        k = node.input_shapes[0][-1]
        return 2 * k * out
    if kind == "matadd":
        return out
    if kind in ("relu", "sigmoid", "tanh", "argmax", "binarize"):
        return int(np.prod(node.input_shapes[0]))
    if kind == "softmax":
        return 5 * int(np.prod(node.input_shapes[0]))
    if kind == "cos_sim":
        return 6 * node.input_shapes[0][-1]
    if kind in ("concat", "dropout"):
        return 0
    if kind == "embed":
        return out
    if kind in ("decision_forest", "decision_tree"):
        if catalog is None or node.weight_ref is None:
            return node.flops
        obj = catalog.forest(node.weight_ref)
        return obj.total_depth() if isinstance(obj, Forest) else obj.depth()
    if kind in ("standard_scale", "minmax_scale"):
        return 2 * int(np.prod(node.input_shapes[0]))
    if kind == "dense_layer":
        k = node.input_shapes[0][-1]
        return 2 * k * out + out + _act_flops(node.act, out)
    if kind == "dist_centroids":
        d = node.input_shapes[0][-1]
        return 3 * d * out
    if kind == "conv":
        raise UnsupportedFn("conv is declared but not executable")
    raise CrossplanError(f"unknown ml function kind {kind!r}")


def graph_flops(graph: MLGraph, catalog=None) -> int:
    """Total flops per input row, summed over all nodes."""
    return sum(node_flops(n, catalog) for n in graph.nodes.values())


def _eval_node(node: MLNode, args: list[np.ndarray], catalog) -> np.ndarray:
    kind = node.kind
    if kind == "matmul":
        return matmul(args[0], catalog.param(node.weight_ref), node.kernel)
    if kind == "matadd":
        if node.bias_ref:
            return matadd_broadcast(args[0], catalog.param(node.bias_ref))
        if args[0].shape != args[1].shape:
            raise ShapeMismatch(f"matadd {args[0].shape} + {args[1].shape}")
        return args[0] + args[1]
    if kind in ("relu", "sigmoid", "tanh", "softmax", "argmax"):
        return activation(kind, args[0])
    if kind == "binarize":
        return activation("binarize", args[0], node.threshold or 0.0)
    if kind == "cos_sim":
        return cos_sim(args[0], args[1])
    if kind == "concat":
        return np.concatenate(args, axis=1)
    if kind == "dropout":
        return args[0]  # identity at inference
    if kind == "embed":
        return embed_lookup(catalog.param(node.weight_ref), args[0])
    if kind == "decision_forest":
        return forest_predict(catalog.forest(node.weight_ref), args[0], node.agg)
    if kind == "decision_tree":
        tree = catalog.forest(node.weight_ref)
        return tree.predict_batch(args[0]).reshape(-1, 1)
    if kind == "standard_scale":
        mu, sigma = catalog.param(node.weight_ref), catalog.param(node.bias_ref)
        return scale("standard", args[0], mu, sigma)
    if kind == "minmax_scale":
        lo, hi = catalog.param(node.weight_ref), catalog.param(node.bias_ref)
        return scale("minmax", args[0], lo, hi)
    if kind == "dense_layer":
        return dense_layer(
            args[0], catalog.param(node.weight_ref),
            catalog.param(node.bias_ref), node.act or "none", node.kernel,
        )
    if kind == "dist_centroids":
        return dist_to_centroids(args[0], catalog.param(node.weight_ref))
    if kind == "conv":
        raise UnsupportedFn("conv is declared but not executable")
    raise CrossplanError(f"unknown ml function kind {kind!r}")


def graph_execute(
    graph: MLGraph, inputs: Mapping[str, np.ndarray], catalog
) -> dict[str, np.ndarray]:
    """Deterministic topological evaluation; returns one batch per output."""
    values: dict[str, np.ndarray] = {}
    n_rows = None
    for name, shape in graph.inputs:
        if name not in inputs:
            raise MissingInput(f"graph input {name!r} not supplied")
        batch = np.asarray(inputs[name], dtype=np.float64)
        if batch.ndim == 1:
            batch = batch.reshape(-1, 1)
        if tuple(batch.shape[1:]) != tuple(shape):
            raise ShapeMismatch(
                f"input {name!r}: expected per-row shape {tuple(shape)}, got {tuple(batch.shape[1:])}"
            )
        if n_rows is None:
            n_rows = batch.shape[0]
        elif batch.shape[0] != n_rows:
            raise ShapeMismatch("graph inputs have differing row counts")
        values[name] = batch
    for nid in graph.topo_order():
        node = graph.nodes[nid]
        args = [values[s] for s in graph.node_inputs(nid)]
        values[nid] = _eval_node(node, args, catalog)
    return {name: values[name] for name, _ in graph.outputs}
