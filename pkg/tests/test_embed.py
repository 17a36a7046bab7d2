import numpy as np
import pytest

from crossplan import embed, ir
from crossplan.embed import (
    FeatureVector,
    LabelContext,
    NodeIndex,
    graph_features,
    init_label_model,
    model_label,
    similarity,
    wl_features,
)
from crossplan.errors import CyclicGraph
from crossplan.ir import Cmp, Col, Filter, Lit, Plan, Project, RelNode, TableScan
from helpers import build_catalog, two_tower_plan


def test_refinement_history_single_node():
    # one node, two iterations: the initial label plus two refreshed ones
    fv = wl_features(["a"], {"a": ()}, {"a": "x"}, iterations=2)
    assert len(fv.entries) == 3
    total_sq = sum(v * v for _, v in fv.entries)
    assert total_sq == pytest.approx(1.0, abs=1e-12)


def test_hand_traced_star_counts():
    """Star a -> (b, c) with identical leaf labels: the two leaves share
    every history label (count 2 each), the root's labels stay unique."""
    fv = wl_features(
        ["a", "b", "c"], {"a": ("b", "c"), "b": (), "c": ()},
        {"a": "root", "b": "leaf", "c": "leaf"}, iterations=2,
    )
    counts = sorted(round(v, 6) for _, v in fv.entries)
    norm = np.sqrt(3 * 1 + 3 * 4)  # three singleton labels, three doubled
    expected = sorted([1 / norm] * 3 + [2 / norm] * 3)
    assert counts == pytest.approx(expected)


def test_isomorphic_graphs_similarity_one():
    kids_1 = {"a": ("b",), "b": ()}
    kids_2 = {"x": ("y",), "y": ()}
    f1 = wl_features(["a", "b"], kids_1, {"a": "p", "b": "q"}, 3)
    f2 = wl_features(["x", "y"], kids_2, {"x": "p", "y": "q"}, 3)
    assert similarity(f1, f2) == pytest.approx(1.0)


def test_leaf_label_discrimination():
    f1 = wl_features(["a", "b"], {"a": ("b",), "b": ()}, {"a": "p", "b": "q"}, 3)
    f2 = wl_features(["a", "c"], {"a": ("c",), "c": ()}, {"a": "p", "c": "r"}, 3)
    assert similarity(f1, f2) < 1.0


def test_cycle_detected():
    with pytest.raises(CyclicGraph):
        wl_features(["a", "b"], {"a": ("b",), "b": ("a",)}, {"a": "x", "b": "x"}, 1)


# ---------------------------------------------------------------------------
# flop-anchored model labels


def test_same_flops_same_label():
    ctx = LabelContext()
    assert init_label_model("matmul", 1000, ctx) == init_label_model("matmul", 1000, ctx)


def test_flops_within_rho_share_label():
    ctx = LabelContext(rho=0.10)
    a = init_label_model("matmul", 1000, ctx)
    assert init_label_model("matmul", 1050, ctx) == a


def test_flops_beyond_rho_get_new_label():
    ctx = LabelContext(rho=0.10)
    a = init_label_model("matmul", 1000, ctx)
    assert init_label_model("matmul", 2000, ctx) != a


def test_rho_boundary_exact():
    ctx = LabelContext(rho=0.10)
    a = init_label_model("matmul", 1000, ctx)
    assert init_label_model("matmul", 1100, ctx) == a  # |1100-1000| == 100
    assert init_label_model("matmul", 1101, ctx) != a


def test_kind_separates_labels():
    ctx = LabelContext()
    assert init_label_model("matmul", 100, ctx) != init_label_model("matadd", 100, ctx)


# ---------------------------------------------------------------------------
# plan embedding


def test_embed_plan_node_id_permutation_invariant():
    cat = build_catalog()
    plan = two_tower_plan(cat, genre_filter=1)
    rng = np.random.default_rng(0)
    ctx = LabelContext()
    base = embed.embed_plan(plan, ctx, cat)
    ids = list(plan.rels)
    for _ in range(100):
        perm = list(rng.permutation(ids))
        mapping = dict(zip(ids, perm))
        remapped = Plan(
            {
                mapping[nid]: RelNode(n.op, tuple(mapping[c] for c in n.inputs))
                for nid, n in plan.rels.items()
            },
            mapping[plan.root],
            dict(plan.graphs),
        )
        fv = embed.embed_plan(remapped, LabelContext(), cat)
        assert similarity(base, fv) == pytest.approx(1.0, abs=1e-12)


def test_literal_within_bucket_same_embedding():
    cat = build_catalog(n_users=64)
    ctx = LabelContext()

    def filter_plan(lit):
        return Plan(
            {
                0: RelNode(TableScan("users")),
                1: RelNode(Filter(Cmp("le", Col("age"), Lit(lit))), (0,)),
                2: RelNode(Project((("user_id", Col("user_id")),)), (1,)),
            },
            2,
        )

    stats = cat.table_stats("users").column("age")
    width = (stats.max - stats.min) / ctx.filter_buckets
    lo = stats.min + 0.1 * width
    hi = stats.min + 0.8 * width
    far = stats.min + 3.5 * width
    a = embed.embed_plan(filter_plan(lo), ctx, cat)
    b = embed.embed_plan(filter_plan(hi), ctx, cat)
    c = embed.embed_plan(filter_plan(far), ctx, cat)
    assert similarity(a, b) == pytest.approx(1.0)
    assert similarity(a, c) < 1.0


def test_bigger_model_lowers_similarity():
    cat = build_catalog()
    plan = two_tower_plan(cat)
    ctx = LabelContext()
    base = embed.embed_plan(plan, ctx, cat)
    import dataclasses

    g = plan.graphs["g_tt"]
    scaled_nodes = {
        nid: dataclasses.replace(n, flops=n.flops * 10) for nid, n in g.nodes.items()
    }
    bigger = Plan(dict(plan.rels), plan.root, {"g_tt": dataclasses.replace(g, nodes=scaled_nodes)})
    fv = embed.embed_plan(bigger, ctx, cat)
    assert similarity(base, fv) < 0.9


def test_identical_graphs_reuse_model_label():
    cat = build_catalog()
    ctx = LabelContext()
    g = cat.model("two_tower")
    l1 = model_label(graph_features(g, ctx), ctx)
    l2 = model_label(graph_features(g, ctx), ctx)
    assert l1 == l2


def test_same_table_scans_same_label():
    cat = build_catalog()
    ctx = LabelContext()
    n1 = RelNode(TableScan("users"))
    n2 = RelNode(TableScan("users"))
    a = embed.init_label_query(n1, ctx, {}, {})
    b = embed.init_label_query(n2, ctx, {}, {})
    assert a == b
    c = embed.init_label_query(RelNode(TableScan("movies")), ctx, {}, {})
    assert a != c


def test_monotone_edit_chain():
    cat = build_catalog()
    ctx = LabelContext()
    p0 = two_tower_plan(cat)
    base = embed.embed_plan(p0, ctx, cat)
    # progressively larger structural edits
    p1 = Plan(dict(p0.rels), p0.root, dict(p0.graphs))
    nid = p1.next_id()
    p1.rels[nid] = RelNode(Filter(Cmp("gt", Col("score"), Lit(0.0))), (p1.root,))
    p1.root = nid
    p2 = Plan(dict(p1.rels), p1.root, dict(p1.graphs))
    nid2 = p2.next_id()
    p2.rels[nid2] = RelNode(Filter(Cmp("lt", Col("score"), Lit(0.9))), (p2.root,))
    p2.root = nid2
    p3 = Plan(dict(p2.rels), p2.root, dict(p2.graphs))
    nid3 = p3.next_id()
    p3.rels[nid3] = RelNode(
        ir.Aggregate(("user_id",), (ir.AggSpec("n", "count"),)), (p3.root,)
    )
    p3.root = nid3
    sims = [
        similarity(base, embed.embed_plan(p, LabelContext(), cat))
        for p in (p1, p2, p3)
    ]
    assert sims[0] >= sims[1] >= sims[2]
    assert sims[0] < 1.0


# ---------------------------------------------------------------------------
# similarity + index


def test_similarity_extremes():
    v = FeatureVector.from_counts({"a": 1, "b": 1})
    assert similarity(v, v) == pytest.approx(1.0)
    w = FeatureVector.from_counts({"c": 2})
    assert similarity(v, w) == 0.0
    half = FeatureVector.from_counts({"a": 1, "c": 1})
    assert similarity(v, half) == pytest.approx(0.5)


def test_index_empty_returns_none():
    idx = NodeIndex(0.95)
    assert idx.query(FeatureVector.from_counts({"a": 1})) is None


def test_index_insert_query_exact():
    idx = NodeIndex(0.95)
    v = FeatureVector.from_counts({"a": 1, "b": 3})
    idx.insert(v, "ref")
    ref, sim = idx.query(v)
    assert ref == "ref"
    assert sim == pytest.approx(1.0)


def test_index_threshold():
    idx = NodeIndex(0.95)
    idx.insert(FeatureVector.from_counts({"a": 1}), "ref")
    assert idx.query(FeatureVector.from_counts({"a": 1, "b": 5})) is None


def test_index_argmax_matches_full_scan():
    rng = np.random.default_rng(2)
    idx = NodeIndex(0.01)
    vecs = []
    labels = "abcdefgh"
    for i in range(40):
        counts = {labels[j]: float(rng.integers(1, 6)) for j in rng.choice(8, size=3, replace=False)}
        v = FeatureVector.from_counts(counts)
        vecs.append(v)
        idx.insert(v, i)
    for _ in range(25):
        counts = {labels[j]: float(rng.integers(1, 6)) for j in rng.choice(8, size=3, replace=False)}
        q = FeatureVector.from_counts(counts)
        ref, sim = idx.query(q)
        # independent comparator
        sims = [similarity(q, v) for v in vecs]
        assert sim == pytest.approx(max(sims))
        assert sims[ref] == pytest.approx(max(sims))


def test_index_jsonl_round_trip():
    idx = NodeIndex(0.9)
    idx.insert(FeatureVector.from_counts({"a": 1, "b": 2}), 7)
    idx.insert(FeatureVector.from_counts({"c": 1}), 9)
    text = idx.to_jsonl()
    back = NodeIndex.from_jsonl(text, 0.9)
    assert len(back) == 2
    ref, sim = back.query(FeatureVector.from_counts({"c": 5}))
    assert ref == 9 and sim == pytest.approx(1.0)
