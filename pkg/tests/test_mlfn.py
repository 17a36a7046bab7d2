import numpy as np
import pytest

from crossplan import mlfn
from crossplan.errors import (
    DegenerateScale,
    EmptyForest,
    IndexOutOfRange,
    ShapeMismatch,
)
from helpers import build_catalog, two_tower_graph


def test_matmul_identity():
    y = mlfn.matmul(np.array([[1.0, 2.0]]), np.eye(2))
    assert np.array_equal(y, [[1.0, 2.0]])


def test_matmul_hand_dot():
    y = mlfn.matmul(np.array([[1.0, 1.0]]), np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(y, [[4.0, 6.0]])


def test_matmul_shape_error():
    with pytest.raises(ShapeMismatch):
        mlfn.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_kernels_agree_200_random_shapes():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n, k, m = rng.integers(1, 20, size=3)
        x = rng.normal(size=(n, k))
        w = rng.normal(size=(k, m))
        ref = mlfn.matmul(x, w, "naive")
        for kernel in ("blocked", "transposed_b"):
            out = mlfn.matmul(x, w, kernel)
            assert np.allclose(out, ref, rtol=1e-9, atol=1e-12), kernel


def test_matadd():
    assert np.array_equal(
        mlfn.matadd_broadcast(np.array([[1.0, 2.0]]), np.zeros(2)), [[1.0, 2.0]]
    )
    assert np.array_equal(
        mlfn.matadd_broadcast(np.array([[1.0, 2.0]]), np.array([10.0, 20.0])),
        [[11.0, 22.0]],
    )
    with pytest.raises(ShapeMismatch):
        mlfn.matadd_broadcast(np.ones((1, 2)), np.ones(3))


def test_activations():
    assert np.array_equal(
        mlfn.activation("relu", np.array([[-1.0, 2.0]])), [[0.0, 2.0]]
    )
    assert np.allclose(
        mlfn.activation("softmax", np.array([[0.0, 0.0]])), [[0.5, 0.5]]
    )
    assert mlfn.activation("sigmoid", np.array([[0.0]]))[0, 0] == 0.5


def test_softmax_rows_normalized():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(50, 7)) * 10
    s = mlfn.activation("softmax", x)
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-9)


def test_argmax_tie_lowest_index():
    out = mlfn.activation("argmax", np.array([[3.0, 3.0, 1.0]]))
    assert out[0, 0] == 0.0


def test_binarize():
    out = mlfn.activation("binarize", np.array([[-1.0, 0.5]]), threshold=0.0)
    assert np.array_equal(out, [[0.0, 1.0]])


def test_cos_sim():
    one = mlfn.cos_sim(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]))
    assert one[0, 0] == pytest.approx(1.0)
    zero = mlfn.cos_sim(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]))
    assert zero[0, 0] == pytest.approx(0.0)
    diag = mlfn.cos_sim(np.array([[1.0, 1.0]]), np.array([[1.0, 0.0]]))
    assert diag[0, 0] == pytest.approx(1.0 / np.sqrt(2.0))


def test_cos_sim_zero_norm_is_zero():
    out = mlfn.cos_sim(np.zeros((1, 3)), np.ones((1, 3)))
    assert out[0, 0] == 0.0


# ---------------------------------------------------------------------------
# forests


def _stump(feature, threshold, left_val, right_val):
    return mlfn.Tree(
        (feature, -1, -1), (threshold, 0.0, 0.0), (1, -1, -1), (2, -1, -1),
        (0.0, left_val, right_val),
    )


def test_forest_sigmoid_of_sum():
    f = mlfn.Forest((_stump(0, 0.5, 1.0, -1.0),))
    out = mlfn.forest_predict(f, np.array([[0.2]]), "sigmoid_sum")
    assert out[0, 0] == pytest.approx(1.0 / (1.0 + np.exp(-1.0)), abs=1e-4)
    assert out[0, 0] == pytest.approx(0.7311, abs=1e-4)


def test_forest_majority_matches_single_stump():
    one = mlfn.Forest((_stump(0, 0.5, 1.0, -1.0),))
    three = mlfn.Forest(tuple(_stump(0, 0.5, 1.0, -1.0) for _ in range(3)))
    x = np.array([[0.2], [0.9]])
    assert np.array_equal(
        mlfn.forest_predict(one, x, "majority"),
        mlfn.forest_predict(three, x, "majority"),
    )


def test_tree_threshold_routes_right():
    # strict less-than: a value equal to the threshold goes right
    f = mlfn.Forest((_stump(0, 0.5, -1.0, 1.0),))
    out = mlfn.forest_predict(f, np.array([[0.5]]), "majority")
    assert out[0, 0] == 1.0


def test_forest_errors():
    with pytest.raises(EmptyForest):
        mlfn.forest_predict(mlfn.Forest(()), np.ones((1, 2)), "majority")
    f = mlfn.Forest((_stump(3, 0.5, 1.0, -1.0),))
    with pytest.raises(ShapeMismatch):
        mlfn.forest_predict(f, np.ones((1, 2)), "majority")


def test_tree_doc_round_trip():
    t = _stump(1, 0.25, 2.0, -0.5)
    assert mlfn.Tree.from_doc(t.to_doc()) == t


# ---------------------------------------------------------------------------
# lookup / scaling / layers


def test_embed_lookup():
    table = np.eye(2)
    assert np.array_equal(mlfn.embed_lookup(table, np.array([[1]])), [[0.0, 1.0]])
    assert np.array_equal(mlfn.embed_lookup(table, np.array([[0]])), [[1.0, 0.0]])
    with pytest.raises(IndexOutOfRange):
        mlfn.embed_lookup(table, np.array([[2]]))


def test_scale():
    x = np.array([[2.0, 4.0]])
    out = mlfn.scale("standard", x, x[0], np.ones(2))
    assert np.array_equal(out, [[0.0, 0.0]])
    out = mlfn.scale("minmax", np.array([[0.0], [10.0]]), np.zeros(1), np.full(1, 10.0))
    assert np.array_equal(out, [[0.0], [1.0]])
    with pytest.raises(DegenerateScale):
        mlfn.scale("standard", x, np.zeros(2), np.zeros(2))


def test_dense_layer_identity():
    x = np.array([[-1.0, 2.0]])
    out = mlfn.dense_layer(x, np.eye(2), np.zeros(2), "relu")
    assert np.array_equal(out, [[0.0, 2.0]])


def test_dense_layer_bit_equal_pipeline_200():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n, k, m = rng.integers(1, 9, size=3)
        x = rng.normal(size=(n, k))
        w = rng.normal(size=(k, m))
        b = rng.normal(size=m)
        act = str(rng.choice(["relu", "sigmoid", "tanh"]))
        fused = mlfn.dense_layer(x, w, b, act)
        pipeline = mlfn.activation(act, mlfn.matadd_broadcast(mlfn.matmul(x, w), b))
        assert np.array_equal(fused, pipeline)


def test_dist_to_centroids():
    c = np.array([[1.0, 2.0], [0.0, 0.0]])
    out = mlfn.dist_to_centroids(np.array([[1.0, 2.0]]), c)
    assert out[0, 0] == 0.0
    out = mlfn.dist_to_centroids(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]))
    assert out[0, 0] == pytest.approx(5.0)
    with pytest.raises(ShapeMismatch):
        mlfn.dist_to_centroids(np.ones((1, 2)), np.zeros((0, 2)))


# ---------------------------------------------------------------------------
# graphs


def test_graph_execute_two_tower_in_range():
    cat = build_catalog()
    g = cat.model("two_tower")
    rng = np.random.default_rng(3)
    out = mlfn.graph_execute(
        g, {"u": rng.normal(size=(1, 8)), "m": rng.normal(size=(1, 6))}, cat
    )
    score = next(iter(out.values()))
    assert score.shape == (1, 1)
    assert -1.0 <= score[0, 0] <= 1.0


def test_graph_execute_pure():
    cat = build_catalog()
    g = cat.model("two_tower")
    rng = np.random.default_rng(4)
    inputs = {"u": rng.normal(size=(5, 8)), "m": rng.normal(size=(5, 6))}
    a = mlfn.graph_execute(g, inputs, cat)
    b = mlfn.graph_execute(g, inputs, cat)
    assert np.array_equal(next(iter(a.values())), next(iter(b.values())))


def test_graph_execute_single_relu():
    from crossplan.catalog import Catalog
    from crossplan.ir import build_graph

    cat = Catalog()
    g = build_graph([("x", (3,))], {"r": {"kind": "relu"}}, [("x", "r", 0)], ["r"], cat)
    x = np.array([[-1.0, 0.0, 2.0]])
    out = mlfn.graph_execute(g, {"x": x}, cat)["r"]
    assert np.array_equal(out, mlfn.activation("relu", x))


def test_graph_execute_mlp_matches_manual_composition():
    from crossplan.catalog import Catalog
    from crossplan.ir import build_graph

    rng = np.random.default_rng(5)
    cat = Catalog()
    w0, b0 = rng.normal(size=(4, 6)), rng.normal(size=6)
    w1, b1 = rng.normal(size=(6, 2)), rng.normal(size=2)
    cat.params.update({"m.w0": w0, "m.b0": b0, "m.w1": w1, "m.b1": b1})
    g = build_graph(
        [("x", (4,))],
        {
            "l0": {"kind": "dense_layer", "weight": "m.w0", "bias": "m.b0", "act": "relu"},
            "l1": {"kind": "dense_layer", "weight": "m.w1", "bias": "m.b1", "act": "sigmoid"},
        },
        [("x", "l0", 0), ("l0", "l1", 0)],
        ["l1"],
        cat,
    )
    x = rng.normal(size=(7, 4))
    out = mlfn.graph_execute(g, {"x": x}, cat)["l1"]
    manual = mlfn.dense_layer(mlfn.dense_layer(x, w0, b0, "relu"), w1, b1, "sigmoid")
    assert np.array_equal(out, manual)


def test_graph_missing_input():
    cat = build_catalog()
    with pytest.raises(mlfn.MissingInput):
        mlfn.graph_execute(cat.model("two_tower"), {"u": np.ones((1, 8))}, cat)


def test_graph_input_shape_checked():
    cat = build_catalog()
    with pytest.raises(ShapeMismatch):
        mlfn.graph_execute(
            cat.model("two_tower"),
            {"u": np.ones((1, 9)), "m": np.ones((1, 6))},
            cat,
        )


# ---------------------------------------------------------------------------
# flops


def test_matmul_flops_formula():
    node = mlfn.MLNode("matmul", ((2,),), (3,))
    assert mlfn.node_flops(node) == 12  # 2 * k * m


def test_identity_graph_zero_flops():
    from crossplan.catalog import Catalog
    from crossplan.ir import build_graph

    cat = Catalog()
    g = build_graph([("x", (3,))], {"d": {"kind": "dropout"}}, [("x", "d", 0)], ["d"], cat)
    assert mlfn.graph_flops(g) == 0


def test_fusion_preserves_total_flops():
    # matmul + matadd + act == dense layer, summed
    k, m = 5, 4
    parts = (
        mlfn.node_flops(mlfn.MLNode("matmul", ((k,),), (m,)))
        + mlfn.node_flops(mlfn.MLNode("matadd", ((m,),), (m,)))
        + mlfn.node_flops(mlfn.MLNode("relu", ((m,),), (m,)))
    )
    fused = mlfn.node_flops(mlfn.MLNode("dense_layer", ((k,),), (m,), act="relu"))
    assert parts == fused


def test_flop_contracts():
    assert mlfn.node_flops(mlfn.MLNode("softmax", ((4,),), (4,))) == 20
    assert mlfn.node_flops(mlfn.MLNode("cos_sim", ((8,), (8,)), (1,))) == 48
    assert mlfn.node_flops(mlfn.MLNode("embed", ((1,),), (16,))) == 16
