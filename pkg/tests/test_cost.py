import numpy as np
import pytest

from crossplan import cost, ir
from crossplan.catalog import Catalog
from crossplan.errors import NonPositive
from crossplan.ir import (
    Cmp,
    Col,
    CrossJoin,
    Filter,
    HashJoin,
    Lit,
    MLExpr,
    Plan,
    Project,
    RelNode,
    TableScan,
)
from crossplan.tables import FLOAT64, INT64, schema, table_create, vector
from helpers import build_catalog, two_tower_plan


def _tables_catalog(na, nb):
    cat = Catalog()
    cat.register_table(
        "a", table_create(schema([("ka", INT64), ("va", FLOAT64)]),
                          [[i, float(i)] for i in range(na)]),
    )
    cat.register_table(
        "b", table_create(schema([("kb", INT64), ("vb", FLOAT64)]),
                          [[i, float(i)] for i in range(nb)]),
    )
    return cat


def test_cardinality_cross_join():
    cat = _tables_catalog(10, 20)
    plan = Plan(
        {0: RelNode(TableScan("a")), 1: RelNode(TableScan("b")),
         2: RelNode(CrossJoin(), (0, 1))},
        2,
    )
    rows = cost.estimate_cardinality(plan, cat)
    assert rows[2] == 200


def test_cardinality_declared_filter_selectivity():
    cat = _tables_catalog(100, 1)
    plan = Plan(
        {0: RelNode(TableScan("a")),
         1: RelNode(Filter(Cmp("gt", Col("va"), Lit(0.0)), selectivity=0.5), (0,))},
        1,
    )
    rows = cost.estimate_cardinality(plan, cat)
    assert rows[1] == pytest.approx(50.0)


def test_cardinality_unique_key_join_exact():
    cat = _tables_catalog(100, 100)
    plan = Plan(
        {0: RelNode(TableScan("a")), 1: RelNode(TableScan("b")),
         2: RelNode(HashJoin(("ka",), ("kb",)), (0, 1))},
        2,
    )
    rows = cost.estimate_cardinality(plan, cat)
    # unique keys on both sides: exactly one match per row
    assert rows[2] == pytest.approx(100.0)
    from crossplan.executor import execute

    out, _ = execute(plan, cat)
    assert out.row_count == 100


def test_histogram_filter_selectivity_estimate():
    cat = _tables_catalog(100, 1)
    plan = Plan(
        {0: RelNode(TableScan("a")),
         1: RelNode(Filter(Cmp("le", Col("va"), Lit(49.0))), (0,))},
        1,
    )
    rows = cost.estimate_cardinality(plan, cat)
    assert rows[1] == pytest.approx(50.0, abs=100 / 32 + 1)


def test_scan_only_cost():
    cat = _tables_catalog(100, 1)
    plan = Plan({0: RelNode(TableScan("a"))}, 0)
    model = cost.default_cost_model()
    est = cost.estimate_cost(plan, cat, model)
    assert est.total == pytest.approx(100 * model.per_row["scan"])
    assert est.total == pytest.approx(sum(est.per_node.values()))


def test_pushdown_strictly_cheaper():
    """An ML filter with selectivity 0.1 below a 100x100 cross join must be
    estimated strictly cheaper than the same filter above it."""
    cat = _tables_catalog(100, 100)
    g = ir.build_graph(
        [("x", (1,))], {"s": {"kind": "sigmoid"}}, [("x", "s", 0)], ["s"], cat
    )
    pred = Cmp("gt", MLExpr("g", (Col("va"),)), Lit(0.5))
    above = Plan(
        {0: RelNode(TableScan("a")), 1: RelNode(TableScan("b")),
         2: RelNode(CrossJoin(), (0, 1)),
         3: RelNode(Filter(pred, selectivity=0.1), (2,))},
        3, {"g": g},
    )
    below = Plan(
        {0: RelNode(TableScan("a")),
         1: RelNode(Filter(pred, selectivity=0.1), (0,)),
         2: RelNode(TableScan("b")),
         3: RelNode(CrossJoin(), (1, 2))},
        3, {"g": g},
    )
    assert cost.estimate_cost(below, cat).total < cost.estimate_cost(above, cat).total


def test_oom_penalty_on_oversized_weight():
    cat = build_catalog()
    plan = two_tower_plan(cat)
    small_budget = cost.default_cost_model(memory_budget_bytes=64)
    normal = cost.default_cost_model()
    assert (
        cost.estimate_cost(plan, cat, small_budget).total
        > cost.estimate_cost(plan, cat, normal).total
    )
    # exactly the oom factor on the ML-bearing node
    est_small = cost.estimate_cost(plan, cat, small_budget)
    est_norm = cost.estimate_cost(plan, cat, normal)
    ratio = est_small.per_node[plan.root] / est_norm.per_node[plan.root]
    assert ratio == pytest.approx(small_budget.oom_penalty)


def test_monotone_in_estimated_rows():
    cat = _tables_catalog(50, 50)
    plan = Plan(
        {0: RelNode(TableScan("a")),
         1: RelNode(Filter(Cmp("gt", Col("va"), Lit(0.0)), selectivity=0.2), (0,)),
         2: RelNode(TableScan("b")),
         3: RelNode(CrossJoin(), (1, 2))},
        3,
    )
    base = cost.estimate_cost(plan, cat).total
    plan.rels[1] = RelNode(Filter(Cmp("gt", Col("va"), Lit(0.0)), selectivity=0.6), (0,))
    plan.__dict__.pop("_schema_cache", None)
    plan.__dict__.pop("_fp_cache", None)
    higher = cost.estimate_cost(plan, cat).total
    assert higher >= base


# ---------------------------------------------------------------------------
# calibration


def test_calibrate_recovers_exact_linear_constants():
    true_per_row = {"scan": 3.0, "filter": 7.0}
    true_per_flop = 0.25
    samples = []
    rng = np.random.default_rng(0)
    for _ in range(60):
        kind = str(rng.choice(["scan", "filter"]))
        rows = float(rng.integers(10, 10000))
        flops = float(rng.integers(0, 5000))
        ns = true_per_row[kind] * rows + true_per_flop * flops
        samples.append((kind, rows, flops, ns))
    model = cost.calibrate(samples)
    assert model.per_row["scan"] == pytest.approx(3.0, abs=1e-6)
    assert model.per_row["filter"] == pytest.approx(7.0, abs=1e-6)
    assert model.per_flop == pytest.approx(0.25, abs=1e-6)


def test_calibrate_single_sample():
    model = cost.calibrate([("scan", 100.0, 0.0, 400.0)])
    assert model.per_row["scan"] == pytest.approx(4.0)


def test_calibrate_empty_keeps_defaults():
    base = cost.default_cost_model()
    assert cost.calibrate([], base) is base


def test_microbench_produces_all_kinds():
    samples = cost.run_microbench(seed=0, repeat=1)
    kinds = {k for k, _, _, _ in samples}
    assert {"scan", "filter", "project", "hash_join", "cross_join",
            "aggregate", "union", "expand"} <= kinds
    fitted = cost.calibrate(samples)
    assert all(v > 0 for v in fitted.per_row.values())


# ---------------------------------------------------------------------------
# q-error


def test_q_error_values():
    assert cost.q_error(10, 10) == 1.0
    assert cost.q_error(10, 5) == 2.0
    assert cost.q_error(5, 10) == 2.0


def test_q_error_symmetric_and_bounded():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a, b = rng.uniform(0.01, 100, size=2)
        assert cost.q_error(a, b) == cost.q_error(b, a)
        assert cost.q_error(a, b) >= 1.0


def test_q_error_nonpositive():
    with pytest.raises(NonPositive):
        cost.q_error(0, 1)
    with pytest.raises(NonPositive):
        cost.q_error(1, -2)
