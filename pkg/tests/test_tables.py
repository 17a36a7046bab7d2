import numpy as np
import pytest

from crossplan import tables
from crossplan.errors import CrossplanError, TypeMismatch, UnknownColumn
from crossplan.tables import (
    BOOL,
    FLOAT64,
    INT64,
    TEXT,
    canonical_rows,
    dump_csv,
    dump_json,
    estimate_selectivity,
    load_csv,
    load_json,
    schema,
    stats_collect,
    table_create,
    tables_equal,
    tensor,
    vector,
)


def test_create_int_rows():
    t = table_create(schema([("id", INT64)]), [[1], [2]])
    assert t.row_count == 2
    assert list(t.column("id")) == [1, 2]


def test_create_vector_rows():
    t = table_create(schema([("v", vector(2))]), [[[1.0, 2.0]]])
    assert t.row_count == 1
    assert t.column("v").shape == (1, 2)


def test_create_type_error_names_cell():
    with pytest.raises(TypeMismatch) as e:
        table_create(schema([("id", INT64)]), [["x"]])
    assert "id" in str(e.value) and "row 0" in str(e.value)


def test_create_wrong_arity():
    with pytest.raises(TypeMismatch):
        table_create(schema([("id", INT64)]), [[1, 2]])


def test_vector_dim_checked():
    with pytest.raises(TypeMismatch):
        table_create(schema([("v", vector(3))]), [[[1.0, 2.0]]])


def test_tensor_rank_and_ragged():
    sch = schema([("t", tensor((2, 3)))])
    t = table_create(sch, [[np.ones((2, 3))], [np.ones((1, 3))]])  # ragged ok
    assert t.row_count == 2
    with pytest.raises(TypeMismatch):
        table_create(sch, [[np.ones((2, 3, 1))]])  # wrong rank
    with pytest.raises(TypeMismatch):
        table_create(sch, [[np.ones((2, 4))]])  # too wide


def test_datatype_invariants():
    with pytest.raises(CrossplanError):
        vector(0)
    with pytest.raises(CrossplanError):
        tensor(())
    with pytest.raises(CrossplanError):
        tensor((1, 0))


def test_schema_duplicate_names():
    with pytest.raises(CrossplanError):
        schema([("a", INT64), ("a", INT64)])


def test_round_trip_column_readback():
    rows = [[3, "x", True, 1.5], [7, "y", False, -2.25]]
    sch = schema([("i", INT64), ("s", TEXT), ("b", BOOL), ("f", FLOAT64)])
    t = table_create(sch, rows)
    assert t.rows() == [tuple(r) for r in rows]


# ---------------------------------------------------------------------------
# statistics


def test_stats_two_buckets():
    t = table_create(schema([("x", INT64)]), [[1], [2], [3], [4]])
    s = stats_collect(t, bucket_count=2)
    cs = s.column("x")
    assert cs.counts == (2, 2)
    assert cs.min == 1 and cs.max == 4 and cs.distinct == 4
    assert sum(cs.counts) == s.row_count


def test_stats_empty_table():
    t = table_create(schema([("x", INT64)]), [])
    s = stats_collect(t)
    assert s.row_count == 0
    assert s.column("x").counts == ()


def test_stats_constant_column():
    t = table_create(schema([("x", INT64)]), [[5], [5], [5]])
    cs = stats_collect(t).column("x")
    assert cs.min == cs.max == 5
    assert cs.distinct == 1


def test_stats_text_distinct_only():
    t = table_create(schema([("s", TEXT)]), [["a"], ["b"], ["a"]])
    cs = stats_collect(t).column("s")
    assert cs.distinct == 2
    assert cs.counts == ()


# ---------------------------------------------------------------------------
# selectivity


def test_selectivity_uniform_le():
    t = table_create(schema([("x", INT64)]), [[i] for i in range(1, 101)])
    for buckets in (4, 8, 32):
        s = stats_collect(t, bucket_count=buckets)
        true_frac = 0.50
        est = estimate_selectivity(s, "x", "le", 50)
        assert abs(est - true_frac) <= 1.0 / buckets + 1e-9


def test_selectivity_boundaries():
    t = table_create(schema([("x", INT64)]), [[i] for i in range(1, 101)])
    s = stats_collect(t)
    assert estimate_selectivity(s, "x", "le", 100) == 1.0
    assert estimate_selectivity(s, "x", "lt", 1) == 0.0
    assert estimate_selectivity(s, "x", "ge", 1) == 1.0


def test_selectivity_exhaustive_count_oracle():
    rng = np.random.default_rng(0)
    vals = rng.integers(0, 1000, size=500)
    t = table_create(schema([("x", INT64)]), [[int(v)] for v in vals])
    s = stats_collect(t, bucket_count=32)
    for v in (100, 333, 777):
        true = float(np.mean(vals <= v))
        est = estimate_selectivity(s, "x", "le", v)
        assert abs(est - true) <= 1.0 / 32 + 0.02


def test_selectivity_unknown_column():
    t = table_create(schema([("x", INT64)]), [[1]])
    s = stats_collect(t)
    with pytest.raises(UnknownColumn):
        estimate_selectivity(s, "y", "le", 1)


def test_selectivity_eq_uses_distinct():
    t = table_create(schema([("x", INT64)]), [[i % 10] for i in range(100)])
    s = stats_collect(t)
    assert estimate_selectivity(s, "x", "eq", 3) == pytest.approx(0.1)
    assert estimate_selectivity(s, "x", "ne", 3) == pytest.approx(0.9)


# ---------------------------------------------------------------------------
# interchange formats


def _mixed_table():
    rng = np.random.default_rng(1)
    sch = schema([
        ("i", INT64), ("f", FLOAT64), ("b", BOOL), ("s", TEXT),
        ("v", vector(3)), ("t", tensor((2, 2))),
    ])
    rows = [
        [int(rng.integers(-5, 5)), float(rng.normal()) * 1e-7, bool(i % 2),
         f"s{i}", rng.normal(size=3), rng.normal(size=(2, 2))]
        for i in range(6)
    ]
    return table_create(sch, rows)


def test_csv_round_trip_exact():
    t = _mixed_table()
    back = load_csv(dump_csv(t), t.schema)
    assert tables_equal(t, back)  # exact, including floats


def test_json_round_trip_exact():
    t = _mixed_table()
    back = load_json(dump_json(t))
    assert tables_equal(t, back)


def test_csv_header_mismatch():
    t = table_create(schema([("a", INT64)]), [[1]])
    with pytest.raises(TypeMismatch):
        load_csv("b\n1\n", t.schema)


def test_canonical_rows_sorts_by_all_columns():
    t = table_create(
        schema([("a", INT64), ("b", INT64)]), [[2, 1], [1, 9], [1, 3]]
    )
    assert canonical_rows(t) == [(1, 3), (1, 9), (2, 1)]


def test_tables_equal_is_bag_equality():
    sch = schema([("a", INT64)])
    t1 = table_create(sch, [[1], [1], [2]])
    t2 = table_create(sch, [[2], [1], [1]])
    t3 = table_create(sch, [[1], [2], [2]])
    assert tables_equal(t1, t2)
    assert not tables_equal(t1, t3)
