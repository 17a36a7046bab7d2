"""Immutable in-memory columnar tables, schemas and column statistics.

Column storage by declared type:

* int64 / float64 / bool  -> 1-D numpy arrays
* text                    -> list of str
* vector(d)               -> 2-D float64 array of shape (rows, d)
* tensor(shape)           -> list of float64 ndarrays; an entry may be
                             smaller than the declared extents (boundary
                             tiles of a blocked matrix are ragged) but must
                             have the declared rank
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CrossplanError, TypeMismatch, UnknownColumn


# ---------------------------------------------------------------------------
# datatypes and schemas


@dataclass(frozen=True)
class Datatype:
    kind: str  # int64 | float64 | bool | text | vector | tensor
    dim: int | None = None
    shape: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind == "vector" and (self.dim is None or self.dim < 1):
            raise CrossplanError(f"vector dim must be >= 1, got {self.dim}")
        if self.kind == "tensor":
            if not self.shape or any(e < 1 for e in self.shape):
                raise CrossplanError(f"tensor shape must be nonempty positive, got {self.shape}")

    def __str__(self):
        if self.kind == "vector":
            return f"vector({self.dim})"
        if self.kind == "tensor":
            return f"tensor({'x'.join(map(str, self.shape))})"
        return self.kind

    @property
    def is_numeric(self) -> bool:
        return self.kind in ("int64", "float64")


INT64 = Datatype("int64")
FLOAT64 = Datatype("float64")
BOOL = Datatype("bool")
TEXT = Datatype("text")


def vector(dim: int) -> Datatype:
    return Datatype("vector", dim=int(dim))


def tensor(shape: Sequence[int]) -> Datatype:
    return Datatype("tensor", shape=tuple(int(e) for e in shape))


@dataclass(frozen=True)
class Schema:
    columns: tuple[tuple[str, Datatype], ...]

    def __post_init__(self):
        if not self.columns:
            raise CrossplanError("schema must have at least one column")
        names = [n for n, _ in self.columns]
        if len(set(names)) != len(names):
            raise CrossplanError(f"duplicate column names in schema: {names}")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.columns]

    def typeof(self, name: str) -> Datatype:
        for n, t in self.columns:
            if n == name:
                return t
        raise UnknownColumn(name)

    def has(self, name: str) -> bool:
        return any(n == name for n, _ in self.columns)

    def index(self, name: str) -> int:
        for i, (n, _) in enumerate(self.columns):
            if n == name:
                return i
        raise UnknownColumn(name)


def schema(cols: Iterable[tuple[str, Datatype]]) -> Schema:
    return Schema(tuple(cols))


# ---------------------------------------------------------------------------
# value coercion


def _coerce_cell(value, dtype: Datatype, col: str, row: int):
    err = lambda: TypeMismatch(f"column {col!r}, row {row}: {value!r} is not {dtype}")
    if dtype.kind == "int64":
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise err()
        return int(value)
    if dtype.kind == "float64":
        if isinstance(value, bool) or not isinstance(value, (int, float, np.integer, np.floating)):
            raise err()
        return float(value)
    if dtype.kind == "bool":
        if not isinstance(value, (bool, np.bool_)):
            raise err()
        return bool(value)
    if dtype.kind == "text":
        if not isinstance(value, str):
            raise err()
        return value
    if dtype.kind == "vector":
        try:
            arr = np.asarray(value, dtype=np.float64)
        except (TypeError, ValueError):
            raise err() from None
        if arr.ndim != 1 or arr.shape[0] != dtype.dim:
            raise err()
        return arr
    if dtype.kind == "tensor":
        try:
            arr = np.asarray(value, dtype=np.float64)
        except (TypeError, ValueError):
            raise err() from None
        # ragged boundary tiles: rank must match, extents may be smaller
        if arr.ndim != len(dtype.shape) or any(
            a > d or a < 1 for a, d in zip(arr.shape, dtype.shape)
        ):
            raise err()
        return arr
    raise CrossplanError(f"unhandled datatype {dtype}")


def _pack_column(values: list, dtype: Datatype):
    if dtype.kind == "int64":
        return np.asarray(values, dtype=np.int64)
    if dtype.kind == "float64":
        return np.asarray(values, dtype=np.float64)
    if dtype.kind == "bool":
        return np.asarray(values, dtype=np.bool_)
    if dtype.kind == "text":
        return list(values)
    if dtype.kind == "vector":
        if not values:
            return np.zeros((0, dtype.dim), dtype=np.float64)
        return np.stack(values)
    if dtype.kind == "tensor":
        return list(values)
    raise CrossplanError(f"unhandled datatype {dtype}")


class Table:
    """Immutable columnar relation. Use :func:`table_create` or
    :meth:`from_columns` to build one."""

    __slots__ = ("schema", "columns", "row_count")

    def __init__(self, schema: Schema, columns: tuple, row_count: int):
        self.schema = schema
        self.columns = columns
        self.row_count = row_count

    @classmethod
    def from_columns(cls, sch: Schema, columns: Sequence) -> "Table":
        if len(columns) != len(sch.columns):
            raise TypeMismatch(
                f"expected {len(sch.columns)} columns, got {len(columns)}"
            )
        lengths = {len(c) for c in columns}
        if len(lengths) > 1:
            raise TypeMismatch(f"column lengths differ: {sorted(lengths)}")
        n = lengths.pop() if lengths else 0
        return cls(sch, tuple(columns), n)

    def column(self, name: str):
        return self.columns[self.schema.index(name)]

    def row(self, i: int) -> tuple:
        return tuple(col[i] for col in self.columns)

    def rows(self) -> list[tuple]:
        return [self.row(i) for i in range(self.row_count)]

    def nbytes(self) -> int:
        total = 0
        for (name, dtype), col in zip(self.schema.columns, self.columns):
            if dtype.kind == "text":
                seen: set[int] = set()
                for s in col:
                    if id(s) not in seen:
                        seen.add(id(s))
                        total += len(s)
                total += 8 * len(col)
            elif dtype.kind == "tensor":
                # tensor blocks are shared structurally (e.g. a tile joined
                # against many rows); count each distinct buffer once plus a
                # reference per row
                seen = set()
                for a in col:
                    if id(a) not in seen:
                        seen.add(id(a))
                        total += a.nbytes
                total += 8 * len(col)
            else:
                total += col.nbytes
        return total

    def __repr__(self):
        cols = ", ".join(f"{n}:{t}" for n, t in self.schema.columns)
        return f"Table({cols}; rows={self.row_count})"


def table_create(sch: Schema, rows: Sequence[Sequence]) -> Table:
    """Build a table from row-major values, validating every cell."""
    per_col: list[list] = [[] for _ in sch.columns]
    for r, row in enumerate(rows):
        if len(row) != len(sch.columns):
            raise TypeMismatch(f"row {r}: expected {len(sch.columns)} cells, got {len(row)}")
        for c, ((name, dtype), value) in enumerate(zip(sch.columns, row)):
            per_col[c].append(_coerce_cell(value, dtype, name, r))
    columns = tuple(_pack_column(v, t) for v, (_, t) in zip(per_col, sch.columns))
    return Table(sch, columns, len(rows))


def empty_table(sch: Schema) -> Table:
    return Table(sch, tuple(_pack_column([], t) for _, t in sch.columns), 0)


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class ColumnStats:
    min: float | None = None
    max: float | None = None
    distinct: int = 0
    bucket_count: int = 0
    counts: tuple[int, ...] = ()


@dataclass(frozen=True)
class Statistics:
    row_count: int
    columns: Mapping[str, ColumnStats] = field(default_factory=dict)

    def column(self, name: str) -> ColumnStats:
        if name not in self.columns:
            raise UnknownColumn(name)
        return self.columns[name]


def stats_collect(table: Table, bucket_count: int = 32) -> Statistics:
    """Equi-width histograms for numeric columns, distinct counts for text."""
    if bucket_count < 1:
        raise CrossplanError(f"bucket_count must be >= 1, got {bucket_count}")
    cols: dict[str, ColumnStats] = {}
    for (name, dtype), data in zip(table.schema.columns, table.columns):
        if table.row_count == 0:
            if dtype.kind in ("int64", "float64", "bool", "text"):
                cols[name] = ColumnStats()
            continue
        if dtype.is_numeric:
            arr = np.asarray(data, dtype=np.float64)
            lo, hi = float(arr.min()), float(arr.max())
            if hi > lo:
                idx = np.minimum(
                    ((arr - lo) / (hi - lo) * bucket_count).astype(np.int64),
                    bucket_count - 1,
                )
                counts = np.bincount(idx, minlength=bucket_count)
            else:
                counts = np.zeros(bucket_count, dtype=np.int64)
                counts[0] = len(arr)
            cols[name] = ColumnStats(
                min=lo,
                max=hi,
                distinct=int(len(np.unique(arr))),
                bucket_count=bucket_count,
                counts=tuple(int(c) for c in counts),
            )
        elif dtype.kind == "bool":
            arr = np.asarray(data)
            cols[name] = ColumnStats(
                min=float(arr.min()), max=float(arr.max()),
                distinct=int(len(np.unique(arr))),
            )
        elif dtype.kind == "text":
            cols[name] = ColumnStats(distinct=len(set(data)))
    return Statistics(row_count=table.row_count, columns=cols)


_CMP_OPS = ("lt", "le", "gt", "ge", "eq", "ne")


def _histogram_cdf(cs: ColumnStats, n: int, v: float) -> float:
    """Estimated fraction of rows with value below ``v``: exact at bucket
    boundaries, linear interpolation inside a bucket."""
    lo, hi = cs.min, cs.max
    if v <= lo:
        return 0.0
    if v >= hi:
        return 1.0
    if not cs.counts:
        return (v - lo) / (hi - lo)
    b = len(cs.counts)
    pos = (v - lo) / (hi - lo) * b
    full = int(math.floor(pos))
    inside = cs.counts[full] * (pos - full) if full < b else 0.0
    return (sum(cs.counts[:full]) + inside) / n


def estimate_selectivity(stats: Statistics, column: str, op: str, value) -> float:
    """Fraction of rows satisfying ``column <op> value``.

    Exact at histogram bucket boundaries, linear interpolation inside a
    bucket. Equality predicates fall back to 1/distinct.
    """
    cs = stats.column(column)
    if stats.row_count == 0:
        return 0.0
    if op not in _CMP_OPS:
        raise CrossplanError(f"unsupported predicate op {op!r}")
    if op == "eq":
        return min(1.0, 1.0 / cs.distinct) if cs.distinct else 0.0
    if op == "ne":
        return 1.0 - (min(1.0, 1.0 / cs.distinct) if cs.distinct else 0.0)
    if cs.min is None or cs.max is None:
        return 0.5
    v = float(value)
    if cs.max == cs.min:
        cdf = {"lt": float(v > cs.min), "le": float(v >= cs.min)}
        if op in ("lt", "le"):
            return cdf[op]
        return 1.0 - cdf["le" if op == "gt" else "lt"]
    f = _histogram_cdf(cs, stats.row_count, v)
    if op == "le":
        return 1.0 if v >= cs.max else f
    if op == "lt":
        return f
    if op == "ge":
        return 1.0 - f
    if op == "gt":
        return 0.0 if v >= cs.max else 1.0 - f
    raise AssertionError


def histogram_bucket(cs: ColumnStats, value, buckets: int | None = None) -> int:
    """Bucket index of a literal under the column histogram; a coarser view
    is produced when ``buckets`` is smaller than the stored bucket count."""
    b = buckets or cs.bucket_count or 1
    if cs.min is None or cs.max is None or cs.max <= cs.min:
        return 0
    pos = (float(value) - cs.min) / (cs.max - cs.min)
    return min(b - 1, max(0, int(pos * b)))


# ---------------------------------------------------------------------------
# comparison helpers (used by equivalence tests and `run` verification)


def _sort_key_cell(dtype: Datatype, v):
    if dtype.kind == "vector":
        return tuple(float(x) for x in v)
    if dtype.kind == "tensor":
        return (v.shape, tuple(float(x) for x in v.ravel()))
    if dtype.kind == "float64":
        return float(v)
    if dtype.kind == "bool":
        return bool(v)
    return v


def canonical_rows(table: Table) -> list[tuple]:
    """Rows sorted by every column; used only when comparing results."""
    keys = [
        tuple(_sort_key_cell(t, v) for (_, t), v in zip(table.schema.columns, row))
        for row in table.rows()
    ]
    order = sorted(range(table.row_count), key=lambda i: keys[i])
    return [table.row(i) for i in order]


def tables_equal(a: Table, b: Table, rtol: float = 0.0, atol: float = 0.0) -> bool:
    """Bag equality after canonical row ordering; floats compared with the
    given tolerances (exact when both are 0)."""
    if a.row_count != b.row_count:
        return False
    if [t for _, t in a.schema.columns] != [t for _, t in b.schema.columns]:
        return False
    ra, rb = canonical_rows(a), canonical_rows(b)
    for row_a, row_b in zip(ra, rb):
        for (name, dtype), va, vb in zip(a.schema.columns, row_a, row_b):
            if dtype.kind in ("float64", "vector", "tensor"):
                xa, xb = np.asarray(va, dtype=float), np.asarray(vb, dtype=float)
                if xa.shape != xb.shape:
                    return False
                if not np.allclose(xa, xb, rtol=rtol, atol=atol, equal_nan=True):
                    return False
            else:
                if va != vb:
                    return False
    return True


# ---------------------------------------------------------------------------
# CSV / JSON interchange


def _fmt_float(x: float) -> str:
    return repr(float(x))


def _cell_to_csv(dtype: Datatype, v) -> str:
    if dtype.kind == "int64":
        return str(int(v))
    if dtype.kind == "bool":
        return "true" if v else "false"
    if dtype.kind == "float64":
        return _fmt_float(v)
    if dtype.kind == "text":
        return v
    if dtype.kind == "vector":
        return ";".join(_fmt_float(x) for x in v)
    if dtype.kind == "tensor":
        dims = "x".join(str(d) for d in v.shape)
        return dims + ";" + ";".join(_fmt_float(x) for x in v.ravel())
    raise CrossplanError(f"unhandled datatype {dtype}")


def _cell_from_csv(dtype: Datatype, s: str):
    if dtype.kind == "int64":
        return int(s)
    if dtype.kind == "bool":
        return s == "true"
    if dtype.kind == "float64":
        return float(s)
    if dtype.kind == "text":
        return s
    if dtype.kind == "vector":
        return [float(x) for x in s.split(";")] if s else []
    if dtype.kind == "tensor":
        head, _, rest = s.partition(";")
        shape = tuple(int(d) for d in head.split("x"))
        data = np.asarray([float(x) for x in rest.split(";")], dtype=np.float64)
        return data.reshape(shape)
    raise CrossplanError(f"unhandled datatype {dtype}")


def dump_csv(table: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.schema.names)
    for row in table.rows():
        w.writerow(
            _cell_to_csv(t, v) for (_, t), v in zip(table.schema.columns, row)
        )
    return buf.getvalue()


def load_csv(text: str, sch: Schema) -> Table:
    rdr = csv.reader(io.StringIO(text))
    header = next(rdr, None)
    if header is None:
        raise TypeMismatch("csv input has no header row")
    if header != sch.names:
        raise TypeMismatch(f"csv header {header} does not match schema {sch.names}")
    rows = [
        [_cell_from_csv(t, cell) for (_, t), cell in zip(sch.columns, row)]
        for row in rdr
    ]
    return table_create(sch, rows)


def _dtype_to_json(t: Datatype):
    if t.kind == "vector":
        return {"vector": t.dim}
    if t.kind == "tensor":
        return {"tensor": list(t.shape)}
    return t.kind


def dtype_from_json(spec) -> Datatype:
    if isinstance(spec, str):
        return {"int64": INT64, "float64": FLOAT64, "bool": BOOL, "text": TEXT}[spec]
    if "vector" in spec:
        return vector(spec["vector"])
    if "tensor" in spec:
        return tensor(spec["tensor"])
    raise TypeMismatch(f"bad datatype spec {spec!r}")


def dump_json_doc(table: Table) -> dict:
    cols = []
    for (name, dtype), data in zip(table.schema.columns, table.columns):
        if dtype.kind == "vector":
            cols.append([list(map(float, v)) for v in data])
        elif dtype.kind == "tensor":
            cols.append([{"shape": list(v.shape), "data": list(map(float, v.ravel()))} for v in data])
        elif dtype.kind == "text":
            cols.append(list(data))
        elif dtype.kind == "bool":
            cols.append([bool(x) for x in data])
        elif dtype.kind == "int64":
            cols.append([int(x) for x in data])
        else:
            cols.append([float(x) for x in data])
    return {
        "schema": [[n, _dtype_to_json(t)] for n, t in table.schema.columns],
        "columns": cols,
    }


def load_json_doc(doc: dict) -> Table:
    sch = schema([(n, dtype_from_json(t)) for n, t in doc["schema"]])
    raw = doc["columns"]
    if len(raw) != len(sch.columns):
        raise TypeMismatch("column count does not match schema")
    rows = []
    n = len(raw[0]) if raw else 0
    for i in range(n):
        row = []
        for (name, dtype), col in zip(sch.columns, raw):
            v = col[i]
            if dtype.kind == "tensor":
                v = np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
            row.append(v)
        rows.append(row)
    return table_create(sch, rows)


def dump_json(table: Table) -> str:
    return json.dumps(dump_json_doc(table))


def load_json(text: str) -> Table:
    return load_json_doc(json.loads(text))
