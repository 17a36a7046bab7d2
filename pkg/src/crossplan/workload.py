"""Deterministic synthetic workloads: desk-scale datasets, sampled model
architectures, and sampled inference queries.

Twenty query templates (ten per dataset) cover pair scoring with two-tower
models, joint feature scoring over joins, tensor-relational candidates
(single matmul / decision forest / centroid distances), and filter-heavy
shapes. Six templates, fixed by a documented shuffle (seed 7), form the
out-of-distribution evaluation set; the remaining fourteen are the
in-distribution pool.

Hyperparameters resample inside narrow jitter bands so that queries drawn
from one template land on the same state-space labels while cross-template
queries do not; filter literals are drawn from small selectivity windows
for the same reason.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ir, mlfn, plandoc
from .catalog import Catalog
from .errors import CrossplanError
from .ir import (
    AggSpec,
    Aggregate,
    Arith,
    Call,
    Cmp,
    Col,
    CrossJoin,
    Filter,
    HashJoin,
    Lit,
    Logic,
    MLExpr,
    Plan,
    Project,
    RelNode,
    TableScan,
)
from .tables import FLOAT64, INT64, schema, table_create, vector

U_VEC, M_VEC, TAG_VEC = 48, 32, 64
STORE_VEC, CUST_VEC, ORDER_VEC, TXN_VEC = 16, 24, 16, 24


def _rng(*parts) -> np.random.Generator:
    h = hashlib.blake2b("|".join(str(p) for p in parts).encode(), digest_size=8)
    return np.random.default_rng(int.from_bytes(h.digest(), "big"))


def _rows(base: int, scale: float) -> int:
    return max(2, int(round(base * scale)))


# ---------------------------------------------------------------------------
# data generation


def gen_data(dataset: str, scale: float, seed: int, catalog: Catalog) -> None:
    """Populate the catalog with one of the synthetic datasets. Foreign keys
    reference existing rows; feature vectors are seeded Gaussians."""
    rng = _rng("data", dataset, seed)
    if dataset == "movielens_mini":
        n_user, n_movie, n_rating = _rows(600, scale), _rows(400, scale), _rows(10000, scale)
        users = [
            [i, int(rng.integers(0, 2)), int(rng.integers(18, 70)),
             int(rng.integers(0, 21)), rng.normal(size=U_VEC)]
            for i in range(n_user)
        ]
        catalog.register_table(
            "user",
            table_create(
                schema([
                    ("user_id", INT64), ("gender", INT64), ("age", INT64),
                    ("occupation", INT64), ("user_vec", vector(U_VEC)),
                ]),
                users,
            ),
        )
        movies = [
            [i, int(rng.integers(0, 8)), int(rng.integers(1950, 2021)),
             rng.normal(size=M_VEC)]
            for i in range(n_movie)
        ]
        catalog.register_table(
            "movie",
            table_create(
                schema([
                    ("movie_id", INT64), ("genre", INT64), ("year", INT64),
                    ("movie_vec", vector(M_VEC)),
                ]),
                movies,
            ),
        )
        ratings = [
            [int(rng.integers(0, n_user)), int(rng.integers(0, n_movie)),
             float(rng.integers(1, 11)) / 2.0, int(rng.integers(0, 10_000_000))]
            for _ in range(n_rating)
        ]
        catalog.register_table(
            "rating",
            table_create(
                schema([
                    ("user_id", INT64), ("movie_id", INT64),
                    ("rating", FLOAT64), ("ts", INT64),
                ]),
                ratings,
            ),
        )
        tags = [[i, rng.normal(size=TAG_VEC)] for i in range(n_movie)]
        catalog.register_table(
            "movie_tag",
            table_create(
                schema([("movie_id", INT64), ("tag_vec", vector(TAG_VEC))]), tags
            ),
        )
    elif dataset == "retail_mini":
        n_store, n_cust = _rows(50, scale), _rows(500, scale)
        n_order, n_txn = _rows(2000, scale), _rows(4000, scale)
        catalog.register_table(
            "store",
            table_create(
                schema([("store_id", INT64), ("region", INT64), ("store_vec", vector(STORE_VEC))]),
                [[i, int(rng.integers(0, 6)), rng.normal(size=STORE_VEC)] for i in range(n_store)],
            ),
        )
        catalog.register_table(
            "customer",
            table_create(
                schema([
                    ("customer_id", INT64), ("country", INT64),
                    ("birth_year", INT64), ("cust_vec", vector(CUST_VEC)),
                ]),
                [
                    [i, int(rng.integers(0, 10)), int(rng.integers(1940, 2006)),
                     rng.normal(size=CUST_VEC)]
                    for i in range(n_cust)
                ],
            ),
        )
        catalog.register_table(
            "orders",
            table_create(
                schema([
                    ("order_id", INT64), ("customer_id", INT64), ("store_id", INT64),
                    ("weekday", INT64), ("amount", FLOAT64), ("order_vec", vector(ORDER_VEC)),
                ]),
                [
                    [i, int(rng.integers(0, n_cust)), int(rng.integers(0, n_store)),
                     int(rng.integers(0, 7)), float(rng.gamma(2.0, 40.0)),
                     rng.normal(size=ORDER_VEC)]
                    for i in range(n_order)
                ],
            ),
        )
        catalog.register_table(
            "txn",
            table_create(
                schema([
                    ("txn_id", INT64), ("customer_id", INT64), ("hour", INT64),
                    ("amount", FLOAT64), ("txn_vec", vector(TXN_VEC)),
                ]),
                [
                    [i, int(rng.integers(0, n_cust)), int(rng.integers(0, 24)),
                     float(rng.gamma(2.0, 25.0)), rng.normal(size=TXN_VEC)]
                    for i in range(n_txn)
                ],
            ),
        )
    else:
        raise CrossplanError(f"unknown dataset {dataset!r}")


# ---------------------------------------------------------------------------
# model templates


@dataclass(frozen=True)
class ModelTemplate:
    kind: str  # mlp | two_tower | dlrm | forest | cnn (declared, unsampled)
    in_dim: int = 0
    in_dim2: int = 0
    hidden: tuple[int, ...] = ()
    out_dim: int = 1
    act: str = "relu"
    final_act: str | None = None
    emb_rows: int = 0
    emb_dim: int = 8
    trees: int = 24
    depth: int = 5
    forest_agg: str = "sigmoid_sum"
    jitter: float = 0.02  # width resample band; inside the label tolerance


def _jitter_dim(rng, base: int, jitter: float) -> int:
    lo = max(1, int(np.floor(base * (1 - jitter))))
    hi = max(lo, int(np.ceil(base * (1 + jitter))))
    return int(rng.integers(lo, hi + 1))


def _chain_specs(prefix, dims, act, final_act, weights, rng, scale_w=True):
    """Unfused matmul/matadd/activation chain specs for one tower."""
    specs, edges = {}, []
    prev = None
    for i in range(len(dims) - 1):
        k, m = dims[i], dims[i + 1]
        w = rng.normal(size=(k, m)) / np.sqrt(k)
        b = rng.normal(size=m) * 0.05
        weights[f"{prefix}w{i}"] = w
        weights[f"{prefix}b{i}"] = b
        mm, ad = f"{prefix}mm{i}", f"{prefix}add{i}"
        specs[mm] = {"kind": "matmul", "weight": f"{prefix}w{i}"}
        specs[ad] = {"kind": "matadd", "bias": f"{prefix}b{i}"}
        if prev is not None:
            edges.append((prev, mm, 0))
        edges.append((mm, ad, 0))
        prev = ad
        last = i == len(dims) - 2
        a = final_act if last else act
        if a:
            an = f"{prefix}act{i}"
            specs[an] = {"kind": a}
            edges.append((ad, an, 0))
            prev = an
    return specs, edges, prev


def _random_tree(rng, in_dim: int, depth: int) -> mlfn.Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def grow(d):
        idx = len(feature)
        if d == depth:
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(float(rng.choice((-1.0, 1.0)) * rng.uniform(0.2, 1.0)))
            return idx
        feature.append(int(rng.integers(0, in_dim)))
        threshold.append(float(rng.normal() * 0.6))
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        left[idx] = grow(d + 1)
        right[idx] = grow(d + 1)
        return idx

    grow(0)
    return mlfn.Tree(tuple(feature), tuple(threshold), tuple(left), tuple(right), tuple(value))


def sample_model(
    template: ModelTemplate, seed: int, catalog: Catalog, name: str
) -> str:
    """Instantiate the template with jittered hyperparameters and register
    it under ``name`` (idempotent for a fixed name)."""
    if name in catalog.models:
        return name
    rng = _rng("model", template.kind, seed)
    weights: dict[str, np.ndarray] = {}
    forests: dict[str, mlfn.Forest] = {}
    p = lambda k: f"{name}.{k}"

    if template.kind == "mlp":
        dims = [template.in_dim] + [
            _jitter_dim(rng, h, template.jitter) for h in template.hidden
        ] + [template.out_dim]
        specs, edges, out = _chain_specs("", dims, template.act, template.final_act, weights, rng)
        inputs = [("x", (template.in_dim,))]
        edges = [("x", "mm0", 0)] + edges
        outputs = [out]
    elif template.kind == "two_tower":
        u_dims = [template.in_dim] + [
            _jitter_dim(rng, h, template.jitter) for h in template.hidden
        ] + [template.out_dim]
        m_dims = [template.in_dim2] + [
            _jitter_dim(rng, h, template.jitter) for h in template.hidden
        ] + [template.out_dim]
        s1, e1, o1 = _chain_specs("u_", u_dims, template.act, None, weights, rng)
        s2, e2, o2 = _chain_specs("m_", m_dims, template.act, None, weights, rng)
        specs = {**s1, **s2, "head": {"kind": "cos_sim"}}
        edges = (
            [("u", "u_mm0", 0), ("m", "m_mm0", 0)]
            + e1 + e2 + [(o1, "head", 0), (o2, "head", 1)]
        )
        inputs = [("u", (template.in_dim,)), ("m", (template.in_dim2,))]
        outputs = ["head"]
    elif template.kind == "dlrm":
        emb_dim = template.emb_dim
        weights["emb0"] = rng.normal(size=(template.emb_rows, emb_dim)) * 0.3
        dims = [emb_dim + template.in_dim] + [
            _jitter_dim(rng, h, template.jitter) for h in template.hidden
        ] + [template.out_dim]
        specs, edges, out = _chain_specs("", dims, template.act, template.final_act, weights, rng)
        specs["emb"] = {"kind": "embed", "weight": "emb0"}
        specs["cc"] = {"kind": "concat"}
        edges = [
            ("id", "emb", 0), ("emb", "cc", 0), ("x", "cc", 1), ("cc", "mm0", 0),
        ] + edges
        inputs = [("id", (1,)), ("x", (template.in_dim,))]
        outputs = [out]
    elif template.kind == "forest":
        n_trees = _jitter_dim(rng, template.trees, template.jitter)
        forests["f0"] = mlfn.Forest(
            tuple(_random_tree(rng, template.in_dim, template.depth) for _ in range(n_trees))
        )
        specs = {"df": {"kind": "decision_forest", "weight": "f0", "agg": template.forest_agg}}
        edges = [("x", "df", 0)]
        inputs = [("x", (template.in_dim,))]
        outputs = ["df"]
    elif template.kind == "single_matmul":
        m = _jitter_dim(rng, template.out_dim, template.jitter)
        weights["w0"] = rng.normal(size=(template.in_dim, m)) / np.sqrt(template.in_dim)
        specs = {"mm": {"kind": "matmul", "weight": "w0"}}
        edges = [("x", "mm", 0)]
        inputs = [("x", (template.in_dim,))]
        outputs = ["mm"]
    elif template.kind == "centroids":
        weights["c0"] = rng.normal(size=(template.out_dim, template.in_dim))
        specs = {"dc": {"kind": "dist_centroids", "weight": "c0"}}
        edges = [("x", "dc", 0)]
        inputs = [("x", (template.in_dim,))]
        outputs = ["dc"]
    else:
        raise CrossplanError(f"template kind {template.kind!r} is not sampled")

    for key, w in weights.items():
        catalog.params[p(key)] = np.asarray(w, dtype=np.float64)
    for key, f in forests.items():
        catalog.forests[p(key)] = f
    qualified = {}
    for nid, spec in specs.items():
        spec = dict(spec)
        for kk in ("weight", "bias"):
            if spec.get(kk):
                spec[kk] = p(spec[kk])
        qualified[nid] = spec
    graph = ir.build_graph(inputs, qualified, edges, outputs, catalog)
    for key in weights:
        del catalog.params[p(key)]
    for key in forests:
        del catalog.forests[p(key)]
    catalog.register_model(name, graph, weights, forests)
    return name


# ---------------------------------------------------------------------------
# query templates


@dataclass(frozen=True)
class FilterSlot:
    table: str
    column: str
    op: str
    sel_lo: float
    sel_hi: float


@dataclass(frozen=True)
class QueryTemplate:
    id: str
    dataset: str
    model: ModelTemplate | None
    filters: tuple[FilterSlot, ...]
    build: Callable  # fn(rng, catalog, model_name, literals) -> Plan

    def describe(self) -> str:
        return f"{self.id} ({self.dataset})"


def _quantile_literal(catalog: Catalog, table: str, column: str, op: str, sel: float):
    """Literal whose predicate selects roughly ``sel`` of the rows."""
    col = catalog.table(table).column(column)
    values = np.sort(np.asarray(col, dtype=np.float64))
    if op in ("le", "lt"):
        q = sel
    elif op in ("ge", "gt"):
        q = 1.0 - sel
    else:
        raise CrossplanError(f"selectivity slots support inequalities, got {op}")
    idx = min(len(values) - 1, max(0, int(q * len(values))))
    v = values[idx]
    return int(v) if float(v).is_integer() and col.dtype.kind == "i" else float(v)


def _filters_of(template: QueryTemplate, rng, catalog: Catalog):
    out = []
    for slot in template.filters:
        sel = float(rng.uniform(slot.sel_lo, slot.sel_hi))
        lit = _quantile_literal(catalog, slot.table, slot.column, slot.op, sel)
        out.append((slot, lit, sel))
    return out


def _scan_project(rels, nid, table, cols):
    rels[nid] = RelNode(TableScan(table))
    rels[nid + 1] = RelNode(
        Project(tuple((c, Col(c)) for c in cols)), (nid,)
    )
    return nid + 1


def _apply_filters(rels, src, filters, table):
    nid = src
    for slot, lit, sel in filters:
        if slot.table != table:
            continue
        new = max(rels) + 1
        rels[new] = RelNode(Filter(Cmp(slot.op, Col(slot.column), Lit(lit))), (nid,))
        nid = new
    return nid


def _pair_scoring_plan(catalog, model_name, filters, left, right, lcols, rcols,
                       largs, rargs) -> Plan:
    """cross join of two filtered projections scored by a two-input model."""
    rels: dict[int, RelNode] = {}
    rels[0] = RelNode(TableScan(left))
    l_src = _apply_filters(rels, 0, filters, left)
    new = max(rels) + 1
    rels[new] = RelNode(Project(tuple((c, Col(c)) for c in lcols)), (l_src,))
    l_src = new
    base = max(rels) + 1
    rels[base] = RelNode(TableScan(right))
    r_src = _apply_filters(rels, base, filters, right)
    new = max(rels) + 1
    rels[new] = RelNode(Project(tuple((c, Col(c)) for c in rcols)), (r_src,))
    r_src = new
    cj = max(rels) + 1
    rels[cj] = RelNode(CrossJoin(), (l_src, r_src))
    top = cj + 1
    rels[top] = RelNode(
        Project(
            (
                (lcols[0], Col(lcols[0])),
                (rcols[0], Col(rcols[0])),
                ("score", MLExpr("g0", tuple(Col(a) for a in largs + rargs))),
            )
        ),
        (cj,),
    )
    return Plan(rels, top, {"g0": catalog.model(model_name)})


def _single_table_score_plan(catalog, model_name, filters, table, cols, args,
                             ml_filter=None) -> Plan:
    rels: dict[int, RelNode] = {}
    rels[0] = RelNode(TableScan(table))
    src = _apply_filters(rels, 0, filters, table)
    if ml_filter is not None:
        expr, sel = ml_filter
        new = max(rels) + 1
        rels[new] = RelNode(Filter(expr, sel), (src,))
        src = new
    top = max(rels) + 1
    rels[top] = RelNode(
        Project(
            tuple((c, Col(c)) for c in cols)
            + (("score", MLExpr("g0", tuple(Col(a) for a in args))),)
        ),
        (src,),
    )
    return Plan(rels, top, {"g0": catalog.model(model_name)})


# -- individual template builders -------------------------------------------


def _b_ml_pair_two_tower(rng, catalog, model_name, filters):
    return _pair_scoring_plan(
        catalog, model_name, filters,
        "user", "movie", ("user_id", "user_vec"), ("movie_id", "movie_vec"),
        ("user_vec",), ("movie_vec",),
    )


def _b_ml_trending(rng, catalog, model_name, filters):
    rels: dict[int, RelNode] = {}
    rels[0] = RelNode(TableScan("rating"))
    rels[1] = RelNode(
        Aggregate(("movie_id",), (AggSpec("avg_rating", "avg", Col("rating")),)),
        (0,),
    )
    rels[2] = RelNode(TableScan("movie"))
    src = _apply_filters(rels, 2, filters, "movie")
    j = max(rels) + 1
    rels[j] = RelNode(HashJoin(("movie_id",), ("movie_id",)), (src, 1))
    top = j + 1
    rels[top] = RelNode(
        Project(
            (
                ("movie_id", Col("movie_id")),
                ("avg_rating", Col("avg_rating")),
                ("score", MLExpr("g0", (Col("movie_vec"),))),
            )
        ),
        (j,),
    )
    return Plan(rels, top, {"g0": catalog.model(model_name)})


def _b_ml_joint(rng, catalog, model_name, filters):
    return _pair_scoring_plan(
        catalog, model_name, filters,
        "user", "movie", ("user_id", "user_vec"), ("movie_id", "movie_vec"),
        ("user_vec",), ("movie_vec",),
    )


def _b_ml_single(table, cols, args):
    def build(rng, catalog, model_name, filters):
        return _single_table_score_plan(catalog, model_name, filters, table, cols, args)

    return build


def _b_ml_filter_chain(rng, catalog, model_name, filters):
    ml_sel = float(rng.uniform(0.45, 0.55))
    pred = Cmp("gt", MLExpr("g0", (Col("movie_vec"),)), Lit(0.5))
    return _single_table_score_plan(
        catalog, model_name, filters, "movie", ("movie_id",), ("movie_vec",),
        ml_filter=(pred, ml_sel),
    )


def _b_ml_tag_pairs(rng, catalog, model_name, filters):
    rels: dict[int, RelNode] = {}
    rels[0] = RelNode(TableScan("movie"))
    src = _apply_filters(rels, 0, filters, "movie")
    a = max(rels) + 1
    rels[a] = RelNode(
        Project((("a_id", Col("movie_id")), ("a_vec", Col("movie_vec")))), (src,)
    )
    rels[a + 1] = RelNode(TableScan("movie"))
    rels[a + 2] = RelNode(
        Project((("b_id", Col("movie_id")), ("b_vec", Col("movie_vec")))), (a + 1,)
    )
    cj = a + 3
    rels[cj] = RelNode(CrossJoin(), (a, a + 2))
    rels[cj + 1] = RelNode(
        Project(
            (
                ("a_id", Col("a_id")),
                ("b_id", Col("b_id")),
                ("sim", MLExpr("g0", (Col("a_vec"), Col("b_vec")))),
            )
        ),
        (cj,),
    )
    return Plan(rels, cj + 1, {"g0": catalog.model(model_name)})


def _b_rt_trip(rng, catalog, model_name, filters):
    rels: dict[int, RelNode] = {}
    rels[0] = RelNode(TableScan("orders"))
    src = _apply_filters(rels, 0, filters, "orders")
    rels[max(rels) + 1] = RelNode(TableScan("store"))
    st = max(rels)
    j = max(rels) + 1
    rels[j] = RelNode(HashJoin(("store_id",), ("store_id",)), (src, st))
    top = j + 1
    rels[top] = RelNode(
        Project(
            (
                ("order_id", Col("order_id")),
                ("cls", MLExpr("g0", (Col("order_vec"), Col("store_vec")))),
            )
        ),
        (j,),
    )
    return Plan(rels, top, {"g0": catalog.model(model_name)})


def _b_rt_fraud(rng, catalog, model_name, filters):
    rels: dict[int, RelNode] = {}
    rels[0] = RelNode(TableScan("txn"))
    src = _apply_filters(rels, 0, filters, "txn")
    rels[max(rels) + 1] = RelNode(TableScan("customer"))
    cu = max(rels)
    j = max(rels) + 1
    rels[j] = RelNode(HashJoin(("customer_id",), ("customer_id",)), (src, cu))
    f = j + 1
    ml_sel = float(rng.uniform(0.45, 0.55))
    rels[f] = RelNode(
        Filter(Cmp("ge", MLExpr("g0", (Col("txn_vec"),)), Lit(0.5)), ml_sel), (j,)
    )
    top = f + 1
    rels[top] = RelNode(
        Project(
            (
                ("txn_id", Col("txn_id")),
                ("score", MLExpr("g1", (Col("cust_vec"),))),
            )
        ),
        (f,),
    )
    return Plan(
        rels, top,
        {"g0": catalog.model(model_name[0]), "g1": catalog.model(model_name[1])},
    )


def _b_rt_pair(rng, catalog, model_name, filters):
    return _pair_scoring_plan(
        catalog, model_name, filters,
        "customer", "store", ("customer_id", "cust_vec"), ("store_id", "store_vec"),
        ("cust_vec",), ("store_vec",),
    )


def _b_rt_segment(rng, catalog, model_name, filters):
    rels: dict[int, RelNode] = {}
    rels[0] = RelNode(TableScan("orders"))
    rels[1] = RelNode(
        Aggregate(
            ("customer_id",),
            (
                AggSpec("n_orders", "count"),
                AggSpec("total", "sum", Col("amount")),
            ),
        ),
        (0,),
    )
    rels[2] = RelNode(TableScan("customer"))
    src = _apply_filters(rels, 2, filters, "customer")
    j = max(rels) + 1
    rels[j] = RelNode(HashJoin(("customer_id",), ("customer_id",)), (src, 1))
    top = j + 1
    rels[top] = RelNode(
        Project(
            (
                ("customer_id", Col("customer_id")),
                ("total", Col("total")),
                ("seg", MLExpr("g0", (Col("cust_vec"),))),
            )
        ),
        (j,),
    )
    return Plan(rels, top, {"g0": catalog.model(model_name)})


def _b_rt_joint_pair(rng, catalog, model_name, filters):
    return _pair_scoring_plan(
        catalog, model_name, filters,
        "customer", "store", ("customer_id", "cust_vec"), ("store_id", "store_vec"),
        ("cust_vec",), ("store_vec",),
    )


def _b_rt_sales(rng, catalog, model_name, filters):
    rels: dict[int, RelNode] = {}
    rels[0] = RelNode(TableScan("orders"))
    src = _apply_filters(rels, 0, filters, "orders")
    rels[max(rels) + 1] = RelNode(TableScan("store"))
    st = max(rels)
    j = max(rels) + 1
    rels[j] = RelNode(HashJoin(("store_id",), ("store_id",)), (src, st))
    top = j + 1
    rels[top] = RelNode(
        Project(
            (
                ("order_id", Col("order_id")),
                ("amount", Col("amount")),
                ("pred", MLExpr("g0", (Col("store_vec"),))),
            )
        ),
        (j,),
    )
    return Plan(rels, top, {"g0": catalog.model(model_name)})


# concat-then-score variants share a builder that wraps both vectors in one
# two-input joint model (concat -> matmul -> ... inside the graph)


TEMPLATES: dict[str, QueryTemplate] = {}


def _add(tid, dataset, model, filters, build):
    TEMPLATES[tid] = QueryTemplate(tid, dataset, model, tuple(filters), build)


_add(
    "ml_pair_tt", "movielens_mini",
    ModelTemplate("two_tower", in_dim=U_VEC, in_dim2=M_VEC, hidden=(256, 256), out_dim=16),
    [FilterSlot("movie", "genre", "le", 0.40, 0.55)],
    _b_ml_pair_two_tower,
)
_add(
    "ml_trending", "movielens_mini",
    ModelTemplate("mlp", in_dim=M_VEC, hidden=(64,), out_dim=1, final_act="sigmoid"),
    [FilterSlot("movie", "year", "ge", 0.30, 0.45)],
    _b_ml_trending,
)
_add(
    "ml_joint_dnn", "movielens_mini",
    ModelTemplate("joint_mlp", in_dim=U_VEC, in_dim2=M_VEC, hidden=(96,), out_dim=1),
    [FilterSlot("movie", "genre", "le", 0.35, 0.50), FilterSlot("user", "age", "le", 0.55, 0.70)],
    _b_ml_joint,
)
_add(
    "ml_rating_dnn", "movielens_mini",
    ModelTemplate("joint_mlp", in_dim=U_VEC, in_dim2=M_VEC, hidden=(64, 32), out_dim=1),
    [FilterSlot("movie", "year", "le", 0.45, 0.60)],
    _b_ml_joint,
)
_add(
    "ml_svd_proj", "movielens_mini",
    ModelTemplate("single_matmul", in_dim=U_VEC, out_dim=16),
    [FilterSlot("user", "age", "ge", 0.40, 0.55)],
    _b_ml_single("user", ("user_id",), ("user_vec",)),
)
_add(
    "ml_forest", "movielens_mini",
    ModelTemplate("forest", in_dim=M_VEC, trees=24, depth=5),
    [FilterSlot("movie", "year", "ge", 0.50, 0.65)],
    _b_ml_single("movie", ("movie_id",), ("movie_vec",)),
)
_add(
    "ml_autoenc", "movielens_mini",
    ModelTemplate("mlp", in_dim=TAG_VEC, hidden=(96,), out_dim=8),
    [],
    _b_ml_single("movie_tag", ("movie_id",), ("tag_vec",)),
)
_add(
    "ml_tag_sim", "movielens_mini",
    ModelTemplate("two_tower", in_dim=M_VEC, in_dim2=M_VEC, hidden=(64,), out_dim=8),
    [FilterSlot("movie", "genre", "le", 0.25, 0.40)],
    _b_ml_tag_pairs,
)
_add(
    "ml_centroids", "movielens_mini",
    ModelTemplate("centroids", in_dim=U_VEC, out_dim=8),
    [FilterSlot("user", "occupation", "le", 0.45, 0.60)],
    _b_ml_single("user", ("user_id",), ("user_vec",)),
)
_add(
    "ml_two_filters", "movielens_mini",
    ModelTemplate("mlp", in_dim=M_VEC, hidden=(48,), out_dim=1, final_act="sigmoid"),
    [FilterSlot("movie", "year", "ge", 0.35, 0.50)],
    _b_ml_filter_chain,
)

_add(
    "rt_trip", "retail_mini",
    ModelTemplate("joint_mlp", in_dim=ORDER_VEC, in_dim2=STORE_VEC, hidden=(64,), out_dim=1),
    [FilterSlot("orders", "weekday", "le", 0.70, 0.85)],
    _b_rt_trip,
)
_add(
    "rt_fraud2", "retail_mini",
    (
        ModelTemplate("forest", in_dim=TXN_VEC, trees=20, depth=5),
        ModelTemplate("mlp", in_dim=CUST_VEC, hidden=(32,), out_dim=1, final_act="sigmoid"),
    ),
    [FilterSlot("txn", "amount", "ge", 0.40, 0.55)],
    _b_rt_fraud,
)
_add(
    "rt_pair_tt", "retail_mini",
    ModelTemplate("two_tower", in_dim=CUST_VEC, in_dim2=STORE_VEC, hidden=(96,), out_dim=12),
    [FilterSlot("customer", "birth_year", "le", 0.50, 0.65)],
    _b_rt_pair,
)
_add(
    "rt_forest", "retail_mini",
    ModelTemplate("forest", in_dim=ORDER_VEC, trees=28, depth=5, forest_agg="majority"),
    [FilterSlot("orders", "amount", "ge", 0.35, 0.50)],
    _b_ml_single("orders", ("order_id",), ("order_vec",)),
)
_add(
    "rt_logreg", "retail_mini",
    ModelTemplate("mlp", in_dim=TXN_VEC, hidden=(), out_dim=1, final_act="sigmoid"),
    [FilterSlot("txn", "hour", "le", 0.55, 0.70)],
    _b_ml_single("txn", ("txn_id",), ("txn_vec",)),
)
_add(
    "rt_kmeans", "retail_mini",
    ModelTemplate("centroids", in_dim=CUST_VEC, out_dim=6),
    [FilterSlot("customer", "country", "le", 0.55, 0.70)],
    _b_ml_single("customer", ("customer_id",), ("cust_vec",)),
)
_add(
    "rt_sales", "retail_mini",
    ModelTemplate("mlp", in_dim=STORE_VEC, hidden=(48,), out_dim=1),
    [FilterSlot("orders", "amount", "ge", 0.45, 0.60)],
    _b_rt_sales,
)
_add(
    "rt_segment", "retail_mini",
    ModelTemplate("mlp", in_dim=CUST_VEC, hidden=(40,), out_dim=4, final_act="softmax"),
    [FilterSlot("customer", "birth_year", "ge", 0.40, 0.55)],
    _b_rt_segment,
)
_add(
    "rt_spam", "retail_mini",
    ModelTemplate("mlp", in_dim=TXN_VEC, hidden=(56,), out_dim=2, final_act="softmax"),
    [FilterSlot("txn", "amount", "le", 0.60, 0.75)],
    _b_ml_single("txn", ("txn_id",), ("txn_vec",)),
)
_add(
    "rt_joint_tt", "retail_mini",
    ModelTemplate("joint_mlp", in_dim=CUST_VEC, in_dim2=STORE_VEC, hidden=(72,), out_dim=1),
    [FilterSlot("customer", "country", "le", 0.45, 0.60)],
    _b_rt_joint_pair,
)

# fixed in/out-of-distribution partition (shuffle seed 7, first six are OOD)
_order = sorted(TEMPLATES)
_perm = _rng("template-split", 7).permutation(len(_order))
OOD_TEMPLATES = tuple(sorted(_order[i] for i in _perm[:6]))
ID_TEMPLATES = tuple(sorted(set(_order) - set(OOD_TEMPLATES)))


def _register_joint_mlp(template: ModelTemplate, seed: int, catalog: Catalog, name: str) -> str:
    """Two-input model: concat -> matmul chain; the factorization target."""
    if name in catalog.models:
        return name
    rng = _rng("model", "joint", seed)
    weights: dict[str, np.ndarray] = {}
    dims = [template.in_dim + template.in_dim2] + [
        _jitter_dim(rng, h, template.jitter) for h in template.hidden
    ] + [template.out_dim]
    specs, edges, out = _chain_specs("", dims, template.act, template.final_act, weights, rng)
    specs["cc"] = {"kind": "concat"}
    edges = [("a", "cc", 0), ("b", "cc", 1), ("cc", "mm0", 0)] + edges
    inputs = [("a", (template.in_dim,)), ("b", (template.in_dim2,))]
    p = lambda k: f"{name}.{k}"
    for key, w in weights.items():
        catalog.params[p(key)] = np.asarray(w, dtype=np.float64)
    qualified = {}
    for nid, spec in specs.items():
        spec = dict(spec)
        for kk in ("weight", "bias"):
            if spec.get(kk):
                spec[kk] = p(spec[kk])
        qualified[nid] = spec
    graph = ir.build_graph(inputs, qualified, edges, [out], catalog)
    for key in weights:
        del catalog.params[p(key)]
    catalog.register_model(name, graph, weights)
    return name


def _sample_named_model(template: ModelTemplate, seed: int, catalog: Catalog, name: str) -> str:
    if template.kind == "joint_mlp":
        return _register_joint_mlp(template, seed, catalog, name)
    return sample_model(template, seed, catalog, name)


def sample_query(template_id: str, seed: int, catalog: Catalog) -> dict:
    """Instantiate a template: sample its model(s) and filter literals, and
    return the query as a plan document. Deterministic given (template_id,
    seed, catalog data)."""
    template = TEMPLATES[template_id]
    rng = _rng("query", template_id, seed)
    if isinstance(template.model, tuple):
        names = tuple(
            _sample_named_model(m, seed, catalog, f"{template_id}_s{seed}_m{i}")
            for i, m in enumerate(template.model)
        )
        model_name = names
    elif template.model is not None:
        model_name = _sample_named_model(
            template.model, seed, catalog, f"{template_id}_s{seed}"
        )
    else:
        model_name = None
    filters = _filters_of(template, rng, catalog)
    plan = template.build(rng, catalog, model_name, filters)
    errors = ir.validate(plan, catalog)
    if errors:
        raise CrossplanError(f"template {template_id}: {'; '.join(errors)}")
    doc = plandoc.plan_to_doc(plan)
    doc["template"] = template_id
    doc["seed"] = seed
    doc["declared_filters"] = [
        {"table": s.table, "column": s.column, "op": s.op, "selectivity": sel}
        for s, lit, sel in filters
    ]
    return doc
