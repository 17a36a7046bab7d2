"""Shared fixtures: a small catalog with a two-tower recommendation model
and the pair-scoring query used across the rule, search and executor tests."""

from __future__ import annotations

import numpy as np

from crossplan import ir
from crossplan.catalog import Catalog
from crossplan.tables import INT64, schema, table_create, vector
from crossplan.ir import (
    Col,
    CrossJoin,
    Filter,
    Cmp,
    Lit,
    MLExpr,
    Plan,
    Project,
    RelNode,
    TableScan,
    build_graph,
)

U_DIM, M_DIM, HID, EMB = 8, 6, 16, 4


def make_users(rng, n) -> list[list]:
    return [
        [i, int(rng.integers(18, 70)), rng.normal(size=U_DIM)] for i in range(n)
    ]


def make_movies(rng, n) -> list[list]:
    return [
        [i, int(rng.integers(0, 6)), rng.normal(size=M_DIM)] for i in range(n)
    ]


def two_tower_weights(rng) -> dict[str, np.ndarray]:
    return {
        "wu0": rng.normal(size=(U_DIM, HID)) / np.sqrt(U_DIM),
        "bu0": rng.normal(size=HID) * 0.1,
        "wu1": rng.normal(size=(HID, EMB)) / np.sqrt(HID),
        "wm0": rng.normal(size=(M_DIM, HID)) / np.sqrt(M_DIM),
        "bm0": rng.normal(size=HID) * 0.1,
        "wm1": rng.normal(size=(HID, EMB)) / np.sqrt(HID),
    }


def two_tower_graph(catalog: Catalog, model: str = "two_tower"):
    p = lambda k: f"{model}.{k}"
    return build_graph(
        inputs=[("u", (U_DIM,)), ("m", (M_DIM,))],
        node_specs={
            "u_mm": {"kind": "matmul", "weight": p("wu0")},
            "u_add": {"kind": "matadd", "bias": p("bu0")},
            "u_act": {"kind": "relu"},
            "u_out": {"kind": "matmul", "weight": p("wu1")},
            "m_mm": {"kind": "matmul", "weight": p("wm0")},
            "m_add": {"kind": "matadd", "bias": p("bm0")},
            "m_act": {"kind": "relu"},
            "m_out": {"kind": "matmul", "weight": p("wm1")},
            "head": {"kind": "cos_sim"},
        },
        edges=[
            ("u", "u_mm", 0), ("u_mm", "u_add", 0), ("u_add", "u_act", 0),
            ("u_act", "u_out", 0),
            ("m", "m_mm", 0), ("m_mm", "m_add", 0), ("m_add", "m_act", 0),
            ("m_act", "m_out", 0),
            ("u_out", "head", 0), ("m_out", "head", 1),
        ],
        outputs=["head"],
        catalog=catalog,
    )


def build_catalog(seed: int = 0, n_users: int = 6, n_movies: int = 4) -> Catalog:
    rng = np.random.default_rng(seed)
    cat = Catalog()
    cat.register_table(
        "users",
        table_create(
            schema([("user_id", INT64), ("age", INT64), ("uvec", vector(U_DIM))]),
            make_users(rng, n_users),
        ),
    )
    cat.register_table(
        "movies",
        table_create(
            schema([("movie_id", INT64), ("genre", INT64), ("mvec", vector(M_DIM))]),
            make_movies(rng, n_movies),
        ),
    )
    weights = two_tower_weights(rng)
    # register params first so graph building can see shapes
    for k, w in weights.items():
        cat.params[f"two_tower.{k}"] = w
    graph = two_tower_graph(cat)
    for k in weights:
        del cat.params[f"two_tower.{k}"]
    cat.register_model("two_tower", graph, weights)
    return cat


def two_tower_plan(cat: Catalog, genre_filter: int | None = None) -> Plan:
    """Scan users and movies, project features, cross join, score each pair."""
    rels = {
        0: RelNode(TableScan("users")),
        1: RelNode(TableScan("movies")),
        2: RelNode(
            Project((("user_id", Col("user_id")), ("uf", Col("uvec")))), (0,)
        ),
    }
    movie_src = 1
    if genre_filter is not None:
        rels[5] = RelNode(
            Filter(Cmp("eq", Col("genre"), Lit(genre_filter))), (1,)
        )
        movie_src = 5
    rels[3] = RelNode(
        Project((("movie_id", Col("movie_id")), ("mf", Col("mvec")))), (movie_src,)
    )
    rels[4] = RelNode(CrossJoin(), (2, 3))
    rels[6] = RelNode(
        Project(
            (
                ("user_id", Col("user_id")),
                ("movie_id", Col("movie_id")),
                ("score", MLExpr("g_tt", (Col("uf"), Col("mf")))),
            )
        ),
        (4,),
    )
    return Plan(rels, 6, {"g_tt": cat.model("two_tower")})
