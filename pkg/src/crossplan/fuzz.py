"""Randomized rule-equivalence checking.

Generates small plans over tiny random catalogs, targeted so that each rule
has applicable bindings, applies a randomly chosen binding, and executes
both plans to compare results after canonical row ordering. Used by the
``verify`` CLI subcommand and the acceptance suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ir, mlfn, rules
from .catalog import Catalog
from .executor import execute
from .rules import RuleId
from .tables import FLOAT64, INT64, schema, table_create, tables_equal, vector
from .ir import (
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

# float comparison tolerance per rule: graph-level rewrites must agree at
# kernel precision; relational rewrites and factorizations at 1e-6; class
# outputs of forest conversions exactly
RULE_RTOL = {
    RuleId.R4_1: 1e-9,
    RuleId.R4_2: 1e-9,
    RuleId.R3_2: 0.0,
}
DEFAULT_RTOL = 1e-6


def _rtol_for(rule: RuleId) -> float:
    return RULE_RTOL.get(rule, DEFAULT_RTOL)


def random_catalog(rng: np.random.Generator, max_rows: int = 32) -> Catalog:
    """Two joinable tables with scalar and vector features."""
    cat = Catalog(tile_width=3)
    d1 = int(rng.integers(3, 7))
    d2 = int(rng.integers(3, 7))
    n1 = int(rng.integers(4, max_rows + 1))
    n2 = int(rng.integers(3, max(4, max_rows // 2)))
    cat.register_table(
        "s",
        table_create(
            schema([
                ("sid", INT64), ("fk", INT64), ("sval", FLOAT64),
                ("svec", vector(d1)),
            ]),
            [
                [i, int(rng.integers(0, n2)), float(rng.normal()),
                 rng.normal(size=d1)]
                for i in range(n1)
            ],
        ),
    )
    cat.register_table(
        "r",
        table_create(
            schema([
                ("rid", INT64), ("rval", FLOAT64), ("rvec", vector(d2)),
            ]),
            [[i, float(rng.normal()), rng.normal(size=d2)] for i in range(n2)],
        ),
    )
    return cat


def _register(cat: Catalog, name: str, inputs, specs, edges, outputs, weights, forests=None):
    p = lambda k: f"{name}.{k}"
    for k, w in weights.items():
        cat.params[p(k)] = np.asarray(w, dtype=np.float64)
    for k, f in (forests or {}).items():
        cat.forests[p(k)] = f
    qualified = {
        nid: {
            **spec,
            **{kk: p(spec[kk]) for kk in ("weight", "bias") if spec.get(kk)},
        }
        for nid, spec in specs.items()
    }
    g = ir.build_graph(inputs, qualified, edges, outputs, cat)
    for k in weights:
        del cat.params[p(k)]
    for k in forests or {}:
        del cat.forests[p(k)]
    cat.register_model(name, g, weights, forests or {})
    return name


def _mlp_model(cat: Catalog, rng, name: str, in_dim: int, hidden: int, out_dim: int,
               act: str = "relu", dense: bool = False):
    w0 = rng.normal(size=(in_dim, hidden)) / np.sqrt(in_dim)
    b0 = rng.normal(size=hidden) * 0.1
    w1 = rng.normal(size=(hidden, out_dim)) / np.sqrt(hidden)
    if dense:
        specs = {
            "l0": {"kind": "dense_layer", "weight": "w0", "bias": "b0", "act": act},
            "l1": {"kind": "matmul", "weight": "w1"},
        }
        edges = [("x", "l0", 0), ("l0", "l1", 0)]
    else:
        specs = {
            "mm0": {"kind": "matmul", "weight": "w0"},
            "add0": {"kind": "matadd", "bias": "b0"},
            "act0": {"kind": act},
            "mm1": {"kind": "matmul", "weight": "w1"},
        }
        edges = [("x", "mm0", 0), ("mm0", "add0", 0), ("add0", "act0", 0), ("act0", "mm1", 0)]
    return _register(
        cat, name, [("x", (in_dim,))], specs, edges,
        ["l1" if dense else "mm1"], {"w0": w0, "b0": b0, "w1": w1},
    )


def _concat_matmul_model(cat, rng, name, d1, d2, out_dim, with_rest):
    w = rng.normal(size=(d1 + d2, out_dim)) / np.sqrt(d1 + d2)
    specs = {
        "cc": {"kind": "concat"},
        "mm": {"kind": "matmul", "weight": "w"},
    }
    edges = [("a", "cc", 0), ("b", "cc", 1), ("cc", "mm", 0)]
    out = "mm"
    weights = {"w": w}
    if with_rest:
        b = rng.normal(size=out_dim) * 0.1
        specs["add"] = {"kind": "matadd", "bias": "b"}
        specs["act"] = {"kind": "tanh"}
        edges += [("mm", "add", 0), ("add", "act", 0)]
        weights["b"] = b
        out = "act"
    return _register(
        cat, name, [("a", (d1,)), ("b", (d2,))], specs, edges, [out], weights
    )


def _two_tower_model(cat, rng, name, d1, d2, emb):
    wu = rng.normal(size=(d1, emb)) / np.sqrt(d1)
    wm = rng.normal(size=(d2, emb)) / np.sqrt(d2)
    specs = {
        "tu": {"kind": "matmul", "weight": "wu"},
        "tm": {"kind": "matmul", "weight": "wm"},
        "head": {"kind": "cos_sim"},
    }
    edges = [("a", "tu", 0), ("b", "tm", 0), ("tu", "head", 0), ("tm", "head", 1)]
    return _register(
        cat, name, [("a", (d1,)), ("b", (d2,))], specs, edges, ["head"],
        {"wu": wu, "wm": wm},
    )


def _forest_model(cat, rng, name, in_dim, agg):
    from .workload import _random_tree

    trees = tuple(_random_tree(rng, in_dim, int(rng.integers(2, 4))) for _ in range(int(rng.integers(2, 6))))
    specs = {"df": {"kind": "decision_forest", "weight": "f", "agg": agg}}
    return _register(
        cat, name, [("x", (in_dim,))], specs, [("x", "df", 0)], ["df"],
        {}, {"f": mlfn.Forest(trees)},
    )


def _centroid_model(cat, rng, name, in_dim):
    c = rng.normal(size=(int(rng.integers(2, 5)), in_dim))
    specs = {"dc": {"kind": "dist_centroids", "weight": "c"}}
    return _register(cat, name, [("x", (in_dim,))], specs, [("x", "dc", 0)], ["dc"], {"c": c})


def _single_matmul_model(cat, rng, name, in_dim):
    w = rng.normal(size=(in_dim, int(rng.integers(2, 8))))
    specs = {"mm": {"kind": "matmul", "weight": "w"}}
    return _register(cat, name, [("x", (in_dim,))], specs, [("x", "mm", 0)], ["mm"], {"w": w})


def _scalar_pred(rng, col: str):
    op = str(rng.choice(["gt", "lt", "ge", "le"]))
    lit = Lit(float(np.round(rng.normal(), 2)))
    pred = Cmp(op, Col(col), lit)
    if rng.random() < 0.3:
        # fold a constant subtree in so R4_4 always has sites
        pred = Logic(
            "and",
            (pred, Cmp("lt", Lit(1.0), Arith("add", Lit(1.0), Lit(1.0)))),
        )
    return pred


def random_plan_for_rule(rule: RuleId, rng: np.random.Generator) -> tuple[Plan, Catalog]:
    """A small random plan guaranteed (by construction) to have at least one
    binding for ``rule``."""
    cat = random_catalog(rng)
    d1 = cat.table("s").schema.typeof("svec").dim
    d2 = cat.table("r").schema.typeof("rvec").dim
    join_kind = "hash" if rng.random() < 0.4 else "cross"

    rels: dict[int, RelNode] = {
        0: RelNode(TableScan("s")),
        1: RelNode(TableScan("r")),
    }
    if join_kind == "hash":
        rels[2] = RelNode(HashJoin(("fk",), ("rid",)), (0, 1))
    else:
        rels[2] = RelNode(CrossJoin(), (0, 1))
    top = 2
    graphs: dict[str, mlfn.MLGraph] = {}

    def add(node: RelNode) -> int:
        nonlocal top
        nid = max(rels) + 1
        rels[nid] = node
        top = nid
        return nid

    if rule == RuleId.R1_1:
        add(RelNode(Filter(_scalar_pred(rng, "sval")), (top,)))
        add(RelNode(Filter(_scalar_pred(rng, "rval")), (top,)))
    elif rule == RuleId.R1_2:
        col = "sval" if rng.random() < 0.5 else "rval"
        add(RelNode(Filter(_scalar_pred(rng, col)), (top,)))
    elif rule == RuleId.R1_3:
        name = _mlp_model(cat, rng, "m0", d1, int(rng.integers(3, 6)), 1)
        graphs["g0"] = cat.model(name)
        add(
            RelNode(
                Project(
                    (
                        ("sid", Col("sid")),
                        ("rid", Col("rid")),
                        ("score", MLExpr("g0", (Col("svec"),))),
                    )
                ),
                (top,),
            )
        )
    elif rule == RuleId.R1_4:
        shape = rng.random()
        if shape < 0.35:
            add(
                RelNode(
                    Filter(
                        Logic(
                            "and",
                            (_scalar_pred(rng, "sval"), _scalar_pred(rng, "rval")),
                        )
                    ),
                    (top,),
                )
            )
        elif shape < 0.6:
            name = _mlp_model(cat, rng, "m0", d1, 4, 1, act="sigmoid")
            graphs["g0"] = cat.model(name)
            add(
                RelNode(
                    Filter(Cmp("gt", MLExpr("g0", (Col("svec"),)), Lit(0.0))),
                    (top,),
                )
            )
        else:
            name = _two_tower_model(cat, rng, "m0", d1, d2, 3)
            graphs["g0"] = cat.model(name)
            add(
                RelNode(
                    Project(
                        (
                            ("sid", Col("sid")),
                            (
                                "score",
                                Arith(
                                    "mul",
                                    MLExpr("g0", (Col("svec"), Col("rvec"))),
                                    Lit(2.0),
                                ),
                            ),
                        )
                    ),
                    (top,),
                )
            )
    elif rule == RuleId.R2_1:
        name = _concat_matmul_model(
            cat, rng, "m0", d1, d2, int(rng.integers(1, 5)), with_rest=rng.random() < 0.6
        )
        graphs["g0"] = cat.model(name)
        add(
            RelNode(
                Project(
                    (
                        ("sid", Col("sid")),
                        ("y", MLExpr("g0", (Col("svec"), Col("rvec")))),
                    )
                ),
                (top,),
            )
        )
    elif rule == RuleId.R3_1:
        name = _single_matmul_model(cat, rng, "m0", d1)
        graphs["g0"] = cat.model(name)
        add(
            RelNode(
                Project(
                    (("sid", Col("sid")), ("y", MLExpr("g0", (Col("svec"),))))
                ),
                (top,),
            )
        )
    elif rule == RuleId.R3_2:
        name = _forest_model(cat, rng, "m0", d1, str(rng.choice(["sigmoid_sum", "majority"])))
        graphs["g0"] = cat.model(name)
        add(
            RelNode(
                Project(
                    (("sid", Col("sid")), ("y", MLExpr("g0", (Col("svec"),))))
                ),
                (top,),
            )
        )
    elif rule == RuleId.R3_3:
        name = _centroid_model(cat, rng, "m0", d1)
        graphs["g0"] = cat.model(name)
        add(
            RelNode(
                Project(
                    (("sid", Col("sid")), ("y", MLExpr("g0", (Col("svec"),))))
                ),
                (top,),
            )
        )
    elif rule in (RuleId.R4_1, RuleId.R4_2):
        if rng.random() < 0.5:
            name = _mlp_model(cat, rng, "m0", d1, int(rng.integers(3, 6)), 2,
                              dense=rng.random() < 0.4)
        else:
            name = _two_tower_model(cat, rng, "m0", d1, d2, 3)
        graphs["g0"] = cat.model(name)
        args = (
            (Col("svec"),)
            if len(cat.model(name).inputs) == 1
            else (Col("svec"), Col("rvec"))
        )
        add(
            RelNode(
                Project((("sid", Col("sid")), ("y", MLExpr("g0", args)))),
                (top,),
            )
        )
    elif rule == RuleId.R4_4:
        name = _mlp_model(cat, rng, "m0", d1, 3, 1)
        graphs["g0"] = cat.model(name)
        const_vec = Lit(tuple(float(x) for x in rng.normal(size=d1)))
        add(
            RelNode(
                Filter(
                    Cmp(
                        "lt",
                        Arith("mul", Lit(2.0), Lit(3.0)),
                        Arith("add", Lit(5.0), Lit(2.0)),
                    )
                ),
                (top,),
            )
        )
        add(
            RelNode(
                Project(
                    (
                        ("sid", Col("sid")),
                        ("bias", MLExpr("g0", (const_vec,))),
                        ("y", MLExpr("g0", (Col("svec"),))),
                    )
                ),
                (top,),
            )
        )
    else:
        raise AssertionError(rule)
    return Plan(rels, top, graphs), cat


@dataclass
class FuzzFailure:
    rule: str
    seed: int
    binding: str
    detail: str


def fuzz_rule(rule: RuleId, n: int, seed: int = 0) -> tuple[int, list[FuzzFailure]]:
    """Run ``n`` random (plan, binding) equivalence checks for one rule.
    Returns (checked, failures)."""
    failures: list[FuzzFailure] = []
    checked = 0
    attempt = 0
    rtol = _rtol_for(rule)
    while checked < n:
        attempt += 1
        rng = np.random.default_rng((seed, rule.value, attempt))
        plan, cat = random_plan_for_rule(rule, rng)
        bindings = rules.enumerate_bindings(plan, rule, cat)
        if not bindings:
            if attempt > 20 * n:
                failures.append(
                    FuzzFailure(rule.name, attempt, "-", "generator produced no bindings")
                )
                break
            continue
        binding = bindings[int(rng.integers(len(bindings)))]
        try:
            rewritten = rules.apply_rule(plan, binding, cat)
            base, _ = execute(plan, cat)
            out, _ = execute(rewritten, cat)
        except Exception as e:  # noqa: BLE001 - report, don't crash the sweep
            failures.append(FuzzFailure(rule.name, attempt, binding.describe(), repr(e)))
            checked += 1
            continue
        if ir.validate(rewritten, cat):
            failures.append(
                FuzzFailure(rule.name, attempt, binding.describe(), "rewrite fails validation")
            )
        elif not tables_equal(base, out, rtol=rtol, atol=rtol * 1e-3):
            failures.append(
                FuzzFailure(rule.name, attempt, binding.describe(), "results differ")
            )
        checked += 1
    return checked, failures


def fuzz_all(n_per_rule: int, seed: int = 0):
    """Equivalence sweep over every rule; returns {rule: (checked, failures)}."""
    return {rule: fuzz_rule(rule, n_per_rule, seed) for rule in RuleId}
