"""Monte-Carlo tree search over the rewrite-rule action space, with a
reusable forest of search trees indexed by plan embeddings, plus the
arbitrary/heuristic/exhaustive baselines.

Actions are rule ids (one edge per rule per node); expanding an edge
configures the rule by enumerating its bindings and keeping the one with
the lowest estimated cost (tensor-relational rules are first narrowed to
the top-k largest parameter tensors). Rewards are cost reductions of
rollout terminals relative to the search (sub)root.

On an index hit the search resumes from the matched node of an earlier
query's tree; statistics updates stop at that sub-root so foreign trees are
not contaminated. Because a matched tree was built for a *similar* plan,
not this one, the best action trace found under the sub-root is replayed
onto the incoming plan (re-configuring each rule) to produce its result.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import cost as cost_mod
from . import embed, ir, rules
from .catalog import Catalog
from .errors import (
    CrossplanError,
    FrontierExplosion,
    FullyExpanded,
    NoBinding,
    NoChildren,
)
from .rules import Binding, RuleId

ALL_RULES = tuple(RuleId)
STRATEGIES = ("unoptimized", "arbitrary", "heuristic", "vanilla_mcts", "reusable", "exhaustive")


@dataclass(frozen=True)
class MctsConfig:
    c: float = math.sqrt(2.0)
    budget: int = 100
    max_depth: int = 8
    rollout_max_steps: int = 16
    reward_mode: str = "relative"  # or "absolute"
    seed: int = 0
    theta: float = 0.95
    top_k: int = 3
    reuse_budget_fraction: float = 0.25
    extraction: str = "best_cost"  # or "greedy_mean"
    allowed_rules: tuple[RuleId, ...] = ALL_RULES
    max_candidates: int = 32
    exhaustive_cap: int = 20000

    def __post_init__(self):
        if self.c <= 0 or self.budget < 1:
            raise CrossplanError("c must be > 0 and budget >= 1")


class SearchNode:
    __slots__ = (
        "uid", "plan", "embedding", "parent", "action", "binding",
        "children", "n", "r", "explored", "depth", "cost",
        "best_cost_seen", "best_trace",
    )

    _next_uid = 0

    def __init__(self, plan, embedding, parent, action, binding, depth, cost):
        SearchNode._next_uid += 1
        self.uid = SearchNode._next_uid
        self.plan = plan
        self.embedding = embedding
        self.parent = parent
        self.action = action
        self.binding = binding
        self.children: dict[RuleId, SearchNode] = {}
        self.n = 0
        self.r = 0.0
        self.explored: set[RuleId] = set()
        self.depth = depth
        self.cost = cost
        # cheapest plan cost observed in this subtree (including rollout
        # trajectories) and the action trace from here that reached it;
        # persists across queries that resume from this node
        self.best_cost_seen = cost
        self.best_trace: list[Binding] = []

    def offer_best(self, cost: float, trace: list) -> None:
        if cost < self.best_cost_seen:
            self.best_cost_seen = cost
            self.best_trace = list(trace)

    def fully_expanded(self, allowed) -> bool:
        return all(a in self.explored for a in allowed)

    def is_terminal(self, config: MctsConfig) -> bool:
        if self.depth >= config.max_depth:
            return True
        return self.fully_expanded(config.allowed_rules) and not self.children


class SearchForest:
    """Shared state across queries: search trees, the embedding label
    context, and the cosine index over all tree nodes."""

    def __init__(self, theta: float = 0.95, label_ctx: embed.LabelContext | None = None):
        self.roots: list[SearchNode] = []
        self.ctx = label_ctx or embed.LabelContext()
        self.index = embed.NodeIndex(match_threshold=theta)

    def node_count(self) -> int:
        return len(self.index)


@dataclass
class Report:
    strategy: str
    collision: bool
    iterations: int
    root_cost: float
    best_cost: float
    rules_applied: list[str]
    plan_fingerprint: str
    opt_wall_ns: int = 0

    def to_doc(self, deterministic: bool = False) -> dict:
        doc = {
            "strategy": self.strategy,
            "collision": self.collision,
            "iterations": self.iterations,
            "root_cost": self.root_cost,
            "best_cost": self.best_cost,
            "rules_applied": self.rules_applied,
            "plan_fingerprint": self.plan_fingerprint,
        }
        if not deterministic:
            doc["opt_wall_ns"] = self.opt_wall_ns
        return doc


@dataclass
class _Env:
    catalog: Catalog
    model: cost_mod.CostModel
    config: MctsConfig
    rng: np.random.Generator

    def plan_cost(self, plan) -> float:
        return cost_mod.estimate_cost(plan, self.catalog, self.model).total


# ---------------------------------------------------------------------------
# core moves


def ucb(r: float, n: int, parent_n: int, c: float) -> float:
    if n == 0:
        return math.inf
    return r / n + c * math.sqrt(math.log(parent_n) / n)


def select(node: SearchNode, c: float) -> SearchNode:
    """UCB argmax over children; unvisited children win, ties break to the
    lowest rule ordinal."""
    if not node.children:
        raise NoChildren(f"node {node.uid} has no children")
    best, best_score = None, -math.inf
    for action in sorted(node.children, key=lambda a: a.value):
        child = node.children[action]
        score = ucb(child.r, child.n, max(node.n, 1), c)
        if score > best_score:
            best, best_score = child, score
    return best


def _binding_weight_bytes(plan, binding: Binding, catalog: Catalog) -> int:
    nid, out_idx = binding.site
    e = plan.rels[nid].op.outputs[out_idx][1]
    g = plan.graphs[e.graph_id]
    node = next(iter(g.nodes.values()))
    if node.weight_ref in catalog.params:
        return catalog.params[node.weight_ref].nbytes
    if node.weight_ref in catalog.forests:
        obj = catalog.forests[node.weight_ref]
        trees = obj.trees if hasattr(obj, "trees") else (obj,)
        return sum(len(t.feature) * 40 for t in trees)
    return 0


_TOP_K_RULES = (RuleId.R3_1, RuleId.R3_2, RuleId.R3_3)


def configure_action(plan, rule: RuleId, env: _Env, flavor: str | None = None):
    """Choose the binding of ``rule`` minimizing the estimated cost of the
    rewritten plan; tensor-relational rules consider only the top-k largest
    parameter tensors. ``flavor`` restricts candidates to one site kind
    (used when replaying a recorded trace). Returns (binding, new_plan,
    new_cost)."""
    candidates = rules.enumerate_bindings(plan, rule, env.catalog)
    if flavor is not None:
        flavored = [
            b for b in candidates
            if b.site and isinstance(b.site[0], str) and b.site[0] == flavor
        ]
        candidates = flavored or candidates
    if not candidates:
        raise NoBinding(rule.name)
    if rule in _TOP_K_RULES and len(candidates) > env.config.top_k:
        ranked = sorted(
            candidates,
            key=lambda b: (-_binding_weight_bytes(plan, b, env.catalog), b.site),
        )
        candidates = ranked[: env.config.top_k]
    candidates = candidates[: env.config.max_candidates]
    best = None
    for b in candidates:
        new_plan = rules.apply_rule(plan, b, env.catalog)
        c = env.plan_cost(new_plan)
        if best is None or c < best[2]:
            best = (b, new_plan, c)
    return best


def expand(node: SearchNode, env: _Env, forest_ctx, created: list) -> SearchNode | None:
    """Explore one random untried action; actions without bindings are
    marked explored without a child (returns None in that case)."""
    untried = [a for a in env.config.allowed_rules if a not in node.explored]
    if not untried:
        raise FullyExpanded(f"node {node.uid}")
    action = untried[int(env.rng.integers(len(untried)))]
    node.explored.add(action)
    try:
        binding, new_plan, new_cost = configure_action(node.plan, action, env)
    except NoBinding:
        return None
    fv = embed.embed_plan(new_plan, forest_ctx, env.catalog)
    child = SearchNode(new_plan, fv, node, action, binding, node.depth + 1, new_cost)
    node.children[action] = child
    created.append(child)
    return child


def rollout(plan, depth: int, env: _Env):
    """Random configured-action walk; stops at the step/depth limits or when
    every action only reaches already-seen plans (fingerprint guard).
    Returns (terminal_cost, best_cost, best_plan, best_trace) where the best
    entries track the cheapest plan visited anywhere on the trajectory."""
    seen = {ir.plan_fingerprint(plan)}
    current = plan
    current_cost = env.plan_cost(plan)
    best_cost, best_plan, best_trace = current_cost, current, []
    trace: list[Binding] = []
    steps = 0
    while steps < env.config.rollout_max_steps and depth < env.config.max_depth:
        order = list(env.config.allowed_rules)
        env.rng.shuffle(order)
        advanced = False
        for rule in order:
            try:
                binding, new_plan, new_cost = configure_action(current, rule, env)
            except NoBinding:
                continue
            fp = ir.plan_fingerprint(new_plan)
            if fp in seen:
                continue
            seen.add(fp)
            current, current_cost = new_plan, new_cost
            trace.append(binding)
            if new_cost < best_cost:
                best_cost, best_plan, best_trace = new_cost, new_plan, list(trace)
            advanced = True
            break
        if not advanced:
            break
        steps += 1
        depth += 1
    return current_cost, best_cost, best_plan, best_trace


def compute_reward(root_cost: float, terminal_cost: float, mode: str) -> float:
    if mode == "absolute":
        return root_cost - terminal_cost
    if root_cost == 0:
        return 0.0
    return max(-1.0, min(1.0, (root_cost - terminal_cost) / root_cost))


def backpropagate(node: SearchNode, reward: float, stop_at: SearchNode | None) -> None:
    cur = node
    while cur is not None:
        cur.n += 1
        cur.r += reward
        if cur is stop_at:
            break
        cur = cur.parent


# ---------------------------------------------------------------------------
# search loop


@dataclass
class _Incumbent:
    """Cheapest plan observed anywhere during one search, with the action
    trace (tree path plus rollout steps) that produced it."""

    cost: float
    plan: object
    trace: list

    def offer(self, cost: float, plan, trace) -> None:
        if cost < self.cost:
            self.cost, self.plan, self.trace = cost, plan, list(trace)


def _search(
    subroot: SearchNode,
    iterations: int,
    env: _Env,
    forest_ctx,
    created: list,
    incumbent: _Incumbent,
):
    root_cost = subroot.cost
    for _ in range(iterations):
        node = subroot
        terminal_cost = None
        while not node.is_terminal(env.config):
            if node.fully_expanded(env.config.allowed_rules):
                try:
                    node = select(node, env.config.c)
                except NoChildren:
                    break
            else:
                child = expand(node, env, forest_ctx, created)
                if child is None:
                    continue
                node = child
                path = _trace_to(child, subroot)
                incumbent.offer(child.cost, child.plan, path)
                _, roll_best, roll_plan, roll_trace = rollout(
                    child.plan, child.depth, env
                )
                incumbent.offer(roll_best, roll_plan, path + roll_trace)
                _record_best(subroot, child, path, roll_best, roll_trace)
                # a random walk may wander past its cheapest state; any
                # prefix is a valid terminal, so score the best one reached
                terminal_cost = roll_best
                break
        if terminal_cost is None:
            terminal_cost = node.cost
        reward = compute_reward(root_cost, terminal_cost, env.config.reward_mode)
        backpropagate(node, reward, subroot)


def _record_best(subroot: SearchNode, child: SearchNode, path: list, roll_best: float, roll_trace: list):
    """Record the expansion and rollout outcomes on every node along the
    path, with the trace suffix that reaches the cheap plan from there."""
    nodes = [child]
    cur = child
    while cur is not subroot and cur.parent is not None:
        cur = cur.parent
        nodes.append(cur)
    nodes.reverse()  # subroot .. child; path[i:] leads from nodes[i] to child
    for i, nd in enumerate(nodes):
        suffix = path[i:]
        nd.offer_best(child.cost, suffix)
        nd.offer_best(roll_best, suffix + roll_trace)


def _subtree_nodes(subroot: SearchNode) -> list[SearchNode]:
    out = []
    frontier = [subroot]
    while frontier:
        cur = frontier.pop()
        out.append(cur)
        frontier.extend(cur.children.values())
    return out


def _trace_to(node: SearchNode, subroot: SearchNode) -> list[Binding]:
    out = []
    cur = node
    while cur is not subroot and cur is not None:
        out.append(cur.binding)
        cur = cur.parent
    return list(reversed(out))


def _extract(subroot: SearchNode, config: MctsConfig) -> SearchNode:
    if config.extraction == "greedy_mean":
        path = [subroot]
        cur = subroot
        while cur.children:
            cur = max(
                sorted(cur.children.values(), key=lambda ch: ch.action.value),
                key=lambda ch: (ch.r / ch.n) if ch.n else -math.inf,
            )
            path.append(cur)
        return min(path, key=lambda nd: nd.cost)
    return min(_subtree_nodes(subroot), key=lambda nd: (nd.cost, nd.depth))


def optimize_reusable(
    plan: ir.Plan,
    forest: SearchForest,
    catalog: Catalog,
    config: MctsConfig | None = None,
    model: cost_mod.CostModel | None = None,
):
    """Reusable search: resume from the nearest indexed state when one
    matches, otherwise grow a new tree. Returns (best_plan, report)."""
    config = config or MctsConfig()
    model = model or cost_mod.default_cost_model(catalog.memory_budget_bytes)
    env = _Env(catalog, model, config, np.random.default_rng(config.seed))
    t0 = time.perf_counter_ns()
    fv = embed.embed_plan(plan, forest.ctx, catalog)
    root_cost = env.plan_cost(plan)
    hit = forest.index.query(fv)
    created: list[SearchNode] = []
    if hit is not None:
        subroot, _sim = hit
        collision = True
        iterations = max(1, int(round(config.budget * config.reuse_budget_fraction)))
    else:
        subroot = SearchNode(plan, fv, None, None, None, 0, root_cost)
        forest.roots.append(subroot)
        created.append(subroot)
        collision = False
        iterations = config.budget
    incumbent = _Incumbent(subroot.cost, subroot.plan, [])
    _search(subroot, iterations, env, forest.ctx, created, incumbent)
    for node in created:
        forest.index.insert(node.embedding, node)
    if collision:
        # the matched subtree's recorded best may come from earlier queries;
        # replay its trace onto this plan
        if config.extraction == "greedy_mean":
            best_node = _extract(subroot, config)
            trace = _trace_to(best_node, subroot)
        else:
            trace = subroot.best_trace
        best_plan, applied, best_cost = _replay(plan, root_cost, trace, env)
    else:
        best_node = _extract(subroot, config)
        if best_node.cost <= incumbent.cost:
            best_plan, best_cost = best_node.plan, best_node.cost
            trace = _trace_to(best_node, subroot)
        else:
            best_plan, best_cost = incumbent.plan, incumbent.cost
            trace = incumbent.trace
        applied = [b.rule.name for b in trace]
    report = Report(
        strategy="reusable",
        collision=collision,
        iterations=iterations,
        root_cost=root_cost,
        best_cost=best_cost,
        rules_applied=applied,
        plan_fingerprint=f"{ir.plan_fingerprint(best_plan):016x}",
        opt_wall_ns=time.perf_counter_ns() - t0,
    )
    return best_plan, report


def _replay(plan, root_cost: float, trace: list[Binding], env: _Env):
    """Re-configure a foreign tree's action trace onto this plan; each step
    prefers bindings of the same site flavor as the recorded one (e.g. an
    'extract' rather than a 'merge_projects' for R1_4) and keeps the
    cheapest prefix so the result never regresses past the input."""
    best_plan, best_cost = plan, root_cost
    current = plan
    applied: list[str] = []
    for binding in trace:
        flavor = binding.site[0] if binding.site and isinstance(binding.site[0], str) else None
        try:
            _, current, cur_cost = configure_action(current, binding.rule, env, flavor)
        except NoBinding:
            continue
        applied.append(binding.rule.name)
        if cur_cost < best_cost:
            best_plan, best_cost = current, cur_cost
    return best_plan, applied, best_cost


# ---------------------------------------------------------------------------
# baselines


def optimize_baseline(
    strategy: str,
    plan: ir.Plan,
    catalog: Catalog,
    config: MctsConfig | None = None,
    model: cost_mod.CostModel | None = None,
):
    config = config or MctsConfig()
    model = model or cost_mod.default_cost_model(catalog.memory_budget_bytes)
    env = _Env(catalog, model, config, np.random.default_rng(config.seed))
    t0 = time.perf_counter_ns()
    root_cost = env.plan_cost(plan)
    if strategy == "unoptimized":
        out, applied, iters, collision = plan, [], 0, False
    elif strategy == "arbitrary":
        out, applied = _arbitrary(plan, env)
        iters, collision = 0, False
    elif strategy == "heuristic":
        out, applied = _heuristic(plan, env)
        iters, collision = 0, False
    elif strategy == "vanilla_mcts":
        forest = SearchForest(theta=config.theta)
        fv = embed.embed_plan(plan, forest.ctx, catalog)
        subroot = SearchNode(plan, fv, None, None, None, 0, root_cost)
        created: list[SearchNode] = [subroot]
        incumbent = _Incumbent(root_cost, plan, [])
        _search(subroot, config.budget, env, forest.ctx, created, incumbent)
        best_node = _extract(subroot, config)
        if best_node.cost <= incumbent.cost:
            out = best_node.plan
            applied = [b.rule.name for b in _trace_to(best_node, subroot)]
        else:
            out = incumbent.plan
            applied = [b.rule.name for b in incumbent.trace]
        iters, collision = config.budget, False
    elif strategy == "exhaustive":
        out, applied = _exhaustive(plan, env)
        iters, collision = 0, False
    else:
        raise CrossplanError(f"unknown strategy {strategy!r}")
    report = Report(
        strategy=strategy,
        collision=collision,
        iterations=iters,
        root_cost=root_cost,
        best_cost=env.plan_cost(out),
        rules_applied=applied,
        plan_fingerprint=f"{ir.plan_fingerprint(out):016x}",
        opt_wall_ns=time.perf_counter_ns() - t0,
    )
    return out, report


def _arbitrary(plan, env: _Env):
    """One pass over the rule catalog applying the first binding of every
    applicable rule."""
    applied = []
    current = plan
    for rule in env.config.allowed_rules:
        bindings = rules.enumerate_bindings(current, rule, env.catalog)
        if bindings:
            current = rules.apply_rule(current, bindings[0], env.catalog)
            applied.append(rule.name)
    return current, applied


def _first(bindings, kinds) -> Binding | None:
    for b in bindings:
        if b.site[0] in kinds:
            return b
    return None


def _heuristic(plan, env: _Env):
    """Fixed strategy: aggressively push filters/projects below joins
    (splitting opaque expressions when that unlocks a pushdown), then fuse
    every fusable chain, then convert to tensor-relational form whenever
    a parameter tensor exceeds half the memory budget."""
    applied = []
    current = plan

    def downs(p):
        return [
            b
            for r in (RuleId.R1_2, RuleId.R1_3)
            for b in rules.enumerate_bindings(p, r, env.catalog)
            if b.site[0] == "down"
        ]

    def enablers(p):
        return [
            b
            for b in rules.enumerate_bindings(p, RuleId.R1_4, env.catalog)
            if b.site[0] in ("extract", "split_filter_ml")
        ] + [
            b
            for b in rules.enumerate_bindings(p, RuleId.R4_1, env.catalog)
            if b.site[0] == "split_expr"
        ]

    for _ in range(64):  # pushdown fixpoint
        step = None
        down = downs(current)
        if down:
            step = down[0]
        else:
            # an enabling split (possibly two of them back to back) may
            # create a pushdown opportunity, e.g. cutting an opaque
            # expression and then materializing one of its pieces
            for b in enablers(current):
                one = rules.apply_rule(current, b, env.catalog)
                if downs(one):
                    step = b
                    break
                for b2 in enablers(one):
                    two = rules.apply_rule(one, b2, env.catalog)
                    if downs(two):
                        step = b
                        break
                if step is not None:
                    break
        if step is None:
            break
        current = rules.apply_rule(current, step, env.catalog)
        applied.append(step.rule.name)
    for _ in range(32):  # fuse fixpoint
        fuses = [
            b
            for b in rules.enumerate_bindings(current, RuleId.R4_1, env.catalog)
            if b.site[0] == "fuse"
        ]
        if not fuses:
            break
        current = rules.apply_rule(current, fuses[0], env.catalog)
        applied.append(RuleId.R4_1.name)
    for rule in _TOP_K_RULES:
        for _ in range(16):
            bindings = [
                b
                for b in rules.enumerate_bindings(current, rule, env.catalog)
                if _binding_weight_bytes(current, b, env.catalog)
                > env.catalog.memory_budget_bytes / 2
            ]
            if not bindings:
                break
            current = rules.apply_rule(current, bindings[0], env.catalog)
            applied.append(rule.name)
    return current, applied


def _exhaustive(plan, env: _Env):
    """Breadth-first enumeration of all configured-action sequences up to
    the depth limit, deduplicated by plan fingerprint; the regret oracle."""
    start_fp = ir.plan_fingerprint(plan)
    seen = {start_fp}
    frontier = [(plan, [])]
    best_plan, best_cost, best_trace = plan, env.plan_cost(plan), []
    for _ in range(env.config.max_depth):
        nxt = []
        for cur, trace in frontier:
            for rule in env.config.allowed_rules:
                try:
                    _, new_plan, new_cost = configure_action(cur, rule, env)
                except NoBinding:
                    continue
                fp = ir.plan_fingerprint(new_plan)
                if fp in seen:
                    continue
                seen.add(fp)
                if len(seen) > env.config.exhaustive_cap:
                    raise FrontierExplosion(
                        f"exhaustive frontier exceeded {env.config.exhaustive_cap} plans"
                    )
                new_trace = trace + [rule.name]
                nxt.append((new_plan, new_trace))
                if new_cost < best_cost:
                    best_plan, best_cost, best_trace = new_plan, new_cost, new_trace
        if not nxt:
            break
        frontier = nxt
    return best_plan, best_trace
