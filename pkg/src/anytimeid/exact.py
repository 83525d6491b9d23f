"""Exact evaluation of influence diagrams by factor combination and elimination.

The evaluator sums out chance variables and maxes (or mins) out decision
variables working back from the last decision, using a greedy min-size
factoring heuristic. Expected utility is carried in unnormalized form as a
(probability, utility-mass) pair through every operation and divided by the
surviving probability mass once at the end.

This module is both the reference engine and the inner solver used by the
domain-reduction evaluators.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import (
    CHANCE,
    DECISION,
    MAXIMIZE,
    MINIMIZE,
    CapacityError,
    Evidence,
    Factor,
    InfluenceDiagram,
    ModelError,
    ScopeError,
    ZeroMassError,
    apply_evidence,
)


class Tally:
    """Cell-operation counter.

    Every table operation charges the number of cells it touches (result
    cells for products, input cells for reductions). The total is the
    engine's deterministic compute-unit figure used by the simulation
    clock.
    """

    __slots__ = ("units",)

    def __init__(self):
        self.units = 0

    def charge(self, n: int):
        self.units += int(n)


def _aligned(table: np.ndarray, scope, union, depth):
    """View ``table`` broadcastable over ``union`` (a superset of scope)."""
    missing = [v for v in union if v not in scope]
    t = table.reshape(table.shape + (1,) * len(missing))
    cur = list(scope) + missing
    perm = [cur.index(v) for v in union]
    return t.transpose(perm)


def combine(f: Factor, g: Factor, cell_limit: Optional[int] = None,
            tally: Optional[Tally] = None) -> Factor:
    """Conformal product: pointwise product over the ordered union scope.

    The union keeps ``f``'s scope order and appends ``g``'s new variables
    in ``g``'s order. Raises ``CapacityError`` when the result would exceed
    ``cell_limit`` cells.
    """
    union = f.scope + tuple(v for v in g.scope if v not in f.scope)
    cards = {v: f.table.shape[i] for i, v in enumerate(f.scope)}
    cards.update({v: g.table.shape[i] for i, v in enumerate(g.scope)})
    size = 1
    for v in union:
        size *= cards[v]
    if cell_limit is not None and size > cell_limit:
        raise CapacityError(f"combined table would hold {size} cells (limit {cell_limit})")
    out = _aligned(f.table, f.scope, union, cards) * _aligned(g.table, g.scope, union, cards)
    if tally is not None:
        tally.charge(size)
    return Factor(union, np.ascontiguousarray(out))


def eliminate(f: Factor, var: int, mode: str = "sum",
              tally: Optional[Tally] = None):
    """Sum or max a variable out of a factor.

    Returns ``(factor, argmax_table)``. In max mode the argmax table maps
    each assignment of the remaining scope to the chosen value index, ties
    going to the lowest index. Sum mode returns ``None`` for the table.
    """
    ax = f.axis(var)
    if tally is not None:
        tally.charge(f.table.size)
    rest = tuple(v for v in f.scope if v != var)
    if mode == "sum":
        return Factor(rest, np.ascontiguousarray(f.table.sum(axis=ax))), None
    if mode == "max":
        arg = np.argmax(f.table, axis=ax)
        return (
            Factor(rest, np.ascontiguousarray(f.table.max(axis=ax))),
            arg.astype(np.int64),
        )
    raise ValueError(f"unknown eliminate mode {mode!r}")


# ---------------------------------------------------------------------------
# structure: relevance and decision blocks


def _restricted_factors_for(diagram, evidence, targets, keep_observed=False,
                            with_utilities=True):
    """Evidence-restricted cpts of relevant chance variables plus utilities.

    Chance variables that are not ancestors of a utility, an evidence
    variable, or a query target are barren: their cpts integrate to one and
    are dropped entirely. Decision queries pass ``keep_observed`` so that
    variables observed by an undetermined decision survive regardless:
    they are not barren for policy purposes even when graph-barren.
    Posterior and marginal queries drop the utilities instead
    (``with_utilities=False``); they carry no probability mass.
    """
    needed = set(targets)
    if with_utilities:
        for f in diagram.utilities:
            needed.update(v for v in f.scope if diagram.kind(v) == CHANCE)
    needed.update(v for v in evidence if diagram.kind(v) == CHANCE)
    if keep_observed:
        for d in diagram.decisions:
            if d.var not in evidence:
                needed.update(
                    v for v in d.observes
                    if diagram.kind(v) == CHANCE and v not in evidence
                )
    frontier = list(needed)
    while frontier:
        v = frontier.pop()
        for p in diagram.parents(v):
            if diagram.kind(p) == CHANCE and p not in needed:
                needed.add(p)
                frontier.append(p)

    mass = []
    for vid in sorted(needed):
        f = diagram.cpts.get(vid)
        if f is not None:
            mass.append(apply_evidence(f, evidence))
    utils = []
    if with_utilities:
        utils = [apply_evidence(f, evidence) for f in diagram.utilities]
    return mass, utils, needed


def decision_blocks(diagram: InfluenceDiagram, evidence: Evidence, relevant=None):
    """Partition chance variables by when they become observed.

    Returns ``(stages, block)`` where ``stages`` lists the unclamped
    decision variables in temporal order and ``block[v] = j`` means chance
    variable ``v`` is first observed when taking ``stages[j]`` (so it is
    summed out between that decision and the previous one). Variables
    observed by no decision get block ``len(stages)`` (innermost).

    Observation is taken with perfect recall: a variable observed by any
    earlier decision stays observed for all later ones.
    """
    stages = [d.var for d in diagram.decisions if d.var not in evidence]
    stage_pos = {v: i for i, v in enumerate(stages)}
    closure = set()
    first_seen = {}
    for d in diagram.decisions:
        for o in d.observes:
            if diagram.kind(o) == CHANCE and o not in evidence and o not in closure:
                closure.add(o)
                later = [stage_pos[s.var] for s in diagram.decisions
                         if s.var in stage_pos
                         and diagram.decision_pos[s.var] >= diagram.decision_pos[d.var]]
                first_seen[o] = min(later) if later else len(stages)

    block = {}
    for v in diagram.chance_ids:
        if v in evidence:
            continue
        if relevant is not None and v not in relevant:
            continue
        block[v] = first_seen.get(v, len(stages))
    return stages, block


# ---------------------------------------------------------------------------
# elimination plans


@dataclass(frozen=True)
class PlanStep:
    op: str                 # combine | sum | max
    var: Optional[int]      # eliminated variable for sum/max
    operands: tuple         # working-pool factor ids consumed
    result: int             # id of the produced factor
    scope: tuple
    cells: int


@dataclass
class EliminationPlan:
    """A legal, deterministic elimination schedule with its size estimate."""

    steps: list = field(default_factory=list)
    peak_cells: int = 0

    @property
    def sum_order(self):
        return [s.var for s in self.steps if s.op == "sum"]

    @property
    def max_order(self):
        return [s.var for s in self.steps if s.op == "max"]

    def describe(self, diagram: Optional[InfluenceDiagram] = None) -> str:
        name = (lambda v: diagram.var(v).name) if diagram else str
        lines = []
        for s in self.steps:
            if s.op == "combine":
                lines.append(f"combine {s.operands} -> f{s.result} {s.cells} cells")
            else:
                lines.append(
                    f"{s.op}-out {name(s.var)} from {s.operands} -> f{s.result} {s.cells} cells"
                )
        lines.append(f"peak intermediate cells: {self.peak_cells}")
        return "\n".join(lines)


def _elimination_targets(block, stages, targets=()):
    """Interleaved elimination sequence: innermost chance block first, each
    decision maxed out in reverse temporal order. The caller orders the
    variables inside each block greedily."""
    seq = []
    for j in range(len(stages), -1, -1):
        seq.append(("block", [v for v, b in sorted(block.items()) if b == j and v not in targets]))
        if j > 0:
            seq.append(("max", stages[j - 1]))
    return seq


def plan(diagram: InfluenceDiagram, evidence: Evidence = None,
         targets=()) -> EliminationPlan:
    """Build the elimination plan for a decision or posterior query.

    Chance variables outside ``targets`` are summed out exactly once,
    unclamped decisions are maxed out exactly once in reverse temporal
    order, and the per-block variable order greedily minimizes the size of
    each intermediate conformal product (ties by variable id).
    """
    evidence = dict(evidence or {})
    mass, utils, relevant = _restricted_factors_for(
        diagram, evidence, targets, keep_observed=not targets,
        with_utilities=not targets)
    stages, block = decision_blocks(diagram, evidence, relevant)

    cards = {v.id: v.card for v in diagram.variables}
    pool = {}
    next_id = 0
    for f in mass + utils:
        pool[next_id] = tuple(f.scope)
        next_id += 1

    result = EliminationPlan()

    def cells(scope):
        n = 1
        for v in scope:
            n *= cards[v]
        return n

    def record(step):
        result.steps.append(step)
        result.peak_cells = max(result.peak_cells, step.cells)

    def do_eliminate(var, op):
        nonlocal next_id
        hit = [i for i in sorted(pool) if var in pool[i]]
        if not hit:
            return
        scope = pool[hit[0]]
        cur = hit[0]
        for i in hit[1:]:
            scope = scope + tuple(v for v in pool[i] if v not in scope)
            record(PlanStep("combine", None, (cur, i), next_id, scope, cells(scope)))
            cur = next_id
            next_id += 1
        out_scope = tuple(v for v in scope if v != var)
        record(PlanStep(op, var, (cur,), next_id, out_scope, cells(out_scope)))
        for i in hit:
            pool.pop(i, None)
        pool.pop(cur, None)
        pool[next_id] = out_scope
        next_id += 1

    for kind, payload in _elimination_targets(block, stages, targets):
        if kind == "max":
            do_eliminate(payload, "max")
            continue
        remaining = [v for v in payload]
        while remaining:
            best = None
            for v in remaining:
                union = ()
                for scope in pool.values():
                    if v in scope:
                        union = union + tuple(u for u in scope if u not in union)
                size = cells(tuple(u for u in union if u != v))
                key = (size, v)
                if best is None or key < best[0]:
                    best = (key, v)
            v = best[1]
            remaining.remove(v)
            do_eliminate(v, "sum")
    return result


# ---------------------------------------------------------------------------
# pair-potential execution


class _Pair:
    """(probability, utility-mass) potential over a shared scope."""

    __slots__ = ("scope", "p", "s")

    def __init__(self, scope, p, s=None):
        self.scope = tuple(scope)
        self.p = p
        self.s = s


def _pair_combine(a: _Pair, b: _Pair, tally: Tally) -> _Pair:
    union = a.scope + tuple(v for v in b.scope if v not in a.scope)
    cards = {}
    for pair in (a, b):
        for i, v in enumerate(pair.scope):
            cards[v] = pair.p.shape[i]
    pa = _aligned(a.p, a.scope, union, cards)
    pb = _aligned(b.p, b.scope, union, cards)
    p = pa * pb
    tally.charge(p.size)
    s = None
    if a.s is not None or b.s is not None:
        s = np.zeros(p.shape)
        if a.s is not None:
            s = s + _aligned(a.s, a.scope, union, cards) * pb
            tally.charge(p.size)
        if b.s is not None:
            s = s + _aligned(b.s, b.scope, union, cards) * pa
            tally.charge(p.size)
    return _Pair(union, p, s)


def _pair_sum_out(a: _Pair, var: int, tally: Tally) -> _Pair:
    ax = a.scope.index(var)
    tally.charge(a.p.size)
    rest = tuple(v for v in a.scope if v != var)
    s = None
    if a.s is not None:
        s = a.s.sum(axis=ax)
        tally.charge(a.p.size)
    return _Pair(rest, a.p.sum(axis=ax), s)


def _pair_max_out(a: _Pair, var: int, sign: str, tally: Tally):
    """Pick the best value of a decision per remaining assignment.

    Selection compares utility mass (argmax under maximize, argmin under
    minimize, ties to the lowest index); the probability part follows the
    chosen branch.
    """
    ax = a.scope.index(var)
    tally.charge(a.p.size)
    rest = tuple(v for v in a.scope if v != var)
    s = a.s if a.s is not None else np.zeros(a.p.shape)
    arg = np.argmax(s, axis=ax) if sign == MAXIMIZE else np.argmin(s, axis=ax)
    take = np.expand_dims(arg, ax)
    p = np.take_along_axis(a.p, take, axis=ax).squeeze(axis=ax)
    sv = np.take_along_axis(s, take, axis=ax).squeeze(axis=ax)
    return _Pair(rest, p, sv), rest, arg.astype(np.int64)


@dataclass
class EvalResult:
    """Outcome of a decision evaluation.

    ``action`` is the first decision's optimal value index, ``score`` the
    (normalized) optimal expected utility, ``policy`` maps each decision
    variable to ``(context_scope, choice_table)``, and ``units`` is the
    cell-operation count consumed.
    """

    action: int
    score: float
    policy: dict
    units: int = 0
    mass: float = 1.0


def _execute(diagram, evidence, targets, tally):
    """Run the elimination over pair potentials; returns (pool, policy)."""
    mass, utils, relevant = _restricted_factors_for(
        diagram, evidence, targets, keep_observed=not targets,
        with_utilities=not targets)
    stages, block = decision_blocks(diagram, evidence, relevant)

    pool = {}
    next_id = [0]

    def push(pair):
        pool[next_id[0]] = pair
        next_id[0] += 1

    for f in mass:
        push(_Pair(f.scope, f.table, None))
    for f in utils:
        push(_Pair(f.scope, np.ones(f.table.shape), f.table))

    policy = {}

    def do_eliminate(var, op):
        hit = [i for i in sorted(pool) if var in pool[i].scope]
        if not hit:
            if op == "max":
                policy[var] = ((), np.int64(0))
            return
        cur = pool.pop(hit[0])
        for i in hit[1:]:
            cur = _pair_combine(cur, pool.pop(i), tally)
        if op == "sum":
            push(_pair_sum_out(cur, var, tally))
        else:
            pair, rest, arg = _pair_max_out(cur, var, diagram.sign, tally)
            policy[var] = (rest, arg)
            push(pair)

    for kind, payload in _elimination_targets(block, stages, targets):
        if kind == "max":
            do_eliminate(payload, "max")
            continue
        remaining = list(payload)
        while remaining:
            best = None
            for v in remaining:
                union = ()
                for pair in pool.values():
                    if v in pair.scope:
                        union = union + tuple(u for u in pair.scope if u not in union)
                size = 1
                for u in union:
                    if u != v:
                        size *= diagram.card(u)
                key = (size, v)
                if best is None or key < best[0]:
                    best = (key, v)
            v = best[1]
            remaining.remove(v)
            do_eliminate(v, "sum")
    return pool, policy


def evaluate_decision(diagram: InfluenceDiagram, evidence: Evidence = None,
                      tally: Optional[Tally] = None) -> EvalResult:
    """Optimal first action and expected utility of a diagram under evidence.

    Expected utility accumulates unnormalized (utility folded into the
    factor product); the surviving probability mass divides the score once
    at the end. Ties at any maximization go to the lowest value index.

    Evidence on variables downstream of a decision gives stage-greedy
    semantics (each decision optimizes its own stage's unnormalized mass);
    with evidence confined to non-descendants of decisions this coincides
    with the globally optimal policy.
    """
    evidence = dict(evidence or {})
    if not diagram.decisions:
        raise ModelError("diagram has no decisions to evaluate")
    tally = tally if tally is not None else Tally()
    pool, policy = _execute(diagram, evidence, (), tally)

    p_total = 1.0
    s_total = 0.0
    for pair in pool.values():
        if pair.scope:
            raise ModelError(
                "evaluation left a non-scalar potential; undetermined decision parents?"
            )
        s_total = s_total * float(pair.p) + p_total * (
            float(pair.s) if pair.s is not None else 0.0
        )
        p_total *= float(pair.p)
    if p_total <= 0.0:
        raise ZeroMassError("evidence has zero probability mass")
    score = s_total / p_total

    first = diagram.decisions[0].var
    if first in evidence:
        action = int(evidence[first])
    else:
        ctx, table = policy[first]
        if ctx:
            raise ModelError(
                "first decision's optimal choice depends on unobserved variables"
            )
        action = int(table)
    return EvalResult(action, float(score), policy, tally.units, p_total)


def posterior(diagram: InfluenceDiagram, evidence: Evidence, target: int,
              tally: Optional[Tally] = None) -> np.ndarray:
    """Exact normalized posterior distribution of a chance variable."""
    evidence = dict(evidence or {})
    if diagram.kind(target) != CHANCE:
        raise ModelError(f"posterior target {target} is not a chance variable")
    if target in evidence:
        dist = np.zeros(diagram.card(target))
        dist[int(evidence[target])] = 1.0
        return dist
    tally = tally if tally is not None else Tally()
    pool, _ = _execute(diagram, evidence, (target,), tally)

    acc = np.ones(diagram.card(target))
    for pair in pool.values():
        if pair.scope == ():
            acc = acc * float(pair.p)
        elif pair.scope == (target,):
            acc = acc * pair.p
        else:
            raise ModelError(
                f"posterior of {target} depends on undetermined variables {pair.scope}"
            )
    z = float(acc.sum())
    if z <= 0.0:
        raise ZeroMassError("evidence has zero probability mass")
    return acc / z


# ---------------------------------------------------------------------------
# brute-force oracle


def brute_force_decision(diagram: InfluenceDiagram, evidence: Evidence = None,
                         limit: int = 2 ** 20, policy_limit: int = 2 ** 20) -> EvalResult:
    """Exhaustive oracle: enumerate all chance assignments and all policies.

    Semantics match ``evaluate_decision`` (perfect recall over declared
    information sets, unnormalized optimization, final division by the best
    policy's probability mass, lowest-index ties). Intended for small
    diagrams; raises ``CapacityError`` above the configured limits.
    """
    res, _ = _brute_force(diagram, evidence, limit, policy_limit)
    return res


def brute_force_action_values(diagram: InfluenceDiagram, evidence: Evidence = None,
                              limit: int = 2 ** 20, policy_limit: int = 2 ** 20) -> np.ndarray:
    """Best unnormalized expected utility for each first-decision value."""
    _, per_action = _brute_force(diagram, evidence, limit, policy_limit)
    return per_action


def _brute_force(diagram, evidence, limit, policy_limit):
    evidence = dict(evidence or {})
    if not diagram.decisions:
        raise ModelError("diagram has no decisions to evaluate")
    sign = 1.0 if diagram.sign == MAXIMIZE else -1.0

    chance = [v for v in diagram.chance_ids if v not in evidence]
    space = 1
    for v in chance:
        space *= diagram.card(v)
    if space > limit:
        raise CapacityError(f"{space} chance assignments exceed the oracle limit {limit}")

    stages = [d.var for d in diagram.decisions if d.var not in evidence]
    dcards = [diagram.card(v) for v in stages]
    dspace = int(np.prod(dcards)) if stages else 1

    # value index of every chance variable per assignment row
    col = {}
    rad = space
    for v in chance:
        rad //= diagram.card(v)
        col[v] = (np.arange(space) // rad) % diagram.card(v)

    dcol = {}
    drad = dspace
    for v, c in zip(stages, dcards):
        drad //= c
        dcol[v] = (np.arange(dspace) // drad) % c

    def gather(f):
        """Factor values as an array over (space, dspace)."""
        c_idx = np.zeros(space, dtype=np.int64)
        d_idx = np.zeros(dspace, dtype=np.int64)
        stride = f.table.size
        for ax, v in enumerate(f.scope):
            stride //= f.table.shape[ax]
            if v in evidence:
                c_idx = c_idx + int(evidence[v]) * stride
            elif diagram.kind(v) == CHANCE:
                c_idx = c_idx + col[v] * stride
            else:
                d_idx = d_idx + dcol[v] * stride
        return f.flat[c_idx[:, None] + d_idx[None, :]]

    w = np.ones((space, dspace))
    for vid in diagram.chance_ids:
        w *= gather(diagram.cpts[vid])
    u = np.zeros((space, dspace))
    for f in diagram.utilities:
        u += gather(f)

    # perfect-recall contexts: everything observed at or before each stage
    stage_ctx = []
    closure = []
    for d in diagram.decisions:
        closure.extend(
            o for o in d.observes
            if diagram.kind(o) == CHANCE and o not in evidence and o not in closure
        )
        if d.var not in evidence:
            stage_ctx.append(sorted(closure))

    ctx_idx = []
    ctx_cells = []
    n_policies = 1
    for vars_, card in zip(stage_ctx, dcards):
        cells = 1
        idx = np.zeros(space, dtype=np.int64)
        for v in vars_:
            idx = idx * diagram.card(v) + col[v]
            cells *= diagram.card(v)
        ctx_idx.append(idx)
        ctx_cells.append(cells)
        n_policies *= card ** cells
    if n_policies > policy_limit:
        raise CapacityError(f"{n_policies} policies exceed the oracle limit {policy_limit}")

    dstride = []
    rad = dspace
    for c in dcards:
        rad //= c
        dstride.append(rad)

    first = diagram.decisions[0].var
    first_unclamped = stages and stages[0] == first

    best = None
    per_action = None
    if first_unclamped:
        per_action = np.full(dcards[0], np.nan)

    rows = np.arange(space)
    tables = [itertools.product(range(c), repeat=cells)
              for c, cells in zip(dcards, ctx_cells)]
    for choice in itertools.product(*tables):
        dsel = np.zeros(space, dtype=np.int64)
        for tab, idx, stride in zip(choice, ctx_idx, dstride):
            dsel += np.asarray(tab, dtype=np.int64)[idx] * stride
        wsel = w[rows, dsel]
        eu = float(np.dot(wsel, u[rows, dsel]))
        z = float(wsel.sum())
        if per_action is not None:
            a = choice[0][0]
            if np.isnan(per_action[a]) or sign * eu > sign * per_action[a]:
                per_action[a] = eu
        if best is None or sign * eu > sign * best[0]:
            best = (eu, z, choice)

    eu, z, choice = best
    if z <= 0.0:
        raise ZeroMassError("evidence has zero probability mass")
    policy = {}
    for v, tab, vars_ in zip(stages, choice, stage_ctx):
        arr = np.asarray(tab, dtype=np.int64)
        shape = tuple(diagram.card(x) for x in vars_)
        policy[v] = (tuple(vars_), arr.reshape(shape) if shape else arr.reshape(()))
    if first in evidence:
        action = int(evidence[first])
    else:
        action = int(choice[0][0]) if first_unclamped else 0
    res = EvalResult(action, eu / z, policy, space * dspace, z)
    return res, per_action
