"""Incremental search evaluation of influence diagrams.

The evaluator compiles the query into a branch tree: the first decision at
the root, chance variables as sum branches ordered most-skewed-first, any
second decision between the chance blocks it separates, factor entries as
edge weights. It then enumerates joint chance instantiations in descending
probability-mass order, one per decision context per step, keeping
per-action lower and upper bounds on expected utility so a decision can be
read off (or proved) long before the enumeration is complete.

Two interchangeable backends run the inner loop: a compiled extension and
a pure-Python mirror. They absorb instantiations in the same order and
perform the same floating-point operations, so their step reports and
bounds agree exactly; the compiled one is just fast. Selection happens at
import, the ``ANYTIMEID_PURE`` environment variable forces the mirror.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exact import _restricted_factors_for, decision_blocks
from .model import (
    CHANCE,
    MAXIMIZE,
    MINIMIZE,
    Evidence,
    InfluenceDiagram,
    ModelError,
)

from . import _searchcore_py

_compiled = None
if not os.environ.get("ANYTIMEID_PURE"):
    try:
        from . import _searchcore as _compiled
    except ImportError:
        _compiled = None

COMPILED_AVAILABLE = _compiled is not None


def backend_name() -> str:
    return "compiled" if _compiled is not None else "pure"


def _core_module(backend: Optional[str]):
    if backend in (None, "auto"):
        return _compiled if _compiled is not None else _searchcore_py
    if backend == "pure":
        return _searchcore_py
    if backend == "compiled":
        if _compiled is None:
            raise ModelError("compiled search core is not available")
        return _compiled
    raise ModelError(f"unknown search backend {backend!r}")


# ---------------------------------------------------------------------------
# layout compilation


class FacRef:
    """One factor bound to a tree level.

    ``flat`` is the row-major table, ``self_stride`` the stride of the
    level's own variable, and ``refs`` locate every other scope variable as
    ``(kind, pos, stride)`` with kind 0 = earlier chance level, kind 1 =
    decision slot. ``dec_max`` holds the table maximum per decision-value
    combination for the tail bounds.
    """

    __slots__ = ("flat", "self_stride", "refs", "dec_max")

    def __init__(self, flat, self_stride, refs, dec_max=((), 0.0)):
        self.flat = np.ascontiguousarray(flat, dtype=np.float64).reshape(-1)
        self.self_stride = int(self_stride)
        self.refs = tuple(refs)
        self.dec_max = dec_max


class LevelSpec:
    __slots__ = ("var", "card", "mass", "util", "cache_refs", "cache_mults",
                 "key_space")

    def __init__(self, var, card, mass, util, cache_refs, cache_mults):
        self.var = var
        self.card = card
        self.mass = mass
        self.util = util
        self.cache_refs = cache_refs
        self.cache_mults = cache_mults
        self.key_space = 1


class Layout:
    """Compiled search layout shared by both backends."""

    def __init__(self):
        self.mode = "decide"
        self.levels = []
        self.dec_vars = []
        self.dec_cards = []
        self.prefix_positions = []
        self.prefix_mults = []
        self.ctx_vals = [()]
        self.ctx_action = [0]
        self.ctx_last = [0]
        self.ctx_group = [0]
        self.base_mass = [1.0]
        self.base_util = [0.0]
        self.ubtail = [1.0]
        self.u_lo = 0.0
        self.u_hi = 0.0
        self.u_min_total = 0.0
        self.u_max_total = 0.0
        self.maximize = True
        self.action_count = 1

    @property
    def n_levels(self):
        return len(self.levels)

    @property
    def n_ctx(self):
        return len(self.ctx_vals)


def _skew(table: np.ndarray) -> float:
    m = float(table.max()) if table.size else 0.0
    mean = float(table.mean()) if table.size else 0.0
    if mean <= 0.0:
        return float("inf")
    return m / mean


def compile_layout(diagram: InfluenceDiagram, evidence: Evidence,
                   mode: str = "decide", targets=()) -> Layout:
    """Build the searchable layout for a decision or marginal query."""
    evidence = dict(evidence or {})
    mass, utils, relevant = _restricted_factors_for(
        diagram, evidence, targets, keep_observed=(mode == "decide"),
        with_utilities=(mode == "decide"))
    all_stages, _ = decision_blocks(diagram, evidence, relevant)

    in_scope = set()
    for f in mass + utils:
        in_scope.update(f.scope)

    if mode == "decide":
        if not diagram.decisions:
            raise ModelError("diagram has no decisions to evaluate")
        if not all_stages:
            raise ModelError("all decisions are clamped by evidence")
        stages = [all_stages[0]] + [v for v in all_stages[1:] if v in in_scope]
        if len(stages) > 2:
            raise ModelError(
                "the search evaluator supports at most two undetermined decisions"
            )
    elif mode == "marginal":
        stages = [v for v in all_stages if v in in_scope]
        if stages:
            raise ModelError(
                "marginal query depends on undetermined decisions "
                f"{[diagram.var(v).name for v in stages]}"
            )
    else:
        raise ValueError(f"unknown layout mode {mode!r}")

    K = len(stages)
    stage_pos = {v: i for i, v in enumerate(stages)}

    # first kept stage index at or after the observing decision, per variable
    first_seen = {}
    claimed = set()
    for d in diagram.decisions:
        for o in d.observes:
            if diagram.kind(o) != CHANCE or o in evidence or o in claimed:
                continue
            claimed.add(o)
            later = [stage_pos[s.var] for s in diagram.decisions
                     if s.var in stage_pos
                     and diagram.decision_pos[s.var] >= diagram.decision_pos[d.var]]
            first_seen[o] = min(later) if later else K

    # enumeration order: parents before children so every conditional
    # table binds at its child's level, most skewed distributions first
    # within that freedom (ties by variable id). The max/sum nesting is not
    # enforced by level order; the bound bookkeeping groups absorbed
    # instantiations by the values of the variables observed before the
    # last decision, wherever those sit on the path.
    lay = Layout()
    lay.mode = mode
    lay.dec_vars = stages
    lay.dec_cards = [diagram.card(v) for v in stages]
    lay.action_count = lay.dec_cards[0] if K else 1
    lay.maximize = diagram.sign == MAXIMIZE

    skew_of = {}
    for f in mass:
        if f.child is not None and f.child not in evidence:
            skew_of[f.child] = _skew(f.table)

    members = [v for v in sorted(relevant)
               if v not in evidence and diagram.kind(v) == CHANCE]
    pending = {}
    kids = {v: [] for v in members}
    for v in members:
        n = 0
        for p in diagram.parents(v):
            if p in kids:
                n += 1
                kids[p].append(v)
        pending[v] = n
    ready = [v for v in members if pending[v] == 0]
    level_vars = []
    while ready:
        ready.sort(key=lambda v: (-skew_of.get(v, 0.0), v))
        v = ready.pop(0)
        level_vars.append(v)
        for c in kids[v]:
            pending[c] -= 1
            if pending[c] == 0:
                ready.append(c)
    if len(level_vars) != len(members):
        raise ModelError("cycle detected in chance-parent graph")
    level_pos = {v: i for i, v in enumerate(level_vars)}

    # variables whose values key the observation groups of the last
    # decision: everything observed before it (perfect recall)
    if K >= 2:
        prefix_vars = [v for v in level_vars if first_seen.get(v, K) <= K - 1]
        lay.prefix_positions = sorted(level_pos[v] for v in prefix_vars)
        lay.prefix_mults = []
        acc = 1
        for p in lay.prefix_positions:
            lay.prefix_mults.append(acc)
            acc *= diagram.card(level_vars[p])
        if acc > 2 ** 60:
            raise ModelError("observation space before the last decision is too large")
    else:
        lay.prefix_positions = []
        lay.prefix_mults = []

    # decision contexts, first stage slowest-varying
    ctx_vals = [()]
    for c in lay.dec_cards:
        ctx_vals = [t + (x,) for t in ctx_vals for x in range(c)]
    lay.ctx_vals = ctx_vals
    last_card = lay.dec_cards[-1] if K else 1
    lay.ctx_action = [t[0] if K else 0 for t in ctx_vals]
    lay.ctx_last = [t[-1] if K else 0 for t in ctx_vals]
    lay.ctx_group = [i // last_card for i in range(len(ctx_vals))]

    def make_ref(f):
        strides = {}
        acc = 1
        for ax in range(len(f.scope) - 1, -1, -1):
            strides[f.scope[ax]] = acc
            acc *= f.table.shape[ax]
        self_var = None
        deepest = -1
        for v in f.scope:
            if v in level_pos and level_pos[v] > deepest:
                deepest = level_pos[v]
                self_var = v
        refs = []
        for v in f.scope:
            if v == self_var:
                continue
            if v in level_pos:
                refs.append((0, level_pos[v], strides[v]))
            else:
                refs.append((1, stage_pos[v], strides[v]))
        dec_axes = tuple(ax for ax, v in enumerate(f.scope) if v in stage_pos)
        other = tuple(ax for ax in range(len(f.scope)) if ax not in dec_axes)
        dmax = f.table.max(axis=other) if other else f.table
        dec_max = (tuple(stage_pos[f.scope[ax]] for ax in dec_axes), dmax)
        return deepest, FacRef(f.table, strides.get(self_var, 0), refs, dec_max)

    per_level_mass = [[] for _ in level_vars]
    per_level_util = [[] for _ in level_vars]
    base_mass_facs, base_util_facs = [], []
    for f in mass:
        deepest, ref = make_ref(f)
        (per_level_mass[deepest] if deepest >= 0 else base_mass_facs).append(ref)
    for f in utils:
        deepest, ref = make_ref(f)
        (per_level_util[deepest] if deepest >= 0 else base_util_facs).append(ref)

    for i, v in enumerate(level_vars):
        seen = {}
        for ref in per_level_mass[i] + per_level_util[i]:
            for kind, pos, _ in ref.refs:
                seen[(kind, pos)] = (
                    lay.dec_cards[pos] if kind else diagram.card(level_vars[pos])
                )
        cache_refs = sorted(seen)
        mults = []
        acc = 1
        for key in cache_refs:
            mults.append(acc)
            acc *= seen[key]
        if acc > 2 ** 62:
            raise ModelError("cache key space too large to pack")
        lv = LevelSpec(v, diagram.card(v), per_level_mass[i], per_level_util[i],
                       cache_refs, mults)
        lv.key_space = acc
        lay.levels.append(lv)

    # admissible tail bounds, per decision context: the best edge-weight
    # product over the levels at or below each depth given the context's
    # decision values. Heap keys are partial mass times this tail, which
    # leaves the exact max-mass-first absorption order intact (factor
    # entries never exceed one) while keeping the search frontier from
    # flooding with shallow nodes that cannot beat the current best leaf.
    n_ctx = len(ctx_vals)
    ctx_arr = np.array([list(t) for t in ctx_vals], dtype=np.int64).reshape(n_ctx, K)
    n_lev = len(level_vars)
    ub = np.ones((n_lev + 1, n_ctx))
    for i in range(n_lev - 1, -1, -1):
        w = np.ones(n_ctx)
        for ref in lay.levels[i].mass:
            pos, dmax = ref.dec_max
            if pos:
                w = w * dmax[tuple(ctx_arr[:, p] for p in pos)]
            else:
                w = w * float(dmax)
        ub[i] = w * ub[i + 1]
    lay.ubtail = np.ascontiguousarray(ub.T)

    bm = np.ones(n_ctx)
    for ref in base_mass_facs:
        idx = np.zeros(n_ctx, dtype=np.int64)
        for kind, pos, stride in ref.refs:
            idx += ctx_arr[:, pos] * stride
        bm = bm * ref.flat[idx]
    bu = np.zeros(n_ctx)
    for ref in base_util_facs:
        idx = np.zeros(n_ctx, dtype=np.int64)
        for kind, pos, stride in ref.refs:
            idx += ctx_arr[:, pos] * stride
        bu = bu + ref.flat[idx]
    lay.base_mass = bm.tolist()
    lay.base_util = bu.tolist()

    lo = 0.0
    hi = 0.0
    for f in utils:
        if f.table.size:
            lo += float(f.table.min())
            hi += float(f.table.max())
    lay.u_min_total = lo
    lay.u_max_total = hi
    lay.u_lo = min(lo, 0.0)
    lay.u_hi = max(hi, 0.0)

    return lay


# ---------------------------------------------------------------------------
# public API


@dataclass
class ActionBounds:
    """Per-action expected-utility interval and covered probability mass.

    ``lower[a] <= EU(a) <= upper[a]`` holds at every step (unnormalized
    when evidence is present); the interval narrows monotonically and
    collapses onto the exact value when the enumeration exhausts.
    """

    lower: np.ndarray
    upper: np.ndarray
    covered: np.ndarray


@dataclass
class StepReport:
    step: int
    instantiation: tuple       # ((var_id, value_index), ...) for the first context
    mass_added: float
    units: int                 # 1 + cache misses charged this step
    bounds: Optional[ActionBounds] = None


@dataclass
class DecideResult:
    action: int
    bounds: ActionBounds
    steps_used: int
    converged: bool
    units: int


class EvaluationTree:
    """Searchable evaluation state for one diagram + evidence query."""

    def __init__(self, diagram, evidence=None, use_cache=True, backend=None,
                 mode="decide", targets=()):
        self.diagram = diagram
        self.evidence = dict(evidence or {})
        self.layout = compile_layout(diagram, self.evidence, mode, targets)
        core_mod = _core_module(backend)
        self.core = core_mod.SearchCore(self.layout, bool(use_cache))
        self.steps_done = 0
        self.units = 0

    @property
    def exhausted(self) -> bool:
        return bool(self.core.all_exhausted())

    def bounds(self) -> ActionBounds:
        lo, hi, cov = self.core.action_bounds()
        return ActionBounds(np.asarray(lo), np.asarray(hi), np.asarray(cov))

    def search_step(self) -> Optional[StepReport]:
        """Absorb the next-largest unexplored instantiation in every
        decision context; returns ``None`` once the tree is exhausted."""
        absorbed, misses, path0, mass0 = self.core.step()
        if not absorbed:
            return None
        self.steps_done += 1
        units = 1 + misses
        self.units += units
        inst = tuple(
            (self.layout.levels[i].var, x) for i, x in enumerate(path0)
        ) if path0 is not None else ()
        rep = StepReport(self.steps_done, inst, mass0, units)
        if self.layout.mode == "decide":
            rep.bounds = self.bounds()
        return rep

    def trace_line(self, rep: StepReport) -> str:
        names = ",".join(
            f"{self.diagram.var(v).name}={self.diagram.var(v).domain[x]}"
            for v, x in rep.instantiation
        )
        cols = [str(rep.step), names or "-", f"{rep.mass_added:.12g}", str(rep.units)]
        if rep.bounds is not None:
            cols.append(" ".join(
                f"{lo:.12g}/{hi:.12g}"
                for lo, hi in zip(rep.bounds.lower, rep.bounds.upper)
            ))
        return "\t".join(cols)


def build_tree(diagram: InfluenceDiagram, evidence: Evidence = None,
               use_cache: bool = True, backend: Optional[str] = None) -> EvaluationTree:
    """Compile the decision query into a searchable evaluation tree."""
    return EvaluationTree(diagram, evidence, use_cache, backend, mode="decide")


def _choose(layout, lower, upper):
    """Action under partial evaluation: best lower bound, ties low."""
    n = layout.action_count
    best = 0
    for a in range(1, n):
        if layout.maximize:
            if lower[a] > lower[best]:
                best = a
        else:
            if lower[a] < lower[best]:
                best = a
    return best


def _provable(layout, lower, upper, leader):
    for a in range(layout.action_count):
        if a == leader:
            continue
        if layout.maximize:
            if not (upper[a] < lower[leader]):
                return False
        else:
            if not (lower[a] > upper[leader]):
                return False
    return True


def decide(tree, budget: int, trace=None) -> DecideResult:
    """Run search steps up to ``budget`` or until the decision is settled.

    Returns the action with the best lower bound (ties to the lowest
    index), the final bounds, steps used, and whether the tree exhausted or
    the decision became provable by bound dominance.
    """
    if budget < 1:
        raise ValueError("step budget must be >= 1")
    converged = False
    for _ in range(int(budget)):
        rep = tree.search_step()
        if rep is None:
            converged = True
            break
        if trace is not None:
            trace.append(tree.trace_line(rep))
        lo, hi, _ = tree.core.action_bounds()
        leader = _choose(tree.layout, lo, hi)
        if tree.exhausted or _provable(tree.layout, lo, hi, leader):
            converged = True
            break
    bounds = tree.bounds()
    action = _choose(tree.layout, bounds.lower, bounds.upper)
    return DecideResult(action, bounds, tree.steps_done, converged, tree.units)


def decide_diagram(diagram, evidence, budget, use_cache=True, backend=None,
                   trace=None) -> DecideResult:
    return decide(build_tree(diagram, evidence, use_cache, backend), budget, trace)


@dataclass
class MarginalResult:
    marginals: dict            # var id -> normalized distribution
    covered: float             # joint mass absorbed
    steps_used: int
    units: int
    exhausted: bool


def approximate_marginals(diagram, evidence, targets, budget,
                          use_cache=True, backend=None) -> MarginalResult:
    """Budgeted marginal estimation by the same mass-ordered enumeration.

    Absorbed joint mass is tallied per value of every requested target;
    each target's tally is normalized at the end. Targets clamped by
    evidence come back as indicator distributions. Raises ``ModelError``
    if an undetermined decision is relevant to the targets.
    """
    evidence = dict(evidence or {})
    remaining = [t for t in targets if t not in evidence]
    tree = EvaluationTree(diagram, evidence, use_cache, backend,
                          mode="marginal", targets=tuple(remaining))
    steps = 0
    for _ in range(int(budget)):
        if tree.search_step() is None:
            break
        steps += 1
    level_of = {lv.var: i for i, lv in enumerate(tree.layout.levels)}
    covered = float(tree.core.covered_total())
    out = {}
    for t in targets:
        if t in evidence:
            dist = np.zeros(diagram.card(t))
            dist[int(evidence[t])] = 1.0
            out[t] = dist
            continue
        raw = np.asarray(tree.core.marginal(level_of[t]), dtype=np.float64)
        total = raw.sum()
        out[t] = raw / total if total > 0 else raw
    return MarginalResult(out, covered, steps, tree.units, tree.exhausted)
