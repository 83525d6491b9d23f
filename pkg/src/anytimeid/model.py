"""Discrete influence diagrams: variables, factors, evidence, domain masks.

All evaluators in this package share one representation: variables are
densely indexed integers, factor tables are row-major numpy arrays over an
ordered scope, and all arithmetic works on value indices rather than labels.
Instances are treated as immutable after construction and may be shared
freely across threads and processes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

CHANCE = "chance"
DECISION = "decision"
MAXIMIZE = "maximize"
MINIMIZE = "minimize"

CPT_ROW_TOL = 1e-9


class ModelError(ValueError):
    """Structurally invalid model input."""


class InvalidEvidenceError(ModelError):
    """Evidence references a value index outside a variable's domain."""


class InvalidMaskError(ModelError):
    """A domain mask keeps an empty or out-of-range value set."""


class ScopeError(ModelError):
    """An operation referenced a variable outside a factor's scope."""


class CapacityError(RuntimeError):
    """A table or enumeration would exceed a configured size limit."""


class ZeroMassError(RuntimeError):
    """All probability mass was eliminated (evidence of probability zero)."""


class ConfigError(ValueError):
    """Bad run configuration (files, flags, parameter values)."""


@dataclass(frozen=True)
class Variable:
    """A network variable: a chance node or a decision node.

    ``id`` is a dense index into the diagram's variable list; ``domain``
    holds the ordered value labels, so value index ``k`` means
    ``domain[k]`` everywhere.
    """

    id: int
    name: str
    domain: tuple
    kind: str = CHANCE

    @property
    def card(self) -> int:
        return len(self.domain)


@dataclass(frozen=True, eq=False)
class Factor:
    """A nonnegative real table over an ordered variable scope.

    ``table`` has one axis per scope entry, in scope order; flattening it in
    C order gives the canonical row-major layout. ``role`` is ``"cpt"``
    (with ``child`` set to the conditioned variable), ``"utility"``, or
    ``"generic"``.
    """

    scope: tuple
    table: np.ndarray
    role: str = "generic"
    child: Optional[int] = None

    def __post_init__(self):
        tab = np.asarray(self.table, dtype=np.float64)
        if tab.ndim and not tab.flags["C_CONTIGUOUS"]:
            tab = np.ascontiguousarray(tab)
        if tab.ndim != len(self.scope):
            raise ModelError(
                f"factor table has {tab.ndim} axes for scope of size {len(self.scope)}"
            )
        if len(set(self.scope)) != len(self.scope):
            raise ModelError(f"duplicate variable in factor scope {self.scope}")
        object.__setattr__(self, "scope", tuple(int(v) for v in self.scope))
        object.__setattr__(self, "table", tab)

    @classmethod
    def from_flat(cls, scope, values, cards, role="generic", child=None) -> "Factor":
        """Build a factor from a flat row-major value list.

        ``cards`` gives the domain size of each scope variable, in scope
        order; the flat length must equal their product.
        """
        scope = tuple(int(v) for v in scope)
        cards = tuple(int(c) for c in cards)
        flat = np.asarray(values, dtype=np.float64).reshape(-1)
        want = int(np.prod(cards)) if cards else 1
        if flat.size != want:
            raise ModelError(
                f"factor over {scope} needs {want} entries, got {flat.size}"
            )
        return cls(scope, flat.reshape(cards), role=role, child=child)

    @property
    def flat(self) -> np.ndarray:
        return self.table.reshape(-1)

    def axis(self, var: int) -> int:
        try:
            return self.scope.index(var)
        except ValueError:
            raise ScopeError(f"variable {var} not in scope {self.scope}") from None


@dataclass(frozen=True)
class DecisionStage:
    """One decision in temporal order with its information set.

    ``observes`` lists the variable ids whose values are known when the
    decision is taken.
    """

    var: int
    observes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "var", int(self.var))
        object.__setattr__(self, "observes", tuple(int(v) for v in self.observes))


# Evidence maps variable id -> observed value index. Decision variables may
# appear (a posted act). DomainMask maps variable id -> sorted tuple of kept
# value indices; variables absent from a mask keep their full domain.
Evidence = Mapping[int, int]
DomainMask = Mapping[int, tuple]


class InfluenceDiagram:
    """Chance nodes with conditional tables, ordered decisions, additive utility.

    ``cpts`` holds exactly one conditional table per chance variable
    (``role="cpt"``, ``child`` = that variable). ``utilities`` are summed.
    ``sign`` selects whether decisions maximize or minimize the expected
    total.
    """

    def __init__(self, variables, cpts, decisions=(), utilities=(), sign=MAXIMIZE):
        self.variables = tuple(variables)
        self.cpts = {int(f.child): f for f in cpts}
        self.decisions = tuple(decisions)
        self.utilities = tuple(utilities)
        if sign not in (MAXIMIZE, MINIMIZE):
            raise ModelError(f"sign must be maximize or minimize, got {sign!r}")
        self.sign = sign

        self.cards = np.array([v.card for v in self.variables], dtype=np.int64)
        self.name_to_id = {v.name: v.id for v in self.variables}
        self.chance_ids = tuple(v.id for v in self.variables if v.kind == CHANCE)
        self.decision_ids = tuple(d.var for d in self.decisions)
        self.decision_pos = {d.var: i for i, d in enumerate(self.decisions)}

    def var(self, vid: int) -> Variable:
        return self.variables[vid]

    def card(self, vid: int) -> int:
        return int(self.cards[vid])

    def kind(self, vid: int) -> str:
        return self.variables[vid].kind

    def parents(self, vid: int) -> tuple:
        """Parents of a chance variable, per its cpt scope."""
        f = self.cpts.get(vid)
        if f is None:
            return ()
        return tuple(v for v in f.scope if v != vid)

    def factor_cards(self, scope) -> tuple:
        return tuple(self.card(v) for v in scope)

    def topological_chance_order(self) -> list:
        """Chance variables ordered so parents precede children.

        Decision parents impose no constraint among chance variables.
        Raises ``ModelError`` on a cyclic chance-parent graph.
        """
        indeg = {v: 0 for v in self.chance_ids}
        childs = {v: [] for v in self.chance_ids}
        for c in self.chance_ids:
            for p in self.parents(c):
                if p in indeg:
                    indeg[c] += 1
                    childs[p].append(c)
        ready = sorted(v for v, d in indeg.items() if d == 0)
        order = []
        while ready:
            v = ready.pop(0)
            order.append(v)
            for c in childs[v]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
            ready.sort()
        if len(order) != len(self.chance_ids):
            raise ModelError("cycle detected in chance-parent graph")
        return order


def validate(diagram: InfluenceDiagram) -> list:
    """Check all diagram invariants; return the list of violations.

    An empty list means the diagram is well formed. Violations are data,
    not exceptions, so callers can report all of them at once.
    """
    out = []
    n = len(diagram.variables)
    for i, v in enumerate(diagram.variables):
        if v.id != i:
            out.append(f"variable ids not dense: position {i} holds id {v.id}")
        if v.card < 1:
            out.append(f"variable {v.name} has empty domain")
        if v.kind not in (CHANCE, DECISION):
            out.append(f"variable {v.name} has unknown kind {v.kind!r}")
    names = [v.name for v in diagram.variables]
    if len(set(names)) != len(names):
        out.append("variable names not unique")

    for vid in diagram.chance_ids:
        f = diagram.cpts.get(vid)
        if f is None:
            out.append(f"chance variable {diagram.var(vid).name} has no cpt")
            continue
        if f.role != "cpt" or f.child != vid:
            out.append(f"cpt for {diagram.var(vid).name} has wrong role/child")
        if any(v < 0 or v >= n for v in f.scope):
            out.append(f"cpt for {diagram.var(vid).name} references unknown variable")
            continue
        want = diagram.factor_cards(f.scope)
        if f.table.shape != want:
            out.append(
                f"cpt for {diagram.var(vid).name} has shape {f.table.shape}, expected {want}"
            )
            continue
        if np.any(f.table < 0):
            out.append(f"cpt for {diagram.var(vid).name} has negative entries")
        ax = f.axis(vid)
        sums = f.table.sum(axis=ax)
        bad = np.argwhere(np.abs(sums - 1.0) > CPT_ROW_TOL)
        for row in bad[:8]:
            out.append(
                f"cpt not normalized at row {tuple(int(x) for x in row)} of "
                f"{diagram.var(vid).name} (sum={sums[tuple(row)]:.12g})"
            )
    extra = set(diagram.cpts) - set(diagram.chance_ids)
    for vid in sorted(extra):
        out.append(f"cpt attached to non-chance variable id {vid}")

    for k, f in enumerate(diagram.utilities):
        if any(v < 0 or v >= n for v in f.scope):
            out.append(f"utility {k} references unknown variable")
            continue
        if f.table.shape != diagram.factor_cards(f.scope):
            out.append(f"utility {k} has wrong table shape")
        if not np.all(np.isfinite(f.table)):
            out.append(f"utility {k} has non-finite entries")

    seen = set()
    for i, d in enumerate(diagram.decisions):
        if d.var < 0 or d.var >= n or diagram.kind(d.var) != DECISION:
            out.append(f"decision stage {i} does not name a decision variable")
            continue
        if d.var in seen:
            out.append(f"decision {diagram.var(d.var).name} listed twice")
        seen.add(d.var)
        for o in d.observes:
            if o < 0 or o >= n:
                out.append(f"decision {diagram.var(d.var).name} observes unknown variable")
            elif o == d.var:
                out.append(f"decision {diagram.var(d.var).name} observes itself (cycle)")
            elif o in diagram.decision_pos and diagram.decision_pos[o] > i:
                out.append(
                    f"cycle: decision {diagram.var(d.var).name} observes later "
                    f"decision {diagram.var(o).name}"
                )
    undeclared = [
        v.name for v in diagram.variables if v.kind == DECISION and v.id not in seen
    ]
    for name in undeclared:
        out.append(f"decision variable {name} missing from the decision order")

    out.extend(_cycle_check(diagram))
    return out


def _cycle_check(diagram: InfluenceDiagram) -> list:
    """Kahn's algorithm over chance-parent arcs, information arcs, and the
    temporal chain between consecutive decisions."""
    n = len(diagram.variables)
    adj = [[] for _ in range(n)]
    indeg = [0] * n

    def edge(a, b):
        if 0 <= a < n and 0 <= b < n:
            adj[a].append(b)
            indeg[b] += 1

    for c in diagram.chance_ids:
        for p in diagram.parents(c):
            edge(p, c)
    for d in diagram.decisions:
        for o in d.observes:
            edge(o, d.var)
    for a, b in zip(diagram.decisions, diagram.decisions[1:]):
        edge(a.var, b.var)

    ready = [v for v in range(n) if indeg[v] == 0]
    done = 0
    while ready:
        v = ready.pop()
        done += 1
        for c in adj[v]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    if done != n:
        stuck = [diagram.var(v).name for v in range(n) if indeg[v] > 0]
        return [f"cycle detected among {', '.join(sorted(stuck))}"]
    return []


def apply_evidence(factor: Factor, evidence: Evidence) -> Factor:
    """Restrict a factor to the observed values and drop those axes.

    Variables in the factor's scope that appear in ``evidence`` are fixed to
    their observed value index; entries inconsistent with the evidence are
    dropped. Scope variables not evidenced are untouched.
    """
    hit = [v for v in factor.scope if v in evidence]
    if not hit:
        return factor
    idx = []
    new_scope = []
    for ax, v in enumerate(factor.scope):
        if v in evidence:
            k = int(evidence[v])
            if k < 0 or k >= factor.table.shape[ax]:
                raise InvalidEvidenceError(
                    f"evidence value index {k} out of range for variable {v}"
                )
            idx.append(k)
        else:
            idx.append(slice(None))
            new_scope.append(v)
    tab = np.asarray(factor.table[tuple(idx)])
    return Factor(tuple(new_scope), tab, role=factor.role, child=factor.child)


def full_mask(diagram: InfluenceDiagram) -> dict:
    return {v.id: tuple(range(v.card)) for v in diagram.variables}


def apply_mask(diagram: InfluenceDiagram, mask: DomainMask) -> InfluenceDiagram:
    """Slice every variable's domain down to the masked value subsets.

    Factor tables are sliced accordingly; cpt rows are deliberately NOT
    renormalized, so reduced networks carry subnormalized mass and
    decisions are driven by relative comparison of the resulting scores.
    Value indices in the result are re-densified in kept order.
    """
    keep = {}
    for v in diagram.variables:
        kept = mask.get(v.id)
        if kept is None:
            keep[v.id] = tuple(range(v.card))
            continue
        kept = tuple(sorted(set(int(k) for k in kept)))
        if not kept:
            raise InvalidMaskError(f"mask keeps no values for variable {v.name}")
        if kept[0] < 0 or kept[-1] >= v.card:
            raise InvalidMaskError(
                f"mask for variable {v.name} references value index outside 0..{v.card - 1}"
            )
        keep[v.id] = kept

    variables = tuple(
        Variable(v.id, v.name, tuple(v.domain[k] for k in keep[v.id]), v.kind)
        for v in diagram.variables
    )

    def slice_factor(f: Factor) -> Factor:
        tab = f.table
        for ax, v in enumerate(f.scope):
            kept = keep[v]
            if len(kept) != tab.shape[ax]:
                tab = np.take(tab, kept, axis=ax)
        return Factor(f.scope, tab, role=f.role, child=f.child)

    cpts = [slice_factor(f) for f in diagram.cpts.values()]
    utilities = [slice_factor(f) for f in diagram.utilities]
    return InfluenceDiagram(variables, cpts, diagram.decisions, utilities, diagram.sign)
