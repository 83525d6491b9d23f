"""Domain-reduction evaluators driven by fast probability-magnitude estimates.

Two anytime variants share the same loop. The prior variant estimates every
chance value's marginal probability in one loop-ignoring topological pass;
the posterior variant first conditions on the evidence and then sweeps
likelihood messages back from the evidence toward the roots, a deliberately
sloppy single-pass cousin of polytree propagation. Values whose estimate
clears a descending threshold survive; the exact engine then solves the
reduced network, and each iteration lowers the threshold one notch until
the schedule exhausts at the full (exact) network.

Estimates are raw magnitudes in [0, 1]: they are never renormalized, and
neither are the sliced conditional tables. A reduced network carries
subnormalized mass; decisions come from comparing scores across actions,
which a shared normalization constant cannot change.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import exact
from .model import (
    CHANCE,
    Evidence,
    InfluenceDiagram,
    ModelError,
    ZeroMassError,
    apply_evidence,
    apply_mask,
)


class InvalidThresholdError(ModelError):
    """Threshold above the least-greatest estimate (mask could be empty)."""


@dataclass
class MagnitudeEstimate:
    """Per chance variable, per value: an estimated probability magnitude.

    Entries live in [0, 1] but need not sum to one per variable;
    posterior-kind estimates are unnormalized likelihood-weighted products.
    """

    kind: str                      # "prior" | "posterior"
    values: dict                   # var id -> np.ndarray over value indices


@dataclass
class ThresholdSchedule:
    """Distinct estimate values in descending order plus the start index.

    The first usable threshold is the least-greatest estimate (the
    smallest over variables of each variable's largest value estimate), so
    the first mask keeps at least one value everywhere. Advancing past the
    smallest entry is the exhausted signal.
    """

    values: tuple
    start_index: int

    @property
    def start(self) -> float:
        return self.values[self.start_index]

    def __len__(self):
        return len(self.values)


def _project(table: np.ndarray, scope, keep: int, weight_of, tally=None) -> np.ndarray:
    """Contract all axes but ``keep``: weighted sums for chance parents,
    plain max for decision parents (the reachable-magnitude reading)."""
    t = table
    sc = list(scope)
    for v in [u for u in scope if u != keep]:
        ax = sc.index(v)
        w = weight_of(v)
        if w is None:
            t = t.max(axis=ax)
        else:
            t = np.tensordot(w, t, axes=([0], [ax]))
        sc.pop(ax)
        if tally is not None:
            tally.charge(t.size)
    return t


def estimate_priors(diagram: InfluenceDiagram, tally=None) -> MagnitudeEstimate:
    """One topological pass of loop-ignoring prior estimation.

    Each variable's estimate is its conditional table marginalized against
    the already-computed parent estimates treated as independent. Exact on
    singly connected networks; an approximation wherever paths reconverge.
    Decision parents are maxed over, keeping every action-reachable value
    visible to the thresholding step.
    """
    est = {}
    for v in diagram.topological_chance_order():
        f = diagram.cpts[v]
        est[v] = _project(
            f.table, f.scope, v,
            lambda u: est[u] if diagram.kind(u) == CHANCE else None,
            tally,
        )
    return MagnitudeEstimate("prior", est)


def estimate_posteriors(diagram: InfluenceDiagram, evidence: Evidence,
                        tally=None) -> MagnitudeEstimate:
    """Evidence-aware magnitude estimation.

    Conditions every table on the evidence, runs the prior pass on the
    conditioned network (evidence nodes become indicators), then sweeps
    multiplicative likelihood messages from evidence back toward the roots
    in one reverse-topological pass. Estimates that underflow to zero
    everywhere for a variable fall back to its unconditioned prior
    estimate so the threshold schedule stays well defined.
    """
    evidence = dict(evidence or {})
    order = diagram.topological_chance_order()
    cond = {v: apply_evidence(diagram.cpts[v], evidence) for v in order}

    fwd = {}
    for v in order:
        if v in evidence:
            vec = np.zeros(diagram.card(v))
            vec[int(evidence[v])] = 1.0
            fwd[v] = vec
            continue
        f = cond[v]
        fwd[v] = _project(
            f.table, f.scope, v,
            lambda u: fwd[u] if diagram.kind(u) == CHANCE else None,
            tally,
        )

    lam = {v: np.ones(diagram.card(v)) for v in order if v not in evidence}
    for c in reversed(order):
        f = cond[c]
        if c in evidence:
            # the restricted table is already the likelihood of the
            # observed value; message it to every unevidenced chance parent
            for p in f.scope:
                if diagram.kind(p) == CHANCE and p not in evidence:
                    lam[p] = lam[p] * _project(
                        f.table, f.scope, p,
                        lambda u: fwd[u] if diagram.kind(u) == CHANCE else None,
                        tally,
                    )
            continue
        if np.all(lam[c] == 1.0):
            continue
        for p in f.scope:
            if p != c and diagram.kind(p) == CHANCE and p not in evidence:
                lam[p] = lam[p] * _project(
                    f.table, f.scope, p,
                    lambda u: lam[c] if u == c
                    else (fwd[u] if diagram.kind(u) == CHANCE else None),
                    tally,
                )

    prior_fallback = None
    est = {}
    for v in order:
        if v in evidence:
            est[v] = fwd[v]
            continue
        vec = fwd[v] * lam[v]
        if not np.any(vec > 0.0):
            if prior_fallback is None:
                prior_fallback = estimate_priors(diagram, tally).values
            vec = prior_fallback[v]
        est[v] = vec
    return MagnitudeEstimate("posterior", est)


def schedule(estimate: MagnitudeEstimate) -> ThresholdSchedule:
    """Sort all estimated magnitudes descending, duplicates eliminated.

    The starting threshold is the least-greatest estimate, which is always
    present in the list.
    """
    if not estimate.values:
        raise ModelError("cannot schedule an empty estimate")
    distinct = set()
    least_greatest = None
    for vec in estimate.values.values():
        distinct.update(float(x) for x in vec)
        top = float(vec.max())
        if least_greatest is None or top < least_greatest:
            least_greatest = top
    values = tuple(sorted(distinct, reverse=True))
    return ThresholdSchedule(values, values.index(least_greatest))


def reduce_domains(estimate: MagnitudeEstimate, threshold: float) -> dict:
    """Keep every value whose estimate is >= the threshold.

    Valid thresholds come from the schedule at or below the least-greatest
    estimate, which guarantees a nonempty keep-set for every variable.
    """
    least_greatest = min(float(vec.max()) for vec in estimate.values.values())
    if threshold > least_greatest:
        raise InvalidThresholdError(
            f"threshold {threshold!r} exceeds least-greatest estimate {least_greatest!r}"
        )
    return {
        v: tuple(int(i) for i in np.flatnonzero(vec >= threshold))
        for v, vec in estimate.values.items()
    }


@dataclass
class IterationRecord:
    index: int
    threshold: float
    kept: tuple                 # kept-value count per estimated variable, by id
    cells: int                  # total factor cells in the reduced network
    action: Optional[int]       # recommendation, None if the iteration failed
    units: int
    status: str                 # ok | zero-mass | evidence-pruned

    def tsv(self) -> str:
        act = "-" if self.action is None else str(self.action)
        kept = ",".join(str(k) for k in self.kept)
        return "\t".join([
            str(self.index), f"{self.threshold:.12g}", kept, str(self.cells),
            act, str(self.units), self.status,
        ])


@dataclass
class ReducedResult:
    action: int
    records: list = field(default_factory=list)
    units: int = 0
    estimate_units: int = 0
    exhausted: bool = False
    succeeded: bool = False


def reduced_decide(diagram: InfluenceDiagram, evidence: Evidence = None,
                   iterations: int = 1, mode: str = "PK") -> ReducedResult:
    """Anytime loop: estimate, threshold, reduce, solve exactly, repeat.

    ``mode`` picks prior ("K") or posterior ("PK") estimation. Each
    iteration masks every chance variable to the values clearing the
    current threshold, re-imposes the evidence on the reduced network, and
    runs the exact evaluator; the threshold then drops to the next smaller
    schedule entry. The last completed iteration's recommendation is
    returned. Iterations whose reduced network strips the observed value
    or carries zero mass are logged and skipped, the standing
    recommendation (initially action 0) left in place.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if mode not in ("K", "PK"):
        raise ModelError(f"unknown reduction mode {mode!r}")
    evidence = dict(evidence or {})

    est_tally = exact.Tally()
    if mode == "K":
        est = estimate_priors(diagram, est_tally)
    else:
        est = estimate_posteriors(diagram, evidence, est_tally)
    sched = schedule(est)

    out = ReducedResult(action=0, estimate_units=est_tally.units)
    out.units = est_tally.units
    idx = sched.start_index
    for it in range(1, int(iterations) + 1):
        if idx >= len(sched.values):
            out.exhausted = True
            break
        threshold = sched.values[idx]
        idx += 1
        mask = reduce_domains(est, threshold)
        reduced = apply_mask(diagram, mask)
        cells = sum(f.table.size for f in reduced.cpts.values())
        cells += sum(f.table.size for f in reduced.utilities)
        kept = tuple(len(mask[v]) for v in sorted(mask))

        ev2 = {}
        pruned = None
        for v, val in evidence.items():
            if v in mask:
                try:
                    ev2[v] = mask[v].index(int(val))
                except ValueError:
                    pruned = v
                    break
            else:
                ev2[v] = int(val)
        # single-value domains are determined; clamping them lets the
        # exact engine drop those axes instead of eliminating them
        if pruned is None:
            for v, kept in mask.items():
                if len(kept) == 1 and v not in ev2:
                    ev2[v] = 0
        if pruned is not None:
            out.records.append(IterationRecord(
                it, threshold, kept, cells, None, 0, "evidence-pruned"))
            continue

        tally = exact.Tally()
        try:
            res = exact.evaluate_decision(reduced, ev2, tally)
        except ZeroMassError:
            out.records.append(IterationRecord(
                it, threshold, kept, cells, None, tally.units, "zero-mass"))
            out.units += tally.units
            continue
        out.records.append(IterationRecord(
            it, threshold, kept, cells, res.action, tally.units, "ok"))
        out.units += tally.units
        out.action = res.action
        out.succeeded = True
    else:
        out.exhausted = idx >= len(sched.values)
    return out
