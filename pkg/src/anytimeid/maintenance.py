"""On-line maintenance testbed: a gated circuit under stochastic faults and
an agent that senses, thinks under a compute budget, and repairs.

The equipment is a small combinational circuit whose gates drift into
stuck-at or erratic modes at a fixed per-tick hazard. The agent watches
fixed sensors (and one movable probe), keeps factored per-gate mode
beliefs, and each cycle builds a rolling two-stage influence diagram: the
current stage carries its beliefs and the fresh sense report, one decision
picks among waiting, probing, and single-gate replacements, a second stage
models the next report and decision, and a terminal node charges the
long-run cost of operating in the final state for ``duration`` ticks.

Thinking is metered: the evaluator reports compute units, the simulation
clock converts them to elapsed ticks at the configured rate, and the world
keeps evolving (and charging downtime) while the agent is blind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from .model import (
    CHANCE,
    DECISION,
    MINIMIZE,
    ConfigError,
    DecisionStage,
    Factor,
    InfluenceDiagram,
    Variable,
    ZeroMassError,
)

OK, STUCK0, STUCK1, UNKNOWN = 0, 1, 2, 3
MODE_NAMES = ("OK", "Stuck0", "Stuck1", "Unknown")

_GATE_FN = {
    "AND": lambda a, b: a & b,
    "OR": lambda a, b: a | b,
    "NAND": lambda a, b: 1 - (a & b),
    "XOR": lambda a, b: a ^ b,
}

# mix injected into budget-limited posterior marginals so unexplored modes
# keep a sliver of mass; without it a partial enumeration can collapse a
# belief to a point and strand the agent on zero-probability evidence
BELIEF_FLOOR = 1e-6


@dataclass(frozen=True)
class Gate:
    name: str
    fn: str
    inputs: tuple      # line ids
    output: int        # line id

    def __post_init__(self):
        if self.fn not in _GATE_FN:
            raise ConfigError(f"unknown gate function {self.fn!r}")


@dataclass(frozen=True)
class Circuit:
    """Combinational circuit with fixed sensors and probe-able lines."""

    name: str
    lines: tuple       # line names; ids are positions
    inputs: tuple      # primary input line ids
    gates: tuple       # Gate, in topological order
    sensors: tuple     # line ids read every sense report
    probes: tuple      # line ids readable on demand

    def __post_init__(self):
        driven = set(self.inputs)
        for g in self.gates:
            for i in g.inputs:
                if i not in driven:
                    raise ConfigError(
                        f"gate {g.name} reads line {i} before it is driven"
                    )
            driven.add(g.output)
        for s in self.sensors + self.probes:
            if s < 0 or s >= len(self.lines):
                raise ConfigError(f"sensor/probe references unknown line {s}")

    @property
    def n_gates(self):
        return len(self.gates)

    def line_name(self, lid):
        return self.lines[lid]

    def action_labels(self):
        return (
            ("Wait",)
            + tuple(f"Probe({self.lines[l]})" for l in self.probes)
            + tuple(f"Replace({g.name})" for g in self.gates)
        )

    def action_of_probe(self, line):
        return 1 + self.probes.index(line)

    def action_of_replace(self, gate_index):
        return 1 + len(self.probes) + gate_index

    def cone(self, line):
        """Indices of gates that can influence a line."""
        out = set()
        frontier = [line]
        driver = {g.output: gi for gi, g in enumerate(self.gates)}
        while frontier:
            l = frontier.pop()
            gi = driver.get(l)
            if gi is not None and gi not in out:
                out.add(gi)
                frontier.extend(self.gates[gi].inputs)
        return tuple(sorted(out))


def build_half_adder() -> Circuit:
    """Four-gate half adder: NAND/OR/AND realize the sum, AND the carry.

    Sensors sit on both inputs and both outputs; the two internal lines
    are probe-able.
    """
    lines = ("A", "B", "n1", "n2", "Sum", "Carry")
    A, B, n1, n2, S, C = range(6)
    gates = (
        Gate("G1", "NAND", (A, B), n1),
        Gate("G2", "OR", (A, B), n2),
        Gate("G3", "AND", (n1, n2), S),
        Gate("G4", "AND", (A, B), C),
    )
    return Circuit("half_adder", lines, (A, B), gates, (A, B, S, C), (n1, n2))


def build_single_gate() -> Circuit:
    """One AND gate, all lines sensed, nothing to probe; small enough for
    the exhaustive oracle to check decision-basis evaluations."""
    lines = ("A", "B", "Out")
    return Circuit(
        "single_gate", lines, (0, 1),
        (Gate("G1", "AND", (0, 1), 2),), (0, 1, 2), (),
    )


_CIRCUITS = {"half_adder": build_half_adder, "single_gate": build_single_gate}


def circuit_by_name(name: str) -> Circuit:
    try:
        return _CIRCUITS[name]()
    except KeyError:
        raise ConfigError(f"unknown circuit {name!r}") from None


# ---------------------------------------------------------------------------
# equipment simulation


def eval_lines(circuit: Circuit, modes, inputs, rng) -> list:
    """Line values under the given gate modes; erratic gates flip a fair
    coin per evaluation."""
    vals = [0] * len(circuit.lines)
    for lid, v in zip(circuit.inputs, inputs):
        vals[lid] = int(v)
    for gi, g in enumerate(circuit.gates):
        m = modes[gi]
        if m == OK:
            out = _GATE_FN[g.fn](vals[g.inputs[0]], vals[g.inputs[1]])
        elif m == STUCK0:
            out = 0
        elif m == STUCK1:
            out = 1
        else:
            out = int(rng.integers(0, 2))
        vals[g.output] = out
    return vals


def step_equipment(circuit: Circuit, modes, fault_prob, rng):
    """One tick of equipment evolution.

    Every healthy gate faults independently with the configured
    probability, drawing its mode uniformly from the three failure modes;
    faulted gates stay faulted. Fresh primary inputs are drawn uniformly
    and line values recomputed. Returns
    ``(modes, inputs, line_values, sensor_report, injected)``.
    """
    new_modes = list(modes)
    injected = []
    for gi in range(circuit.n_gates):
        if new_modes[gi] == OK and rng.random() < fault_prob:
            new_modes[gi] = 1 + int(rng.integers(0, 3))
            injected.append((gi, new_modes[gi]))
    inputs = [int(rng.integers(0, 2)) for _ in circuit.inputs]
    vals = eval_lines(circuit, new_modes, inputs, rng)
    sense = {lid: vals[lid] for lid in circuit.sensors}
    return new_modes, inputs, vals, sense, injected


# ---------------------------------------------------------------------------
# cost model


@dataclass(frozen=True)
class CostModel:
    """Action and downtime costs plus the policy-stability multiplier.

    ``duration`` is how long a keep-running choice is assumed to persist;
    it must sit well inside (replace/fail, replace/(fault_prob*fail)) or
    the testbed degenerates (checked with factor-of-three slack).
    """

    replace: float = 3.0
    probe: float = 1.0
    fail: float = 1.0
    fault_prob: float = 0.003
    duration: float = 50.0

    def __post_init__(self):
        if min(self.replace, self.probe, self.fail) < 0 or not 0 <= self.fault_prob <= 1:
            raise ConfigError("costs must be nonnegative and fault_prob a probability")
        if self.fault_prob > 0:
            lo = self.replace / self.fail
            hi = self.replace / (self.fault_prob * self.fail)
            if not (3.0 * lo <= self.duration <= hi / 3.0):
                raise ConfigError(
                    f"duration {self.duration} outside the stable band "
                    f"[{3.0 * lo}, {hi / 3.0}] from replace/fail/fault_prob"
                )


# ---------------------------------------------------------------------------
# decision basis


@lru_cache(maxsize=32)
def _line_table(circuit: Circuit, line: int):
    """P(line value | cone gate modes, primary inputs) as a dense table.

    Exact enumeration over the fair coins of erratic gates in the line's
    cone. Scope order: cone gate modes, then primary inputs, then the line
    value.
    """
    cone = circuit.cone(line)
    shape = (4,) * len(cone) + (2,) * len(circuit.inputs) + (2,)
    table = np.zeros(shape)
    rng = None
    for mcombo in np.ndindex(*((4,) * len(cone))):
        modes = [OK] * circuit.n_gates
        for gi, m in zip(cone, mcombo):
            modes[gi] = m
        unknowns = [gi for gi in cone if modes[gi] == UNKNOWN]
        for icombo in np.ndindex(*((2,) * len(circuit.inputs))):
            acc = np.zeros(2)
            n_coins = len(unknowns)
            for coins in np.ndindex(*((2,) * n_coins)):
                coin_of = dict(zip(unknowns, coins))
                vals = [0] * len(circuit.lines)
                for lid, v in zip(circuit.inputs, icombo):
                    vals[lid] = v
                for gi, g in enumerate(circuit.gates):
                    m = modes[gi]
                    if m == OK:
                        out = _GATE_FN[g.fn](vals[g.inputs[0]], vals[g.inputs[1]])
                    elif m == STUCK0:
                        out = 0
                    elif m == STUCK1:
                        out = 1
                    else:
                        out = coin_of[gi]
                    vals[g.output] = out
                acc[vals[line]] += 1.0
            table[mcombo + icombo] = acc / acc.sum()
    return cone, table


@lru_cache(maxsize=32)
def _transition_table(n_actions: int, replace_action: int, fault_prob: float):
    """P(next mode | mode, action) for one gate.

    Replacing the gate installs a fresh one that immediately faces the
    per-tick hazard; any other action leaves healthy gates exposed to the
    hazard and faulted gates absorbed in their mode.
    """
    p = fault_prob
    fresh = np.array([1.0 - p, p / 3.0, p / 3.0, p / 3.0])
    stay = np.zeros((4, 4))
    stay[OK] = fresh
    for m in (STUCK0, STUCK1, UNKNOWN):
        stay[m, m] = 1.0
    tab = np.zeros((4, n_actions, 4))
    for a in range(n_actions):
        tab[:, a, :] = fresh if a == replace_action else stay
    return tab


@dataclass
class DecisionBasis:
    """The rolling two-stage influence diagram plus its variable map."""

    diagram: InfluenceDiagram
    circuit: Circuit
    actions: tuple             # action labels, index = decision value
    m0: tuple                  # stage-0 mode variable ids, per gate
    m1: tuple                  # stage-1 mode variable ids, per gate
    obs0: dict                 # sensed line id -> stage-0 observation var id
    probe0: Optional[int]      # pending-probe observation var id, if any
    d0: int
    d1: int

    def evidence_from_sense(self, sense: dict, probe_value=None) -> dict:
        ev = {lid_var: int(sense[lid]) for lid, lid_var in self.obs0.items()}
        if self.probe0 is not None:
            if probe_value is None:
                raise ConfigError("pending probe reading missing from sense data")
            ev[self.probe0] = int(probe_value)
        return ev


def build_decision_basis(circuit: Circuit, beliefs, cost_model: CostModel,
                         pending_probe: Optional[int] = None) -> DecisionBasis:
    """Assemble the two-stage decision basis for one agent cycle.

    Stage-0 mode priors are the agent's current beliefs; sensed lines get
    observation nodes (identity for sensed inputs, coin-exact mode/input
    tables otherwise); when the previous action probed a line, a reading
    node for it joins stage 0. Stage 1 repeats the structure one hazard
    step later with a probe-reading node that is informative only under
    the matching probe action, giving probes one-step value of
    information. The terminal stage carries only gate modes, charged at
    ``duration`` times the per-tick failure cost. Sign is minimize.

    Observation nodes treat sensed lines as conditionally independent
    given modes and inputs, which is exact when sensed lines share no
    erratic-gate ancestors (true for the bundled circuits' sensors).
    """
    cm = cost_model
    acts = circuit.action_labels()
    A = len(acts)
    G = circuit.n_gates
    NI = len(circuit.inputs)

    variables = []
    cpts = []

    def add_var(name, domain, kind=CHANCE):
        vid = len(variables)
        variables.append(Variable(vid, name, tuple(domain), kind))
        return vid

    def add_cpt(scope, table, child):
        cpts.append(Factor(tuple(scope), table, role="cpt", child=child))

    def add_stage(tag, prev_modes=None, dec_var=None):
        modes = tuple(add_var(f"{g.name}.{tag}", MODE_NAMES) for g in circuit.gates)
        for gi, vid in enumerate(modes):
            if prev_modes is None:
                add_cpt((vid,), np.asarray(beliefs[gi], dtype=np.float64), vid)
            else:
                tab = _transition_table(A, circuit.action_of_replace(gi), cm.fault_prob)
                add_cpt((prev_modes[gi], dec_var, vid), tab, vid)
        ins = tuple(add_var(f"{circuit.lines[l]}.{tag}", ("0", "1")) for l in circuit.inputs)
        for vid in ins:
            add_cpt((vid,), np.array([0.5, 0.5]), vid)
        return modes, ins

    def add_obs(tag, line, modes, ins):
        vid = add_var(f"{circuit.lines[line]}.{tag}.obs", ("0", "1"))
        if line in circuit.inputs:
            src = ins[circuit.inputs.index(line)]
            add_cpt((src, vid), np.eye(2), vid)
        else:
            cone, tab = _line_table(circuit, line)
            scope = tuple(modes[gi] for gi in cone) + ins + (vid,)
            add_cpt(scope, tab, vid)
        return vid

    m0, in0 = add_stage("t0")
    obs0 = {line: add_obs("t0", line, m0, in0) for line in circuit.sensors}
    probe0 = None
    if pending_probe is not None:
        if pending_probe not in circuit.probes:
            raise ConfigError(f"line {pending_probe} is not probe-able")
        probe0 = add_var(f"{circuit.lines[pending_probe]}.t0.probe", ("0", "1"))
        cone, tab = _line_table(circuit, pending_probe)
        add_cpt(tuple(m0[gi] for gi in cone) + in0 + (probe0,), tab, probe0)

    d0 = add_var("act0", acts, DECISION)
    m1, in1 = add_stage("t1", m0, d0)
    obs1 = {line: add_obs("t1", line, m1, in1) for line in circuit.sensors}
    probe1 = None
    if circuit.probes:
        probe1 = add_var("probe.t1", ("0", "1"))
        cones = sorted({gi for l in circuit.probes for gi in circuit.cone(l)})
        scope = tuple(m1[gi] for gi in cones) + in1 + (d0, probe1)
        shape = (4,) * len(cones) + (2,) * NI + (A, 2)
        tab = np.full(shape, 0.5)
        for l in circuit.probes:
            a = circuit.action_of_probe(l)
            cone_l, tab_l = _line_table(circuit, l)
            # expand the line table onto the union-cone scope
            for mcombo in np.ndindex(*((4,) * len(cones))):
                sub = tab_l[tuple(mcombo[cones.index(gi)] for gi in cone_l)]
                tab[mcombo + (Ellipsis, a, slice(None))] = sub
        add_cpt(scope, tab, probe1)

    d1 = add_var("act1", acts, DECISION)
    m2, _ = (tuple(add_var(f"{g.name}.t2", MODE_NAMES) for g in circuit.gates), None)
    for gi, vid in enumerate(m2):
        tab = _transition_table(A, circuit.action_of_replace(gi), cm.fault_prob)
        add_cpt((m1[gi], d1, vid), tab, vid)

    act_cost = np.zeros(A)
    for l in circuit.probes:
        act_cost[circuit.action_of_probe(l)] = cm.probe
    for gi in range(G):
        act_cost[circuit.action_of_replace(gi)] = cm.replace

    def fault_cost(mode_vars, scale):
        tab = np.full((4,) * G, scale)
        tab[(OK,) * G] = 0.0
        return Factor(tuple(mode_vars), tab, role="utility")

    utilities = [
        Factor((d0,), act_cost, role="utility"),
        Factor((d1,), act_cost, role="utility"),
        fault_cost(m1, cm.fail),
        fault_cost(m2, cm.duration * cm.fail),
    ]

    o0_ids = tuple(obs0.values()) + ((probe0,) if probe0 is not None else ())
    o1_ids = tuple(obs1.values()) + ((probe1,) if probe1 is not None else ())
    decisions = [
        DecisionStage(d0, o0_ids),
        DecisionStage(d1, o0_ids + (d0,) + o1_ids),
    ]
    diagram = InfluenceDiagram(variables, cpts, decisions, utilities, MINIMIZE)
    return DecisionBasis(diagram, circuit, acts, m0, m1, obs0, probe0, d0, d1)


# ---------------------------------------------------------------------------
# agent cycle


@dataclass
class AgentState:
    beliefs: tuple                     # per gate: np distribution over modes
    pending_probe: Optional[int] = None

    @staticmethod
    def fresh(circuit: Circuit) -> "AgentState":
        b = np.zeros(4)
        b[OK] = 1.0
        return AgentState(tuple(b.copy() for _ in circuit.gates), None)


def roll_forward(beliefs, basis: DecisionBasis, evidence: dict, evaluator,
                 budget: int):
    """Per-gate posterior marginals over next-stage modes become the next
    cycle's factored priors.

    ``evidence`` must include the posted act. Budgeted evaluators get a
    uniform-mixture floor on their partial marginals; a zero-mass result
    keeps the previous beliefs. Returns ``(beliefs, units, ok)``.
    """
    try:
        marginals, units, exactly = evaluator.posteriors(
            basis.diagram, evidence, basis.m1, budget)
    except ZeroMassError:
        return beliefs, 0, False
    if marginals is None:
        return beliefs, units, False
    out = []
    for gi, vid in enumerate(basis.m1):
        dist = np.asarray(marginals[vid], dtype=np.float64)
        if not exactly:
            dist = (1.0 - BELIEF_FLOOR) * dist + BELIEF_FLOOR / 4.0
        out.append(dist / dist.sum())
    return tuple(out), units, True


def agent_cycle(state: AgentState, sense: dict, evaluator, circuit: Circuit,
                cost_model: CostModel, probe_value=None):
    """One decision cycle: extend the basis, post the sense data, pick the
    minimum-expected-cost action, post it, and roll the beliefs forward.

    An evaluator failure (zero evidence mass) degrades to Wait. Returns
    ``(action index, compute units, new state, fallback flag)``.
    """
    basis = build_decision_basis(circuit, state.beliefs, cost_model,
                                 state.pending_probe)
    evidence = basis.evidence_from_sense(sense, probe_value)
    fallback = False
    try:
        action, dec_units = evaluator.decide(basis.diagram, evidence)
    except ZeroMassError:
        action, dec_units = 0, 0
        fallback = True

    ev2 = dict(evidence)
    ev2[basis.d0] = int(action)
    beliefs, roll_units, _ = roll_forward(
        state.beliefs, basis, ev2, evaluator, evaluator.roll_budget)

    pending = None
    label = basis.actions[action]
    if label.startswith("Probe("):
        pending = circuit.probes[action - 1]
    units = max(1, dec_units + roll_units)
    return action, units, AgentState(beliefs, pending), fallback


def run_tick_clock(units: int, units_per_tick: int) -> int:
    """Ticks consumed by a computation: at least one, then one more per
    full quantum of compute units."""
    if units_per_tick < 1:
        raise ConfigError("units per tick must be >= 1")
    return max(1, math.ceil(units / units_per_tick))


def apply_action(modes, action: int, circuit: Circuit, cost_model: CostModel):
    """Land an action on the equipment.

    Returns ``(modes, cost_delta, pending_probe_line)``. Waiting is free;
    probing pays its fee and makes the line readable with the next sense
    report; replacing restores the gate and pays per gate. The per-tick
    downtime fee is charged by the simulation loop, not here.
    """
    n_probe = len(circuit.probes)
    if action == 0:
        return modes, 0.0, None
    if action <= n_probe:
        return modes, cost_model.probe, circuit.probes[action - 1]
    gi = action - 1 - n_probe
    if gi >= circuit.n_gates:
        raise ConfigError(f"action index {action} out of range")
    new_modes = list(modes)
    new_modes[gi] = OK
    return new_modes, cost_model.replace, None


# ---------------------------------------------------------------------------
# scenarios and transcripts


@dataclass(frozen=True)
class Scenario:
    """Full run configuration; (scenario, seed) determines a transcript."""

    circuit: str = "half_adder"
    cost_model: CostModel = field(default_factory=CostModel)
    horizon: int = 1000
    quantum: int = 8
    units_per_quantum: int = 220
    algorithm: str = "pk"
    steps: int = 4

    def units_per_tick(self) -> int:
        return max(1, int(self.quantum) * int(self.units_per_quantum))


@dataclass
class TickRecord:
    tick: int
    modes: tuple
    inputs: tuple
    lines: tuple
    injected: tuple
    faulted: bool
    cost: float


@dataclass
class DecisionRecord:
    tick: int                  # tick of the sense report the decision used
    action: int
    label: str
    units: int
    ticks_consumed: int
    fallback: bool


@dataclass
class Transcript:
    """Deterministic, replayable event log with cost accounting."""

    scenario: Scenario
    seed: int
    ticks: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    total_cost: float = 0.0
    failures: int = 0
    replacements: int = 0
    probes: int = 0
    fault_ticks: int = 0

    def cost_per_failure(self) -> Optional[float]:
        if self.failures == 0:
            return None
        return self.total_cost / self.failures

    def to_tsv(self) -> str:
        lines = [
            "# scenario\t%s\tseed\t%d" % (self.scenario.algorithm, self.seed),
            "# totals\tcost\t%.17g\tfailures\t%d\treplacements\t%d\tprobes\t%d\tfault_ticks\t%d"
            % (self.total_cost, self.failures, self.replacements, self.probes,
               self.fault_ticks),
            "tick\tmodes\tinputs\tlines\tinjected\tfaulted\tcost",
        ]
        for r in self.ticks:
            inj = ";".join(f"{g}:{MODE_NAMES[m]}" for g, m in r.injected) or "-"
            lines.append("\t".join([
                str(r.tick),
                ",".join(MODE_NAMES[m] for m in r.modes),
                ",".join(str(x) for x in r.inputs),
                ",".join(str(x) for x in r.lines),
                inj, "1" if r.faulted else "0", "%.17g" % r.cost,
            ]))
        lines.append("tick\taction\tlabel\tunits\tticks\tfallback")
        for d in self.decisions:
            lines.append("\t".join([
                str(d.tick), str(d.action), d.label, str(d.units),
                str(d.ticks_consumed), "1" if d.fallback else "0",
            ]))
        return "\n".join(lines) + "\n"


def run_scenario(scenario: Scenario, seed: int, make_evaluator=None) -> Transcript:
    """Simulate one full run: sense, think (while the world moves), act.

    The equipment and the agent draw from independent seeded streams, so
    the fault pattern for a given seed is shared across agents that never
    touch the agent stream.
    """
    from . import harness

    circuit = circuit_by_name(scenario.circuit)
    cm = scenario.cost_model
    root = np.random.SeedSequence([int(seed), 0x01D])
    eq_seq, ag_seq = root.spawn(2)
    rng_eq = np.random.default_rng(eq_seq)
    if make_evaluator is None:
        make_evaluator = harness.make_agent
    evaluator = make_evaluator(
        {"algorithm": scenario.algorithm, "steps": scenario.steps}, ag_seq)

    tr = Transcript(scenario, int(seed))
    units_per_tick = scenario.units_per_tick()
    state = AgentState.fresh(circuit)
    modes = [OK] * circuit.n_gates
    inputs = [int(rng_eq.integers(0, 2)) for _ in circuit.inputs]
    lines = eval_lines(circuit, modes, inputs, rng_eq)
    tick = 0

    while tick < scenario.horizon:
        sense_tick = tick
        sense = {lid: lines[lid] for lid in circuit.sensors}
        probe_value = lines[state.pending_probe] if state.pending_probe is not None else None
        action, units, state, fallback = agent_cycle(
            state, sense, evaluator, circuit, cm, probe_value)
        k = run_tick_clock(units, units_per_tick)
        for i in range(1, k + 1):
            if tick >= scenario.horizon:
                break
            modes, inputs, lines, _, injected = step_equipment(
                circuit, modes, cm.fault_prob, rng_eq)
            cost = 0.0
            if i == k:
                modes, action_cost, _pending = apply_action(modes, action, circuit, cm)
                cost += action_cost
                if action > len(circuit.probes):
                    tr.replacements += 1
                elif action > 0:
                    tr.probes += 1
                # replacing changes the lines it drives right away
                lines = eval_lines(circuit, modes, inputs, rng_eq)
            faulted = any(m != OK for m in modes)
            if faulted:
                cost += cm.fail
                tr.fault_ticks += 1
            tick += 1
            tr.failures += len(injected)
            tr.total_cost += cost
            tr.ticks.append(TickRecord(
                tick, tuple(modes), tuple(inputs), tuple(lines),
                tuple(injected), faulted, cost))
        tr.decisions.append(DecisionRecord(
            sense_tick, action, circuit.action_labels()[action], units, k,
            fallback))
    return tr
