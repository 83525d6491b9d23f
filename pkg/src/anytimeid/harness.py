"""Experiment orchestration: agents, scenario runs, grid sweeps, CSV output.

A sweep runs every (algorithm, quantum, steps) cell over a fixed list of
seeds, averages cost per failure over the seeds that saw at least one
failure, and also reports each algorithm's best cell per quantum. Cells
are independent jobs; they may run in parallel and the merged output is
byte-identical either way because every run's randomness is derived from
(seed, cell) alone and results are sorted before writing.
"""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import exact, maintenance, reduction, search
from .model import ConfigError, ZeroMassError


# ---------------------------------------------------------------------------
# agents


class RandomAgent:
    """Uniform action choice; one compute unit; keeps no beliefs."""

    roll_budget = 0

    def __init__(self, seed_seq):
        self.rng = np.random.default_rng(seed_seq)

    def decide(self, diagram, evidence):
        n = diagram.card(diagram.decisions[0].var)
        return int(self.rng.integers(0, n)), 1

    def posteriors(self, diagram, evidence, targets, budget):
        return None, 0, False


class ExactAgent:
    """Reference agent: exact evaluation and exact belief updates."""

    roll_budget = 0

    def __init__(self, seed_seq=None):
        pass

    def decide(self, diagram, evidence):
        tally = exact.Tally()
        res = exact.evaluate_decision(diagram, evidence, tally)
        return res.action, tally.units

    def posteriors(self, diagram, evidence, targets, budget):
        tally = exact.Tally()
        out = {t: exact.posterior(diagram, evidence, t, tally) for t in targets}
        return out, tally.units, True


class SearchAgent:
    """Budgeted incremental search for decisions and belief updates."""

    def __init__(self, steps, seed_seq=None):
        if steps < 1:
            raise ConfigError("search agent needs steps >= 1")
        self.steps = int(steps)
        self.roll_budget = self.steps

    def decide(self, diagram, evidence):
        res = search.decide_diagram(diagram, evidence, self.steps)
        return res.action, res.units

    def posteriors(self, diagram, evidence, targets, budget):
        res = search.approximate_marginals(diagram, evidence, targets, budget)
        if res.covered <= 0.0:
            return None, res.units, False
        return res.marginals, res.units, res.exhausted


class ReducedAgent:
    """Threshold-reduction decisions; budgeted-search belief updates.

    The posterior budget equals the decision budget (iterations double as
    the search step allowance when rolling beliefs forward).
    """

    def __init__(self, mode, iterations, seed_seq=None):
        if iterations < 1:
            raise ConfigError("reduced agent needs iterations >= 1")
        self.mode = mode
        self.iterations = int(iterations)
        self.roll_budget = self.iterations

    def decide(self, diagram, evidence):
        res = reduction.reduced_decide(diagram, evidence, self.iterations, self.mode)
        return res.action, res.units

    def posteriors(self, diagram, evidence, targets, budget):
        res = search.approximate_marginals(diagram, evidence, targets, budget)
        if res.covered <= 0.0:
            return None, res.units, False
        return res.marginals, res.units, res.exhausted


ALGORITHMS = ("random", "exact", "dipi", "k", "pk")


def make_agent(spec: dict, seed_seq=None):
    """Agent from a spec dict with ``algorithm`` and optional ``steps``.

    ``steps`` means search steps for dipi and reduction iterations for
    k/pk; random charges one unit per decision and exact charges its full
    cell-operation count.
    """
    algorithm = spec.get("algorithm")
    steps = int(spec.get("steps", 1))
    if algorithm == "random":
        return RandomAgent(seed_seq)
    if algorithm == "exact":
        return ExactAgent(seed_seq)
    if algorithm == "dipi":
        return SearchAgent(steps, seed_seq)
    if algorithm == "k":
        return ReducedAgent("K", steps, seed_seq)
    if algorithm == "pk":
        return ReducedAgent("PK", steps, seed_seq)
    raise ConfigError(f"unknown algorithm {algorithm!r}")


def cost_per_failure(transcript) -> Optional[float]:
    """Total cost divided by the number of fault injections; undefined
    (None) when the run saw no failures."""
    return transcript.cost_per_failure()


# ---------------------------------------------------------------------------
# grids and sweeps


@dataclass(frozen=True)
class ExperimentGrid:
    """Axes of a sweep, mirroring the testbed's quantum/steps structure."""

    scenario: maintenance.Scenario = field(default_factory=maintenance.Scenario)
    algorithms: tuple = (("random", (1,)), ("exact", (1,)),
                         ("dipi", (1, 2, 4, 8, 16, 32, 64, 128, 256)),
                         ("k", (1, 2, 4, 8, 16, 32, 64, 128, 256)),
                         ("pk", (1, 2, 4, 8, 16, 32, 64, 128, 256)))
    quanta: tuple = (1, 2, 4, 8, 16, 32, 64, 128)
    seeds: int = 3
    seed_base: int = 0

    def __post_init__(self):
        if self.seeds < 2:
            raise ConfigError("a grid needs at least two seeds per cell")
        if not self.quanta or not self.algorithms:
            raise ConfigError("grid axes must be nonempty")
        if self.scenario.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        for name, steps in self.algorithms:
            if name not in ALGORITHMS:
                raise ConfigError(f"unknown algorithm {name!r}")
            if not steps:
                raise ConfigError(f"algorithm {name} has an empty steps list")

    def cells(self):
        out = []
        for name, steps in self.algorithms:
            for q in self.quanta:
                for s in steps:
                    out.append((name, int(q), int(s)))
        return out


@dataclass
class CellResult:
    algorithm: str
    quantum: int
    steps: int
    seed_count: int            # seeds included in the ratio mean
    mean_cost_per_failure: Optional[float]
    stderr: float
    mean_failures: float
    mean_total_cost: float
    per_seed: tuple            # (seed, cost, failures, cost/failure or None)

    def key(self):
        return (self.algorithm, self.quantum, self.steps)


def run_cell(grid: ExperimentGrid, cell) -> CellResult:
    """All seeds of one (algorithm, quantum, steps) cell."""
    name, quantum, steps = cell
    scenario = replace(grid.scenario, quantum=quantum, algorithm=name, steps=steps)
    rows = []
    for i in range(grid.seeds):
        seed = grid.seed_base + i
        tr = maintenance.run_scenario(scenario, seed)
        rows.append((seed, tr.total_cost, tr.failures, tr.cost_per_failure()))
    ratios = [r[3] for r in rows if r[3] is not None]
    mean = sum(ratios) / len(ratios) if ratios else None
    if len(ratios) > 1:
        var = sum((x - mean) ** 2 for x in ratios) / (len(ratios) - 1)
        stderr = math.sqrt(var / len(ratios))
    else:
        stderr = 0.0
    return CellResult(
        name, quantum, steps, len(ratios), mean, stderr,
        sum(r[2] for r in rows) / len(rows),
        sum(r[1] for r in rows) / len(rows),
        tuple(rows),
    )


def _run_cell_job(args):
    grid_dict, cell = args
    return run_cell(grid_from_dict(grid_dict), cell)


def sweep(grid: ExperimentGrid, jobs: int = 1, progress=None) -> list:
    """Every cell of the grid, averaged over seeds, deterministically
    ordered by (algorithm, quantum, steps)."""
    cells = grid.cells()
    if jobs > 1:
        args = [(grid_to_dict(grid), c) for c in cells]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_job, args))
    else:
        results = []
        for c in cells:
            results.append(run_cell(grid, c))
            if progress is not None:
                progress(c)
    results.sort(key=CellResult.key)
    return results


def best_per_quantum(results) -> list:
    """Per algorithm and quantum, the cell with the lowest mean cost per
    failure (ties to the smaller step count)."""
    by = {}
    for r in results:
        if r.mean_cost_per_failure is None:
            continue
        k = (r.algorithm, r.quantum)
        cur = by.get(k)
        if cur is None or (r.mean_cost_per_failure, r.steps) < (
                cur.mean_cost_per_failure, cur.steps):
            by[k] = r
    return [by[k] for k in sorted(by)]


CELL_COLUMNS = ("algorithm", "quantum", "steps", "seed_count",
                "mean_cost_per_failure", "stderr", "mean_failures",
                "mean_total_cost")


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return "%.10g" % x
    return str(x)


def results_csv(results, best=False) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    cols = CELL_COLUMNS if not best else ("algorithm", "quantum", "best_steps",
                                          "mean_cost_per_failure", "stderr",
                                          "mean_failures", "mean_total_cost")
    w.writerow(cols)
    for r in results:
        row = [r.algorithm, r.quantum, r.steps]
        if not best:
            row.append(r.seed_count)
        row += [_fmt(r.mean_cost_per_failure), _fmt(r.stderr),
                _fmt(r.mean_failures), _fmt(r.mean_total_cost)]
        w.writerow(row)
    return out.getvalue()


def write_atomic(path: str, data: str):
    """Write-then-rename so failed runs never leave partial files."""
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_sweep(results, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    write_atomic(os.path.join(out_dir, "cells.csv"), results_csv(results))
    write_atomic(os.path.join(out_dir, "best_per_quantum.csv"),
                 results_csv(best_per_quantum(results), best=True))


# ---------------------------------------------------------------------------
# config plumbing shared with the CLI


def scenario_from_dict(d: dict) -> maintenance.Scenario:
    try:
        cmd = dict(d.get("cost_model", {}))
        cm = maintenance.CostModel(**cmd)
        return maintenance.Scenario(
            circuit=d.get("circuit", "half_adder"),
            cost_model=cm,
            horizon=int(d.get("horizon", 1000)),
            quantum=int(d.get("quantum", 8)),
            units_per_quantum=int(d.get("units_per_quantum", 220)),
            algorithm=d.get("agent", {}).get("algorithm", "pk"),
            steps=int(d.get("agent", {}).get("steps", 4)),
        )
    except TypeError as e:
        raise ConfigError(f"bad scenario config: {e}") from None


def scenario_to_dict(s: maintenance.Scenario) -> dict:
    cm = s.cost_model
    return {
        "circuit": s.circuit,
        "cost_model": {
            "replace": cm.replace, "probe": cm.probe, "fail": cm.fail,
            "fault_prob": cm.fault_prob, "duration": cm.duration,
        },
        "horizon": s.horizon,
        "quantum": s.quantum,
        "units_per_quantum": s.units_per_quantum,
        "agent": {"algorithm": s.algorithm, "steps": s.steps},
    }


def grid_from_dict(d: dict) -> ExperimentGrid:
    algs = d.get("algorithms")
    if not isinstance(algs, dict) or not algs:
        raise ConfigError("grid config needs a nonempty 'algorithms' table")
    algorithms = tuple(
        (name, tuple(int(s) for s in (spec.get("steps", [1]) if isinstance(spec, dict) else spec)))
        for name, spec in algs.items()
    )
    return ExperimentGrid(
        scenario=scenario_from_dict(d.get("scenario", {})),
        algorithms=algorithms,
        quanta=tuple(int(q) for q in d.get("quanta", (1, 2, 4, 8, 16, 32, 64, 128))),
        seeds=int(d.get("seeds", 3)),
        seed_base=int(d.get("seed_base", 0)),
    )


def grid_to_dict(g: ExperimentGrid) -> dict:
    return {
        "scenario": scenario_to_dict(g.scenario),
        "algorithms": {name: {"steps": list(steps)} for name, steps in g.algorithms},
        "quanta": list(g.quanta),
        "seeds": g.seeds,
        "seed_base": g.seed_base,
    }
