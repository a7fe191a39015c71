"""Experiment harness: trial matrices, demo-count sweeps, CSV/summary reports."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

from . import config as cfg
from . import orchestrator as orch
from .world import Outcome, OutcomeKind, Unplaceable, make_task

METHODS = ("planner", "dmp", "patched")


class IoFailure(OSError):
    pass


@dataclass
class ExperimentSpec:
    method: str = "planner"
    shapes: tuple = cfg.SHAPES
    trials_per_shape: int = 7
    obstacle: bool = False
    demo_counts: tuple = (1, 5, 10, 20)
    seed: int = 0
    n_demos: int = 20
    config: cfg.FrameworkConfig = field(default_factory=cfg.FrameworkConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class TrialRow:
    method: str
    shape: str
    start_cell: int
    obstacle: bool
    outcome: str
    reason: str
    seed: int

    def as_list(self) -> list:
        return [self.method, self.shape, self.start_cell,
                int(self.obstacle), self.outcome, self.reason, self.seed]


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)
    sweep: list = field(default_factory=list)  # (demo_count, successes, trials)

    def count(self, outcome: str, reason: str | None = None,
              method: str | None = None) -> int:
        n = 0
        for r in self.rows:
            if r.outcome != outcome:
                continue
            if reason is not None and r.reason != reason:
                continue
            if method is not None and r.method != method:
                continue
            n += 1
        return n

    @property
    def n_trials(self) -> int:
        return len(self.rows)


def _start_cells(shape: str, trials_per_shape: int) -> list:
    goal = cfg.SHAPE_GOAL_CELL[shape]
    cells = [c for c in range(8) if c != goal]
    return cells[:trials_per_shape]


def trial_matrix(spec: ExperimentSpec) -> list:
    """(shape, start_cell, trial_seed) triples; all start regions except the goal."""
    out = []
    for si, shape in enumerate(spec.shapes):
        for ti, cell in enumerate(_start_cells(shape, spec.trials_per_shape)):
            out.append((shape, cell, cfg.derive_seed(spec.seed, "trial", si, ti)))
    return out


def _make_trial_world(spec: ExperimentSpec, shape: str, cell: int,
                      trial_seed: int):
    task = cfg.TaskConfig(shape=shape, start_cell=cell, obstacle=spec.obstacle,
                          eps_percept=spec.config.eps_percept,
                          tol_insert=spec.config.tol_insert, seed=trial_seed)
    try:
        return make_task(task, trial_seed), spec.obstacle
    except Unplaceable:
        # no admissible obstacle for this short segment: run the trial without one
        task = cfg.TaskConfig(shape=shape, start_cell=cell, obstacle=False,
                              eps_percept=spec.config.eps_percept,
                              tol_insert=spec.config.tol_insert, seed=trial_seed)
        return make_task(task, trial_seed), False


def run_experiment(spec: ExperimentSpec, artifacts=None,
                   dmp_bundle=None) -> ResultTable:
    """Run the 21-trial matrix for one method; episode errors become failures."""
    table = ResultTable()
    if spec.method == "patched" and artifacts is None:
        artifacts = orch.run_training(spec.n_demos, spec.config,
                                      seed=cfg.derive_seed(spec.seed, "train"))
    if spec.method == "dmp" and dmp_bundle is None:
        dmp_bundle = train_dmp_baseline(seed=cfg.derive_seed(spec.seed, "dmp"))

    for shape, cell, trial_seed in trial_matrix(spec):
        (world, scene), obstacle = _make_trial_world(spec, shape, cell, trial_seed)
        try:
            if spec.method == "planner":
                outcome, _ = orch.pure_planner_episode(world, scene, seed=trial_seed)
            elif spec.method == "patched":
                outcome, _ = orch.test_episode(world, scene, artifacts,
                                               seed=trial_seed)
            else:
                weights, dmp_config = dmp_bundle
                outcome, _ = orch.run_dmp_episode(world, scene, weights,
                                                  dmp_config, seed=trial_seed)
        except Exception as e:  # planning failures etc. count as failures
            outcome = Outcome(OutcomeKind.FAILURE, type(e).__name__)
        table.rows.append(TrialRow(
            method=spec.method, shape=shape, start_cell=cell, obstacle=obstacle,
            outcome=outcome.kind.value, reason=outcome.reason or "",
            seed=trial_seed))
    return table


def train_dmp_baseline(seed: int = 0):
    """One scripted kinesthetic-analog demo -> per-dimension ridge-fit DMPs."""
    from .dmp import DmpConfig, collect_kinesthetic_demo, fit_dmp

    times, traj = collect_kinesthetic_demo(seed=seed)
    config = DmpConfig(tau=float(times[-1]))
    weights, _ = fit_dmp(times, traj.T, config)
    return weights, config


def demo_sweep(spec: ExperimentSpec, counts: tuple | None = None) -> ResultTable:
    """Train fresh artifacts per demo count and evaluate the full matrix."""
    counts = counts if counts is not None else spec.demo_counts
    table = ResultTable()
    for count in counts:
        artifacts = orch.run_training(
            count, spec.config, seed=cfg.derive_seed(spec.seed, "sweep", count))
        sub = ExperimentSpec(method="patched", shapes=spec.shapes,
                             trials_per_shape=spec.trials_per_shape,
                             obstacle=spec.obstacle, seed=spec.seed,
                             config=spec.config)
        res = run_experiment(sub, artifacts=artifacts)
        succ = res.count("Success")
        table.rows.extend(res.rows)
        table.sweep.append((count, succ, res.n_trials))
    return table


def run_door_trials(n_trials: int = 10, seed: int = 0) -> tuple[int, int]:
    """(successes, anomalies) over seeded pure-planner door episodes."""
    successes = 0
    anomalies = 0
    for i in range(n_trials):
        outcome, rec = orch.door_episode(seed=cfg.derive_seed(seed, "door", i))
        successes += int(outcome.success)
        anomalies += rec["anomalies"]
    return successes, anomalies


# -- reporting -----------------------------------------------------------------

CSV_HEADER = ["method", "shape", "start_cell", "obstacle", "outcome", "reason", "seed"]


def emit_report(table: ResultTable, out_dir, fmt: str = "csv") -> dict:
    """Write results.csv and summary.txt; byte-stable across runs."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        csv_path = os.path.join(out_dir, "results.csv")
        with open(csv_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(CSV_HEADER)
            for row in table.rows:
                wr.writerow(row.as_list())
        summary = summarize(table)
        with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
            fh.write(summary)
    except OSError as e:
        raise IoFailure(str(e)) from e
    return {"csv": csv_path, "summary": summary}


def summarize(table: ResultTable) -> str:
    buf = io.StringIO()
    methods = sorted({r.method for r in table.rows})
    for m in methods:
        rows = [r for r in table.rows if r.method == m]
        succ = sum(r.outcome == "Success" for r in rows)
        part = sum(r.outcome == "PartialSuccess" for r in rows)
        fail = sum(r.outcome == "Failure" for r in rows)
        hit = sum(r.reason == "HitObstacle" for r in rows)
        buf.write(f"{m}: trials={len(rows)} success={succ} partial={part} "
                  f"failure={fail} hit_obstacle={hit}\n")
    for count, succ, n in table.sweep:
        buf.write(f"demos={count}: success={succ}/{n}\n")
    return buf.getvalue()
