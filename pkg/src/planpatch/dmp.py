"""Dynamic movement primitive baseline fit by ridge regression from one demo.

Per-dimension second-order attractor with a phase-driven forcing term; goal
scaling retargets the learned trajectory, and the z dimension's forcing is
halved to tame amplitude sensitivity when start and goal heights are close.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import config as cfg
from .world import Action, Grip


class InsufficientSamples(ValueError):
    pass


@dataclass
class DmpConfig:
    alpha_z: float = 25.0
    beta_z: float = 25.0 / 4.0
    tau: float = 1.0
    alpha_x: float = math.log(100.0)
    n_basis: int = 20
    n_features: int = 1          # object-feature count; single unit feature
    feature_weights: tuple = (1.0,)
    ridge_lambda: float = 1e-6
    z_amplitude_scale: float = 0.5
    amplitude_guard: float = 1e-6

    def centers(self) -> np.ndarray:
        # exponentially spaced along the canonical decay
        k = np.arange(self.n_basis)
        return np.exp(-self.alpha_x * k / (self.n_basis - 1))

    def widths(self) -> np.ndarray:
        c = self.centers()
        h = 1.0 / np.diff(c) ** 2
        return np.append(h, h[-1])


def basis(x: float, config: DmpConfig) -> np.ndarray:
    """Gaussian basis activations at canonical phase x."""
    c = config.centers()
    h = config.widths()
    return np.exp(-h * (x - c) ** 2)


@dataclass
class DmpWeights:
    """Per-output-dimension basis weights plus the offset weight."""

    w: np.ndarray    # (dims, K)
    w0: np.ndarray   # (dims,)
    y0: np.ndarray   # demo start per dimension
    goal: np.ndarray  # demo goal per dimension

    @property
    def dims(self) -> int:
        return len(self.w0)

    def to_json(self) -> str:
        return json.dumps({"w": self.w.tolist(), "w0": self.w0.tolist(),
                           "y0": self.y0.tolist(), "goal": self.goal.tolist()})

    @classmethod
    def from_json(cls, doc: str | dict) -> "DmpWeights":
        if isinstance(doc, str):
            doc = json.loads(doc)
        return cls(w=np.array(doc["w"]), w0=np.array(doc["w0"]),
                   y0=np.array(doc["y0"]), goal=np.array(doc["goal"]))


def forcing(x: float, w: np.ndarray, w0: float, config: DmpConfig) -> float:
    """Phase-weighted forcing: normalized basis mix times x, plus offset term."""
    psi = basis(x, config)
    s = float(psi.sum())
    mix = float(psi @ w) * x / s if s > 0 else 0.0
    return config.alpha_z * config.beta_z * (mix + w0 * psi[0])


def _feature_row(x: float, config: DmpConfig) -> np.ndarray:
    psi = basis(x, config)
    s = float(psi.sum())
    row = np.empty(config.n_basis + 1)
    row[:config.n_basis] = psi * x / s
    row[config.n_basis] = psi[0]
    return config.alpha_z * config.beta_z * row


def fit_dmp(times: np.ndarray, traj: np.ndarray,
            config: DmpConfig | None = None) -> tuple[DmpWeights, float]:
    """Ridge-fit per-dimension forcing weights from one time-stamped trajectory.

    Returns the weights and the training-set forcing residual RMS.
    """
    config = config or DmpConfig()
    times = np.asarray(times, dtype=float)
    traj = np.atleast_2d(np.asarray(traj, dtype=float))
    if traj.shape[0] == len(times) and traj.shape[1] != len(times):
        traj = traj.T
    dims, n = traj.shape
    if n < config.n_basis + 2:
        raise InsufficientSamples(
            f"need at least {config.n_basis + 2} samples, got {n}")

    tau = config.tau
    y = traj
    yd = np.gradient(y, times, axis=1, edge_order=2)
    ydd = np.gradient(yd, times, axis=1, edge_order=2)
    y0 = y[:, 0]
    goal = y[:, -1]

    xs = np.exp(-config.alpha_x * times / tau)
    Phi = np.array([_feature_row(x, config) for x in xs])

    W = np.empty((dims, config.n_basis))
    W0 = np.empty(dims)
    residuals = []
    lam = config.ridge_lambda
    A = Phi.T @ Phi + lam * np.eye(Phi.shape[1])
    for j in range(dims):
        f_target = (tau ** 2 * ydd[j]
                    - config.alpha_z * (config.beta_z * (goal[j] - y[j])
                                        - tau * yd[j]))
        sol = np.linalg.solve(A, Phi.T @ f_target)
        W[j] = sol[:config.n_basis]
        W0[j] = sol[config.n_basis]
        residuals.append(np.sqrt(np.mean((Phi @ sol - f_target) ** 2)))
    weights = DmpWeights(w=W, w0=W0, y0=y0, goal=goal)
    return weights, float(np.mean(residuals))


def rollout(weights: DmpWeights, y0, goal, config: DmpConfig | None = None,
            dt: float | None = None, steps: int | None = None,
            z_dim: int | None = 2) -> np.ndarray:
    """Euler-integrate the attractor with goal-scaled forcing.

    Forcing per dimension is scaled by (goal - y0) / (demo goal - demo y0),
    guarded to 1 when the demo displacement is below the amplitude guard; the
    z dimension's scale is then halved.
    """
    config = config or DmpConfig()
    y0 = np.asarray(y0, dtype=float)
    goal = np.asarray(goal, dtype=float)
    dt = dt if dt is not None else 0.01 * config.tau
    steps = steps if steps is not None else int(math.ceil(3.0 * config.tau / dt))
    tau = config.tau

    demo_amp = weights.goal - weights.y0
    scale = np.ones(weights.dims)
    for j in range(weights.dims):
        if abs(demo_amp[j]) >= config.amplitude_guard:
            scale[j] = (goal[j] - y0[j]) / demo_amp[j]
    if z_dim is not None and 0 <= z_dim < weights.dims:
        scale[z_dim] *= config.z_amplitude_scale

    y = y0.copy()
    yd = np.zeros(weights.dims)
    x = 1.0
    out = [y.copy()]
    phi = np.asarray(config.feature_weights)[:config.n_features]
    for _ in range(steps):
        f = np.array([forcing(x, weights.w[j], weights.w0[j], config)
                      for j in range(weights.dims)])
        f_total = float(phi.sum()) * f * scale
        ydd = (config.alpha_z * (config.beta_z * (goal - y) / tau ** 2 - yd / tau)
               + f_total / tau ** 2)
        y = y + dt * yd
        yd = yd + dt * ydd
        x = x + dt * (-config.alpha_x / tau) * x
        out.append(y.copy())
    return np.array(out)


def rollout_to_csv(path, times: np.ndarray, traj: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "x", "y", "z", "yaw"])
        for t, row in zip(times, traj):
            padded = list(row) + [0.0] * (4 - len(row))
            wr.writerow([f"{t:.6f}"] + [f"{v:.9f}" for v in padded[:4]])


# -- baseline episode ----------------------------------------------------------

def collect_kinesthetic_demo(seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Scripted stand-in for the kinesthetic training demo.

    Runs the planner for grasping and the scripted expert for transport and
    insertion on the fixed training configuration (rect piece, far-corner
    start, obstacle present), and returns the post-grasp ee trajectory.
    """
    from . import orchestrator as orch
    from .world import make_task

    task = cfg.TaskConfig(shape="rect", start_cell=7, obstacle=True, seed=seed)
    world, scene = make_task(task, seed)
    traj = orch.run_scripted_insertion_trajectory(world, scene, seed)
    times = np.arange(len(traj)) * 0.1
    return times, np.array(traj)


def dmp_baseline_episode(world, scene, weights: DmpWeights,
                         config: DmpConfig | None = None, seed: int = 0):
    """Planner grasps; DMP rollout transports and inserts; outcome judged."""
    from . import orchestrator as orch
    return orch.run_dmp_episode(world, scene, weights, config or DmpConfig(),
                                seed=seed)
