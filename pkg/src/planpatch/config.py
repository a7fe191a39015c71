"""Global defaults, task configuration, and deterministic seed derivation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

CONFIG_VERSION = 1

# Workspace bounds (meters).  The board plane is z = 0; everything lives above it.
WORKSPACE_X = (-0.24, 0.24)
WORKSPACE_Y = (-0.15, 0.15)
WORKSPACE_Z = (0.0, 0.045)

# Board geometry: 0.30 x 0.15 m board flush with the table, 8 holes on a 4x2 grid.
BOARD_SIZE = (0.30, 0.15)
HOLE_PITCH = 0.075
HOLE_COLS = 4
HOLE_ROWS = 2
SURFACE_Z = 0.0
LIP_DEPTH = 0.012

# Piece half-extents per shape (max dimension 0.05 m).
PIECE_HALF = {
    "rect": (0.025, 0.015),
    "square": (0.018, 0.018),
    "circle": (0.018, 0.018),  # radius 0.018
}
PIECE_THICKNESS = 0.012

# Each shape has a dedicated goal hole at a board corner; the remaining holes
# are occupied by their own pieces and behave as solid surface.
SHAPE_GOAL_CELL = {"rect": 0, "circle": 3, "square": 4}
HOLE_SHAPES = ("rect", "square", "circle", "circle", "square", "rect", "circle", "rect")

# Gripper: a free-flying point gripper with a small collision disc, holding
# the piece knob GRASP_DZ above the piece bottom face.
GRASP_DZ = 0.02
GRASP_RADIUS = 0.01
GRASP_Z_TOL = 0.01
EE_RADIUS = 0.01

# Transport clearance keeps the carried piece above the surface but below the
# obstacle top, so obstacles must be steered around, not flown over.
Z_CLEAR = 0.035

# Obstacle: 7 x 8 x 4 cm box resting on the plane.
OBSTACLE_HALF = (0.035, 0.04, 0.02)
OBSTACLE_GOAL_CLEAR = 0.038  # min distance obstacle edge -> goal hole center
OBSTACLE_START_CLEAR = 0.03  # obstacle must not cover the piece start

# Action bounds per component.
MAX_STEP_XYZ = 0.02
MAX_STEP_YAW = 0.1

# Raster observation: top-down window centered on the goal hole.
RASTER_SIZE = 16
RASTER_WINDOW = 0.12
RASTER_HOLE = 0.33
RASTER_PIECE = 0.66
RASTER_EE = 1.0

# Door-analog task.
DOOR_HINGE = (0.0, 0.0)
DOOR_RADIUS = 0.10
DOOR_TARGET = -np.pi / 4
DOOR_ANGLE_TOL = 0.02

SHAPES = ("rect", "circle", "square")


@dataclass
class TaskConfig:
    """One shape-insertion task instance (JSON-serializable)."""

    shape: str = "rect"
    start_cell: int = 5
    goal_cell: int | None = None  # None -> the shape's own hole
    obstacle: bool = False
    eps_percept: float = 0.01
    tol_insert: float = 0.004
    seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.goal_cell is None:
            self.goal_cell = SHAPE_GOAL_CELL[self.shape]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, doc: str | dict) -> "TaskConfig":
        if isinstance(doc, str):
            doc = json.loads(doc)
        return cls(**doc)


@dataclass
class FrameworkConfig:
    """Versioned bag of knobs for the full pipeline (anomaly gate, GP, skill, DMP)."""

    version: int = CONFIG_VERSION
    eps_percept: float = 0.01
    tol_insert: float = 0.004
    # anomaly gate
    gate_p: float = 0.98
    gate_k0: float = 0.05
    gate_sigma_floor: float = 1e-4
    # GP failure-region model
    gp_tau: float = 0.75
    gp_restarts: int = 4
    gp_max_expected: int = 200  # expected-state subsample cap for GP fitting
    # demonstrations
    demo_beta: float = 0.004
    demo_step_cap: int = 200
    # VAE
    vae_epochs: int = 120
    vae_lr: float = 0.01
    vae_augment: int = 50
    # skill execution
    skill_step_cap: int = 300
    # experiments
    demo_counts: tuple = (1, 5, 10, 20)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, doc: str | dict) -> "FrameworkConfig":
        if isinstance(doc, str):
            doc = json.loads(doc)
        doc = dict(doc)
        if "demo_counts" in doc:
            doc["demo_counts"] = tuple(doc["demo_counts"])
        return cls(**doc)


def derive_seed(master: int, *parts) -> int:
    """Counter-based seed split: stable 63-bit seed from a master seed and tags.

    Adding trials never reshuffles earlier ones because each seed depends only
    on its own tag path.
    """
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for p in parts:
        h.update(b"/")
        h.update(str(p).encode())
    return int.from_bytes(h.digest()[:8], "big") >> 1


def rng_from(master: int, *parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *parts))


def cell_center(cell: int) -> tuple:
    """Center (x, y) of grid cell 0..7 (column-major rows: cell = row*4 + col)."""
    if not 0 <= cell < HOLE_COLS * HOLE_ROWS:
        raise ValueError(f"cell index {cell} out of range")
    col = cell % HOLE_COLS
    row = cell // HOLE_COLS
    x0 = -HOLE_PITCH * (HOLE_COLS - 1) / 2.0
    y0 = -HOLE_PITCH * (HOLE_ROWS - 1) / 2.0
    return (x0 + HOLE_PITCH * col, y0 + HOLE_PITCH * row)
