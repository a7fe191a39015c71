"""Deterministic 2.5-D manipulation world.

A flush-mounted 8-hole shape board on the z=0 plane, a free-flying gripper,
an optional box obstacle, and a door-analog task.  True contact dynamics are
resolved here; a separately maintained perceived scene carries the pose noise
that makes the planner's kinematic model fail at insertion.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import config as cfg
from .geometry import (Footprint, Pose4, compose, footprints_overlap,
                       point_in_footprint, relative_pose, wrap_angle)


class Grip(enum.Enum):
    HOLD = "hold"
    OPEN = "open"
    CLOSE = "close"


@dataclass(frozen=True)
class Action:
    """Bounded end-effector delta plus a gripper command."""

    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    dyaw: float = 0.0
    grip: Grip = Grip.HOLD

    def clamped(self) -> "Action":
        m, my = cfg.MAX_STEP_XYZ, cfg.MAX_STEP_YAW
        return Action(
            float(np.clip(self.dx, -m, m)),
            float(np.clip(self.dy, -m, m)),
            float(np.clip(self.dz, -m, m)),
            float(np.clip(self.dyaw, -my, my)),
            self.grip,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.dyaw])

    @classmethod
    def from_array(cls, v, grip: Grip = Grip.HOLD) -> "Action":
        return cls(float(v[0]), float(v[1]), float(v[2]), float(v[3]), grip)


@dataclass(frozen=True)
class BoxSpec:
    """Axis-positioned box obstacle resting on the plane."""

    center: tuple  # (x, y, z)
    half_extents: tuple = cfg.OBSTACLE_HALF
    yaw: float = 0.0

    def footprint(self) -> Footprint:
        return Footprint(self.center[0], self.center[1],
                         self.half_extents[0], self.half_extents[1], self.yaw)

    @property
    def top_z(self) -> float:
        return self.center[2] + self.half_extents[2]


@dataclass(frozen=True)
class BoardSpec:
    """8-hole board flush with the z=0 plane."""

    hole_centers: tuple = tuple(cfg.cell_center(i) for i in range(8))
    hole_shapes: tuple = cfg.HOLE_SHAPES
    surface_z: float = cfg.SURFACE_Z
    tol_insert: float = 0.004
    lip_depth: float = cfg.LIP_DEPTH

    def hole_footprint(self, cell: int) -> Footprint:
        shape = self.hole_shapes[cell]
        hx, hy = cfg.PIECE_HALF[shape]
        cx, cy = self.hole_centers[cell]
        return Footprint(cx, cy, hx + self.tol_insert, hy + self.tol_insert,
                         0.0, circle=(shape == "circle"))


@dataclass
class PerceivedScene:
    """Noise-corrupted copy of the geometry the planner is allowed to see."""

    board: BoardSpec
    hole_centers_hat: tuple
    obstacles_hat: tuple  # BoxSpec with offset centers
    piece_pose_hat: Pose4 | None
    eps_percept: float

    def hole_footprint_hat(self, cell: int) -> Footprint:
        true_fp = self.board.hole_footprint(cell)
        cx, cy = self.hole_centers_hat[cell]
        return replace(true_fp, cx=cx, cy=cy)


@dataclass(frozen=True)
class Raster:
    """16x16 grayscale occupancy patch; values in [0, 1]."""

    pixels: tuple  # row-major tuple of floats, length RASTER_SIZE**2

    def as_array(self) -> np.ndarray:
        n = cfg.RASTER_SIZE
        return np.array(self.pixels).reshape(n, n)


@dataclass(frozen=True)
class Observation:
    ee: Pose4
    contact: bool
    raster: Raster


class OutcomeKind(enum.Enum):
    SUCCESS = "Success"
    PARTIAL = "PartialSuccess"
    FAILURE = "Failure"


@dataclass(frozen=True)
class Outcome:
    kind: OutcomeKind
    reason: str | None = None  # HitObstacle | NotInHole for failures

    @property
    def success(self) -> bool:
        return self.kind is OutcomeKind.SUCCESS


class InvalidConfig(ValueError):
    pass


class Unplaceable(RuntimeError):
    """No obstacle position blocks the start->goal segment without crowding the goal."""


def piece_footprint(shape: str, pose: Pose4) -> Footprint:
    hx, hy = cfg.PIECE_HALF[shape]
    return Footprint(pose.x, pose.y, hx, hy, pose.yaw, circle=(shape == "circle"))


def yaw_aligned(shape: str, dyaw: float, tol: float = 0.1) -> bool:
    """Yaw alignment modulo the piece's rotational symmetry."""
    if shape == "circle":
        return True
    period = math.pi if shape == "rect" else math.pi / 2.0
    r = math.fmod(dyaw, period)
    if r > period / 2.0:
        r -= period
    elif r < -period / 2.0:
        r += period
    return abs(r) < tol


@dataclass
class WorldState:
    """Full true state.  Plain data; cheap to copy per episode."""

    ee: Pose4
    piece_id: str | None
    piece_pose: Pose4 | None
    grasped: bool
    grasp_offset: Pose4 | None
    board: BoardSpec
    obstacles: list
    contact: bool = False
    inserted_depth: float = 0.0
    goal_cell: int = 0
    obstacle_hit: bool = False  # latched for the episode
    task_kind: str = "insertion"  # insertion | door
    door_hinge: tuple = cfg.DOOR_HINGE
    door_radius: float = cfg.DOOR_RADIUS
    door_target: float = cfg.DOOR_TARGET

    def copy(self) -> "WorldState":
        w = replace(self)
        w.obstacles = list(self.obstacles)
        return w

    @property
    def shape(self) -> str:
        return self.piece_id or "rect"

    def goal_center(self) -> np.ndarray:
        return np.array(self.board.hole_centers[self.goal_cell])

    def door_angle(self) -> float:
        hx, hy = self.door_hinge
        return math.atan2(self.ee.y - hy, self.ee.x - hx)

    def lateral_error(self) -> float:
        return float(np.linalg.norm(self.piece_pose.xy - self.goal_center()))

    def piece_aligned(self) -> bool:
        return (self.lateral_error() < self.board.tol_insert
                and yaw_aligned(self.shape, self.piece_pose.yaw))


def make_task(task: cfg.TaskConfig, seed: int) -> tuple[WorldState, PerceivedScene]:
    """Build a deterministic insertion world plus its perceived scene."""
    if task.start_cell == task.goal_cell:
        raise InvalidConfig("start region equals goal region")
    board = BoardSpec(tol_insert=task.tol_insert)
    if board.hole_shapes[task.goal_cell] != task.shape:
        raise InvalidConfig(
            f"goal cell {task.goal_cell} holds a "
            f"{board.hole_shapes[task.goal_cell]} hole, not {task.shape}")

    rng = cfg.rng_from(seed, "task", task.to_json())
    sx, sy = cfg.cell_center(task.start_cell)
    gx, gy = board.hole_centers[task.goal_cell]
    piece = Pose4(sx, sy, board.surface_z, 0.0)

    obstacles = []
    if task.obstacle:
        obstacles.append(_place_obstacle(board, task, rng))

    ee_home = Pose4(0.0, -0.13, cfg.Z_CLEAR, 0.0)
    world = WorldState(
        ee=ee_home, piece_id=task.shape, piece_pose=piece, grasped=False,
        grasp_offset=None, board=board, obstacles=obstacles,
        goal_cell=task.goal_cell,
    )

    eps = task.eps_percept
    holes_hat = tuple(
        (cx + rng.uniform(-eps, eps), cy + rng.uniform(-eps, eps))
        for (cx, cy) in board.hole_centers)
    obstacles_hat = tuple(
        replace(o, center=(o.center[0] + rng.uniform(-eps, eps),
                           o.center[1] + rng.uniform(-eps, eps),
                           o.center[2]))
        for o in obstacles)
    # Piece localization is better than hole localization (the gripper must be
    # able to find the knob); still bounded by eps_percept.
    eps_piece = 0.4 * eps
    piece_hat = piece.translated(rng.uniform(-eps_piece, eps_piece),
                                 rng.uniform(-eps_piece, eps_piece), 0.0)
    scene = PerceivedScene(board=board, hole_centers_hat=holes_hat,
                           obstacles_hat=obstacles_hat, piece_pose_hat=piece_hat,
                           eps_percept=eps)
    return world, scene


def _place_obstacle(board: BoardSpec, task: cfg.TaskConfig, rng) -> BoxSpec:
    """Put the box on the straight start->goal corridor, clear of goal and start."""
    sx, sy = cfg.cell_center(task.start_cell)
    gx, gy = board.hole_centers[task.goal_cell]
    start = np.array([sx, sy])
    goal = np.array([gx, gy])
    seg = goal - start
    max_piece = max(max(h) for h in cfg.PIECE_HALF.values())

    candidates = []
    perp = np.array([-seg[1], seg[0]])
    perp = perp / (np.linalg.norm(perp) + 1e-12)
    for t in np.linspace(0.25, 0.75, 11):
        for yaw in (0.0, math.pi / 2.0):
            for off in (0.0, 0.015, -0.015, 0.03, -0.03):
                c = start + t * seg + off * perp
                candidates.append((c[0], c[1], yaw))
    order = rng.permutation(len(candidates))
    for idx in order:
        cx, cy, yaw = candidates[idx]
        box = BoxSpec(center=(cx, cy, cfg.OBSTACLE_HALF[2]), yaw=yaw)
        fp = box.footprint()
        # must block the swept corridor of the carried piece
        if not _segment_blocked(start, goal, fp.inflated(max_piece)):
            continue
        if _footprint_point_dist(fp, gx, gy) < cfg.OBSTACLE_GOAL_CLEAR:
            continue
        if _footprint_point_dist(fp, sx, sy) < cfg.OBSTACLE_START_CLEAR:
            continue
        if not (cfg.WORKSPACE_X[0] < cx < cfg.WORKSPACE_X[1]
                and cfg.WORKSPACE_Y[0] < cy < cfg.WORKSPACE_Y[1]):
            continue
        return box
    raise Unplaceable(
        f"no obstacle blocks cell {task.start_cell} -> {task.goal_cell} "
        f"without crowding the goal")


def _segment_blocked(p0, p1, fp: Footprint) -> bool:
    n = max(2, int(np.linalg.norm(np.asarray(p1) - np.asarray(p0)) / 0.002) + 1)
    for t in np.linspace(0.0, 1.0, n):
        q = np.asarray(p0) + t * (np.asarray(p1) - np.asarray(p0))
        if point_in_footprint(q[0], q[1], fp):
            return True
    return False


def _footprint_point_dist(fp: Footprint, px: float, py: float) -> float:
    from .geometry import footprint_distance
    return footprint_distance(Footprint(px, py, 1e-9, 1e-9), fp)


def make_door_task(seed: int, target_angle: float = cfg.DOOR_TARGET
                   ) -> tuple[WorldState, PerceivedScene]:
    """Door-analog task: lever rotation about a hinge, dynamics exactly kinematic.

    The gripper starts already holding the handle.  Perception of the handle
    axis is exact, so the planner's model cannot fail here.
    """
    rng = cfg.rng_from(seed, "door")
    theta0 = rng.uniform(-0.05, 0.05)
    hx, hy = cfg.DOOR_HINGE
    r = cfg.DOOR_RADIUS
    ee = Pose4(hx + r * math.cos(theta0), hy + r * math.sin(theta0), 0.02, theta0)
    board = BoardSpec()
    world = WorldState(
        ee=ee, piece_id=None, piece_pose=None, grasped=True, grasp_offset=None,
        board=board, obstacles=[], task_kind="door", door_target=target_angle)
    scene = PerceivedScene(board=board, hole_centers_hat=board.hole_centers,
                           obstacles_hat=(), piece_pose_hat=None, eps_percept=0.0)
    return world, scene


# -- true dynamics -----------------------------------------------------------

_SUBSTEP = 0.002


def step(world: WorldState, action: Action) -> tuple[WorldState, Observation]:
    """Advance the true world by one bounded action; always resolves to a clamped state.

    A pure no-op action leaves the state (contact flag included) untouched.
    """
    w = world.copy()
    a = action.clamped()

    if a.grip is Grip.CLOSE and not w.grasped and w.piece_id is not None:
        knob = w.piece_pose.translated(0.0, 0.0, cfg.GRASP_DZ)
        if (np.linalg.norm(w.ee.xy - knob.xy) <= cfg.GRASP_RADIUS
                and abs(w.ee.z - knob.z) <= cfg.GRASP_Z_TOL):
            w.grasped = True
            w.grasp_offset = relative_pose(w.ee, w.piece_pose)
    elif a.grip is Grip.OPEN and w.grasped:
        w.grasped = False
        w.grasp_offset = None

    if any((a.dx, a.dy, a.dz, a.dyaw)):
        _march(w, a)

    return w, observe(w)


def _clamp_workspace(p: Pose4) -> Pose4:
    return Pose4(
        float(np.clip(p.x, *cfg.WORKSPACE_X)),
        float(np.clip(p.y, *cfg.WORKSPACE_Y)),
        float(np.clip(p.z, *cfg.WORKSPACE_Z)),
        p.yaw,
    )


def _obstacle_collides(w: WorldState, ee: Pose4, piece: Pose4 | None) -> bool:
    for box in w.obstacles:
        if ee.z < box.top_z and footprints_overlap(
                Footprint(ee.x, ee.y, cfg.EE_RADIUS, cfg.EE_RADIUS, 0.0, circle=True),
                box.footprint()):
            return True
        if piece is not None and piece.z < box.top_z and footprints_overlap(
                piece_footprint(w.shape, piece), box.footprint()):
            return True
    return False


def _march(w: WorldState, a: Action) -> None:
    """Substep the commanded delta, resolving clamps, slides, and insertion.

    Dynamics rules, in order per substep: obstacle sweep clamps and latches;
    a piece already in its hole is laterally locked by the walls; an unaligned
    piece pressed below the surface clamps to a slide; an aligned slide drops
    the piece to the hole bottom; an aligned controlled descent enters freely.
    """
    delta = a.as_array()
    n = max(1, int(math.ceil(float(np.linalg.norm(delta[:3])) / _SUBSTEP)))
    sub = delta / n
    w.contact = False
    surface = w.board.surface_z
    bottom = surface - w.board.lip_depth
    carrying = w.grasped and w.piece_id is not None and w.grasp_offset is not None

    for _ in range(n):
        target = _clamp_workspace(w.ee.translated(*sub))

        if not carrying:
            if _obstacle_collides(w, target, None):
                w.contact = True
                w.obstacle_hit = True
                break
            w.ee = target
            continue

        piece = compose(target, w.grasp_offset)
        if _obstacle_collides(w, target, piece):
            w.contact = True
            w.obstacle_hit = True
            break

        if w.piece_pose.z < surface - 1e-12:
            # inside the hole: walls lock lateral motion and yaw
            if abs(sub[0]) + abs(sub[1]) + abs(sub[3]) > 0.0:
                w.contact = True
            new_pz = w.piece_pose.z + sub[2]
            if new_pz < bottom - 1e-12:
                new_pz = bottom
                w.contact = True
            w.ee = w.ee.translated(0.0, 0.0, new_pz - w.piece_pose.z)
            w.piece_pose = compose(w.ee, w.grasp_offset)
        elif piece.z < surface - 1e-12:
            if _aligned_lateral(w, piece):
                # controlled descent straight into the hole
                if piece.z < bottom - 1e-12:
                    target = target.translated(0.0, 0.0, bottom - piece.z)
                    w.contact = True
                w.ee = target
                w.piece_pose = compose(w.ee, w.grasp_offset)
            else:
                # pressed against the surface: clamp z, keep sliding laterally
                target = target.translated(0.0, 0.0, surface - piece.z)
                w.ee = target
                w.piece_pose = compose(w.ee, w.grasp_offset)
                w.contact = True
                if _aligned_lateral(w, w.piece_pose):
                    _drop_in(w)
                    break
        else:
            w.ee = target
            w.piece_pose = piece
            # pure-lateral slide resting exactly on the surface over its own
            # hole: gravity takes it (a commanded descent stays controlled)
            if (abs(sub[2]) < 1e-15 and abs(piece.z - surface) < 1e-12
                    and _aligned_lateral(w, piece)):
                _drop_in(w)
                break

    if carrying:
        w.inserted_depth = max(0.0, surface - w.piece_pose.z)


def _aligned_lateral(w: WorldState, piece: Pose4) -> bool:
    err = float(np.linalg.norm(piece.xy - w.goal_center()))
    return err < w.board.tol_insert and yaw_aligned(w.shape, piece.yaw)


def _drop_in(w: WorldState) -> None:
    """Aligned piece drops to the hole bottom; the gripper follows the knob down."""
    drop = w.piece_pose.z - (w.board.surface_z - w.board.lip_depth)
    w.ee = w.ee.translated(0.0, 0.0, -drop)
    w.piece_pose = compose(w.ee, w.grasp_offset)
    w.inserted_depth = w.board.surface_z - w.piece_pose.z
    w.contact = True


# -- observation -------------------------------------------------------------

def observe(world: WorldState) -> Observation:
    return Observation(ee=world.ee, contact=world.contact,
                       raster=render_patch(world))


def _points_in_footprint(px: np.ndarray, py: np.ndarray, f: Footprint) -> np.ndarray:
    if f.circle:
        return (px - f.cx) ** 2 + (py - f.cy) ** 2 < f.hx ** 2
    c, s = math.cos(f.yaw), math.sin(f.yaw)
    lx = c * (px - f.cx) + s * (py - f.cy)
    ly = -s * (px - f.cx) + c * (py - f.cy)
    return (np.abs(lx) <= f.hx) & (np.abs(ly) <= f.hy)


def render_patch(world: WorldState) -> Raster:
    """Top-down grayscale window centered on the goal hole.

    Anti-aliased by 4x4 supersampling so sub-cell pose offsets show up as
    fractional edge intensities; the goal hole, the piece, and the gripper
    marker render at distinct intensity codes.
    """
    n = cfg.RASTER_SIZE
    if world.task_kind == "door" or world.piece_id is None:
        return Raster(pixels=(0.0,) * (n * n))

    gx, gy = world.board.hole_centers[world.goal_cell]
    half = cfg.RASTER_WINDOW / 2.0
    cell = cfg.RASTER_WINDOW / n
    ss = 4
    hole_fp = world.board.hole_footprint(world.goal_cell)
    piece_fp = piece_footprint(world.shape, world.piece_pose)

    # supersample grid: row 0 = +y edge of the window (top of the view)
    sub = (np.arange(n * ss) + 0.5) * (cell / ss)
    px = (gx - half) + sub
    py = (gy + half) - sub
    PX, PY = np.meshgrid(px, py)
    vals = np.where(_points_in_footprint(PX, PY, hole_fp), cfg.RASTER_HOLE, 0.0)
    vals = np.where(_points_in_footprint(PX, PY, piece_fp), cfg.RASTER_PIECE, vals)
    img = vals.reshape(n, ss, n, ss).mean(axis=(1, 3))

    # gripper marker: additive bilinear splat (peak 1.0 over the carried piece)
    # so sub-cell position survives quantization instead of vanishing under
    # the max-composite
    ex, ey = world.ee.x, world.ee.y
    fc = (ex - (gx - half)) / cell - 0.5
    fr = (gy + half - ey) / cell - 0.5
    c0, r0 = int(math.floor(fc)), int(math.floor(fr))
    wc, wr = fc - c0, fr - r0
    amp = cfg.RASTER_EE - cfg.RASTER_PIECE
    for dr, dc, wgt in ((0, 0, (1 - wr) * (1 - wc)), (0, 1, (1 - wr) * wc),
                        (1, 0, wr * (1 - wc)), (1, 1, wr * wc)):
        r, c = r0 + dr, c0 + dc
        if 0 <= r < n and 0 <= c < n:
            img[r, c] = min(1.0, img[r, c] + amp * wgt)
    return Raster(pixels=tuple(float(v) for v in img.reshape(-1)))


def check_outcome(world: WorldState, goal_cell: int | None = None) -> Outcome:
    """Judge a terminated episode."""
    if world.task_kind == "door":
        if abs(wrap_angle(world.door_angle() - world.door_target)) <= cfg.DOOR_ANGLE_TOL:
            return Outcome(OutcomeKind.SUCCESS)
        return Outcome(OutcomeKind.FAILURE, "NotInHole")

    cell = world.goal_cell if goal_cell is None else goal_cell
    lip = world.board.lip_depth
    if world.inserted_depth >= lip - 1e-9:
        return Outcome(OutcomeKind.SUCCESS)
    if world.obstacle_hit:
        return Outcome(OutcomeKind.FAILURE, "HitObstacle")
    if world.piece_pose is not None and footprints_overlap(
            piece_footprint(world.shape, world.piece_pose),
            world.board.hole_footprint(cell)):
        return Outcome(OutcomeKind.PARTIAL)
    return Outcome(OutcomeKind.FAILURE, "NotInHole")


# -- episode trace I/O -------------------------------------------------------

def trace_record(t: int, world: WorldState, action: Action | None,
                 anomaly: bool) -> dict:
    """One JSON-lines record per executed step."""
    return {
        "t": t,
        "ee": list(world.ee.as_array()),
        "piece_pose": (list(world.piece_pose.as_array())
                       if world.piece_pose is not None else None),
        "contact": bool(world.contact),
        "action": (list(action.as_array()) + [action.grip.value]
                   if action is not None else None),
        "anomaly_flag": bool(anomaly),
    }


def write_trace(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
