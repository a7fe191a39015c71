"""Sub-optimal model-based planner over the perceived scene.

Purely kinematic transition model, collision checks against perceived
geometry, bi-directional RRT with restarts and shortcut smoothing, and
task-level plan assembly (grasp, transport, descend; door interpolation).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import config as cfg
from .geometry import (Footprint, Pose4, compose, footprints_overlap,
                       pose_distance, wrap_angle)
from .world import Action, Grip, PerceivedScene, piece_footprint, yaw_aligned


class NotFound(RuntimeError):
    pass


class NoFeasibleGoal(RuntimeError):
    pass


class PlanNotFound(RuntimeError):
    pass


@dataclass
class ApproxModel:
    """Kinematic model: perceived scene plus the believed piece attachment.

    `obstacle_inflation` widens perceived obstacles during planning to absorb
    the known perception error bound; the static `margin` is the raw
    collision-check clearance.
    """

    scene: PerceivedScene
    attached_shape: str | None = None
    grasp_offset_hat: Pose4 | None = None
    margin: float = 0.002
    obstacle_inflation: float = 0.0

    def with_attachment(self, shape: str | None, offset: Pose4 | None) -> "ApproxModel":
        return ApproxModel(self.scene, shape, offset, self.margin,
                           self.obstacle_inflation)


@dataclass
class BirrtParams:
    restarts: int = 5
    iterations: int = 200
    smoothing_iters: int = 100
    step: float = 0.02
    goal_bias: float = 0.1
    resolution: float = 0.005
    bounds: tuple = (cfg.WORKSPACE_X, cfg.WORKSPACE_Y, cfg.WORKSPACE_Z,
                     (-math.pi, math.pi))

    def as_dict(self) -> dict:
        return {"restarts": self.restarts, "iterations": self.iterations,
                "smoothing_iters": self.smoothing_iters, "step": self.step,
                "goal_bias": self.goal_bias, "resolution": self.resolution,
                "bounds": [list(b) for b in self.bounds]}


@dataclass
class GoalSet:
    """Either the piece's own hole or an explicit replanned pose (initiation draw)."""

    kind: str  # "hole" | "pose"
    cell: int | None = None
    pose: Pose4 | None = None

    @property
    def goal_set_id(self) -> str:
        return f"hole:{self.cell}" if self.kind == "hole" else "initiation"


@dataclass
class Plan:
    """Waypoints s_0..s_{n+1} with the n+1 actions that reproduce them exactly."""

    waypoints: list
    actions: list
    contacts_pred: list
    goal_set_id: str = "hole"
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def empty(self) -> bool:
        return len(self.actions) == 0

    def to_json(self) -> str:
        return json.dumps({
            "waypoints": [list(w.as_array()) for w in self.waypoints],
            "actions": [list(a.as_array()) + [a.grip.value] for a in self.actions],
            "contacts_pred": list(self.contacts_pred),
            "goal_set_id": self.goal_set_id,
            "seed": self.seed,
            "params": self.params,
        })

    @classmethod
    def from_json(cls, doc: str | dict) -> "Plan":
        if isinstance(doc, str):
            doc = json.loads(doc)
        return cls(
            waypoints=[Pose4.from_array(w) for w in doc["waypoints"]],
            actions=[Action(*a[:4], Grip(a[4])) for a in doc["actions"]],
            contacts_pred=[bool(c) for c in doc["contacts_pred"]],
            goal_set_id=doc["goal_set_id"], seed=doc["seed"],
            params=doc.get("params", {}),
        )


# -- transition model ---------------------------------------------------------

def predict(model: ApproxModel, s: Pose4, a: Action) -> tuple[Pose4, bool]:
    """Kinematic composition plus penetration-predicts-contact."""
    a = a.clamped()
    s_next = s.translated(a.dx, a.dy, a.dz, a.dyaw)
    contact = _sweep_penetrates(model, s, s_next)
    return s_next, contact


def _piece_hat(model: ApproxModel, ee: Pose4) -> Pose4 | None:
    if model.attached_shape is None or model.grasp_offset_hat is None:
        return None
    return compose(ee, model.grasp_offset_hat)


def _sweep_penetrates(model: ApproxModel, s0: Pose4, s1: Pose4) -> bool:
    n = max(2, int(math.ceil(pose_distance(s0, s1) / 0.002)) + 1)
    v0, v1 = s0.as_array(), s1.as_array()
    for t in np.linspace(0.0, 1.0, n):
        p = Pose4.from_array(v0 + t * (v1 - v0))
        if _pose_penetrates(model, p):
            return True
    return False


def _pose_penetrates(model: ApproxModel, ee: Pose4) -> bool:
    """Raw penetration of perceived geometry (no margin): the contact predictor."""
    scene = model.scene
    for box in scene.obstacles_hat:
        if ee.z < box.top_z and footprints_overlap(
                Footprint(ee.x, ee.y, cfg.EE_RADIUS, cfg.EE_RADIUS, 0.0, circle=True),
                box.footprint()):
            return True
    piece = _piece_hat(model, ee)
    if piece is not None:
        for box in scene.obstacles_hat:
            if piece.z < box.top_z and footprints_overlap(
                    piece_footprint(model.attached_shape, piece), box.footprint()):
                return True
        if piece.z < scene.board.surface_z - 1e-12:
            if not _perceived_aligned(model, piece):
                return True
            if piece.z < scene.board.surface_z - scene.board.lip_depth - 1e-12:
                return True
    return False


def _perceived_aligned(model: ApproxModel, piece: Pose4) -> bool:
    scene = model.scene
    goal_cell = cfg.SHAPE_GOAL_CELL[model.attached_shape]
    cx, cy = scene.hole_centers_hat[goal_cell]
    err = math.hypot(piece.x - cx, piece.y - cy)
    return err < scene.board.tol_insert and yaw_aligned(model.attached_shape, piece.yaw)


# -- collision checking -------------------------------------------------------

def collision_free(pose: Pose4, model: ApproxModel, margin: float | None = None) -> bool:
    """True iff gripper plus attached piece clears the perceived scene."""
    m = model.margin if margin is None else margin
    if not (cfg.WORKSPACE_X[0] - 1e-12 <= pose.x <= cfg.WORKSPACE_X[1] + 1e-12
            and cfg.WORKSPACE_Y[0] - 1e-12 <= pose.y <= cfg.WORKSPACE_Y[1] + 1e-12
            and cfg.WORKSPACE_Z[0] - 1e-12 <= pose.z <= cfg.WORKSPACE_Z[1] + 1e-12):
        return False
    grow = m + model.obstacle_inflation
    ee_fp = Footprint(pose.x, pose.y, cfg.EE_RADIUS, cfg.EE_RADIUS, 0.0, circle=True)
    for box in model.scene.obstacles_hat:
        if pose.z < box.top_z + grow and footprints_overlap(
                ee_fp, box.footprint().inflated(grow)):
            return False
    piece = _piece_hat(model, pose)
    if piece is not None:
        fp = piece_footprint(model.attached_shape, piece)
        for box in model.scene.obstacles_hat:
            if piece.z < box.top_z + grow and footprints_overlap(
                    fp, box.footprint().inflated(grow)):
                return False
        if piece.z < model.scene.board.surface_z - 1e-12:
            if not _perceived_aligned(model, piece):
                return False
            if piece.z < (model.scene.board.surface_z
                          - model.scene.board.lip_depth - 1e-12):
                return False
    return True


def segment_free(a: Pose4, b: Pose4, model: ApproxModel,
                 resolution: float = 0.005) -> bool:
    n = max(2, int(math.ceil(pose_distance(a, b) / resolution)) + 1)
    va, vb = a.as_array(), b.as_array()
    for t in np.linspace(0.0, 1.0, n):
        if not collision_free(Pose4.from_array(va + t * (vb - va)), model):
            return False
    return True


# -- bi-directional RRT -------------------------------------------------------

def _steer(src: Pose4, dst: Pose4, step: float) -> Pose4:
    d = pose_distance(src, dst)
    if d <= step:
        return dst
    f = step / d
    v = src.as_array() + f * (dst.as_array() - src.as_array())
    return Pose4.from_array(v)


def _nearest(nodes: list, q: Pose4) -> int:
    best, best_d = 0, float("inf")
    for i, (p, _) in enumerate(nodes):
        d = pose_distance(p, q)
        if d < best_d:
            best, best_d = i, d
    return best


def _trace(nodes: list, idx: int) -> list:
    out = []
    while idx is not None:
        out.append(nodes[idx][0])
        idx = nodes[idx][1]
    return out[::-1]


def birrt(start: Pose4, goal: Pose4, model: ApproxModel,
          params: BirrtParams | None = None, seed: int = 0) -> list:
    """Bi-directional RRT with restarts; returns a collision-free waypoint path.

    Returns [] when start or goal is in collision (the planner gives up without
    searching); raises NotFound when every restart fails.
    """
    params = params or BirrtParams()
    if not collision_free(start, model) or not collision_free(goal, model):
        return []
    if pose_distance(start, goal) < 1e-12:
        return [start]
    if segment_free(start, goal, model, params.resolution):
        return [start, goal]

    lo = np.array([b[0] for b in params.bounds])
    hi = np.array([b[1] for b in params.bounds])

    for restart in range(params.restarts):
        rng = cfg.rng_from(seed, "birrt", restart)
        ta = [(start, None)]
        tb = [(goal, None)]
        a_is_start = True
        for _ in range(params.iterations):
            if rng.random() < params.goal_bias:
                q = tb[-1][0]
            else:
                v = lo + rng.random(4) * (hi - lo)
                q = Pose4.from_array(v)
            ni = _nearest(ta, q)
            qs = _steer(ta[ni][0], q, params.step)
            if not segment_free(ta[ni][0], qs, model, params.resolution):
                ta, tb = tb, ta
                a_is_start = not a_is_start
                continue
            ta.append((qs, ni))
            # greedy connect from the other tree
            mi = _nearest(tb, qs)
            cur = mi
            while True:
                qc = _steer(tb[cur][0], qs, params.step)
                if not segment_free(tb[cur][0], qc, model, params.resolution):
                    break
                tb.append((qc, cur))
                cur = len(tb) - 1
                if pose_distance(qc, qs) < 1e-12:
                    pa = _trace(ta, len(ta) - 1)
                    pb = _trace(tb, cur)
                    path = pa + pb[::-1][1:] if a_is_start else pb + pa[::-1][1:]
                    return shortcut_smooth(path, model, params.smoothing_iters,
                                           seed=cfg.derive_seed(seed, "smooth", restart),
                                           resolution=params.resolution)
            ta, tb = tb, ta
            a_is_start = not a_is_start
    raise NotFound(f"birrt failed after {params.restarts} restarts")


def path_length(path: list) -> float:
    return sum(pose_distance(a, b) for a, b in zip(path, path[1:]))


def shortcut_smooth(path: list, model: ApproxModel, iters: int = 100,
                    seed: int = 0, resolution: float = 0.005) -> list:
    """Random shortcutting; never lengthens the path, endpoints preserved."""
    if len(path) <= 2:
        return list(path)
    path = list(path)
    # always try the full collapse first so trivially-free queries become segments
    if segment_free(path[0], path[-1], model, resolution):
        return [path[0], path[-1]]
    rng = cfg.rng_from(seed, "shortcut")
    for _ in range(iters):
        if len(path) <= 2:
            break
        i = int(rng.integers(0, len(path) - 1))
        j = int(rng.integers(0, len(path) - 1))
        if abs(i - j) < 2:
            continue
        i, j = min(i, j), max(i, j)
        if segment_free(path[i], path[j], model, resolution):
            path = path[:i + 1] + path[j:]
    return path


def select_goal_config(candidates: list, start: Pose4, model: ApproxModel,
                       params: BirrtParams | None = None, seed: int = 0) -> Pose4:
    """Nearest candidate (weighted pose distance) for which a plan exists."""
    if not candidates:
        raise NoFeasibleGoal("no goal candidates")
    order = sorted(range(len(candidates)),
                   key=lambda i: (pose_distance(start, candidates[i]), i))
    for i in order:
        try:
            path = birrt(start, candidates[i], model, params,
                         seed=cfg.derive_seed(seed, "goalcand", i))
        except NotFound:
            continue
        if path:
            return candidates[i]
    raise NoFeasibleGoal("all goal candidates infeasible")


# -- task-level plan assembly -------------------------------------------------

def _append_leg(model: ApproxModel, waypoints: list, actions: list,
                contacts: list, target: Pose4, grip: Grip = Grip.HOLD,
                max_xyz: float | None = None) -> None:
    """Discretize one straight leg into bounded actions, chaining via predict."""
    cur = waypoints[-1]
    d = target.as_array() - cur.as_array()
    d[3] = wrap_angle(d[3])
    if np.max(np.abs(d)) < 1e-15:
        return
    step_xyz = cfg.MAX_STEP_XYZ if max_xyz is None else max_xyz
    steps = max(1, int(math.ceil(max(
        np.max(np.abs(d[:3])) / step_xyz,
        abs(d[3]) / cfg.MAX_STEP_YAW))))
    inc = d / steps
    for k in range(steps):
        a = Action(inc[0], inc[1], inc[2], inc[3], grip)
        nxt, contact = predict(model, waypoints[-1], a)
        waypoints.append(nxt)
        actions.append(a)
        contacts.append(contact)


def _append_path(model: ApproxModel, waypoints: list, actions: list,
                 contacts: list, path: list) -> None:
    for wp in path[1:]:
        _append_leg(model, waypoints, actions, contacts, wp)


def _append_grip(model: ApproxModel, waypoints: list, actions: list,
                 contacts: list, grip: Grip) -> None:
    a = Action(grip=grip)
    nxt, contact = predict(model, waypoints[-1], a)
    waypoints.append(nxt)
    actions.append(a)
    contacts.append(contact)


def plan_insertion(scene: PerceivedScene, ee: Pose4, shape: str,
                   goal: GoalSet | None = None, seed: int = 0,
                   params: BirrtParams | None = None) -> Plan:
    """Approach, grasp, transport, descend.  All geometry is perceived."""
    params = params or BirrtParams()
    goal = goal or GoalSet(kind="hole", cell=cfg.SHAPE_GOAL_CELL[shape])
    base = ApproxModel(scene, margin=0.002, obstacle_inflation=scene.eps_percept)

    piece_hat = scene.piece_pose_hat
    waypoints: list = [ee]
    actions: list = []
    contacts: list = []

    flat = ((cfg.Z_CLEAR, cfg.Z_CLEAR),)
    plane_params = BirrtParams(
        restarts=params.restarts, iterations=params.iterations,
        smoothing_iters=params.smoothing_iters, step=params.step,
        goal_bias=params.goal_bias, resolution=params.resolution,
        bounds=(cfg.WORKSPACE_X, cfg.WORKSPACE_Y, flat[0],
                (-0.2, math.pi / 2 + 0.2)))

    grasp_candidates = [0.0, math.pi / 2.0]
    chosen = None
    for gi, gyaw in enumerate(grasp_candidates):
        pre_grasp = Pose4(piece_hat.x, piece_hat.y, cfg.Z_CLEAR, gyaw)
        offset_hat = Pose4(0.0, 0.0, -cfg.GRASP_DZ, piece_hat.yaw - gyaw)
        carrying = base.with_attachment(shape, offset_hat)
        if goal.kind == "hole":
            cx, cy = scene.hole_centers_hat[goal.cell]
            hover = _ee_for_piece_xy(cx, cy, gyaw, offset_hat, cfg.Z_CLEAR)
        else:
            hover = Pose4(goal.pose.x, goal.pose.y, cfg.Z_CLEAR, goal.pose.yaw)
        try:
            approach = birrt(ee, pre_grasp, base, plane_params,
                             seed=cfg.derive_seed(seed, "approach", gi))
            transport = birrt(pre_grasp, hover, carrying, plane_params,
                              seed=cfg.derive_seed(seed, "transport", gi))
        except NotFound:
            continue
        if approach and transport:
            chosen = (gyaw, offset_hat, pre_grasp, hover, approach, transport,
                      carrying)
            break
    if chosen is None:
        raise PlanNotFound("no feasible grasp/transport combination")

    gyaw, offset_hat, pre_grasp, hover, approach, transport, carrying = chosen

    _append_path(base, waypoints, actions, contacts, approach)
    grasp_pose = Pose4(piece_hat.x, piece_hat.y, piece_hat.z + cfg.GRASP_DZ, gyaw)
    _append_leg(base, waypoints, actions, contacts, grasp_pose)
    _append_grip(base, waypoints, actions, contacts, Grip.CLOSE)
    _append_leg(carrying, waypoints, actions, contacts,
                Pose4(grasp_pose.x, grasp_pose.y, cfg.Z_CLEAR, gyaw))
    post_grasp_index = len(actions)  # transport starts here (piece lifted)
    _append_path(carrying, waypoints, actions, contacts, transport)
    if goal.kind == "hole":
        # fine descent: keeps any rejected transition close to the contact height
        seat_z = (scene.board.surface_z - scene.board.lip_depth) + cfg.GRASP_DZ
        seat = Pose4(hover.x, hover.y, seat_z, hover.yaw)
        _append_leg(carrying, waypoints, actions, contacts, seat, max_xyz=0.005)
    else:
        _append_leg(carrying, waypoints, actions, contacts,
                    Pose4(hover.x, hover.y, goal.pose.z, goal.pose.yaw))

    plan_params = params.as_dict()
    plan_params["post_grasp_index"] = post_grasp_index
    return Plan(waypoints=waypoints, actions=actions, contacts_pred=contacts,
                goal_set_id=goal.goal_set_id, seed=seed, params=plan_params)


def plan_to_pose(scene: PerceivedScene, ee: Pose4, shape: str | None,
                 grasp_offset_hat: Pose4 | None, target: Pose4, seed: int = 0,
                 params: BirrtParams | None = None) -> Plan:
    """Replan from mid-episode (possibly in contact) to an explicit pose.

    Starts with a straight lift to clearance height so the first leg never
    drags the piece along the surface.
    """
    params = params or BirrtParams()
    base = ApproxModel(scene, margin=0.002, obstacle_inflation=scene.eps_percept)
    model = base.with_attachment(shape, grasp_offset_hat)

    waypoints: list = [ee]
    actions: list = []
    contacts: list = []
    if ee.z < cfg.Z_CLEAR:
        _append_leg(model, waypoints, actions, contacts,
                    Pose4(ee.x, ee.y, cfg.Z_CLEAR, ee.yaw))
    plane_params = BirrtParams(
        restarts=params.restarts, iterations=params.iterations,
        smoothing_iters=params.smoothing_iters, step=params.step,
        goal_bias=params.goal_bias, resolution=params.resolution,
        bounds=(cfg.WORKSPACE_X, cfg.WORKSPACE_Y, (cfg.Z_CLEAR, cfg.Z_CLEAR),
                (-0.2, math.pi / 2 + 0.2)))
    hover = Pose4(target.x, target.y, cfg.Z_CLEAR, target.yaw)
    path = birrt(waypoints[-1], hover, model, plane_params,
                 seed=cfg.derive_seed(seed, "replan"))
    if not path:
        raise PlanNotFound("replan endpoints in collision")
    _append_path(model, waypoints, actions, contacts, path)
    if abs(target.z - cfg.Z_CLEAR) > 1e-12:
        _append_leg(model, waypoints, actions, contacts, target)
    return Plan(waypoints=waypoints, actions=actions, contacts_pred=contacts,
                goal_set_id="initiation", seed=seed, params=params.as_dict())


def plan_door(ee: Pose4, target_angle: float = cfg.DOOR_TARGET,
              hinge: tuple = cfg.DOOR_HINGE, radius: float = cfg.DOOR_RADIUS,
              seed: int = 0) -> Plan:
    """Handle-arc interpolation; no search needed, the model is exact here."""
    hx, hy = hinge
    theta0 = math.atan2(ee.y - hy, ee.x - hx)
    dtheta = wrap_angle(target_angle - theta0)
    steps = int(math.ceil(abs(dtheta) / cfg.MAX_STEP_YAW))
    waypoints = [ee]
    actions: list = []
    contacts: list = []
    scene = PerceivedScene(board=None, hole_centers_hat=(), obstacles_hat=(),
                           piece_pose_hat=None, eps_percept=0.0)
    model = ApproxModel(scene)
    for k in range(1, steps + 1):
        th = theta0 + dtheta * k / steps
        tgt = Pose4(hx + radius * math.cos(th), hy + radius * math.sin(th),
                    ee.z, th)
        cur = waypoints[-1]
        d = tgt.as_array() - cur.as_array()
        d[3] = wrap_angle(d[3])
        a = Action(d[0], d[1], d[2], d[3])
        nxt = cur.translated(a.dx, a.dy, a.dz, a.dyaw)
        waypoints.append(nxt)
        actions.append(a)
        contacts.append(False)
    return Plan(waypoints=waypoints, actions=actions, contacts_pred=contacts,
                goal_set_id="door", seed=seed, params={})


def _ee_for_piece_xy(px: float, py: float, ee_yaw: float, offset: Pose4,
                     z: float) -> Pose4:
    """EE pose placing the attached piece center at (px, py)."""
    c, s = math.cos(ee_yaw), math.sin(ee_yaw)
    return Pose4(px - (c * offset.x - s * offset.y),
                 py - (s * offset.x + c * offset.y), z, ee_yaw)


def plan_task(scene: PerceivedScene, task, ee: Pose4,
              goal_set: GoalSet | None = None, seed: int = 0,
              params: BirrtParams | None = None) -> Plan:
    """Dispatch: shape-insertion plan or door interpolation."""
    if task == "door":
        return plan_door(ee, seed=seed)
    return plan_insertion(scene, ee, task.shape, goal=goal_set, seed=seed,
                          params=params)
