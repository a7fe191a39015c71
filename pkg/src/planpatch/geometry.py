"""Poses, footprints, and planar overlap tests shared by the world and the planner."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Pose4:
    """End-effector / piece pose: world-frame position plus yaw."""

    x: float
    y: float
    z: float
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def xyz(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.yaw])

    @classmethod
    def from_array(cls, v) -> "Pose4":
        return cls(float(v[0]), float(v[1]), float(v[2]), float(v[3]))

    def translated(self, dx: float, dy: float, dz: float, dyaw: float = 0.0) -> "Pose4":
        return Pose4(self.x + dx, self.y + dy, self.z + dz, wrap_angle(self.yaw + dyaw))


def compose(base: Pose4, offset: Pose4) -> Pose4:
    """Rigid attachment: offset expressed in the base frame."""
    c, s = math.cos(base.yaw), math.sin(base.yaw)
    return Pose4(
        base.x + c * offset.x - s * offset.y,
        base.y + s * offset.x + c * offset.y,
        base.z + offset.z,
        wrap_angle(base.yaw + offset.yaw),
    )


def relative_pose(base: Pose4, target: Pose4) -> Pose4:
    """Inverse of compose: offset such that compose(base, offset) == target."""
    c, s = math.cos(base.yaw), math.sin(base.yaw)
    dx, dy = target.x - base.x, target.y - base.y
    return Pose4(
        c * dx + s * dy,
        -s * dx + c * dy,
        target.z - base.z,
        wrap_angle(target.yaw - base.yaw),
    )


def pose_distance(a: Pose4, b: Pose4, yaw_weight: float = 0.1) -> float:
    """Euclidean translation distance plus weighted yaw difference."""
    d = a.xyz - b.xyz
    return float(np.sqrt(d @ d)) + yaw_weight * abs(wrap_angle(a.yaw - b.yaw))


@dataclass(frozen=True)
class Footprint:
    """Planar footprint: an oriented rectangle or a circle at (cx, cy)."""

    cx: float
    cy: float
    hx: float  # half extent along local x (radius for circles)
    hy: float
    yaw: float = 0.0
    circle: bool = False

    def inflated(self, margin: float) -> "Footprint":
        return Footprint(self.cx, self.cy, self.hx + margin, self.hy + margin,
                         self.yaw, self.circle)

    def corners(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[self.hx, self.hy], [-self.hx, self.hy],
                          [-self.hx, -self.hy], [self.hx, -self.hy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])


def _rect_rect_overlap(a: Footprint, b: Footprint) -> bool:
    """Separating-axis test for two oriented rectangles."""
    ca, cb = a.corners(), b.corners()
    for yaw in (a.yaw, b.yaw):
        c, s = math.cos(yaw), math.sin(yaw)
        for axis in (np.array([c, s]), np.array([-s, c])):
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def _point_rect_distance(px: float, py: float, r: Footprint) -> float:
    """Distance from a point to an oriented rectangle (0 inside)."""
    c, s = math.cos(r.yaw), math.sin(r.yaw)
    lx = c * (px - r.cx) + s * (py - r.cy)
    ly = -s * (px - r.cx) + c * (py - r.cy)
    qx = max(abs(lx) - r.hx, 0.0)
    qy = max(abs(ly) - r.hy, 0.0)
    return math.hypot(qx, qy)


def footprints_overlap(a: Footprint, b: Footprint) -> bool:
    if a.circle and b.circle:
        return math.hypot(a.cx - b.cx, a.cy - b.cy) < a.hx + b.hx
    if a.circle:
        return _point_rect_distance(a.cx, a.cy, b) < a.hx
    if b.circle:
        return _point_rect_distance(b.cx, b.cy, a) < b.hx
    return _rect_rect_overlap(a, b)


def footprint_distance(a: Footprint, b: Footprint, probe: float = 0.02) -> float:
    """Approximate separation distance between footprints (0 when overlapping).

    Bisection on the inflation margin; accurate to ~1e-6, which is plenty for
    collision margins of millimeters.
    """
    if footprints_overlap(a, b):
        return 0.0
    lo, hi = 0.0, probe
    while not footprints_overlap(a.inflated(hi), b) and hi < 10.0:
        lo, hi = hi, hi * 2.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if footprints_overlap(a.inflated(mid), b):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def point_in_footprint(px: float, py: float, f: Footprint) -> bool:
    if f.circle:
        return math.hypot(px - f.cx, py - f.cy) < f.hx
    return _point_rect_distance(px, py, f) == 0.0


def segment_intersects_footprint(p0, p1, f: Footprint, samples_per_m: float = 2000.0) -> bool:
    """Densely sampled segment-vs-footprint test (used by task generation)."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    n = max(2, int(np.linalg.norm(p1 - p0) * samples_per_m) + 1)
    for t in np.linspace(0.0, 1.0, n):
        q = p0 + t * (p1 - p0)
        if point_in_footprint(q[0], q[1], f):
            return True
    return False
