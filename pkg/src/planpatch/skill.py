"""Local model-free skill: demonstrations, random-forest policy, initiation set.

Demonstrations are collected from a scripted slide-in expert (or a teleop
session) with uniform action noise so the visited-state distribution widens.
The policy is a from-scratch random-forest regressor over VAE latents plus the
goal-frame gripper pose; the initiation set is a Gaussian over the recorded
demo start poses.
"""

from __future__ import annotations

import enum
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import config as cfg
from .geometry import Pose4
from .world import (Action, Grip, Observation, WorldState, observe, step)

EXPERT_OFFSET = 0.03  # reset point: this far from the true hole center
SLIDE_STEP = 0.0025
SLIDE_STEP_MIN = 0.0015
RESET_STEP = 0.010
PRESS_DZ = 0.002
FEATURE_DIM = 9  # 5 latent + 4 goal-frame pose


class NotApplicable(RuntimeError):
    pass


class DemoFailed(RuntimeError):
    pass


class InsufficientData(ValueError):
    pass


class SamplingExhausted(RuntimeError):
    pass


# -- scripted expert ----------------------------------------------------------

class ExpertPhase(enum.Enum):
    LIFT = "lift"
    RESET = "reset"
    DESCEND = "descend"
    SLIDE = "slide"
    DONE = "done"


class SlideInExpert:
    """Phase machine realizing the reset-then-slide insertion strategy.

    Knows the true hole center (it stands in for the human operator).  Emits
    one bounded action per call; phases re-evaluate from the live state so
    noise-perturbed executions self-correct.
    """

    def __init__(self, world: WorldState, offset_angle: float = 0.0):
        gx, gy = world.board.hole_centers[world.goal_cell]
        self.center = np.array([gx, gy])
        self.offset_point = self.center + EXPERT_OFFSET * np.array(
            [math.cos(offset_angle), math.sin(offset_angle)])
        self.phase = ExpertPhase.LIFT

    def __call__(self, world: WorldState) -> Action:
        if not world.grasped:
            raise NotApplicable("expert requires a grasped piece")
        lip = world.board.lip_depth
        if world.inserted_depth >= lip - 1e-9:
            self.phase = ExpertPhase.DONE
            return Action()

        piece = world.piece_pose
        if self.phase is ExpertPhase.LIFT:
            if world.ee.z < cfg.Z_CLEAR - 1e-6:
                return Action(dz=min(cfg.MAX_STEP_XYZ, cfg.Z_CLEAR - world.ee.z))
            self.phase = ExpertPhase.RESET
        if self.phase is ExpertPhase.RESET:
            d = self.offset_point - piece.xy
            dist = float(np.linalg.norm(d))
            if dist > 0.002:
                stepv = d / dist * min(RESET_STEP, dist)
                return Action(dx=stepv[0], dy=stepv[1])
            self.phase = ExpertPhase.DESCEND
        if self.phase is ExpertPhase.DESCEND:
            gap = piece.z - world.board.surface_z
            if not world.contact and gap > 1e-9:
                return Action(dz=-min(cfg.MAX_STEP_XYZ, gap + PRESS_DZ))
            self.phase = ExpertPhase.SLIDE
        # slide: press down while stepping toward the true center, slowing
        # near the rim so the recorded corrections stay fine-grained
        d = self.center - piece.xy
        dist = float(np.linalg.norm(d))
        mag = min(SLIDE_STEP, max(0.8 * dist, SLIDE_STEP_MIN))
        stepv = d / dist * min(mag, dist) if dist > 1e-12 else np.zeros(2)
        return Action(dx=stepv[0], dy=stepv[1], dz=-PRESS_DZ)

    @property
    def recording(self) -> bool:
        """Recording starts once the reset is finished (slide approach onward)."""
        return self.phase in (ExpertPhase.DESCEND, ExpertPhase.SLIDE,
                              ExpertPhase.DONE)


def expert_oracle(world: WorldState, offset_angle: float = 0.0) -> Action:
    """One-shot expert action for the current state (fresh phase machine)."""
    return SlideInExpert(world, offset_angle)(world)


# -- demonstrations -----------------------------------------------------------

@dataclass
class DemoStep:
    """A (state, noised action) pair; features are filled in at training time."""

    pose: Pose4  # gripper pose in the goal frame (x, y relative to hole)
    action: Action
    obs: Observation
    features: np.ndarray | None = None

    def to_record(self, demo_index: int, t: int) -> dict:
        return {
            "demo": demo_index,
            "t": t,
            "pose": list(self.pose.as_array()),
            "action": list(self.action.as_array()) + [self.action.grip.value],
            "contact": bool(self.obs.contact),
            "raster": list(self.obs.raster.pixels),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DemoStep":
        from .world import Raster
        a = rec["action"]
        pose = Pose4.from_array(rec["pose"])
        obs = Observation(ee=pose, contact=bool(rec["contact"]),
                          raster=Raster(pixels=tuple(rec["raster"])))
        return cls(pose=pose, action=Action(*a[:4], Grip(a[4])), obs=obs)


@dataclass
class DemoSet:
    """D_I: one list of recorded steps per successful demonstration."""

    demos: list = field(default_factory=list)
    beta: float = 0.004

    def __len__(self) -> int:
        return len(self.demos)

    def steps(self) -> list:
        return [s for demo in self.demos for s in demo]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for di, demo in enumerate(self.demos):
                for t, s in enumerate(demo):
                    fh.write(json.dumps(s.to_record(di, t)) + "\n")

    @classmethod
    def read_jsonl(cls, path, beta: float = 0.004) -> "DemoSet":
        demos: dict = {}
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                demos.setdefault(rec["demo"], []).append(
                    (rec["t"], DemoStep.from_record(rec)))
        out = cls(beta=beta)
        for di in sorted(demos):
            out.demos.append([s for _, s in sorted(demos[di], key=lambda p: p[0])])
        return out


def goal_frame_pose(ee: Pose4, goal_xy) -> Pose4:
    """Gripper pose relative to the (perceived) goal hole center."""
    return Pose4(ee.x - goal_xy[0], ee.y - goal_xy[1], ee.z, ee.yaw)


def collect_demo(world: WorldState, expert, beta: float, seed: int,
                 goal_xy=None, step_cap: int = 200
                 ) -> tuple[list, WorldState]:
    """Run the expert with uniform action noise; record the post-reset stream.

    Returns (recorded steps, final world).  Raises DemoFailed when the cap is
    reached before insertion; the caller discards and counts the demo.
    """
    rng = cfg.rng_from(seed, "demo-noise")
    if goal_xy is None:
        goal_xy = world.board.hole_centers[world.goal_cell]
    recorded: list = []
    w = world
    for _ in range(step_cap):
        base = expert(w)
        if w.inserted_depth >= w.board.lip_depth - 1e-9:
            return recorded, w
        noise = rng.uniform(-beta, beta, size=3)
        noised = Action(base.dx + noise[0], base.dy + noise[1],
                        base.dz + noise[2], base.dyaw, base.grip).clamped()
        if getattr(expert, "recording", True):
            obs = observe(w)
            recorded.append(DemoStep(
                pose=goal_frame_pose(w.ee, goal_xy), action=noised, obs=obs))
        w, _ = step(w, noised)
        if w.obstacle_hit:
            raise DemoFailed("demonstration hit an obstacle")
    raise DemoFailed(f"no insertion within {step_cap} steps")


# -- regression trees ---------------------------------------------------------

@dataclass
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    value: np.ndarray | None = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def predict_one(self, x: np.ndarray) -> np.ndarray:
        node = self
        while not node.is_leaf:
            node = node.left if x[node.feature] <= node.threshold else node.right
        return node.value

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"value": self.value.tolist()}
        return {"feature": self.feature, "threshold": self.threshold,
                "left": self.left.to_dict(), "right": self.right.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TreeNode":
        if "value" in d:
            return cls(value=np.array(d["value"]))
        return cls(feature=d["feature"], threshold=d["threshold"],
                   left=cls.from_dict(d["left"]), right=cls.from_dict(d["right"]))


@dataclass
class ForestHyperparams:
    n_trees: int = 10
    max_features: str = "all"  # "all" | "sqrt"
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    max_depth: int | None = None

    def n_features(self, d: int) -> int:
        if self.max_features == "sqrt":
            return max(1, int(round(math.sqrt(d))))
        return d

    def as_dict(self) -> dict:
        return {"n_trees": self.n_trees, "max_features": self.max_features,
                "min_samples_split": self.min_samples_split,
                "min_samples_leaf": self.min_samples_leaf,
                "max_depth": self.max_depth}


def _best_split(X, Y, idx, features, min_leaf):
    """Scan candidate splits; return (sse, feature, threshold) of the best.

    Thresholds are midpoints between consecutive distinct sorted values; ties
    resolve to the lowest (feature index, threshold).  Vectorized over both
    features and thresholds via per-feature prefix sums.
    """
    n = len(idx)
    if n < 2 * min_leaf:
        return None
    features = np.asarray(features)
    Xs = X[np.ix_(idx, features)]                      # (n, m)
    order = np.argsort(Xs, axis=0, kind="stable")
    xs_sorted = np.take_along_axis(Xs, order, axis=0)
    ys = Y[idx][order]                                  # (n, m, ydim)
    csum = ys.cumsum(axis=0)
    csq = (ys * ys).cumsum(axis=0)
    tot = csum[-1]
    totsq = csq[-1]
    sizes = np.arange(min_leaf, n - min_leaf + 1)
    valid = xs_sorted[sizes] > xs_sorted[sizes - 1]     # (k, m)
    if not valid.any():
        return None
    sl = csum[sizes - 1]                                # (k, m, ydim)
    sql = csq[sizes - 1]
    nl = sizes[:, None, None].astype(float)
    nr = (n - sizes)[:, None, None].astype(float)
    sse = ((sql - sl * sl / nl).sum(axis=2)
           + ((totsq - sql) - (tot - sl) * (tot - sl) / nr).sum(axis=2))
    sse = np.where(valid, sse, np.inf)
    # feature-major flat argmin: ties resolve to lowest feature, then threshold
    flat = sse.T.reshape(-1)
    j = int(np.argmin(flat))
    fi, ki = divmod(j, len(sizes))
    i = sizes[ki]
    return (float(sse[ki, fi]), int(features[fi]),
            float(0.5 * (xs_sorted[i - 1, fi] + xs_sorted[i, fi])))


def fit_tree(X, Y, hyperparams: ForestHyperparams | None = None,
             seed: int = 0, rng: np.random.Generator | None = None) -> TreeNode:
    """CART regression tree; multi-output leaves hold target means."""
    hp = hyperparams or ForestHyperparams()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if len(X) < hp.min_samples_split:
        raise InsufficientData(
            f"need at least min_samples_split={hp.min_samples_split} rows")
    if rng is None:
        rng = cfg.rng_from(seed, "tree")
    d = X.shape[1]
    m = hp.n_features(d)

    def build(idx: np.ndarray, depth: int) -> TreeNode:
        leaf = TreeNode(value=Y[idx].mean(axis=0))
        if len(idx) < hp.min_samples_split:
            return leaf
        if hp.max_depth is not None and depth >= hp.max_depth:
            return leaf
        if m >= d:
            features = np.arange(d)
        else:
            features = np.sort(rng.choice(d, size=m, replace=False))
        mu = Y[idx].mean(axis=0)
        parent_sse = float(np.sum((Y[idx] - mu) ** 2))
        best = _best_split(X, Y, idx, features, hp.min_samples_leaf)
        if best is None or best[0] >= parent_sse - 1e-12:
            return leaf
        _, f, thr = best
        mask = X[idx, f] <= thr
        node = TreeNode(feature=int(f), threshold=float(thr))
        node.left = build(idx[mask], depth + 1)
        node.right = build(idx[~mask], depth + 1)
        return node

    return build(np.arange(len(X)), 0)


@dataclass
class Forest:
    trees: list
    hyperparams: ForestHyperparams
    target_dim: int = 4

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Unweighted mean of the individual tree outputs."""
        x = np.asarray(x, dtype=float)
        acc = np.zeros(self.target_dim)
        for t in self.trees:
            acc += t.predict_one(x)
        return acc / len(self.trees)

    def to_json(self) -> str:
        return json.dumps({"hyperparams": self.hyperparams.as_dict(),
                           "target_dim": self.target_dim,
                           "trees": [t.to_dict() for t in self.trees]})

    @classmethod
    def from_json(cls, doc: str | dict) -> "Forest":
        if isinstance(doc, str):
            doc = json.loads(doc)
        return cls(trees=[TreeNode.from_dict(t) for t in doc["trees"]],
                   hyperparams=ForestHyperparams(**doc["hyperparams"]),
                   target_dim=doc["target_dim"])


def fit_forest(X, Y, hp: ForestHyperparams, seed: int = 0) -> Forest:
    """Bootstrap-sampled trees with per-tree seeded RNGs."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = len(X)
    trees = []
    for ti in range(hp.n_trees):
        rng = cfg.rng_from(seed, "forest-tree", ti)
        rows = rng.integers(0, n, size=n)
        trees.append(fit_tree(X[rows], Y[rows], hp, rng=rng))
    return Forest(trees=trees, hyperparams=hp, target_dim=Y.shape[1])


DEFAULT_GRID = {
    "n_trees": (10, 50),
    "max_features": ("sqrt", "all"),
    "min_samples_split": (2, 5),
    "min_samples_leaf": (1, 3),
    "max_depth": (5, None),
}


def fit_forest_cv(X, Y, grid: dict | None = None, k_folds: int = 3,
                  seed: int = 0) -> tuple[Forest, ForestHyperparams, float]:
    """Grid-search k-fold CV over forest hyperparameters; refit on all rows."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = len(X)
    if n < k_folds:
        raise InsufficientData(f"need at least {k_folds} rows, got {n}")
    g = dict(DEFAULT_GRID)
    if grid:
        g.update(grid)
    keys = list(DEFAULT_GRID.keys())
    configs = [ForestHyperparams(**dict(zip(keys, combo)))
               for combo in itertools.product(*(g[k] for k in keys))]

    rng = cfg.rng_from(seed, "cv-folds")
    perm = rng.permutation(n)
    folds = np.array_split(perm, k_folds)

    best_i, best_mse = 0, np.inf
    for ci, hp in enumerate(configs):
        errs = []
        for fi in range(k_folds):
            val = folds[fi]
            tr = np.concatenate([folds[j] for j in range(k_folds) if j != fi])
            if len(tr) < hp.min_samples_split:
                errs.append(np.inf)
                continue
            forest = fit_forest(X[tr], Y[tr], hp, seed=cfg.derive_seed(seed, "cv", ci, fi))
            pred = np.array([forest.predict(x) for x in X[val]])
            errs.append(float(np.mean((pred - Y[val]) ** 2)))
        mse = float(np.mean(errs))
        if mse < best_mse - 1e-15:
            best_i, best_mse = ci, mse
    hp = configs[best_i]
    return fit_forest(X, Y, hp, seed=cfg.derive_seed(seed, "final")), hp, best_mse


def predict_action(forest: Forest, features: np.ndarray) -> Action:
    """Mean-of-trees action, clamped to the step bounds; gripper holds."""
    out = forest.predict(np.asarray(features, dtype=float))
    return Action(out[0], out[1], out[2], out[3], Grip.HOLD).clamped()


# -- initiation set ------------------------------------------------------------

@dataclass
class InitiationSet:
    """Gaussian over goal-frame demo start poses, covariance regularized."""

    mean: np.ndarray
    cov: np.ndarray
    n: int = 0

    def mahalanobis(self, pose: Pose4) -> float:
        d = pose.as_array() - self.mean
        return float(math.sqrt(d @ np.linalg.solve(self.cov, d)))

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean.tolist(),
                           "cov": self.cov.tolist(), "n": self.n})

    @classmethod
    def from_json(cls, doc: str | dict) -> "InitiationSet":
        if isinstance(doc, str):
            doc = json.loads(doc)
        return cls(mean=np.array(doc["mean"]), cov=np.array(doc["cov"]),
                   n=doc.get("n", 0))


def fit_initiation(demos: list) -> InitiationSet:
    """Gaussian over each demo's first recorded (post-reset) pose."""
    if not demos:
        raise InsufficientData("no demonstrations")
    starts = np.array([d[0].pose.as_array() for d in demos])
    mean = starts.mean(axis=0)
    centered = starts - mean
    cov = centered.T @ centered / len(starts)
    cov = cov + 1e-8 * np.eye(4)
    return InitiationSet(mean=mean, cov=cov, n=len(starts))


def sample_initiation(iset: InitiationSet, seed: int, scene=None,
                      goal_xy=None, shape: str | None = None,
                      max_tries: int = 100) -> Pose4:
    """Draw a goal-frame pose from the Gaussian, rejecting obstructed draws.

    A draw is obstructed when the pose itself, or the straight slide corridor
    from it to the perceived goal center, grazes a perceived obstacle
    (inflated by the perception error bound).  Without a scene this is a pure
    Gaussian draw.
    """
    rng = cfg.rng_from(seed, "initiation")
    L = np.linalg.cholesky(iset.cov)
    for _ in range(max_tries):
        v = iset.mean + L @ rng.standard_normal(4)
        pose = Pose4.from_array(v)
        if scene is None or goal_xy is None:
            return pose
        absolute = Pose4(pose.x + goal_xy[0], pose.y + goal_xy[1], pose.z, pose.yaw)
        if not (cfg.WORKSPACE_X[0] <= absolute.x <= cfg.WORKSPACE_X[1]
                and cfg.WORKSPACE_Y[0] <= absolute.y <= cfg.WORKSPACE_Y[1]
                and cfg.WORKSPACE_Z[0] <= absolute.z <= cfg.WORKSPACE_Z[1]):
            continue
        if _initiation_obstructed(absolute, scene, goal_xy, shape):
            continue
        return pose
    raise SamplingExhausted(f"no admissible initiation draw in {max_tries} tries")


def _initiation_obstructed(absolute: Pose4, scene, goal_xy,
                           shape: str | None) -> bool:
    from .geometry import Footprint, footprints_overlap
    from .world import piece_footprint
    grow = 0.002 + scene.eps_percept
    boxes = [box.footprint().inflated(grow) for box in scene.obstacles_hat]
    if not boxes:
        return False
    span = math.hypot(absolute.x - goal_xy[0], absolute.y - goal_xy[1])
    n = max(2, int(math.ceil(span / 0.004)) + 1)
    for t in np.linspace(0.0, 1.0, n):
        qx = absolute.x + t * (goal_xy[0] - absolute.x)
        qy = absolute.y + t * (goal_xy[1] - absolute.y)
        for fp in boxes:
            if footprints_overlap(
                    Footprint(qx, qy, cfg.EE_RADIUS, cfg.EE_RADIUS, 0.0,
                              circle=True), fp):
                return True
            if shape is not None and footprints_overlap(
                    piece_footprint(shape, Pose4(qx, qy, 0.0, absolute.yaw)), fp):
                return True
    return False
