"""Training and testing procedures tying planner, gate, GP, and skill together.

Training executes plans until the anomaly gate rejects a transition, requests
a demonstration from that state, and labels the visited states; testing routes
plans away from the predicted failure region into the skill's initiation set
and finishes the task with the learned policy.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import config as cfg
from . import planner as pl
from . import skill as sk
from . import vae as vz
from .anomaly import (AnomalyGateParams, FailureDatasets, GPModel,
                      TransitionSample, fit_gp, gate_transition,
                      plan_crosses_failure, predict_failure)
from .geometry import Pose4
from .world import (Action, Grip, Outcome, OutcomeKind, WorldState, check_outcome,
                    make_task, observe, step, trace_record)


class EpisodeMode(enum.Enum):
    TRAIN = "TrainEpisode"
    TEST = "TestEpisode"
    PURE_PLANNER = "PurePlanner"
    DMP_BASELINE = "DmpBaseline"


class PlanNotFound(pl.PlanNotFound):
    pass


@dataclass
class SkillBundle:
    forest: sk.Forest
    vae: vz.VaeParams
    initiation: sk.InitiationSet


@dataclass
class SessionArtifacts:
    datasets: FailureDatasets = field(default_factory=FailureDatasets)
    demos: sk.DemoSet = field(default_factory=sk.DemoSet)
    gp: GPModel | None = None
    skill: SkillBundle | None = None
    logs: list = field(default_factory=list)
    gate: AnomalyGateParams = field(default_factory=AnomalyGateParams)
    config: cfg.FrameworkConfig = field(default_factory=cfg.FrameworkConfig)
    failed_demos: int = 0

    def log(self, **kw) -> None:
        self.logs.append(kw)

    def write_logs(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.logs:
                fh.write(json.dumps(rec) + "\n")


def featurize(vae: vz.VaeParams, raster, goal_frame_pose: Pose4) -> np.ndarray:
    """Policy input: VAE posterior mean concatenated with the goal-frame pose."""
    mu, _ = vz.encode(vae, raster.as_array().reshape(-1))
    return np.concatenate([mu, goal_frame_pose.as_array()])


@dataclass
class _Execution:
    world: WorldState
    anomaly_step: int | None = None
    anomaly_state: Pose4 | None = None
    executed: list = field(default_factory=list)
    steps: int = 0
    trace: list = field(default_factory=list)


def _execute_plan(world: WorldState, plan: pl.Plan, gate: AnomalyGateParams,
                  datasets: FailureDatasets | None = None,
                  stop_on_anomaly: bool = False,
                  stop_on_obstacle: bool = True,
                  collect_trace: bool = False,
                  step_callback=None) -> _Execution:
    """Run a plan in the true world, gating each transition against it.

    Labels observed states into the failure datasets when given; can stop at
    the first unexpected transition (training / online patching).
    """
    ex = _Execution(world=world)
    cur_obs = observe(world)
    for t, action in enumerate(plan.actions):
        s_t = cur_obs.ee
        nxt, obs = step(ex.world, action)
        if step_callback is not None:
            step_callback(t, nxt)
        sample = TransitionSample(
            s_t=plan.waypoints[t], a_t=action, s_pred=plan.waypoints[t + 1],
            s_obs=obs.ee, contact_pred=plan.contacts_pred[t],
            contact_obs=obs.contact)
        expected = gate_transition(sample, gate)
        ex.world = nxt
        ex.executed.append(action)
        ex.steps += 1
        if collect_trace:
            ex.trace.append(trace_record(t, nxt, action, not expected))
        if expected:
            if datasets is not None:
                datasets.expected.append(s_t)
        else:
            if datasets is not None:
                datasets.unexpected.append(s_t)
            ex.anomaly_step = t
            ex.anomaly_state = s_t
            if stop_on_anomaly:
                return ex
        if stop_on_obstacle and ex.world.obstacle_hit:
            return ex
        cur_obs = obs
    return ex


# -- Algorithm 1: training -----------------------------------------------------

def train_episode(world: WorldState, scene, artifacts: SessionArtifacts,
                  demo_source=None, seed: int = 0, fit_skill: bool = True,
                  step_callback=None) -> SessionArtifacts:
    """One training episode: execute, gate, request a demo at the first anomaly.

    `demo_source(world, seed) -> (recorded_steps, final_world)` defaults to the
    scripted slide-in expert.  At most one state per episode enters the
    unexpected dataset; the episode ends right after the demonstration.
    """
    conf = artifacts.config
    plan = pl.plan_insertion(scene, world.ee, world.shape,
                             seed=cfg.derive_seed(seed, "plan"))
    ex = _execute_plan(world, plan, artifacts.gate, datasets=artifacts.datasets,
                       stop_on_anomaly=True, step_callback=step_callback)
    demo_collected = False
    if ex.anomaly_step is not None:
        if demo_source is None:
            demo_source = scripted_demo_source(scene, beta=conf.demo_beta,
                                               step_cap=conf.demo_step_cap)
        try:
            recorded, final = demo_source(ex.world, cfg.derive_seed(seed, "demo"))
            if recorded:
                artifacts.demos.demos.append(recorded)
                demo_collected = True
            ex.world = final
        except sk.DemoFailed:
            artifacts.failed_demos += 1
    if demo_collected or artifacts.gp is None:
        # cheap single-start refit per demo; the final fit uses full restarts
        refit_gp(artifacts, seed=cfg.derive_seed(seed, "gp"), restarts=1)
    if fit_skill and len(artifacts.demos) > 0:
        train_skill(artifacts, seed=cfg.derive_seed(seed, "skill"))
    artifacts.log(mode=EpisodeMode.TRAIN.value, seed=seed,
                  outcome=check_outcome(ex.world).kind.value,
                  anomaly_step=ex.anomaly_step, switch_step=None,
                  plan_len=len(plan), skill_steps=0,
                  demo_collected=demo_collected)
    return artifacts


def scripted_demo_source(scene, beta: float = 0.004, step_cap: int = 200):
    """Demo source backed by the scripted expert; offset direction is seeded."""
    def source(world: WorldState, seed: int):
        rng = cfg.rng_from(seed, "expert-angle")
        expert = sk.SlideInExpert(world, offset_angle=rng.uniform(0, 2 * math.pi))
        goal_xy = scene.hole_centers_hat[world.goal_cell]
        return sk.collect_demo(world, expert, beta=beta, seed=seed,
                               goal_xy=goal_xy, step_cap=step_cap)
    return source


def refit_gp(artifacts: SessionArtifacts, seed: int = 0,
             restarts: int | None = None) -> None:
    X, y = artifacts.datasets.design_matrix(
        max_expected=artifacts.config.gp_max_expected, seed=seed)
    if len(y) == 0:
        artifacts.gp = None
        return
    artifacts.gp = fit_gp(
        X, y, restarts=artifacts.config.gp_restarts if restarts is None
        else restarts, seed=seed)


def train_skill(artifacts: SessionArtifacts, seed: int = 0) -> None:
    """Fit the VAE on demo rasters, featurize, fit forest by CV, fit initiation."""
    conf = artifacts.config
    demos = artifacts.demos.demos
    rasters = [s.obs.raster.as_array().reshape(-1)
               for demo in demos for s in demo]
    # cap the VAE corpus (before augmentation) so its cost stays bounded
    cap = 500
    if len(rasters) > cap:
        rng = cfg.rng_from(seed, "vae-corpus")
        keep = np.sort(rng.choice(len(rasters), size=cap, replace=False))
        rasters = [rasters[i] for i in keep]
    vae = vz.VaeParams.init(seed=cfg.derive_seed(seed, "vae-init"))
    spec = vz.TrainSpec(epochs=conf.vae_epochs, learning_rate=conf.vae_lr,
                        augmentation_factor=conf.vae_augment)
    vae = vz.train(vae, rasters, spec, seed=cfg.derive_seed(seed, "vae"))

    X, Y = [], []
    for demo in demos:
        for s in demo:
            s.features = featurize(vae, s.obs.raster, s.pose)
            X.append(s.features)
            Y.append(s.action.as_array())
    forest, hp, cv_mse = sk.fit_forest_cv(np.array(X), np.array(Y),
                                          seed=cfg.derive_seed(seed, "forest"))
    initiation = sk.fit_initiation(demos)
    artifacts.skill = SkillBundle(forest=forest, vae=vae, initiation=initiation)


def run_training(n_demos: int, config: cfg.FrameworkConfig | None = None,
                 seed: int = 0, demo_source=None) -> SessionArtifacts:
    """Run randomized training episodes until n_demos demonstrations are in."""
    if n_demos < 1:
        raise ValueError("n_demos must be >= 1")
    conf = config or cfg.FrameworkConfig()
    artifacts = SessionArtifacts(
        config=conf,
        gate=AnomalyGateParams(p=conf.gate_p, k0=conf.gate_k0,
                               sigma_floor=conf.gate_sigma_floor))
    episode = 0
    cap = 10 * n_demos + 20
    while len(artifacts.demos) < n_demos and episode < cap:
        rng = cfg.rng_from(seed, "train-episode", episode)
        shape = cfg.SHAPES[episode % len(cfg.SHAPES)]
        goal = cfg.SHAPE_GOAL_CELL[shape]
        cells = [c for c in range(8) if c != goal]
        start = cells[int(rng.integers(0, len(cells)))]
        task = cfg.TaskConfig(shape=shape, start_cell=start, obstacle=False,
                              eps_percept=conf.eps_percept,
                              tol_insert=conf.tol_insert, seed=seed)
        world, scene = make_task(task, cfg.derive_seed(seed, "world", episode))
        src = demo_source(scene) if demo_source is not None else None
        train_episode(world, scene, artifacts, demo_source=src,
                      seed=cfg.derive_seed(seed, "episode", episode),
                      fit_skill=False)
        episode += 1
    if len(artifacts.demos) > 0:
        train_skill(artifacts, seed=cfg.derive_seed(seed, "skill"))
    refit_gp(artifacts, seed=cfg.derive_seed(seed, "gp-final"))
    return artifacts


# -- Algorithm 2: testing ------------------------------------------------------

def _sample_initiation_target(artifacts: SessionArtifacts, scene, world,
                              seed: int) -> Pose4:
    goal_xy = scene.hole_centers_hat[world.goal_cell]
    rel = sk.sample_initiation(artifacts.skill.initiation, seed, scene=scene,
                               goal_xy=goal_xy, shape=world.shape)
    return Pose4(rel.x + goal_xy[0], rel.y + goal_xy[1], rel.z, rel.yaw)


def test_episode(world: WorldState, scene, artifacts: SessionArtifacts | None,
                 seed: int = 0, collect_trace: bool = False,
                 online_patching: bool = True) -> tuple[Outcome, dict]:
    """Plan to the goal; reroute to the initiation set when failure is
    predicted (or observed, with a skill available); finish with the skill.

    Without a trained skill this degenerates exactly to the pure planner.
    Returns the outcome and an episode log record.
    """
    artifacts = artifacts or SessionArtifacts()
    conf = artifacts.config
    gate = artifacts.gate
    has_skill = artifacts.skill is not None
    tau = conf.gp_tau

    plan = pl.plan_insertion(scene, world.ee, world.shape,
                             seed=cfg.derive_seed(seed, "plan"))
    w = world
    switch_step = None
    anomaly_step = None
    targeting_initiation = False
    executed: list = []
    trace: list = []
    skill_steps = 0

    if has_skill and plan_crosses_failure(artifacts.gp, plan, tau):
        try:
            target = _sample_initiation_target(artifacts, scene, w,
                                               cfg.derive_seed(seed, "draw"))
            plan = pl.plan_insertion(
                scene, w.ee, w.shape,
                goal=pl.GoalSet(kind="pose", pose=target),
                seed=cfg.derive_seed(seed, "replan"))
            targeting_initiation = True
            switch_step = 0
        except (sk.SamplingExhausted, pl.PlanNotFound, pl.NotFound):
            targeting_initiation = False  # fall back to the original goal

    # execute, with one online patch allowed when the gate fires mid-plan
    patched_online = False
    while True:
        ex = _execute_plan(w, plan, gate,
                           stop_on_anomaly=has_skill and online_patching
                           and not patched_online,
                           collect_trace=collect_trace)
        w = ex.world
        executed.extend(ex.executed)
        trace.extend(ex.trace)
        if ex.anomaly_step is not None and anomaly_step is None:
            anomaly_step = len(executed) - 1
        if w.obstacle_hit:
            break
        if (ex.anomaly_step is not None and has_skill and online_patching
                and not patched_online):
            patched_online = True
            try:
                target = _sample_initiation_target(
                    artifacts, scene, w, cfg.derive_seed(seed, "online-draw"))
                plan = pl.plan_to_pose(scene, w.ee, w.shape, w.grasp_offset,
                                       target,
                                       seed=cfg.derive_seed(seed, "online"))
                targeting_initiation = True
                switch_step = len(executed)
                continue
            except (sk.SamplingExhausted, pl.PlanNotFound, pl.NotFound):
                break
        break

    if (has_skill and targeting_initiation and not w.obstacle_hit
            and w.grasped):
        goal_xy = scene.hole_centers_hat[w.goal_cell]
        bundle = artifacts.skill
        for t in range(conf.skill_step_cap):
            if w.inserted_depth >= w.board.lip_depth - 1e-9:
                break
            obs = observe(w)
            feats = featurize(bundle.vae, obs.raster,
                              sk.goal_frame_pose(obs.ee, goal_xy))
            action = sk.predict_action(bundle.forest, feats)
            w, _ = step(w, action)
            executed.append(action)
            skill_steps += 1
            if collect_trace:
                trace.append(trace_record(len(executed) - 1, w, action, False))
            if w.obstacle_hit:
                break

    outcome = check_outcome(w)
    record = {
        "mode": (EpisodeMode.TEST if has_skill else EpisodeMode.PURE_PLANNER).value,
        "seed": seed, "outcome": outcome.kind.value, "reason": outcome.reason,
        "anomaly_step": anomaly_step, "switch_step": switch_step,
        "plan_len": len(plan), "skill_steps": skill_steps,
        "executed": executed, "trace": trace, "final_world": w,
    }
    return outcome, record


def pure_planner_episode(world: WorldState, scene, seed: int = 0,
                         collect_trace: bool = False) -> tuple[Outcome, dict]:
    """Baseline: execute the plan to the goal, ignoring anomalies entirely."""
    outcome, record = test_episode(world, scene, None, seed=seed,
                                   collect_trace=collect_trace)
    record["mode"] = EpisodeMode.PURE_PLANNER.value
    return outcome, record


def door_episode(seed: int = 0) -> tuple[Outcome, dict]:
    """Pure-planner door trial; counts anomalies (there should be none)."""
    from .world import make_door_task
    world, scene = make_door_task(seed)
    plan = pl.plan_door(world.ee, target_angle=world.door_target,
                        seed=cfg.derive_seed(seed, "door-plan"))
    gate = AnomalyGateParams()
    ds = FailureDatasets()
    ex = _execute_plan(world, plan, gate, datasets=ds, stop_on_anomaly=False)
    outcome = check_outcome(ex.world)
    record = {"mode": EpisodeMode.PURE_PLANNER.value, "seed": seed,
              "outcome": outcome.kind.value, "reason": outcome.reason,
              "anomalies": len(ds.unexpected), "plan_len": len(plan),
              "executed": ex.executed, "final_world": ex.world}
    return outcome, record


# -- DMP baseline support ------------------------------------------------------

def run_scripted_insertion_trajectory(world: WorldState, scene,
                                      seed: int = 0) -> list:
    """Post-grasp ee trajectory of a completed episode (planner + expert).

    Stand-in for a kinesthetic demonstration: the plan carries the piece
    around any obstacle; when the gate rejects the insertion the scripted
    expert finishes with the reset-and-slide strategy.
    """
    plan = pl.plan_insertion(scene, world.ee, world.shape,
                             seed=cfg.derive_seed(seed, "plan"))
    post_grasp = plan.params.get("post_grasp_index", 0)
    gate = AnomalyGateParams()

    traj: list = []
    w = world
    for t, action in enumerate(plan.actions):
        nxt, obs = step(w, action)
        sample = TransitionSample(
            s_t=plan.waypoints[t], a_t=action, s_pred=plan.waypoints[t + 1],
            s_obs=obs.ee, contact_pred=plan.contacts_pred[t],
            contact_obs=obs.contact)
        w = nxt
        if t >= post_grasp:
            traj.append([w.ee.x, w.ee.y, w.ee.z])
        if not gate_transition(sample, gate):
            break
    if w.inserted_depth < w.board.lip_depth - 1e-9 and w.grasped:
        expert = sk.SlideInExpert(w, offset_angle=0.0)
        for _ in range(300):
            if w.inserted_depth >= w.board.lip_depth - 1e-9:
                break
            a = expert(w)
            w, _ = step(w, a)
            traj.append([w.ee.x, w.ee.y, w.ee.z])
    return traj


def run_dmp_episode(world: WorldState, scene, weights, dmp_config,
                    seed: int = 0) -> tuple[Outcome, dict]:
    """Grasp with the planner, then transport and insert with the DMP rollout."""
    from .dmp import rollout

    plan = pl.plan_insertion(scene, world.ee, world.shape,
                             seed=cfg.derive_seed(seed, "plan"))
    post_grasp = plan.params.get("post_grasp_index", len(plan.actions))
    w = world
    executed = []
    for action in plan.actions[:post_grasp]:
        w, _ = step(w, action)
        executed.append(action)
        if w.obstacle_hit:
            return check_outcome(w), {"mode": EpisodeMode.DMP_BASELINE.value,
                                      "seed": seed, "executed": executed,
                                      "final_world": w}

    goal_xy = scene.hole_centers_hat[w.goal_cell]
    offset = w.grasp_offset if w.grasp_offset is not None else Pose4(0, 0, -cfg.GRASP_DZ, 0)
    seat_z = (scene.board.surface_z - scene.board.lip_depth) + cfg.GRASP_DZ
    goal_ee = pl._ee_for_piece_xy(goal_xy[0], goal_xy[1], w.ee.yaw,
                                  offset, seat_z)
    y0 = np.array([w.ee.x, w.ee.y, w.ee.z])
    goal = np.array([goal_ee.x, goal_ee.y, goal_ee.z])
    traj = rollout(weights, y0, goal, dmp_config)

    for k in range(1, len(traj)):
        d = traj[k] - np.array([w.ee.x, w.ee.y, w.ee.z])
        a = Action(d[0], d[1], d[2], 0.0)
        w, _ = step(w, a)
        executed.append(a)
        if w.obstacle_hit or w.inserted_depth >= w.board.lip_depth - 1e-9:
            break
    outcome = check_outcome(w)
    return outcome, {"mode": EpisodeMode.DMP_BASELINE.value, "seed": seed,
                     "outcome": outcome.kind.value, "reason": outcome.reason,
                     "executed": executed, "final_world": w}
