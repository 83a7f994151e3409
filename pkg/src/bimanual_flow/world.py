"""Synthetic planar task suite: scripted demonstrations, closed-loop
rollouts, and scoring.

Three tasks stress different coordination terms:

* mirrored_reach — the arms swap sides simultaneously, so uncoordinated
  composition crosses paths near the center; bimanual demos separate
  vertically while passing.
* sync_lift     — both arms lift by a shared height with identical velocity
  profiles inside a simultaneity window.
* handover      — the arms meet inside a distance band at mid-episode, then
  separate to their final targets.

Execution is kinematic (pose targets with a per-step displacement clamp);
success predicates check the final five steps against target tolerances plus
per-task event conditions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .composition import (
    BimanualAction,
    ComposedField,
    GuidanceWeights,
    SinglePolicyField,
)
from .coordination import CoordinationSetup, PoseHistory, total_energy
from .kinematics import (
    ACTION_DIM,
    ArmGeometry,
    JointConfig,
    clamp_to_workspace,
    default_geometries,
    inverse_kin,
    joint_distance,
)
from .numerics import SeededRng, derive_seed
from .policy import Conditioning
from .sampler import (
    DenoiseDivergedError,
    SamplerConfig,
    SamplingContext,
    run_denoise,
)

TASK_NAMES = ("mirrored_reach", "sync_lift", "handover")
FINAL_WINDOW = 5
FAILURE_REASONS = ("collision", "timeout", "goal_miss", "divergence")
TRAVEL_FRACTION = 0.78  # reach-style scripts arrive here, then dwell


class InfeasibleTaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    task_index: int
    n_tasks: int
    geom_left: ArmGeometry
    geom_right: ArmGeometry
    episode_len: int
    d_safe: float
    d_safe_joint: float
    demo_noise: float
    max_step: float = 0.05
    target_tol: float = 0.02
    sync_window: int = 2
    distance_band: tuple | None = None

    def __post_init__(self):
        if self.episode_len < 4:
            raise InfeasibleTaskError("episode length must cover the history depth")
        if self.distance_band is not None and self.distance_band[0] < self.d_safe:
            raise InfeasibleTaskError("distance band must sit above d_safe")


def default_tasks() -> list:
    geom_l, geom_r = default_geometries()
    common = dict(geom_left=geom_l, geom_right=geom_r, n_tasks=3, d_safe_joint=0.001)
    return [
        TaskSpec(
            name="mirrored_reach", task_index=0, episode_len=30,
            d_safe=0.02, demo_noise=0.004, **common,
        ),
        TaskSpec(
            name="sync_lift", task_index=1, episode_len=24,
            d_safe=0.001, demo_noise=0.004, **common,
        ),
        TaskSpec(
            name="handover", task_index=2, episode_len=32,
            d_safe=0.02, demo_noise=0.004, distance_band=(0.04, 0.20), **common,
        ),
    ]


# ---------------------------------------------------------------------------
# scripts
# ---------------------------------------------------------------------------


def minjerk_fraction(s: float) -> float:
    s = min(1.0, max(0.0, s))
    return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)


def minjerk_segment(start, goal, n_points):
    """Positions along a minimum-jerk profile, excluding the start point."""
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    out = []
    for k in range(1, n_points + 1):
        f = minjerk_fraction(k / n_points)
        out.append(start + f * (goal - start))
    return out


def timed_path(waypoints, n_steps: int):
    """Chained minimum-jerk segments with a terminal dwell.

    waypoints: [(point, episode_fraction), ...] — each segment consumes its
    fraction of the episode; remaining steps dwell at the final point so
    policies learn to settle on the target.
    """
    points = [np.asarray(w[0], dtype=float) for w in waypoints]
    out = []
    current = points[0]
    for (point, fraction), nxt in zip(waypoints[1:], points[1:]):
        seg_steps = max(1, round(fraction * n_steps))
        seg_steps = min(seg_steps, n_steps - len(out))
        out.extend(minjerk_segment(current, nxt, seg_steps))
        current = nxt
        if len(out) >= n_steps:
            break
    while len(out) < n_steps:
        out.append(current.copy())
    return out[:n_steps]


def linear_segment(start, goal, n_points):
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    return [start + (k / n_points) * (goal - start) for k in range(1, n_points + 1)]


def pose_from(xy, gripper: float) -> np.ndarray:
    return np.array([xy[0], xy[1], 0.0, 0.0, 0.0, 0.0, gripper])


@dataclass
class EpisodeSetup:
    """Per-episode randomization: start poses, targets, scene features, and
    the scripted reference paths (used by demos and oracle rollouts)."""

    task: TaskSpec
    start: BimanualAction
    target_left: np.ndarray  # final 2D target per arm
    target_right: np.ndarray
    object_xy: np.ndarray
    script_left: list  # per-step 7-dim poses, episode_len entries
    script_right: list
    sync_half_height: float | None = None


def _uniform(rng, lo, hi):
    return lo + (hi - lo) * rng.uniform(1)[0]


def episode_setup(task: TaskSpec, seed: int) -> EpisodeSetup:
    rng = SeededRng(derive_seed(seed, "episode", task.name))
    n = task.episode_len
    if task.name == "mirrored_reach":
        start_l = np.array([_uniform(rng, -0.48, -0.40), _uniform(rng, 0.10, 0.16)])
        start_r = np.array([_uniform(rng, 0.40, 0.48), _uniform(rng, 0.10, 0.16)])
        goal_l = np.array([_uniform(rng, 0.24, 0.32), _uniform(rng, 0.32, 0.40)])
        goal_r = np.array([_uniform(rng, -0.32, -0.24), _uniform(rng, 0.32, 0.40)])
        object_xy = np.array([0.0, 0.5 * (goal_l[1] + goal_r[1])])
        path_l = timed_path([(start_l, 0.0), (goal_l, TRAVEL_FRACTION)], n)
        path_r = timed_path([(start_r, 0.0), (goal_r, TRAVEL_FRACTION)], n)
        script_l = [pose_from(p, 0.5) for p in path_l]
        script_r = [pose_from(p, 0.5) for p in path_r]
        start = BimanualAction(pose_from(start_l, 0.5), pose_from(start_r, 0.5))
        return EpisodeSetup(task, start, goal_l, goal_r, object_xy, script_l, script_r)

    if task.name == "sync_lift":
        height = _uniform(rng, 0.26, 0.34)
        start_l = np.array([_uniform(rng, -0.40, -0.32), _uniform(rng, 0.07, 0.12)])
        start_r = np.array([_uniform(rng, 0.32, 0.40), start_l[1]])
        goal_l = start_l + np.array([0.0, height])
        goal_r = start_r + np.array([0.0, height])
        object_xy = np.array([0.0, height])
        path_l = timed_path([(start_l, 0.0), (goal_l, TRAVEL_FRACTION)], n)
        path_r = timed_path([(start_r, 0.0), (goal_r, TRAVEL_FRACTION)], n)
        script_l = [pose_from(p, 1.0) for p in path_l]
        script_r = [pose_from(p, 1.0) for p in path_r]
        start = BimanualAction(pose_from(start_l, 1.0), pose_from(start_r, 1.0))
        return EpisodeSetup(
            task, start, goal_l, goal_r, object_xy, script_l, script_r,
            sync_half_height=height / 2.0,
        )

    if task.name == "handover":
        meet = np.array([_uniform(rng, -0.02, 0.02), _uniform(rng, 0.25, 0.29)])
        w_left = meet + np.array([-0.045, 0.0])
        w_right = meet + np.array([+0.045, 0.0])
        start_l = np.array([_uniform(rng, -0.44, -0.38), _uniform(rng, 0.09, 0.13)])
        start_r = np.array([_uniform(rng, 0.38, 0.44), _uniform(rng, 0.29, 0.35)])
        retreat_l = np.array([_uniform(rng, -0.40, -0.35), _uniform(rng, 0.31, 0.37)])
        goal_r = np.array([_uniform(rng, 0.32, 0.38), _uniform(rng, 0.09, 0.13)])
        path_l = timed_path([(start_l, 0.0), (w_left, 0.42), (retreat_l, 0.38)], n)
        path_r = timed_path([(start_r, 0.0), (w_right, 0.42), (goal_r, 0.38)], n)
        # gripper handoff: left releases at the meet point, right takes over
        switch = round(0.42 * n)
        script_l = [
            pose_from(p, 1.0 if k < switch else 0.0) for k, p in enumerate(path_l)
        ]
        script_r = [
            pose_from(p, 0.0 if k < switch else 1.0) for k, p in enumerate(path_r)
        ]
        start = BimanualAction(pose_from(start_l, 1.0), pose_from(start_r, 0.0))
        return EpisodeSetup(task, start, retreat_l, goal_r, object_xy=meet,
                            script_left=script_l, script_right=script_r)

    raise InfeasibleTaskError(f"unknown task {task.name!r}")


def bimanual_scripts(setup: EpisodeSetup):
    """Coordination-aware script pair. For mirrored_reach the arms keep the
    simultaneous crossing but separate vertically (+/-0.12 bumps at the
    midpoint) — the collision-free behavior the composed policy must learn;
    the other tasks' scripts are already coordinated."""
    if setup.task.name != "mirrored_reach":
        return setup.script_left, setup.script_right
    n = setup.task.episode_len
    script_l, script_r = [], []
    for k in range(n):
        travel = min(1.0, (k + 1) / (TRAVEL_FRACTION * n))
        bump = 0.12 * math.sin(math.pi * minjerk_fraction(travel)) ** 2
        pose_l = setup.script_left[k].copy()
        pose_r = setup.script_right[k].copy()
        pose_l[1] += bump
        pose_r[1] -= bump
        script_l.append(pose_l)
        script_r.append(pose_r)
    return script_l, script_r


# ---------------------------------------------------------------------------
# demonstrations
# ---------------------------------------------------------------------------


@dataclass
class DemoStep:
    cond_left: Conditioning | None
    cond_right: Conditioning | None
    action_left: np.ndarray | None
    action_right: np.ndarray | None

    @property
    def action(self) -> BimanualAction:
        if self.action_left is None or self.action_right is None:
            raise ValueError("not a bimanual step")
        return BimanualAction(self.action_left, self.action_right)


@dataclass
class Demonstration:
    task: str
    arm: str  # left | right | both
    seed: int
    steps: list


def task_one_hot(task: TaskSpec) -> np.ndarray:
    onehot = np.zeros(task.n_tasks)
    onehot[task.task_index] = 1.0
    return onehot


def make_conditioning(task: TaskSpec, setup: EpisodeSetup, arm: str,
                      proprio: np.ndarray, step_index: int) -> Conditioning:
    """Scene features for one arm: its target, the shared object, and the
    episode phase (the scripts are time-parametrized, so a pure
    pose-conditioned policy would be ill-posed at their slow ends)."""
    target = setup.target_left if arm == "left" else setup.target_right
    phase = step_index / task.episode_len
    observation = np.concatenate([target, setup.object_xy, [phase]])
    return Conditioning(
        observation=observation,
        proprio=np.asarray(proprio, dtype=float).copy(),
        instruction=task_one_hot(task),
    )


def combined_conditioning(task: TaskSpec, setup: EpisodeSetup,
                          proprio: BimanualAction, step_index: int) -> Conditioning:
    """Conditioning for the from-scratch bimanual baseline."""
    phase = step_index / task.episode_len
    obs = np.concatenate(
        [setup.target_left, setup.object_xy, [phase], setup.target_right,
         setup.object_xy, [phase]]
    )
    return Conditioning(
        observation=obs,
        proprio=proprio.concat(),
        instruction=task_one_hot(task),
    )


def _jitter(rng, scale):
    noise = np.zeros(ACTION_DIM)
    noise[0:2] = rng.normal(2) * scale
    return noise


def _check_reachable(task: TaskSpec, poses):
    for pose, geom in poses:
        _, clamp = clamp_to_workspace(geom, pose[0:2])
        if clamp > 0:
            raise InfeasibleTaskError(
                f"{task.name}: scripted pose {pose[0:2]} unreachable by {clamp:.3f} m"
            )


def gen_unimanual_demos(task: TaskSpec, arm: str, n: int, seed: int) -> list:
    """Scripted single-arm reach/carry demos with seeded pose jitter."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if arm not in ("left", "right"):
        raise ValueError("arm must be 'left' or 'right'")
    demos = []
    for idx in range(n):
        ep_seed = derive_seed(seed, task.name, "uni", arm, idx)
        setup = episode_setup(task, ep_seed)
        rng = SeededRng(derive_seed(ep_seed, "jitter"))
        script = setup.script_left if arm == "left" else setup.script_right
        geom = task.geom_left if arm == "left" else task.geom_right
        start = setup.start.left if arm == "left" else setup.start.right
        _check_reachable(task, [(p, geom) for p in script])
        steps = []
        proprio = start.copy()
        for k, pose in enumerate(script):
            action = pose + _jitter(rng, task.demo_noise)
            cond = make_conditioning(task, setup, arm, proprio, k)
            steps.append(
                DemoStep(
                    cond_left=cond if arm == "left" else None,
                    cond_right=cond if arm == "right" else None,
                    action_left=action if arm == "left" else None,
                    action_right=action if arm == "right" else None,
                )
            )
            proprio = action
        demos.append(Demonstration(task=task.name, arm=arm, seed=ep_seed, steps=steps))
    return demos


def gen_bimanual_demos(task: TaskSpec, n: int, seed: int) -> list:
    """Paired scripts satisfying the task's coordination requirements; every
    demo is audited collision-free (min distance >= d_safe)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    demos = []
    for idx in range(n):
        ep_seed = derive_seed(seed, task.name, "bi", idx)
        setup = episode_setup(task, ep_seed)
        rng = SeededRng(derive_seed(ep_seed, "jitter"))
        script_l, script_r = bimanual_scripts(setup)
        _check_reachable(task, [(p, task.geom_left) for p in script_l])
        _check_reachable(task, [(p, task.geom_right) for p in script_r])
        steps = []
        proprio_l = setup.start.left.copy()
        proprio_r = setup.start.right.copy()
        for k, (pose_l, pose_r) in enumerate(zip(script_l, script_r)):
            if task.name == "sync_lift":
                noise = _jitter(rng, task.demo_noise)
                action_l = pose_l + noise  # shared jitter keeps velocities equal
                action_r = pose_r + noise
            else:
                action_l = pose_l + _jitter(rng, task.demo_noise)
                action_r = pose_r + _jitter(rng, task.demo_noise)
            steps.append(
                DemoStep(
                    cond_left=make_conditioning(task, setup, "left", proprio_l, k),
                    cond_right=make_conditioning(task, setup, "right", proprio_r, k),
                    action_left=action_l,
                    action_right=action_r,
                )
            )
            proprio_l, proprio_r = action_l, action_r
        demo = Demonstration(task=task.name, arm="both", seed=ep_seed, steps=steps)
        audit = demo_min_distance(demo)
        if audit < task.d_safe:
            raise InfeasibleTaskError(
                f"{task.name} demo {idx}: min distance {audit:.4f} < d_safe"
            )
        demos.append(demo)
    return demos


def demo_min_distance(demo: Demonstration) -> float:
    dists = [
        float(np.linalg.norm(s.action_left[0:3] - s.action_right[0:3]))
        for s in demo.steps
    ]
    return min(dists)


def unimanual_training_pairs(demos: list) -> list:
    pairs = []
    for demo in demos:
        for step in demo.steps:
            if demo.arm == "left":
                pairs.append((step.cond_left, step.action_left))
            else:
                pairs.append((step.cond_right, step.action_right))
    return pairs


def bimanual_training_pairs(demos: list, tasks_by_name: dict) -> list:
    """(combined conditioning, 14-dim action) pairs for the baseline."""
    pairs = []
    for demo in demos:
        task = tasks_by_name[demo.task]
        setup = episode_setup(task, demo.seed)
        proprio = setup.start.copy()
        for k, step in enumerate(demo.steps):
            cond = combined_conditioning(task, setup, proprio, k)
            pairs.append((cond, step.action.concat()))
            proprio = step.action
    return pairs


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------


@dataclass
class RolloutOptions:
    """What drives a rollout: generation route, coordination flags, sampler."""

    strategy: str = "fixed"
    n_max: int = 5
    tau_low: float = 4.0
    tau_high: float = 10.0
    guidance: GuidanceWeights = GuidanceWeights()
    compose: bool = True
    temporal: bool = True
    spatial: bool = True
    weight_params: object | None = None

    @property
    def coordination_enabled(self) -> bool:
        return self.temporal or self.spatial


@dataclass
class StepLog:
    index: int
    commanded: BimanualAction
    executed: BimanualAction
    breakdown: object
    trace_summary: dict
    ee_distance: float
    joint_distance: float
    flags: list


@dataclass
class EpisodeResult:
    task: str
    seed: int
    success: bool
    failure_reason: str | None
    min_ee_distance: float
    min_joint_distance: float
    mean_denoise_steps: float
    max_denoise_steps: int
    steps: list

    def __post_init__(self):
        if self.success and self.failure_reason is not None:
            raise ValueError("success implies no failure reason")


def _initial_joints(task: TaskSpec, start: BimanualAction):
    joints_l = inverse_kin(
        task.geom_left, start.left[0:2], JointConfig((0.6, 1.2))
    )
    joints_r = inverse_kin(
        task.geom_right, start.right[0:2], JointConfig((math.pi - 0.6, -1.2))
    )
    return joints_l, joints_r


def _clamp_displacement(current: np.ndarray, commanded: np.ndarray, max_step: float):
    executed = commanded.copy()
    delta = commanded[0:3] - current[0:3]
    dist = float(np.linalg.norm(delta))
    if dist > max_step:
        executed[0:3] = current[0:3] + delta * (max_step / dist)
    return executed


def _execute(task: TaskSpec, pose: BimanualAction, commanded: BimanualAction,
             joints_l, joints_r):
    """Kinematic execution: clamp displacement, project into the workspace,
    track joints with seeded IK."""
    flags = []
    executed_l = _clamp_displacement(pose.left, commanded.left, task.max_step)
    executed_r = _clamp_displacement(pose.right, commanded.right, task.max_step)
    for name, executed, geom in (
        ("left", executed_l, task.geom_left),
        ("right", executed_r, task.geom_right),
    ):
        projected, clamp = clamp_to_workspace(geom, executed[0:2])
        if clamp > 0.0:
            executed[0:2] = projected
            flags.append(f"exec_clamped_{name}")
    joints_l = inverse_kin(task.geom_left, executed_l[0:2], joints_l)
    joints_r = inverse_kin(task.geom_right, executed_r[0:2], joints_r)
    return BimanualAction(executed_l, executed_r), joints_l, joints_r, flags


def rollout(task: TaskSpec, left_ckpt, right_ckpt, bi_ckpt, options: RolloutOptions,
            seed: int, field_factory=None) -> EpisodeResult:
    """Closed-loop episode: per control step build conditionings, denoise a
    bimanual action with the configured strategy, execute with the
    displacement clamp, and score at the end.

    bi_ckpt is only consulted when options.compose is False. field_factory,
    when given, replaces checkpoint-based field construction with
    (task, setup, pose, step_index) -> field; oracle harness tests use it.
    """
    setup = episode_setup(task, seed)
    pose = setup.start.copy()
    joints_l, joints_r = _initial_joints(task, pose)
    history = PoseHistory.initial(pose, joints_l, joints_r)

    executed_poses = [pose.copy()]
    step_logs = []
    steps_used = []
    diverged = False

    for k in range(task.episode_len):
        if field_factory is not None:
            gen_field = field_factory(task, setup, pose, k)
        elif options.compose:
            cond_l = make_conditioning(task, setup, "left", pose.left, k)
            cond_r = make_conditioning(task, setup, "right", pose.right, k)
            gen_field = ComposedField(
                left_ckpt, right_ckpt, cond_l, cond_r, options.guidance
            )
        else:
            if bi_ckpt is None:
                raise ValueError("compose disabled but no bimanual checkpoint given")
            gen_field = SinglePolicyField(
                bi_ckpt, combined_conditioning(task, setup, pose, k),
                guidance=options.guidance.left,
            )
        norm_l, norm_r = gen_field.arm_normalizers()
        coord_setup = CoordinationSetup(
            norm_left=norm_l,
            norm_right=norm_r,
            geom_left=task.geom_left,
            geom_right=task.geom_right,
            d_safe=task.d_safe,
            d_safe_joint=task.d_safe_joint,
            enable_temporal=options.temporal,
            enable_spatial=options.spatial,
            weight_params=options.weight_params,
        )
        ctx = SamplingContext(field=gen_field, setup=coord_setup, history=history)
        cfg = SamplerConfig(
            strategy=options.strategy,
            n_max=options.n_max,
            tau_low=options.tau_low,
            tau_high=options.tau_high,
            guidance=options.guidance,
            seed=derive_seed(seed, task.name, "step", k),
        )
        try:
            commanded, trace = run_denoise(ctx, cfg)
        except DenoiseDivergedError:
            diverged = True
            break

        pose, joints_l, joints_r, exec_flags = _execute(
            task, pose, commanded, joints_l, joints_r
        )
        z_cmd = gen_field.normalize(commanded)
        breakdown = total_energy(z_cmd, 1.0, gen_field, coord_setup, history)
        history = history.advanced(pose, joints_l, joints_r)
        executed_poses.append(pose.copy())
        steps_used.append(trace.steps_used)
        step_logs.append(
            StepLog(
                index=k,
                commanded=commanded,
                executed=pose.copy(),
                breakdown=breakdown,
                trace_summary=trace.summary(),
                ee_distance=float(np.linalg.norm(pose.left[0:3] - pose.right[0:3])),
                joint_distance=joint_distance(joints_l, joints_r),
                flags=exec_flags + trace.summary()["flags"],
            )
        )

    min_ee = min((s.ee_distance for s in step_logs), default=math.inf)
    min_joint = min((s.joint_distance for s in step_logs), default=math.inf)

    if diverged:
        success, reason = False, "divergence"
    elif min_ee < task.d_safe:
        success, reason = False, "collision"
    else:
        success, reason = _score(task, setup, executed_poses)

    return EpisodeResult(
        task=task.name,
        seed=seed,
        success=success,
        failure_reason=reason,
        min_ee_distance=min_ee,
        min_joint_distance=min_joint,
        mean_denoise_steps=float(np.mean(steps_used)) if steps_used else 0.0,
        max_denoise_steps=max(steps_used, default=0),
        steps=step_logs,
    )


def _score(task: TaskSpec, setup: EpisodeSetup, executed_poses: list):
    """Success predicate on the executed trajectory; final-window target
    attainment plus the task's event condition."""
    poses = executed_poses[1:]  # drop the start pose
    if len(poses) < task.episode_len:
        return False, "divergence"
    window = poses[-FINAL_WINDOW:]

    def reached(arm_targets):
        for pose_pair in window:
            ok = True
            for pose, target in arm_targets(pose_pair):
                if float(np.linalg.norm(pose[0:2] - target)) > task.target_tol:
                    ok = False
                    break
            if ok:
                return True
        return False

    if task.name == "mirrored_reach":
        hit = reached(
            lambda p: ((p.left, setup.target_left), (p.right, setup.target_right))
        )
        return (hit, None) if hit else (False, "goal_miss")

    if task.name == "sync_lift":
        hit = reached(
            lambda p: ((p.left, setup.target_left), (p.right, setup.target_right))
        )
        if not hit:
            return False, "goal_miss"
        half = setup.sync_half_height
        start_y_l = setup.start.left[1]
        start_y_r = setup.start.right[1]
        onset_l = next(
            (i for i, p in enumerate(poses) if p.left[1] >= start_y_l + half), None
        )
        onset_r = next(
            (i for i, p in enumerate(poses) if p.right[1] >= start_y_r + half), None
        )
        if onset_l is None or onset_r is None:
            return False, "timeout"
        if abs(onset_l - onset_r) > task.sync_window:
            return False, "timeout"
        return True, None

    if task.name == "handover":
        hit = reached(
            lambda p: ((p.left, setup.target_left), (p.right, setup.target_right))
        )
        if not hit:
            return False, "goal_miss"
        lo, hi = task.distance_band
        entered = any(
            lo <= float(np.linalg.norm(p.left[0:3] - p.right[0:3])) <= hi
            for p in poses
        )
        return (True, None) if entered else (False, "timeout")

    raise InfeasibleTaskError(f"unknown task {task.name!r}")


# ---------------------------------------------------------------------------
# suite evaluation
# ---------------------------------------------------------------------------


def evaluate_suite(tasks, left_ckpt, right_ckpt, bi_ckpt, options: RolloutOptions,
                   episodes_per_task: int, seeds) -> dict:
    """Per-task and mean success/collision rates with per-seed breakdown."""
    if episodes_per_task < 1:
        raise ValueError("episodes_per_task must be >= 1")
    per_task = {}
    histogram = {}
    all_success = []
    for task in tasks:
        per_seed = {}
        for master in seeds:
            results = []
            for ep in range(episodes_per_task):
                ep_seed = derive_seed(master, task.name, "eval", ep)
                results.append(
                    rollout(task, left_ckpt, right_ckpt, bi_ckpt, options, ep_seed)
                )
            per_seed[str(master)] = _aggregate(results)
            for r in results:
                for s in r.steps:
                    key = str(s.trace_summary["steps_used"])
                    histogram[key] = histogram.get(key, 0) + 1
        rates = [per_seed[str(m)]["success_rate"] for m in seeds]
        per_task[task.name] = {
            "per_seed": per_seed,
            "success_rate": float(np.mean(rates)),
            "collision_rate": float(
                np.mean([per_seed[str(m)]["collision_rate"] for m in seeds])
            ),
            "mean_denoise_steps": float(
                np.mean([per_seed[str(m)]["mean_denoise_steps"] for m in seeds])
            ),
        }
        all_success.append(per_task[task.name]["success_rate"])
    return {
        "per_task": per_task,
        "mean_success": float(np.mean(all_success)),
        "mean_collision": float(
            np.mean([per_task[t.name]["collision_rate"] for t in tasks])
        ),
        "mean_denoise_steps": float(
            np.mean([per_task[t.name]["mean_denoise_steps"] for t in tasks])
        ),
        "episodes_per_task": episodes_per_task,
        "seeds": [int(s) for s in seeds],
        "step_histogram": dict(sorted(histogram.items(), key=lambda kv: int(kv[0]))),
    }


def _aggregate(results: list) -> dict:
    reasons = {}
    for r in results:
        if r.failure_reason:
            reasons[r.failure_reason] = reasons.get(r.failure_reason, 0) + 1
    return {
        "episodes": len(results),
        "success_rate": float(np.mean([r.success for r in results])),
        "collision_rate": float(
            np.mean([r.failure_reason == "collision" for r in results])
        ),
        "mean_denoise_steps": float(np.mean([r.mean_denoise_steps for r in results])),
        "min_ee_distance": float(min(r.min_ee_distance for r in results)),
        "failure_reasons": dict(sorted(reasons.items())),
    }


# ---------------------------------------------------------------------------
# oracle policies for harness tests
# ---------------------------------------------------------------------------


class PoseTrackingField:
    """Generative field that transports the state straight to one physical
    pose pair; used to sanity-check the rollout harness without training."""

    def __init__(self, target: BimanualAction):
        from .policy import ActionNormalizer

        self._norm = ActionNormalizer.identity(ACTION_DIM)
        self.target = target.concat()

    state_dim = 2 * ACTION_DIM

    def velocity(self, z, t):
        if t >= 1.0:
            return np.zeros_like(z)
        return (self.target - z) / (1.0 - t)

    def energy(self, z, t):
        diff = self.target - z
        return 0.5 * float(diff @ diff)

    def arm_normalizers(self):
        return self._norm, self._norm

    def denormalize(self, z):
        return BimanualAction.from_concat(z)

    def normalize(self, action):
        return action.concat()


def script_replay_factory(task, setup, pose, step_index) -> PoseTrackingField:
    """Oracle factory replaying the episode's coordinated bimanual scripts."""
    script_l, script_r = bimanual_scripts(setup)
    return PoseTrackingField(BimanualAction(script_l[step_index], script_r[step_index]))


def stationary_factory(task, setup, pose, step_index) -> PoseTrackingField:
    """Oracle factory that keeps commanding the start pose (no motion)."""
    return PoseTrackingField(setup.start)
