"""Deploy-time retrieve-align-execute engine.

One rollout runs the multi-stage loop: observe clouds, retrieve a single
demonstration jointly across all task objects, then for each subtask align
closed-loop to the skill's first canonical action under live state
estimates, freeze the object pose at convergence, transition smoothly, and
replay the remaining canonical actions open-loop with the frozen pose.

The paper-scale motion planner is replaced by a deterministic task-space
tracker: translation steps are clamped to v_max * dt, rotations to
w_max * dt, and steps that would penetrate an inflated obstacle sphere are
projected onto the sphere's tangent plane (sliding).  The tracker sits
behind plan_step so a richer solver can be swapped in.

The environment is duck-typed; it must provide::

    sense() -> dict[object id, PointCloud]   # current segmented clouds
    tcp() -> Pose6                           # measured TCP pose
    step(arm_cmd: Pose6, hand_cmd: ndarray)  # advance one control cycle
    success() -> dict                        # task predicate flags at end
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AlignTimeout,
    ConfigError,
    DimensionMismatch,
    EmptySkill,
    InsufficientPoints,
    StartInCollision,
)
from .estimator import EstimatorConfig, Track
from .geometry import (
    PlanarPose,
    PointCloud,
    Pose6,
    rotation_angle,
    rotation_log,
    rotation_step,
)
from .retrieval import YawGrid, retrieve_joint, select_yaw
from .skills import SkillLibrary, SkillSegment

PHASE_ALIGN, PHASE_TRANSITION, PHASE_REPLAY = 0, 1, 2
MIN_SPHERE_RADIUS = 0.005


@dataclass(frozen=True)
class ExecConfig:
    ctrl_dt: float = 0.1
    v_max: float = 0.10                  # m/s translational command limit
    w_max: float = np.deg2rad(25.0)      # rad/s rotational command limit
    converge_pos: float = 0.01
    converge_rot: float = np.deg2rad(3.0)
    converge_hold: int = 5
    transition_steps: int = 10
    margin: float = 0.01                 # obstacle sphere inflation
    max_align_cycles: int = 400
    sphere_count: int = 6
    sphere_percentile: float = 95.0
    smoother_omega: float = 4.0          # rad/s, critically damped

    def __post_init__(self):
        for name in ("ctrl_dt", "v_max", "w_max", "converge_pos", "converge_rot",
                     "converge_hold", "transition_steps", "margin",
                     "max_align_cycles", "sphere_count", "smoother_omega"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass(frozen=True)
class AlignTarget:
    p_world: np.ndarray
    R_world: np.ndarray
    hand_target: np.ndarray

    def __post_init__(self):
        pose = Pose6(self.p_world, self.R_world)  # validates orthonormality
        object.__setattr__(self, "p_world", pose.p)
        object.__setattr__(self, "R_world", pose.R)
        object.__setattr__(self, "hand_target",
                           np.asarray(self.hand_target, dtype=float).copy())

    @property
    def pose(self):
        return Pose6(self.p_world, self.R_world)


@dataclass(frozen=True)
class SphereSet:
    """K collision spheres plus per-coordinate smoother velocity state."""

    centers: np.ndarray
    radii: np.ndarray
    vel_centers: np.ndarray = None
    vel_radii: np.ndarray = None

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        r = np.asarray(self.radii, dtype=float).reshape(-1)
        if c.shape[0] != r.shape[0] or c.shape[0] < 1:
            raise DimensionMismatch("need one radius per sphere center")
        if np.any(r <= 0):
            raise ConfigError("sphere radii must be positive")
        vc = np.zeros_like(c) if self.vel_centers is None else \
            np.asarray(self.vel_centers, dtype=float).reshape(c.shape)
        vr = np.zeros_like(r) if self.vel_radii is None else \
            np.asarray(self.vel_radii, dtype=float).reshape(r.shape)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", r)
        object.__setattr__(self, "vel_centers", vc)
        object.__setattr__(self, "vel_radii", vr)

    @property
    def count(self):
        return self.radii.shape[0]


def world_target(skill: SkillSegment, pose: PlanarPose) -> AlignTarget:
    """First canonical action of a skill mapped into the world frame."""
    if len(skill.canonical_trajectory) == 0:
        raise EmptySkill("skill has no trajectory")
    first_pose, first_hand = skill.canonical_trajectory[0]
    world = pose.apply_pose(first_pose)
    return AlignTarget(world.p, world.R, first_hand)


def sphere_envelope(cloud: PointCloud, count: int = 6,
                    percentile: float = 95.0) -> SphereSet:
    """Approximate a cloud with spheres binned along its principal axis.

    Points are split into `count` equal-width bins along the 3D PCA
    principal axis; each bin contributes a sphere at its centroid with a
    radius at the given percentile of member distances (floored at 5 mm).
    Empty bins inherit the nearest nonempty bin's sphere.
    """
    if cloud.size < count:
        raise InsufficientPoints(f"envelope of {count} spheres needs >= {count} points")
    pts = cloud.points
    centered = pts - pts.mean(axis=0)
    _, vecs = np.linalg.eigh(centered.T @ centered)
    axis = vecs[:, -1]
    proj = centered @ axis
    lo, hi = proj.min(), proj.max()
    width = (hi - lo) / count
    if width <= 0:
        bins = np.zeros(len(pts), dtype=int)
    else:
        bins = np.minimum((np.floor((proj - lo) / width)).astype(int), count - 1)
    centers = np.zeros((count, 3))
    radii = np.zeros(count)
    filled = np.zeros(count, dtype=bool)
    for b in range(count):
        members = pts[bins == b]
        if len(members) == 0:
            continue
        c = members.mean(axis=0)
        d = np.linalg.norm(members - c, axis=1)
        centers[b] = c
        radii[b] = max(np.percentile(d, percentile), MIN_SPHERE_RADIUS)
        filled[b] = True
    if not np.all(filled):
        have = np.nonzero(filled)[0]
        for b in np.nonzero(~filled)[0]:
            src = have[np.argmin(np.abs(have - b))]
            centers[b] = centers[src]
            radii[b] = radii[src]
    return SphereSet(centers, radii)


def smooth_spheres(state: SphereSet, measurement: SphereSet, dt: float,
                   omega: float = 4.0) -> SphereSet:
    """Critically damped second-order tracking of a new sphere measurement.

    Uses the exact solution of x'' = -2w x' - w^2 (x - target), so the
    response has zero overshoot from rest for any step size or dt.
    """
    if state.count != measurement.count:
        raise DimensionMismatch("sphere sets differ in count")
    if dt == 0.0:
        return state

    def track(x, v, target):
        e = x - target
        b = v + omega * e
        decay = np.exp(-omega * dt)
        x1 = target + (e + b * dt) * decay
        v1 = (v - omega * b * dt) * decay
        return x1, v1

    c1, vc1 = track(state.centers, state.vel_centers, measurement.centers)
    r1, vr1 = track(state.radii, state.vel_radii, measurement.radii)
    return SphereSet(c1, np.maximum(r1, MIN_SPHERE_RADIUS), vc1, vr1)


def _clamp_translation(p_from, p_to, max_step):
    delta = p_to - p_from
    dist = np.linalg.norm(delta)
    if dist <= max_step:
        return np.array(p_to, dtype=float)
    return p_from + delta * (max_step / dist)


def _penetration(p, obstacles, inflate):
    """(depth, center, radius) of the deepest violated sphere, or None."""
    worst = None
    for s in obstacles:
        d = np.linalg.norm(p - s.centers, axis=1) - (s.radii + inflate)
        i = int(np.argmin(d))
        if d[i] < 0 and (worst is None or d[i] < worst[0]):
            worst = (d[i], s.centers[i], s.radii[i] + inflate)
    return worst


def plan_step(current: Pose6, target: AlignTarget, obstacles, cfg: ExecConfig) -> Pose6:
    """One clamped task-space tracking step with sphere avoidance.

    The translation is clamped to v_max * ctrl_dt and rotations follow the
    geodesic at w_max * ctrl_dt.  A step that would end inside an inflated
    obstacle sphere is slid along the tangent plane; if no collision-free
    step is found the position holds (the input pose must start outside all
    inflated spheres, else StartInCollision).
    """
    if _penetration(current.p, obstacles, cfg.margin) is not None:
        raise StartInCollision("current TCP is inside an inflated obstacle sphere")
    max_step = cfg.v_max * cfg.ctrl_dt
    new_p = _clamp_translation(current.p, target.p_world, max_step)
    hit = _penetration(new_p, obstacles, cfg.margin)
    if hit is not None:
        # remove the inward step component (slide on the tangent plane)
        _, center, radius = hit
        normal = current.p - center
        nn = np.linalg.norm(normal)
        if nn > 1e-12:
            normal /= nn
            step = new_p - current.p
            inward = float(step @ normal)
            if inward < 0.0:
                new_p = current.p + step - inward * normal
        for _ in range(8):
            hit = _penetration(new_p, obstacles, cfg.margin)
            if hit is None:
                break
            _, center, radius = hit
            u = new_p - center
            d = np.linalg.norm(u)
            new_p = center + (u / d if d > 1e-12 else np.array([0.0, 0.0, 1.0])) * radius
        if (_penetration(new_p, obstacles, cfg.margin) is not None
                or np.linalg.norm(new_p - current.p) > max_step + 1e-12):
            new_p = np.array(current.p)  # hold: safe and clamp-compliant
    new_R, _ = rotation_step(current.R, target.R_world, cfg.w_max * cfg.ctrl_dt)
    return Pose6(new_p, new_R)


@dataclass
class StageReport:
    k: int
    object_id: str
    align_cycles: int = 0
    converged: bool = False
    frozen_c: np.ndarray = None
    frozen_psi: float = 0.0
    t_start: float = 0.0
    t_end: float = 0.0
    wall_ms: float = 0.0


@dataclass
class RolloutReport:
    """Full trace of one rollout.

    `cycles` rows: t, stage k, phase, commanded position (3), commanded
    rotation (9 row-major), belief mean (8), score, flag, psi_task,
    yaw_used.  Wall-clock timings stay out of the serialized form so that
    identical seeds produce identical report files.
    """

    task: str
    demo_id: str = ""
    stages: list = field(default_factory=list)
    cycles: list = field(default_factory=list)
    success: dict = field(default_factory=dict)
    retrieval: dict = field(default_factory=dict)

    def cycle_array(self):
        return np.array(self.cycles)

    def to_dict(self):
        return {
            "task": self.task,
            "demo": self.demo_id,
            "success": self.success,
            "retrieval": self.retrieval,
            "stages": [
                {
                    "k": s.k,
                    "object": s.object_id,
                    "align_cycles": s.align_cycles,
                    "converged": bool(s.converged),
                    "frozen_pose": {"c": [float(v) for v in s.frozen_c],
                                    "psi": float(s.frozen_psi)},
                    "t_start": float(s.t_start),
                    "t_end": float(s.t_end),
                }
                for s in self.stages
            ],
            "cycles": [[float(v) for v in row] for row in self.cycles],
        }


def _cycle_row(t, k, phase, cmd, track, yaw_used):
    return [t, float(k), float(phase), *cmd.p, *cmd.R.ravel(),
            *track.belief.mean, track.obs.score, float(track.obs.flag),
            track.obs.psi_task, yaw_used]


def run_task(library: SkillLibrary, subtasks, env, cfg: ExecConfig = ExecConfig(),
             est_cfg: EstimatorConfig = EstimatorConfig(),
             grid: YawGrid = None) -> RolloutReport:
    """Execute every subtask in order; see the module docstring.

    `subtasks` is the ordered list of object ids; the library must hold a
    skill for each.  Raises AlignTimeout when a stage fails to converge.
    """
    grid = grid or YawGrid.default()
    report = RolloutReport(task=library.task)
    clouds = env.sense()
    trackers = {oid: Track(clouds[oid], est_cfg) for oid in subtasks}

    # Alg. 1: a single joint retrieval precedes all alignment
    result = retrieve_joint({oid: clouds[oid] for oid in subtasks}, library,
                            {oid: trackers[oid].obs for oid in subtasks}, grid)
    report.demo_id = result.demo_id
    from .retrieval import retrieval_report

    report.retrieval = retrieval_report(result)

    completed = set()
    sphere_state = {}
    t = 0.0

    def advance(cmd, hand, k, phase, track, yaw_used):
        nonlocal t, clouds
        env.step(cmd, hand)
        t += cfg.ctrl_dt
        clouds = env.sense()
        for o in subtasks:
            trackers[o].update(clouds[o], cfg.ctrl_dt)
        report.cycles.append(_cycle_row(t, k, phase, cmd, track, yaw_used))

    for k, oid in enumerate(subtasks, start=1):
        skill = library.skills[(result.demo_id, k)]
        align = result.per_object[oid]
        track = trackers[oid]
        stage = StageReport(k=k, object_id=oid, t_start=t)
        wall0 = time.perf_counter()
        hold_hand = skill.canonical_trajectory[0][1]

        psi_prev = track.obs.psi_task
        streak = 0
        yaw_used = psi_prev
        converged = False
        for _ in range(cfg.max_align_cycles):
            obs = track.obs
            yaw_used = select_yaw(align.flag_retr, align.psi_retr,
                                  obs.flag, obs.psi_task, psi_prev)
            psi_prev = obs.psi_task
            pose = PlanarPose(track.belief.c, yaw_used)
            target = world_target(skill, pose)
            obstacles = []
            for o in subtasks:
                if o == oid or o in completed:
                    continue
                raw = sphere_envelope(clouds[o], cfg.sphere_count, cfg.sphere_percentile)
                prev = sphere_state.get(o)
                sphere_state[o] = raw if prev is None else smooth_spheres(
                    prev, raw, cfg.ctrl_dt, cfg.smoother_omega)
                obstacles.append(sphere_state[o])
            cmd = plan_step(env.tcp(), target, obstacles, cfg)
            advance(cmd, hold_hand, k, PHASE_ALIGN, track, yaw_used)
            stage.align_cycles += 1
            tcp = env.tcp()
            pos_err = np.linalg.norm(tcp.p - target.p_world)
            rot_err = rotation_angle(tcp.R.T @ target.R_world)
            streak = streak + 1 if (pos_err < cfg.converge_pos
                                    and rot_err < cfg.converge_rot) else 0
            if streak >= cfg.converge_hold:
                converged = True
                break
        if not converged:
            raise AlignTimeout(k)
        stage.converged = True

        # freeze the object pose for the open-loop remainder
        frozen = PlanarPose(track.belief.c, yaw_used)
        stage.frozen_c = np.array(frozen.c)
        stage.frozen_psi = float(frozen.psi)

        # smooth pose interpolation from wherever alignment ended
        first_pose, first_hand = skill.canonical_trajectory[0]
        w0 = frozen.apply_pose(first_pose)
        start = env.tcp()
        w_log = rotation_log(w0.R @ start.R.T)
        for i in range(1, cfg.transition_steps + 1):
            frac = i / cfg.transition_steps
            target = AlignTarget(
                start.p + frac * (w0.p - start.p),
                _fraction_rotation(start.R, w_log, frac),
                first_hand,
            )
            cmd = plan_step(env.tcp(), target, [], cfg)
            advance(cmd, first_hand, k, PHASE_TRANSITION, track, yaw_used)

        # open-loop replay under the frozen pose
        prev_cmd = env.tcp()
        for pose_c, hand in skill.canonical_trajectory[1:]:
            w = frozen.apply_pose(pose_c)
            new_p = _clamp_translation(prev_cmd.p, w.p, cfg.v_max * cfg.ctrl_dt)
            new_R, _ = rotation_step(prev_cmd.R, w.R, cfg.w_max * cfg.ctrl_dt)
            cmd = Pose6(new_p, new_R)
            advance(cmd, hand, k, PHASE_REPLAY, track, yaw_used)
            prev_cmd = cmd

        completed.add(oid)
        stage.t_end = t
        stage.wall_ms = (time.perf_counter() - wall0) * 1e3
        report.stages.append(stage)

    report.success = env.success()
    return report


def _fraction_rotation(R_start, w_total, frac):
    from .geometry import axis_angle

    angle = np.linalg.norm(w_total)
    if angle < 1e-12:
        return R_start.copy()
    return axis_angle(w_total / angle, angle * frac) @ R_start
