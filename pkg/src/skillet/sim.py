"""Kinematic planar-tabletop simulator.

Objects carry a surface cloud in a body frame plus a planar pose; drawers
translate along a body axis and lids rotate about a body hinge.  There are
no dynamics: grasping attaches an object rigidly to the TCP when the hand
is closing in contact, and articulation coordinates follow the hand's
motion projected onto the joint axis while the hand is engaged with the
handle region.  Every rule is deterministic, so identical scene specs and
seeds reproduce rollouts bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dxpc import load_dxpc
from .errors import ConfigError, InvalidArgument
from .geometry import (
    PlanarPose,
    PointCloud,
    Pose6,
    axis_angle,
    rotation_step,
    wrap_pi,
)
from .kinematics import KinematicChain, bundled_chain, contact_signal, hand_cloud

FREE, DRAWER, LID = "free", "drawer", "lid"
TASK_TYPES = ("grasp_pull", "grasp_open", "grasp_grasp")


# ---------------------------------------------------------------------------
# shape library (8 training + 4 held-out synthetic shapes at desk scale)

def _box_surface(rng, n, half):
    half = np.asarray(half, dtype=float)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, n, p=areas / areas.sum())
    side = rng.choice([-1.0, 1.0], n)
    pts = rng.uniform(-1.0, 1.0, (n, 3)) * half
    pts[np.arange(n), axis] = side * half[axis]
    return pts


def _cylinder_surface(rng, n, radius, height):
    lateral = 2 * np.pi * radius * height
    caps = 2 * np.pi * radius ** 2
    on_side = rng.uniform(size=n) < lateral / (lateral + caps)
    ang = rng.uniform(0, 2 * np.pi, n)
    r = np.where(on_side, radius, radius * np.sqrt(rng.uniform(size=n)))
    z = np.where(on_side, rng.uniform(-0.5, 0.5, n) * height,
                 rng.choice([-0.5, 0.5], n) * height)
    return np.stack([r * np.cos(ang), r * np.sin(ang), z], axis=1)


def _lift(pts):
    """Rest the shape on the table: minimum z becomes 0."""
    pts = pts - [0.0, 0.0, pts[:, 2].min()]
    return pts


def _make(name, sampler):
    def factory(n=512, seed=0):
        pts = _lift(sampler(np.random.default_rng(seed), n))
        return PointCloud(pts, "body")

    factory.__name__ = f"shape_{name}"
    return factory


SHAPE_LIBRARY = {
    # training shapes
    "box_small": _make("box_small", lambda r, n: _box_surface(r, n, (0.03, 0.025, 0.025))),
    "box_long": _make("box_long", lambda r, n: _box_surface(r, n, (0.05, 0.02, 0.02))),
    "box_flat": _make("box_flat", lambda r, n: _box_surface(r, n, (0.045, 0.035, 0.015))),
    "rod": _make("rod", lambda r, n: _box_surface(r, n, (0.06, 0.012, 0.012))),
    "cyl_small": _make("cyl_small", lambda r, n: _cylinder_surface(r, n, 0.025, 0.06)),
    "cyl_tall": _make("cyl_tall", lambda r, n: _cylinder_surface(r, n, 0.02, 0.10)),
    "disc_small": _make("disc_small", lambda r, n: _cylinder_surface(r, n, 0.045, 0.015)),
    "lshape": _make("lshape", lambda r, n: np.vstack([
        _box_surface(r, n // 2, (0.055, 0.02, 0.02)),
        _box_surface(r, n - n // 2, (0.02, 0.04, 0.02)) + [0.035, 0.04, 0.0],
    ])),
    # held-out shapes
    "box_medium": _make("box_medium", lambda r, n: _box_surface(r, n, (0.04, 0.03, 0.03))),
    "tshape": _make("tshape", lambda r, n: np.vstack([
        _box_surface(r, n // 2, (0.055, 0.018, 0.018)),
        _box_surface(r, n - n // 2, (0.018, 0.045, 0.018)) + [0.0, 0.045, 0.0],
    ])),
    "cyl_wide": _make("cyl_wide", lambda r, n: _cylinder_surface(r, n, 0.04, 0.04)),
    "disc_large": _make("disc_large", lambda r, n: _cylinder_surface(r, n, 0.055, 0.02)),
}

TRAIN_SHAPES = ("box_small", "box_long", "box_flat", "rod",
                "cyl_small", "cyl_tall", "disc_small", "lshape")
TEST_SHAPES = ("box_medium", "tshape", "cyl_wide", "disc_large")


def drawer_fixture(n=512, seed=0):
    """Sliding tray with a front handle bar; pull axis is body +x.

    Returns (cloud, handle indices, interior box).  Roughly forty percent
    of the points sit on the handle so handle contact is visible in the
    mean per-object signal.
    """
    rng = np.random.default_rng(seed)
    n_handle = int(n * 0.4)
    tray = _box_surface(rng, n - n_handle, (0.11, 0.13, 0.035)) + [0.0, 0.0, 0.035]
    bar = _box_surface(rng, n_handle, (0.012, 0.05, 0.012)) + [0.135, 0.0, 0.055]
    pts = np.vstack([tray, bar])
    handle_idx = np.arange(n - n_handle, n)
    interior = (np.array([-0.10, -0.12, 0.0]), np.array([0.10, 0.12, 0.25]))
    return PointCloud(pts, "body"), handle_idx, interior


def lid_fixture(n=512, seed=0):
    """Container lid hinged along its -x edge; body +y is the hinge axis.

    The free (+x) edge carries a dense rim to push against.  The interior
    placement box sits under the closed lid in the body frame.
    """
    rng = np.random.default_rng(seed)
    n_rim = int(n * 0.4)
    panel = _box_surface(rng, n - n_rim, (0.085, 0.085, 0.006)) + [0.0, 0.0, 0.10]
    rim = _box_surface(rng, n_rim, (0.012, 0.06, 0.012)) + [0.095, 0.0, 0.112]
    pts = np.vstack([panel, rim])
    handle_idx = np.arange(n - n_rim, n)
    interior = (np.array([-0.085, -0.085, 0.0]), np.array([0.085, 0.085, 0.25]))
    return PointCloud(pts, "body"), handle_idx, interior


# ---------------------------------------------------------------------------
# scene data

@dataclass
class SimObject:
    id: str
    shape: PointCloud                 # body frame
    pose: PlanarPose
    kind: str = FREE
    axis: np.ndarray = None           # drawer slide axis / lid hinge axis (body)
    hinge_point: np.ndarray = None    # lid hinge line point (body)
    travel: float = 0.0               # drawer displacement limit
    angle_range: tuple = (0.0, np.pi / 2)
    q: float = 0.0                    # articulation coordinate
    handle_idx: np.ndarray = None
    interior: tuple = None            # (lo, hi) placement box in the body frame
    attached: str = None              # hand link id while grasped
    grasp_offset: tuple = None        # (offset in TCP frame, yaw offset)

    def __post_init__(self):
        if self.kind not in (FREE, DRAWER, LID):
            raise InvalidArgument(f"unknown object kind {self.kind!r}")
        if self.kind == DRAWER and (self.axis is None or self.travel <= 0):
            raise InvalidArgument("drawer needs an axis and positive travel")
        if self.kind == LID and (self.axis is None or self.hinge_point is None):
            raise InvalidArgument("lid needs a hinge axis and hinge point")

    def body_points(self):
        pts = self.shape.points
        if self.kind == DRAWER:
            return pts + self.axis * self.q
        if self.kind == LID:
            R = axis_angle(self.axis, self.q)
            return (pts - self.hinge_point) @ R.T + self.hinge_point
        return pts

    def world_cloud(self) -> PointCloud:
        return PointCloud(self.pose.apply(self.body_points()), "base")

    def handle_world(self):
        pts = self.body_points()
        if self.handle_idx is not None:
            pts = pts[self.handle_idx]
        return self.pose.apply(pts)


@dataclass(frozen=True)
class SensorModel:
    noise_sigma: float = 0.0
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout fraction must be in [0, 1)")
        if self.noise_sigma < 0.0:
            raise ConfigError("noise_sigma must be nonnegative")


class Sensor:
    """Stateful sampler for a SensorModel (one rng stream per rollout)."""

    def __init__(self, model: SensorModel):
        self.model = model
        self.rng = np.random.default_rng(model.seed)

    def observe(self, cloud: PointCloud) -> PointCloud:
        pts = cloud.points
        if self.model.noise_sigma > 0.0:
            pts = pts + self.rng.normal(0.0, self.model.noise_sigma, pts.shape)
        if self.model.dropout > 0.0:
            n = pts.shape[0]
            keep = n - int(round(n * self.model.dropout))
            idx = np.sort(self.rng.choice(n, keep, replace=False))
            pts = pts[idx]
        return PointCloud(pts, cloud.frame)


@dataclass(frozen=True)
class SimParams:
    ctrl_dt: float = 0.1
    v_max: float = 0.10
    w_max: float = np.deg2rad(25.0)
    hand_tau: float = 0.05            # first-order hand joint tracking constant
    grasp_tau: float = 0.04           # contact kernel for grasping
    grasp_threshold: float = 0.6
    closure_eps: float = 0.005        # mean commanded joint delta that counts as closing
    engage_tau: float = 0.025         # contact kernel for handle engagement
    engage_threshold: float = 0.35


@dataclass(frozen=True)
class SuccessThresholds:
    drawer_travel: float = 0.15
    lid_angle: float = np.deg2rad(60.0)


@dataclass
class Scene:
    objects: dict
    task_type: str
    task_objects: tuple               # ordered subtask object ids
    chain: KinematicChain
    tcp: Pose6
    hand_q: np.ndarray
    params: SimParams = SimParams()
    thresholds: SuccessThresholds = SuccessThresholds()
    t: float = 0.0
    last_hand_cmd: np.ndarray = None
    hand_cmd_delta: np.ndarray = None
    events: list = field(default_factory=list)    # (t, "attach"/"detach", id)

    def __post_init__(self):
        if self.last_hand_cmd is None:
            self.last_hand_cmd = np.array(self.hand_q)
        if self.hand_cmd_delta is None:
            self.hand_cmd_delta = np.zeros_like(self.last_hand_cmd)

    def hand_cloud(self) -> PointCloud:
        return hand_cloud(self.chain, self.tcp, self.hand_q)

    def tcp_yaw(self):
        return float(np.arctan2(self.tcp.R[1, 0], self.tcp.R[0, 0]))


def sense(scene: Scene, sensor: Sensor) -> dict:
    """Noisy per-object observation of the current world clouds."""
    return {oid: sensor.observe(obj.world_cloud())
            for oid, obj in scene.objects.items()}


def grasp_check(scene: Scene, hand: PointCloud):
    """Attachment bookkeeping for the current cycle.

    A free object attaches when its contact signal reaches the grasp
    threshold while the commanded hand is closing; every attached object
    detaches when the command opens.  Returns the event list for the cycle.
    """
    p = scene.params
    closure = float(np.mean(scene.hand_cmd_delta))
    events = []
    if closure < -p.closure_eps:
        for obj in scene.objects.values():
            if obj.attached is not None:
                obj.attached = None
                obj.grasp_offset = None
                events.append((scene.t, "detach", obj.id))
        return events
    if closure > p.closure_eps:
        free = {o.id: o.world_cloud() for o in scene.objects.values()
                if o.kind == FREE and o.attached is None}
        if free:
            sig = contact_signal(hand, free, p.grasp_tau)
            for oid, value in sig.per_object.items():
                if value >= p.grasp_threshold:
                    obj = scene.objects[oid]
                    off = scene.tcp.R.T @ (obj.pose.c - scene.tcp.p)
                    yaw_off = wrap_pi(obj.pose.psi - scene.tcp_yaw())
                    obj.attached = "hand"
                    obj.grasp_offset = (off, float(yaw_off))
                    events.append((scene.t, "attach", oid))
    return events


def step(scene: Scene, arm_cmd: Pose6, hand_cmd, dt: float) -> Scene:
    """Advance the scene one control cycle.

    TCP motion is clamped exactly like the executor's tracker; hand joints
    first-order track their commands; attached objects ride the TCP; and
    engaged drawers/lids integrate the TCP motion projected on their axis.
    """
    if dt <= 0:
        raise InvalidArgument("step needs dt > 0")
    p = scene.params
    old_p = np.array(scene.tcp.p)

    new_p = scene.tcp.p + _clamp_vec(arm_cmd.p - scene.tcp.p, p.v_max * dt)
    new_R, _ = rotation_step(scene.tcp.R, arm_cmd.R, p.w_max * dt)
    scene.tcp = Pose6(new_p, new_R)
    delta_p = new_p - old_p

    hand_cmd = scene.chain.clamp(np.asarray(hand_cmd, dtype=float), warn=False)
    blend = 1.0 - np.exp(-dt / p.hand_tau)
    scene.hand_q = scene.hand_q + blend * (hand_cmd - scene.hand_q)

    # attached objects ride along rigidly
    yaw = scene.tcp_yaw()
    for obj in scene.objects.values():
        if obj.attached is not None:
            off, yaw_off = obj.grasp_offset
            obj.pose = PlanarPose(scene.tcp.p + scene.tcp.R @ off, yaw + yaw_off)

    hand = scene.hand_cloud()

    # grasp state machine keyed on the *commanded* closure direction
    scene.hand_cmd_delta = hand_cmd - scene.last_hand_cmd
    scene.events.extend(grasp_check(scene, hand))
    scene.last_hand_cmd = hand_cmd

    # articulation: engaged handles follow the TCP motion projection
    for obj in scene.objects.values():
        if obj.kind == FREE:
            continue
        handle = PointCloud(obj.handle_world(), "base")
        sig = contact_signal(hand, {"h": handle}, p.engage_tau).per_object["h"]
        if sig < p.engage_threshold:
            continue
        if obj.kind == DRAWER:
            axis_w = obj.pose.rotation() @ obj.axis
            obj.q = float(np.clip(obj.q + axis_w @ delta_p, 0.0, obj.travel))
        else:  # lid
            axis_w = obj.pose.rotation() @ obj.axis
            hinge_w = obj.pose.apply(obj.hinge_point[None])[0]
            lever = np.cross(axis_w, scene.tcp.p - hinge_w)
            denom = float(lever @ lever)
            if denom > 1e-8:
                dq = float(lever @ delta_p) / denom
                obj.q = float(np.clip(obj.q + dq, *obj.angle_range))

    scene.t += dt
    return scene


def _clamp_vec(v, max_norm):
    n = np.linalg.norm(v)
    if n <= max_norm:
        return v
    return v * (max_norm / n)


def _never_dropped(scene, oid):
    attach_times = [t for t, kind, o in scene.events if o == oid and kind == "attach"]
    detach_times = [t for t, kind, o in scene.events if o == oid and kind == "detach"]
    if not attach_times:
        return False
    return not any(td > attach_times[0] for td in detach_times)


def _inside_interior(scene, oid, container_id):
    container = scene.objects[container_id]
    lo, hi = container.interior
    c_body = container.pose.inverse_apply(scene.objects[oid].pose.c[None])[0]
    if container.kind == DRAWER:
        c_body = c_body - container.axis * container.q
    return bool(np.all(c_body >= lo) and np.all(c_body <= hi))


def check_success(scene: Scene, task_type: str = None) -> dict:
    """Per-subtask and overall success for the three task families."""
    task = task_type or scene.task_type
    if task not in TASK_TYPES:
        raise InvalidArgument(f"unknown task type {task!r}")
    first, second = scene.task_objects[0], scene.task_objects[1]
    obj1 = scene.objects[first]
    held = obj1.attached is not None and _never_dropped(scene, first)
    thr = scene.thresholds
    if task == "grasp_pull":
        mech = scene.objects[second].q >= thr.drawer_travel
        placed = _inside_interior(scene, first, second)
        subtasks = [held, bool(mech and placed and held)]
    elif task == "grasp_open":
        mech = scene.objects[second].q >= thr.lid_angle
        placed = _inside_interior(scene, first, second)
        subtasks = [held, bool(mech and placed and held)]
    else:  # grasp_grasp: both attached simultaneously at the end
        second_held = (scene.objects[second].attached is not None
                       and _never_dropped(scene, second))
        subtasks = [held, bool(second_held and held)]
    return {"subtasks": [bool(s) for s in subtasks],
            "overall": bool(subtasks[0] and subtasks[1])}


# ---------------------------------------------------------------------------
# scene specification files and spawning

@dataclass(frozen=True)
class ObjectSpec:
    id: str
    kind: str
    shape: str
    center: tuple = (0.0, 0.0)
    range: float = 0.25
    yaw: object = "full"         # "full", a number, or (lo, hi)
    travel: float = 0.3
    seed: int = 0


@dataclass(frozen=True)
class SceneSpec:
    task: str
    objects: tuple
    sensor: SensorModel = SensorModel()
    thresholds: SuccessThresholds = SuccessThresholds()
    params: SimParams = SimParams()
    tcp_start: tuple = (0.0, -0.45, 0.30)
    hand: str = "hand16"
    separation: float = 0.05          # surface-to-surface spawn gap
    workspace: float = 0.75

    def __post_init__(self):
        if self.task not in TASK_TYPES:
            raise ConfigError(f"unknown task type {self.task!r}")
        if len(self.objects) < 2:
            raise ConfigError("scene needs at least two task objects")
        for o in self.objects:
            reach = max(abs(o.center[0]), abs(o.center[1])) + o.range
            if reach > self.workspace:
                raise ConfigError(f"placement range of {o.id!r} leaves the workspace")


def _spawn_yaw(rng, spec):
    if spec.yaw == "full":
        return float(rng.uniform(-np.pi, np.pi))
    if isinstance(spec.yaw, (tuple, list)):
        return float(rng.uniform(spec.yaw[0], spec.yaw[1]))
    return float(spec.yaw)


def _build_object(spec: ObjectSpec, pose: PlanarPose) -> SimObject:
    if spec.kind == DRAWER:
        cloud, handle, interior = drawer_fixture(seed=spec.seed)
        return SimObject(spec.id, cloud, pose, DRAWER, axis=np.array([1.0, 0.0, 0.0]),
                         travel=spec.travel, handle_idx=handle, interior=interior)
    if spec.kind == LID:
        cloud, handle, interior = lid_fixture(seed=spec.seed)
        # hinge axis -y: positive angles swing the +x rim upward
        return SimObject(spec.id, cloud, pose, LID, axis=np.array([0.0, -1.0, 0.0]),
                         hinge_point=np.array([-0.085, 0.0, 0.10]),
                         angle_range=(0.0, np.deg2rad(80.0)),
                         handle_idx=handle, interior=interior)
    if spec.shape in SHAPE_LIBRARY:
        cloud = SHAPE_LIBRARY[spec.shape](seed=spec.seed)
    elif Path(spec.shape).is_file():
        cloud = load_dxpc(spec.shape, frame="body")
    else:
        raise ConfigError(f"unknown shape {spec.shape!r} for object {spec.id!r}")
    return SimObject(spec.id, cloud, pose, FREE)


def _planar_radius(obj: SimObject):
    pts = obj.shape.points
    return float(np.max(np.linalg.norm(pts[:, :2] - pts[:, :2].mean(0), axis=1)))


def spawn(spec: SceneSpec, seed: int) -> Scene:
    """Instantiate a scene with seeded uniform placements.

    Placements are drawn uniformly in each object's square region (and its
    yaw range) and redrawn until objects keep the configured separation, so
    the marginal distribution stays uniform over collision-free layouts.
    """
    rng = np.random.default_rng(seed)
    objects = {}
    placed = []
    for ospec in spec.objects:
        obj = None
        for _ in range(200):
            xy = np.asarray(ospec.center) + rng.uniform(-ospec.range, ospec.range, 2)
            pose = PlanarPose(np.array([xy[0], xy[1], 0.0]), _spawn_yaw(rng, ospec))
            cand = _build_object(ospec, pose)
            r = _planar_radius(cand)
            if all(np.linalg.norm(xy - pxy) >= r + pr + spec.separation
                   for pxy, pr in placed):
                obj = cand
                placed.append((xy, r))
                break
        if obj is None:
            raise ConfigError(f"could not place {ospec.id!r} with required separation")
        objects[ospec.id] = obj
    chain = bundled_chain(spec.hand)
    scene = Scene(
        objects=objects,
        task_type=spec.task,
        task_objects=tuple(o.id for o in spec.objects),
        chain=chain,
        tcp=Pose6(np.asarray(spec.tcp_start, dtype=float), np.eye(3)),
        hand_q=np.zeros(chain.dof),
        params=spec.params,
        thresholds=spec.thresholds,
    )
    return scene


def save_scene_spec(spec: SceneSpec, path):
    doc = {
        "version": 1,
        "task": spec.task,
        "tcp_start": [float(v) for v in spec.tcp_start],
        "hand": spec.hand,
        "separation": float(spec.separation),
        "sensor": {"noise_sigma": float(spec.sensor.noise_sigma),
                   "dropout": float(spec.sensor.dropout),
                   "seed": int(spec.sensor.seed)},
        "success": {"drawer_travel": float(spec.thresholds.drawer_travel),
                    "lid_angle_deg": float(np.rad2deg(spec.thresholds.lid_angle))},
        "objects": [
            {
                "id": o.id, "kind": o.kind, "shape": o.shape,
                "center": [float(v) for v in o.center], "range": float(o.range),
                "yaw": (list(o.yaw) if isinstance(o.yaw, (tuple, list)) else o.yaw),
                "travel": float(o.travel), "seed": int(o.seed),
            }
            for o in spec.objects
        ],
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True))


_OBJECT_KEYS = {"id", "kind", "shape", "center", "range", "yaw", "travel", "seed"}
_TOP_KEYS = {"version", "task", "tcp_start", "hand", "separation", "sensor",
             "success", "objects"}


def load_scene_spec(path) -> SceneSpec:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"scene spec missing: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"scene spec {path}: {e}") from None
    if not isinstance(doc, dict) or "task" not in doc or "objects" not in doc:
        raise ConfigError(f"scene spec {path}: missing task/objects")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"scene spec {path}: unknown keys {sorted(unknown)}")
    objects = []
    for entry in doc["objects"]:
        bad = set(entry) - _OBJECT_KEYS
        if bad:
            raise ConfigError(f"scene spec {path}: unknown object keys {sorted(bad)}")
        yaw = entry.get("yaw", "full")
        if isinstance(yaw, list):
            yaw = tuple(yaw)
        objects.append(ObjectSpec(
            id=entry["id"], kind=entry.get("kind", FREE), shape=entry.get("shape", ""),
            center=tuple(entry.get("center", (0.0, 0.0))),
            range=float(entry.get("range", 0.25)), yaw=yaw,
            travel=float(entry.get("travel", 0.3)), seed=int(entry.get("seed", 0)),
        ))
    sensor_doc = doc.get("sensor", {})
    succ = doc.get("success", {})
    return SceneSpec(
        task=doc["task"],
        objects=tuple(objects),
        sensor=SensorModel(float(sensor_doc.get("noise_sigma", 0.0)),
                           float(sensor_doc.get("dropout", 0.0)),
                           int(sensor_doc.get("seed", 0))),
        thresholds=SuccessThresholds(
            float(succ.get("drawer_travel", 0.15)),
            np.deg2rad(float(succ.get("lid_angle_deg", 60.0)))),
        tcp_start=tuple(doc.get("tcp_start", (0.0, -0.45, 0.30))),
        hand=doc.get("hand", "hand16"),
        separation=float(doc.get("separation", 0.30)),
    )


class TabletopEnv:
    """Adapter exposing a Scene to the executor's environment protocol."""

    def __init__(self, scene: Scene, sensor_model: SensorModel = None,
                 dt: float = None):
        self.scene = scene
        self.sensor = Sensor(sensor_model or SensorModel())
        self.dt = dt or scene.params.ctrl_dt

    def sense(self):
        return sense(self.scene, self.sensor)

    def tcp(self) -> Pose6:
        return self.scene.tcp

    def step(self, arm_cmd: Pose6, hand_cmd):
        step(self.scene, arm_cmd, hand_cmd, self.dt)

    def success(self):
        return check_success(self.scene)
