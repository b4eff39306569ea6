"""Demonstration segmentation into object-centric skills, and the on-disk
skill library.

A demonstration episode covers a whole multi-stage task.  Segment starts
(keyframes) are the first timesteps of sustained hand-object contact, one
per object in task order; each segment runs to the next keyframe (the last
one to the episode end).  Segments are stored canonically: the object cloud
at the keyframe is centered at its centroid and de-rotated by its PCA yaw,
and every commanded TCP pose in the segment is expressed in that frame.
Hand joint commands are copied verbatim.

Library layout on disk::

    <dir>/manifest.yaml        version, task, object labels, skill records
    <dir>/skills/<demo>_k<k>.traj   line per timestep: t, TCP position,
                                    TCP rotation (9 row-major), hand joints
    <dir>/skills/<demo>_k<k>.dxpc   canonical cloud

Episodes use the same line-record format with both commanded and measured
values, plus per-frame DXPC cloud references.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dxpc import load_dxpc, save_dxpc
from .errors import (
    CorruptManifest,
    CorruptRecord,
    InvalidArgument,
    KeyframeNotFound,
    MissingCloudFile,
    OrderViolation,
    VersionMismatch,
)
from .geometry import PcaResult, PlanarPose, PointCloud, Pose6, centroid, pca_yaw
from .kinematics import KinematicChain, contact_signal, hand_cloud

log = logging.getLogger(__name__)

LIBRARY_VERSION = 1
EPISODE_VERSION = 1


@dataclass(frozen=True)
class Frame:
    """One recorded timestep: measured joints, commanded actions, clouds."""

    t: float
    q_arm: np.ndarray
    q_hand: np.ndarray
    a_arm: Pose6
    a_hand: np.ndarray
    clouds: dict


@dataclass(frozen=True)
class DemoEpisode:
    id: str
    objects: tuple
    frames: tuple

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "frames", tuple(self.frames))
        if len(self.objects) < 1:
            raise InvalidArgument("episode needs at least one object")
        last = -np.inf
        for i, fr in enumerate(self.frames):
            if fr.t <= last:
                raise InvalidArgument(f"frame times must strictly increase (frame {i})")
            last = fr.t
            for oid in self.objects:
                if oid not in fr.clouds:
                    raise InvalidArgument(f"frame {i} lacks a cloud for {oid!r}")


@dataclass(frozen=True)
class SegmentParams:
    tau: float = 0.01            # contact kernel length scale (m)
    theta_c: float = 0.5         # sustained-contact threshold on the mean signal
    window: int = 5              # consecutive frames required (0.5 s at 10 Hz)
    ambiguity_threshold: float = 0.3   # keyframe anisotropy below this flags the skill


@dataclass(frozen=True)
class SkillSegment:
    demo_id: str
    k: int                        # subtask index, 1-based
    object_id: str
    canonical_cloud: PointCloud   # frame "canonical", centroid at origin
    canonical_trajectory: tuple   # ((Pose6, hand command array), ...)
    times: np.ndarray
    keyframe_pose: PlanarPose     # world pose of the object at the keyframe
    yaw_source: PcaResult
    yaw_ambiguous: bool
    keyframe_index: int = 0

    def __post_init__(self):
        if len(self.canonical_trajectory) == 0:
            raise InvalidArgument("skill trajectory must be nonempty")
        c = np.abs(self.canonical_cloud.points.mean(axis=0))
        # freshly built segments are exact; float32 round trips leave ~1e-10
        if np.max(c) > 1e-6:
            raise InvalidArgument("canonical cloud centroid is not at the origin")


@dataclass(frozen=True)
class SkillLibrary:
    task: str
    objects: tuple                # object label per subtask, k = 1..K
    skills: dict                  # (demo_id, k) -> SkillSegment

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        K = len(self.objects)
        for demo in self.demo_ids:
            for k in range(1, K + 1):
                if (demo, k) not in self.skills:
                    raise InvalidArgument(
                        f"library incomplete: demo {demo!r} lacks subtask {k}"
                    )

    @property
    def demo_ids(self):
        return sorted({demo for demo, _ in self.skills})


def canonicalize_cloud(cloud: PointCloud):
    """Center a cloud and de-rotate by its PCA yaw.

    Returns (canonical cloud, world pose of the canonical frame, PCA data).
    """
    res = pca_yaw(cloud)      # validates size >= 3
    c = centroid(cloud)
    pose = PlanarPose(c, res.yaw)
    return (
        PointCloud(pose.inverse_apply(cloud.points), "canonical"),
        pose,
        res,
    )


def detect_keyframes(episode: DemoEpisode, chain: KinematicChain,
                     params: SegmentParams = SegmentParams()):
    """First sustained-contact frame index per object, in task order.

    The hand cloud is rebuilt per frame from the recorded hand joints via
    forward kinematics, based at the commanded TCP pose.  A keyframe for
    object k is the first index t whose contact signal stays at or above
    theta_c for `window` consecutive frames.
    """
    if len(episode.frames) == 0:
        raise InvalidArgument("empty episode")
    if params.window < 1:
        raise InvalidArgument("window must be >= 1")
    T = len(episode.frames)
    K = len(episode.objects)
    signals = np.zeros((T, K))
    q_all = np.array([fr.q_hand for fr in episode.frames])
    lim = chain.joint_limits()
    clamped = np.clip(q_all, lim[:, 0], lim[:, 1])
    if not np.array_equal(clamped, q_all):
        log.warning("episode %s: clamped out-of-limit hand joints", episode.id)
    for ti, fr in enumerate(episode.frames):
        cloud = hand_cloud(chain, fr.a_arm, clamped[ti])
        sig = contact_signal(cloud, {o: fr.clouds[o] for o in episode.objects},
                             params.tau)
        for ki, oid in enumerate(episode.objects):
            signals[ti, ki] = sig.per_object[oid]

    keyframes = []
    for ki in range(K):
        above = signals[:, ki] >= params.theta_c
        found = -1
        run = 0
        for t in range(T):
            run = run + 1 if above[t] else 0
            if run >= params.window:
                found = t - params.window + 1
                break
        if found < 0:
            raise KeyframeNotFound(ki + 1)
        keyframes.append(found)
    for a, b in zip(keyframes, keyframes[1:]):
        if b <= a:
            raise OrderViolation(f"keyframes not strictly increasing: {keyframes}")
    return keyframes


def segment_episode(episode: DemoEpisode, chain: KinematicChain,
                    params: SegmentParams = SegmentParams()):
    """Split an episode into canonical skill segments, one per object."""
    keyframes = detect_keyframes(episode, chain, params)
    bounds = keyframes + [len(episode.frames)]
    segments = []
    for ki, oid in enumerate(episode.objects):
        kf = keyframes[ki]
        cloud = episode.frames[kf].clouds[oid]
        canon, pose, pca = canonicalize_cloud(cloud)
        traj = []
        times = []
        for fr in episode.frames[kf:bounds[ki + 1]]:
            traj.append((pose.inverse_apply_pose(fr.a_arm), np.array(fr.a_hand)))
            times.append(fr.t)
        segments.append(SkillSegment(
            demo_id=episode.id,
            k=ki + 1,
            object_id=oid,
            canonical_cloud=canon,
            canonical_trajectory=tuple(traj),
            times=np.array(times),
            keyframe_pose=pose,
            yaw_source=pca,
            yaw_ambiguous=pca.anisotropy < params.ambiguity_threshold,
            keyframe_index=kf,
        ))
    return segments


def build_library(task, episodes, chain, params: SegmentParams = SegmentParams()):
    """Segment several episodes into one library; they must share objects."""
    skills = {}
    objects = None
    for ep in episodes:
        if objects is None:
            objects = tuple(ep.objects)
        elif tuple(ep.objects) != objects:
            raise InvalidArgument(
                f"episode {ep.id!r} object order {ep.objects} differs from {objects}"
            )
        for seg in segment_episode(ep, chain, params):
            skills[(seg.demo_id, seg.k)] = seg
    return SkillLibrary(task, objects or (), skills)


# ---------------------------------------------------------------------------
# persistence

def _fmt(values):
    return " ".join(f"{float(v):.17g}" for v in values)


def _traj_lines(segment: SkillSegment):
    lines = []
    for t, (pose, hand) in zip(segment.times, segment.canonical_trajectory):
        row = [t, *pose.p, *pose.R.ravel(), *hand]
        lines.append(_fmt(row))
    return "\n".join(lines) + "\n"


def _parse_traj(text, path):
    poses = []
    times = []
    for ln, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) < 13:
            raise CorruptRecord(f"{path}:{ln + 1}: expected >= 13 fields")
        try:
            nums = np.array([float(v) for v in vals])
        except ValueError:
            raise CorruptRecord(f"{path}:{ln + 1}: non-numeric field") from None
        try:
            pose = Pose6(nums[1:4], nums[4:13].reshape(3, 3))
        except InvalidArgument as e:
            raise CorruptRecord(f"{path}:{ln + 1}: {e}") from None
        times.append(nums[0])
        poses.append((pose, nums[13:]))
    return times, poses


def save_library(lib: SkillLibrary, path):
    """Write a library directory; output bytes are deterministic."""
    root = Path(path)
    (root / "skills").mkdir(parents=True, exist_ok=True)
    records = []
    for (demo, k) in sorted(lib.skills):
        seg = lib.skills[(demo, k)]
        stem = f"{demo}_k{k}"
        save_dxpc(seg.canonical_cloud, root / "skills" / f"{stem}.dxpc")
        (root / "skills" / f"{stem}.traj").write_text(_traj_lines(seg))
        records.append({
            "demo": demo,
            "k": k,
            "object": seg.object_id,
            "cloud": f"skills/{stem}.dxpc",
            "trajectory": f"skills/{stem}.traj",
            "keyframe_pose": {"c": [float(v) for v in seg.keyframe_pose.c],
                              "psi": float(seg.keyframe_pose.psi)},
            "pca": {"yaw": float(seg.yaw_source.yaw),
                    "lambda1": float(seg.yaw_source.lambda1),
                    "lambda2": float(seg.yaw_source.lambda2),
                    "anisotropy": float(seg.yaw_source.anisotropy)},
            "yaw_ambiguous": bool(seg.yaw_ambiguous),
            "keyframe_index": int(seg.keyframe_index),
        })
    doc = {
        "version": LIBRARY_VERSION,
        "task": lib.task,
        "objects": list(lib.objects),
        "skills": records,
    }
    (root / "manifest.yaml").write_text(yaml.safe_dump(doc, sort_keys=True))


def load_library(path) -> SkillLibrary:
    root = Path(path)
    manifest = root / "manifest.yaml"
    if not manifest.is_file():
        raise CorruptManifest(f"no manifest.yaml under {root}")
    try:
        doc = yaml.safe_load(manifest.read_text())
    except yaml.YAMLError as e:
        raise CorruptManifest(f"{manifest}: {e}") from None
    if not isinstance(doc, dict) or "skills" not in doc or "version" not in doc:
        raise CorruptManifest(f"{manifest}: missing required keys")
    if doc["version"] != LIBRARY_VERSION:
        raise VersionMismatch(
            f"{manifest}: library version {doc['version']}, expected {LIBRARY_VERSION}"
        )
    skills = {}
    for rec in doc["skills"]:
        try:
            demo, k = rec["demo"], int(rec["k"])
            cloud_rel, traj_rel = rec["cloud"], rec["trajectory"]
            kp = rec["keyframe_pose"]
            pca = rec["pca"]
        except (KeyError, TypeError) as e:
            raise CorruptManifest(f"{manifest}: bad skill record ({e})") from None
        cloud_path = root / cloud_rel
        if not cloud_path.is_file():
            raise MissingCloudFile(f"{cloud_path} referenced by {manifest}")
        cloud = load_dxpc(cloud_path, frame="canonical")
        traj_path = root / traj_rel
        if not traj_path.is_file():
            raise CorruptRecord(f"{traj_path} referenced by {manifest} is missing")
        times, traj = _parse_traj(traj_path.read_text(), traj_path)
        skills[(demo, k)] = SkillSegment(
            demo_id=demo,
            k=k,
            object_id=rec.get("object", ""),
            canonical_cloud=cloud,
            canonical_trajectory=tuple(traj),
            times=np.array(times),
            keyframe_pose=PlanarPose(np.array(kp["c"]), float(kp["psi"])),
            yaw_source=PcaResult(float(pca["yaw"]), float(pca["lambda1"]),
                                 float(pca["lambda2"]), float(pca["anisotropy"])),
            yaw_ambiguous=bool(rec.get("yaw_ambiguous", False)),
            keyframe_index=int(rec.get("keyframe_index", 0)),
        )
    return SkillLibrary(doc.get("task", ""), tuple(doc.get("objects", [])), skills)


def save_episode(episode: DemoEpisode, path):
    root = Path(path)
    clouds = root / "clouds"
    clouds.mkdir(parents=True, exist_ok=True)
    arm_dof = len(episode.frames[0].q_arm) if episode.frames else 0
    hand_dof = len(episode.frames[0].q_hand) if episode.frames else 0
    lines = []
    for i, fr in enumerate(episode.frames):
        row = [fr.t, *fr.a_arm.p, *fr.a_arm.R.ravel(), *fr.a_hand, *fr.q_arm, *fr.q_hand]
        lines.append(_fmt(row))
        for oid in episode.objects:
            save_dxpc(fr.clouds[oid], clouds / f"{oid}_{i:05d}.dxpc")
    (root / "frames.txt").write_text("\n".join(lines) + "\n")
    doc = {
        "version": EPISODE_VERSION,
        "id": episode.id,
        "objects": list(episode.objects),
        "arm_dof": arm_dof,
        "hand_dof": hand_dof,
        "frame_count": len(episode.frames),
        "clouds": "clouds",
    }
    (root / "episode.yaml").write_text(yaml.safe_dump(doc, sort_keys=True))


def load_episode(path) -> DemoEpisode:
    root = Path(path)
    meta_path = root / "episode.yaml"
    if not meta_path.is_file():
        raise CorruptManifest(f"no episode.yaml under {root}")
    try:
        doc = yaml.safe_load(meta_path.read_text())
    except yaml.YAMLError as e:
        raise CorruptManifest(f"{meta_path}: {e}") from None
    if not isinstance(doc, dict) or "objects" not in doc:
        raise CorruptManifest(f"{meta_path}: missing required keys")
    if doc.get("version") != EPISODE_VERSION:
        raise VersionMismatch(f"{meta_path}: unsupported episode version")
    objects = list(doc["objects"])
    arm_dof = int(doc["arm_dof"])
    hand_dof = int(doc["hand_dof"])
    want = 1 + 12 + hand_dof + arm_dof + hand_dof
    frames = []
    text = (root / "frames.txt").read_text() if (root / "frames.txt").is_file() else ""
    for i, line in enumerate(l for l in text.splitlines() if l.strip()):
        vals = line.split()
        if len(vals) != want:
            raise CorruptRecord(f"{root}/frames.txt:{i + 1}: expected {want} fields")
        nums = np.array([float(v) for v in vals])
        clouds = {}
        for oid in objects:
            cpath = root / doc.get("clouds", "clouds") / f"{oid}_{i:05d}.dxpc"
            if not cpath.is_file():
                raise MissingCloudFile(str(cpath))
            clouds[oid] = load_dxpc(cpath)
        a_hand = nums[13:13 + hand_dof]
        q_arm = nums[13 + hand_dof:13 + hand_dof + arm_dof]
        q_hand = nums[13 + hand_dof + arm_dof:]
        frames.append(Frame(
            t=float(nums[0]),
            q_arm=q_arm,
            q_hand=q_hand,
            a_arm=Pose6(nums[1:4], nums[4:13].reshape(3, 3)),
            a_hand=a_hand,
            clouds=clouds,
        ))
    return DemoEpisode(doc.get("id", root.name), tuple(objects), tuple(frames))
