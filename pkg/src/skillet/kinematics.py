"""Kinematic chains, forward kinematics, sampled hand clouds, and the soft
hand-object contact signal.

Chains are flat lists of links, each with a fixed transform to its parent,
an optional revolute joint, and a precomputed surface-sample cloud in the
link frame.  Surface samples are data shipped with the chain file; the
toolkit never samples meshes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import spatial
from .errors import ConfigError, DimensionMismatch, EmptyInput
from .geometry import PointCloud, Pose6, axis_angle

log = logging.getLogger(__name__)

REVOLUTE = "revolute"
FIXED = "fixed"


@dataclass(frozen=True)
class Link:
    name: str
    parent: int                    # index of parent link, -1 for the root
    origin: Pose6                  # fixed transform parent -> link
    joint_type: str = FIXED
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    limits: tuple = (0.0, 0.0)
    samples: PointCloud = field(default_factory=lambda: PointCloud(np.zeros((0, 3)), "link"))

    def __post_init__(self):
        if self.joint_type not in (REVOLUTE, FIXED):
            raise ConfigError(f"unknown joint type {self.joint_type!r}")
        ax = np.asarray(self.axis, dtype=float).reshape(3)
        if self.joint_type == REVOLUTE:
            if abs(np.linalg.norm(ax) - 1.0) > 1e-9:
                raise ConfigError(f"revolute axis of {self.name!r} is not unit-norm")
            if self.limits[0] > self.limits[1]:
                raise ConfigError(f"limits of {self.name!r} are inverted")
        object.__setattr__(self, "axis", ax)
        object.__setattr__(self, "limits", (float(self.limits[0]), float(self.limits[1])))


@dataclass(frozen=True)
class KinematicChain:
    name: str
    links: tuple

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        for i, link in enumerate(self.links):
            if not (-1 <= link.parent < i):
                raise ConfigError(
                    f"link {link.name!r}: parent index {link.parent} is not before {i}"
                )

    @property
    def dof(self):
        return sum(1 for l in self.links if l.joint_type == REVOLUTE)

    def joint_limits(self):
        return np.array([l.limits for l in self.links if l.joint_type == REVOLUTE])

    def clamp(self, q, warn=True):
        """Clamp a joint vector into the chain's limits.

        Teleoperation logs routinely contain small limit violations, so
        out-of-range values are clamped with a warning rather than rejected.
        """
        q = np.asarray(q, dtype=float).reshape(-1)
        if q.shape[0] != self.dof:
            raise DimensionMismatch(
                f"chain {self.name!r} has {self.dof} joints, got {q.shape[0]}"
            )
        lim = self.joint_limits()
        clamped = np.clip(q, lim[:, 0], lim[:, 1])
        if warn and not np.array_equal(clamped, q):
            bad = int(np.sum(clamped != q))
            log.warning("chain %s: clamped %d out-of-limit joint value(s)", self.name, bad)
        return clamped


def forward_kinematics(chain: KinematicChain, base: Pose6, q):
    """World pose of every link; revolute links rotate about their axis."""
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape[0] != chain.dof:
        raise DimensionMismatch(
            f"chain {chain.name!r} expects {chain.dof} joint values, got {q.shape[0]}"
        )
    poses = []
    qi = 0
    for link in chain.links:
        parent = base if link.parent < 0 else poses[link.parent]
        pose = parent.compose(link.origin)
        if link.joint_type == REVOLUTE:
            pose = pose.compose(Pose6(np.zeros(3), axis_angle(link.axis, q[qi])))
            qi += 1
        poses.append(pose)
    return poses


def hand_cloud(chain: KinematicChain, base: Pose6, q, frame="base") -> PointCloud:
    """Union of all link surface samples mapped through forward kinematics."""
    poses = forward_kinematics(chain, base, q)
    parts = [
        pose.transform(link.samples.points)
        for pose, link in zip(poses, chain.links)
        if link.samples.size
    ]
    if not parts:
        return PointCloud(np.zeros((0, 3)), frame)
    return PointCloud(np.vstack(parts), frame)


@dataclass(frozen=True)
class ContactSignal:
    """exp(-d/tau) proximity indicators between a hand cloud and objects."""

    per_object: dict
    per_point: dict


def contact_signal(hand: PointCloud, objects: dict, tau: float) -> ContactSignal:
    """Soft contact indicator for each object against the hand cloud.

    For every object point the distance to the nearest hand point is mapped
    through exp(-d/tau); the per-object scalar is the mean indicator.
    """
    if hand.size == 0:
        raise EmptyInput("contact signal needs a nonempty hand cloud")
    grid = spatial.VoxelGrid(hand.points)
    per_point = {}
    per_object = {}
    for oid, cloud in objects.items():
        if cloud.size == 0:
            per_point[oid] = np.zeros(0)
            per_object[oid] = 0.0
            continue
        d2, _ = grid.nn(cloud.points)
        ind = np.exp(-np.sqrt(d2) / tau)
        per_point[oid] = ind
        per_object[oid] = float(ind.mean())
    return ContactSignal(per_object, per_point)


# ---------------------------------------------------------------------------
# chain files

def _pose_from_mapping(m):
    p = np.asarray(m.get("p", [0.0, 0.0, 0.0]), dtype=float)
    R = np.asarray(m.get("R", np.eye(3).ravel().tolist()), dtype=float).reshape(3, 3)
    return Pose6(p, R)


def _pose_to_mapping(pose):
    return {
        "p": [float(v) for v in pose.p],
        "R": [float(v) for v in pose.R.ravel()],
    }


def load_chain(path) -> KinematicChain:
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"chain file missing: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"chain file {path} is not valid YAML: {e}") from None
    if not isinstance(doc, dict) or "links" not in doc:
        raise ConfigError(f"chain file {path} lacks a links section")
    links = []
    for entry in doc["links"]:
        try:
            samples = PointCloud(np.asarray(entry.get("samples", []), dtype=float).reshape(-1, 3), "link")
            links.append(Link(
                name=entry["name"],
                parent=int(entry["parent"]),
                origin=_pose_from_mapping(entry.get("origin", {})),
                joint_type=entry.get("joint", FIXED),
                axis=np.asarray(entry.get("axis", [0.0, 0.0, 1.0]), dtype=float),
                limits=tuple(entry.get("limits", [0.0, 0.0])),
                samples=samples,
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"chain file {path}: bad link entry ({e})") from None
    return KinematicChain(doc.get("name", "chain"), tuple(links))


def save_chain(chain: KinematicChain, path):
    doc = {
        "name": chain.name,
        "links": [
            {
                "name": l.name,
                "parent": l.parent,
                "origin": _pose_to_mapping(l.origin),
                "joint": l.joint_type,
                "axis": [float(v) for v in l.axis],
                "limits": [float(l.limits[0]), float(l.limits[1])],
                "samples": [[float(v) for v in p] for p in l.samples.points],
            }
            for l in chain.links
        ],
    }
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=False)


# ---------------------------------------------------------------------------
# bundled example chains (synthetic link samples at desk scale)

def _segment_samples(length, n=8, radius=0.008):
    """Points along a capsule-ish segment extending toward -z."""
    zs = np.linspace(0.0, -length, n)
    ring = np.array([[radius, 0.0], [-radius, 0.0], [0.0, radius], [0.0, -radius]])
    pts = [(0.0, 0.0, z) for z in zs]
    for z in zs[:: max(1, n // 4)]:
        pts.extend([(r[0], r[1], z) for r in ring])
    return PointCloud(np.array(pts), "link")


def build_arm_chain() -> KinematicChain:
    """7-DoF serial arm stub with alternating z/y axes."""
    seg = [0.15, 0.25, 0.05, 0.25, 0.05, 0.15, 0.08]
    axes = [(0, 0, 1), (0, 1, 0), (0, 0, 1), (0, 1, 0), (0, 0, 1), (0, 1, 0), (0, 0, 1)]
    links = []
    for i in range(7):
        links.append(Link(
            name=f"arm_l{i}",
            parent=i - 1,
            origin=Pose6(np.array([0.0, 0.0, seg[i - 1] if i else 0.0]), np.eye(3)),
            joint_type=REVOLUTE,
            axis=np.array(axes[i], dtype=float),
            limits=(-2.9, 2.9),
            samples=PointCloud(np.array([[0.0, 0.0, 0.3 * seg[i]],
                                         [0.0, 0.0, 0.7 * seg[i]]]), "link"),
        ))
    return KinematicChain("arm7", tuple(links))


def build_hand_chain(fingers=4, links_per_finger=4, seg_len=0.028,
                     palm_half=0.045) -> KinematicChain:
    """16-DoF hand stub: a square palm with four inward-curling fingers.

    Finger joints rotate about the palm-tangential axis, so positive angles
    flex the finger under the palm.  Link samples give a usable cage for
    contact and grasp reasoning.
    """
    links = [Link(
        name="palm",
        parent=-1,
        origin=Pose6.identity(),
        samples=PointCloud(
            np.array([[x, y, 0.0]
                      for x in np.linspace(-palm_half, palm_half, 5)
                      for y in np.linspace(-palm_half, palm_half, 5)]),
            "link",
        ),
    )]
    base_angles = np.deg2rad([45.0, 135.0, 225.0, 315.0])[:fingers]
    for fi, ang in enumerate(base_angles):
        radial = np.array([np.cos(ang), np.sin(ang), 0.0])
        tangent = np.array([-np.sin(ang), np.cos(ang), 0.0])
        # base link frame: local x = radial (outward), local y = tangent
        R = np.column_stack([radial, tangent, np.array([0.0, 0.0, 1.0])])
        parent = 0
        for li in range(links_per_finger):
            if li == 0:
                origin = Pose6(radial * palm_half * 1.25, R)
            else:
                origin = Pose6(np.array([0.0, 0.0, -seg_len]), np.eye(3))
            links.append(Link(
                name=f"f{fi}_l{li}",
                parent=parent,
                origin=origin,
                joint_type=REVOLUTE,
                axis=np.array([0.0, 1.0, 0.0]),
                limits=(-0.35, 2.0),
                samples=_segment_samples(seg_len),
            ))
            parent = len(links) - 1
    return KinematicChain(f"hand{fingers * links_per_finger}", tuple(links))


_BUNDLED = {"arm7": build_arm_chain, "hand16": build_hand_chain}


def bundled_chain(name) -> KinematicChain:
    """Load one of the chains shipped with the package ('arm7', 'hand16')."""
    try:
        from importlib.resources import files

        path = files("skillet").joinpath(f"data/chains/{name}.yaml")
        if path.is_file():
            return load_chain(str(path))
    except (ModuleNotFoundError, TypeError):
        pass
    if name in _BUNDLED:
        return _BUNDLED[name]()
    raise ConfigError(f"no bundled chain named {name!r}")
