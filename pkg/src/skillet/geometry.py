"""Core geometric types and operations: point clouds, planar rigid
transforms, PCA yaw, Chamfer distance, and farthest-point sampling.

Object pose is planar throughout: a 3D centroid plus a yaw about +z.
PCA yaw is inherently ambiguous modulo pi (a principal axis has no sign),
so it is reported in (-pi/2, pi/2]; consumers that need a full-circle yaw
resolve the ambiguity themselves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import spatial
from .errors import EmptyInput, InsufficientPoints, InvalidArgument

TWO_PI = 2.0 * np.pi


def wrap_pi(angle):
    """Wrap an angle into (-pi, pi]."""
    r = np.remainder(angle, TWO_PI)
    if isinstance(r, np.ndarray):
        r[r > np.pi] -= TWO_PI
        return r
    return r - TWO_PI if r > np.pi else r


def wrap_half_pi(angle):
    """Wrap an angle into (-pi/2, pi/2] (i.e. reduce modulo pi)."""
    r = np.remainder(angle, np.pi)
    if isinstance(r, np.ndarray):
        r[r > np.pi / 2] -= np.pi
        return r
    return r - np.pi if r > np.pi / 2 else r


def rot_z(psi):
    c, s = np.cos(psi), np.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def axis_angle(axis, angle):
    """Rodrigues rotation matrix about a unit axis."""
    ax = np.asarray(axis, dtype=float)
    kx, ky, kz = ax
    K = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rotation_angle(R):
    """Geodesic angle of a rotation matrix, in [0, pi]."""
    t = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(t, -1.0, 1.0)))


def rotation_log(R):
    """Rotation vector (axis * angle) of R; handles the angle ~ pi branch."""
    angle = rotation_angle(R)
    if angle < 1e-12:
        return np.zeros(3)
    if angle > np.pi - 1e-6:
        # near pi the skew part vanishes; recover the axis from R + I
        M = R + np.eye(3)
        col = M[:, int(np.argmax(np.sum(M * M, axis=0)))]
        axis = col / np.linalg.norm(col)
        return axis * angle
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w * (angle / (2.0 * np.sin(angle)))


def rotation_step(R_current, R_target, max_angle):
    """Geodesic step from R_current toward R_target, clamped at max_angle."""
    w = rotation_log(R_target @ R_current.T)
    angle = np.linalg.norm(w)
    if angle <= max_angle:
        return R_target.copy(), angle
    step = axis_angle(w / angle, max_angle)
    return step @ R_current, max_angle


def _readonly(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """Ordered set of 3D points (meters) in a named frame. Immutable."""

    points: np.ndarray
    frame: str = "base"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidArgument(f"point array must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgument("point cloud contains non-finite values")
        if not self.frame:
            raise InvalidArgument("frame identifier must be nonempty")
        object.__setattr__(self, "points", _readonly(pts))

    def __len__(self):
        return self.points.shape[0]

    @property
    def size(self):
        return self.points.shape[0]

    def with_frame(self, frame):
        return PointCloud(self.points, frame)


@dataclass(frozen=True)
class PlanarPose:
    """Planar rigid pose: centroid c plus yaw psi about +z, psi in (-pi, pi]."""

    c: np.ndarray
    psi: float

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(c)) or not np.isfinite(self.psi):
            raise InvalidArgument("pose components must be finite")
        object.__setattr__(self, "c", _readonly(c))
        object.__setattr__(self, "psi", float(wrap_pi(self.psi)))

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), 0.0)

    def rotation(self):
        return rot_z(self.psi)

    def apply(self, points):
        """p -> c + R_z(psi) p for an (N, 3) array."""
        return np.asarray(points) @ self.rotation().T + self.c

    def inverse_apply(self, points):
        """p -> R_z(-psi) (p - c)."""
        return (np.asarray(points) - self.c) @ self.rotation()

    def apply_pose(self, pose):
        Rz = self.rotation()
        return Pose6(self.c + Rz @ pose.p, Rz @ pose.R)

    def inverse_apply_pose(self, pose):
        Rz = rot_z(-self.psi)
        return Pose6(Rz @ (pose.p - self.c), Rz @ pose.R)


@dataclass(frozen=True)
class Pose6:
    """Rigid pose in 3D: position p plus a rotation matrix R."""

    p: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64).reshape(3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(R))):
            raise InvalidArgument("pose components must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise InvalidArgument("rotation matrix is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise InvalidArgument("rotation matrix determinant differs from 1")
        object.__setattr__(self, "p", _readonly(p))
        object.__setattr__(self, "R", _readonly(R))

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.eye(3))

    def compose(self, other):
        """self * other (apply other in self's frame)."""
        return Pose6(self.p + self.R @ other.p, self.R @ other.R)

    def inverse(self):
        return Pose6(-(self.R.T @ self.p), self.R.T)

    def transform(self, points):
        return np.asarray(points) @ self.R.T + self.p


@dataclass(frozen=True)
class PcaResult:
    """Planar PCA of a cloud's XY projection.

    yaw is the principal-axis angle in (-pi/2, pi/2]; lambda1 >= lambda2 are
    the XY covariance eigenvalues (m^2); anisotropy = 1 - lambda2/lambda1.
    """

    yaw: float
    lambda1: float
    lambda2: float
    anisotropy: float


def centroid(cloud: PointCloud):
    if cloud.size == 0:
        raise EmptyInput("centroid of an empty cloud")
    return cloud.points.mean(axis=0)


def pca_yaw(cloud: PointCloud) -> PcaResult:
    """Principal-axis yaw of the horizontal (XY) projection.

    Degenerate clouds (all XY-coincident) report yaw 0 and anisotropy 0 so
    that downstream observability gates reject them.
    """
    if cloud.size < 3:
        raise InsufficientPoints("pca_yaw needs at least 3 points")
    xy = cloud.points[:, :2]
    xy = xy - xy.mean(axis=0)
    n = xy.shape[0]
    cxx = float(xy[:, 0] @ xy[:, 0]) / n
    cyy = float(xy[:, 1] @ xy[:, 1]) / n
    cxy = float(xy[:, 0] @ xy[:, 1]) / n
    tr = cxx + cyy
    disc = np.sqrt(max(0.0, (cxx - cyy) ** 2 + 4.0 * cxy * cxy))
    lam1 = max(0.0, (tr + disc) / 2.0)
    lam2 = max(0.0, min(lam1, (tr - disc) / 2.0))
    if lam1 <= 0.0:
        return PcaResult(0.0, 0.0, 0.0, 0.0)
    # eigenvector for lam1; pick the better-conditioned formula
    if abs(cxy) > 1e-300:
        if lam1 - cyy >= lam1 - cxx:
            vx, vy = lam1 - cyy, cxy
        else:
            vx, vy = cxy, lam1 - cxx
    elif cxx >= cyy:
        vx, vy = 1.0, 0.0
    else:
        vx, vy = 0.0, 1.0
    yaw = float(wrap_half_pi(np.arctan2(vy, vx)))
    return PcaResult(yaw, lam1, lam2, 1.0 - lam2 / lam1)


def transform_planar(cloud: PointCloud, pose: PlanarPose, frame=None) -> PointCloud:
    """Apply p -> c + R_z(psi) p to every point; frame set by the caller."""
    return PointCloud(pose.apply(cloud.points), frame or cloud.frame)


def chamfer(a: PointCloud, b: PointCloud) -> float:
    """Symmetric Chamfer score (m^2): mean squared NN distance a->b + b->a.

    Accelerated by a voxel-grid index; tests pin it to the brute-force
    double loop within 1e-9.
    """
    if a.size == 0 or b.size == 0:
        raise EmptyInput("chamfer of an empty cloud")
    return spatial.chamfer(a.points, b.points)


def fps(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Greedy farthest-point sampling down to n points.

    Clouds of size <= n are returned unchanged.  The first sample is a
    seeded uniform draw, so the result is deterministic given the seed.
    """
    if n < 1:
        raise InvalidArgument("fps needs n >= 1")
    if cloud.size <= n:
        return cloud
    first = int(np.random.default_rng(seed).integers(cloud.size))
    idx = spatial.fps_indices(cloud.points, n, first)
    return PointCloud(cloud.points[idx], cloud.frame)
