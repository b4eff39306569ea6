"""Six-stage point-cloud denoising: crop, random downsample, statistical
outlier removal, radius outlier removal, density clustering, and a final
farthest-point sample to a fixed output size.

All stages are pure and seeded, so a given (cloud, config) pair always
produces the same output bytes.  Counts never increase through stages 1-5;
stage 6 either hits the target size exactly or, when fewer points survive,
returns them as-is with the report's underflow flag set (padding would bias
downstream centroid and PCA estimates).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import spatial
from .errors import ConfigError, InsufficientPoints
from .geometry import PointCloud, fps

STAGES = ("crop", "downsample", "sor", "ror", "cluster", "fps")


@dataclass(frozen=True)
class DenoiseConfig:
    """Tuning for the denoising pipeline.

    The workspace bounds, point cap, and final size come from the sensing
    setup; the outlier and clustering parameters default to tabletop object
    scales and are all adjustable.
    """

    workspace_min: tuple = (-0.75, -0.75, -0.05)
    workspace_max: tuple = (0.75, 0.75, 0.75)
    cap: int = 8192
    sor_k: int = 16
    sor_sigma: float = 2.0
    ror_radius: float = 0.015
    ror_min_neighbors: int = 4
    dbscan_eps: float = 0.02
    dbscan_min_pts: int = 8
    cluster_keep_fraction: float = 0.1
    target: int = 512
    seed: int = 0

    def __post_init__(self):
        lo = np.asarray(self.workspace_min, dtype=float)
        hi = np.asarray(self.workspace_max, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(lo < hi):
            raise ConfigError("workspace_min must be componentwise below workspace_max")
        if not (self.cap >= self.target >= 1):
            raise ConfigError("need cap >= target >= 1")
        if self.dbscan_eps <= 0:
            raise ConfigError("dbscan_eps must be positive")
        if self.sor_k < 1 or self.ror_radius <= 0 or self.dbscan_min_pts < 1:
            raise ConfigError("outlier-removal parameters must be positive")


@dataclass
class DenoiseReport:
    """Per-stage bookkeeping: (stage, points in, points out) plus cluster
    statistics, the underflow flag, and the first stage that emptied the
    cloud (if any)."""

    stages: list = field(default_factory=list)
    clusters_found: int = 0
    clusters_discarded: int = 0
    underflow: bool = False
    empty_after: str | None = None
    skipped: list = field(default_factory=list)


def crop(cloud: PointCloud, config: DenoiseConfig) -> PointCloud:
    """Keep points inside the workspace box, boundary inclusive."""
    lo = np.asarray(config.workspace_min)
    hi = np.asarray(config.workspace_max)
    pts = cloud.points
    keep = np.all((pts >= lo) & (pts <= hi), axis=1)
    return PointCloud(pts[keep], cloud.frame)


def statistical_outlier_removal(cloud: PointCloud, k: int, sigma: float) -> PointCloud:
    """Drop points whose mean k-NN distance exceeds mean + sigma * std.

    The threshold statistics are taken over the whole cloud (population
    std).  Requires more than k points.
    """
    if cloud.size <= k:
        raise InsufficientPoints(f"statistical removal needs > {k} points")
    mean_d = spatial.knn_mean_dists(cloud.points, k)
    thresh = mean_d.mean() + sigma * mean_d.std()
    return PointCloud(cloud.points[mean_d <= thresh], cloud.frame)


def radius_outlier_removal(cloud: PointCloud, radius: float,
                           min_neighbors: int) -> PointCloud:
    """Keep points with at least min_neighbors others within radius."""
    if cloud.size == 0:
        return cloud
    counts = spatial.radius_counts(cloud.points, radius)
    return PointCloud(cloud.points[counts >= min_neighbors], cloud.frame)


def dbscan_labels(points, eps: float, min_pts: int):
    """Density-based cluster labels; -1 marks noise.

    A point is core when its eps-neighborhood (itself included) holds at
    least min_pts points.  Clusters are grown from the lowest-index
    unclaimed core point, so labels are deterministic.
    """
    n = points.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels, 0
    offs, nbr = spatial.radius_neighbors(points, eps)
    core = (offs[1:] - offs[:-1]) + 1 >= min_pts
    cid = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cid
        stack = [i]
        while stack:
            j = stack.pop()
            for nb in nbr[offs[j]:offs[j + 1]]:
                if labels[nb] == -1:
                    labels[nb] = cid
                    if core[nb]:
                        stack.append(int(nb))
        cid += 1
    return labels, cid


def dbscan_filter(cloud: PointCloud, eps: float, min_pts: int,
                  keep_fraction: float = 0.1):
    """Retain the union of clusters at least keep_fraction the size of the
    largest; noise and small specks are discarded.  Returns the filtered
    cloud plus (clusters found, clusters discarded)."""
    labels, ncl = dbscan_labels(cloud.points, eps, min_pts)
    if ncl == 0:
        return PointCloud(np.zeros((0, 3)), cloud.frame), 0, 0
    sizes = np.bincount(labels[labels >= 0], minlength=ncl)
    min_size = keep_fraction * sizes.max()
    keep_ids = np.nonzero(sizes >= min_size)[0]
    keep = np.isin(labels, keep_ids)
    return PointCloud(cloud.points[keep], cloud.frame), ncl, ncl - len(keep_ids)


def denoise(cloud: PointCloud, config: DenoiseConfig):
    """Run the full pipeline; returns (cloud, DenoiseReport).

    An emptied cloud is reported, not raised, so callers can decide how to
    degrade.  The statistical stage is skipped (and recorded as such) when
    too few points remain to define k neighbors.
    """
    report = DenoiseReport()
    out = cloud

    def record(stage, before, after):
        report.stages.append((stage, before, after))
        if after == 0 and before > 0 and report.empty_after is None:
            report.empty_after = stage

    n0 = out.size
    out = crop(out, config)
    record("crop", n0, out.size)

    n0 = out.size
    if n0 > config.cap:
        rng = np.random.default_rng(config.seed)
        idx = np.sort(rng.choice(n0, config.cap, replace=False))
        out = PointCloud(out.points[idx], out.frame)
    record("downsample", n0, out.size)

    n0 = out.size
    if n0 > config.sor_k:
        out = statistical_outlier_removal(out, config.sor_k, config.sor_sigma)
    elif n0 > 0:
        report.skipped.append("sor")
    record("sor", n0, out.size)

    n0 = out.size
    out = radius_outlier_removal(out, config.ror_radius, config.ror_min_neighbors)
    record("ror", n0, out.size)

    n0 = out.size
    out, found, discarded = dbscan_filter(
        out, config.dbscan_eps, config.dbscan_min_pts, config.cluster_keep_fraction
    )
    report.clusters_found = found
    report.clusters_discarded = discarded
    record("cluster", n0, out.size)

    n0 = out.size
    if n0 < config.target:
        report.underflow = n0 > 0
    else:
        out = fps(out, config.target, config.seed)
    record("fps", n0, out.size)
    return out, report
