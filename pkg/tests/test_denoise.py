import numpy as np
import pytest

from skillet import denoise as dn
from skillet.errors import ConfigError, InsufficientPoints
from skillet.geometry import PointCloud


def box_surface(rng, n, half=(0.04, 0.03, 0.02), center=(0.0, 0.0, 0.1)):
    """Uniform samples on the surface of an axis-aligned box."""
    half = np.asarray(half)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    face_axis = rng.choice(3, n, p=areas / areas.sum())
    side = rng.choice([-1.0, 1.0], n)
    pts = rng.uniform(-1.0, 1.0, (n, 3)) * half
    for i in range(n):
        pts[i, face_axis[i]] = side[i] * half[face_axis[i]]
    return pts + np.asarray(center)


class TestCrop:
    CFG = dn.DenoiseConfig(workspace_min=(0, 0, 0), workspace_max=(1, 1, 1))

    def test_inside_unchanged(self):
        cloud = PointCloud(np.full((10, 3), 0.5))
        assert dn.crop(cloud, self.CFG).size == 10

    def test_boundary_point_retained(self):
        cloud = PointCloud([[1.0, 0.5, 0.5], [0.0, 0.0, 0.0]])
        assert dn.crop(cloud, self.CFG).size == 2

    def test_predicate_oracle(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-0.5, 1.5, (500, 3))
        got = dn.crop(PointCloud(pts), self.CFG).points
        want = pts[np.all((pts >= 0.0) & (pts <= 1.0), axis=1)]
        assert np.array_equal(got, want)


class TestStatisticalOutlierRemoval:
    def test_far_point_removed(self):
        rng = np.random.default_rng(1)
        blob = rng.normal(0.0, 0.005, (100, 3))
        pts = np.vstack([blob, [[1.0, 0.0, 0.0]]])
        out = dn.statistical_outlier_removal(PointCloud(pts), k=10, sigma=2.0)
        assert out.size == 100
        assert not np.any(np.all(out.points == [1.0, 0.0, 0.0], axis=1))

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        pts = np.vstack([rng.normal(0, 0.01, (80, 3)),
                         rng.uniform(-0.3, 0.3, (20, 3))])
        k, sigma = 8, 1.5
        d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(axis=2))
        np.fill_diagonal(d, np.inf)
        mean_d = np.sort(d, axis=1)[:, :k].mean(axis=1)
        want = pts[mean_d <= mean_d.mean() + sigma * mean_d.std()]
        got = dn.statistical_outlier_removal(PointCloud(pts), k, sigma).points
        assert np.array_equal(got, want)

    def test_uniform_grid_survives_generous_sigma(self):
        g = np.linspace(0, 0.1, 6)
        pts = np.stack(np.meshgrid(g, g, g), axis=-1).reshape(-1, 3)
        out = dn.statistical_outlier_removal(PointCloud(pts), k=10, sigma=10.0)
        assert out.size == len(pts)

    def test_duplicate_points_all_kept(self):
        pts = np.tile([[0.1, 0.2, 0.3]], (30, 1))
        out = dn.statistical_outlier_removal(PointCloud(pts), k=5, sigma=2.0)
        assert out.size == 30

    def test_too_few_points(self):
        with pytest.raises(InsufficientPoints):
            dn.statistical_outlier_removal(PointCloud(np.zeros((5, 3))), 5, 1.0)


class TestRadiusOutlierRemoval:
    def test_isolated_point_removed(self):
        pts = np.vstack([np.zeros((5, 3)), [[1.0, 1.0, 1.0]]])
        out = dn.radius_outlier_removal(PointCloud(pts), 0.1, 1)
        assert out.size == 5

    def test_close_pair_kept(self):
        pts = np.array([[0.0, 0.0, 0.0], [0.005, 0.0, 0.0]])
        out = dn.radius_outlier_removal(PointCloud(pts), 0.01, 1)
        assert out.size == 2

    def test_scattered_singletons_removed(self):
        rng = np.random.default_rng(3)
        cluster = rng.normal(0.0, 0.003, (60, 3))
        single = np.array([[0.3, 0, 0], [-0.3, 0.1, 0], [0, 0.4, 0.2],
                           [0.2, -0.3, 0.1], [-0.2, -0.2, -0.2]])
        pts = np.vstack([cluster, single])
        out = dn.radius_outlier_removal(PointCloud(pts), 0.015, 4)
        d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(axis=2))
        np.fill_diagonal(d, np.inf)
        want = pts[(d <= 0.015).sum(axis=1) >= 4]
        assert np.array_equal(out.points, want)
        assert out.size == 60


def reference_dbscan(pts, eps, min_pts):
    """Naive DBSCAN with the same core definition (self counted)."""
    n = len(pts)
    d = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(axis=2))
    core = (d <= eps).sum(axis=1) >= min_pts
    labels = np.full(n, -1)
    cid = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cid
        stack = [i]
        while stack:
            j = stack.pop()
            for nb in range(n):
                if nb != j and d[j, nb] <= eps and labels[nb] == -1:
                    labels[nb] = cid
                    if core[nb]:
                        stack.append(nb)
        cid += 1
    return labels, cid


def same_partition(la, lb):
    """Equality of clusterings up to label permutation (noise is -1)."""
    mapping = {}
    for a, b in zip(la, lb):
        if (a == -1) != (b == -1):
            return False
        if a == -1:
            continue
        if mapping.setdefault(a, b) != b:
            return False
    return len(set(mapping.values())) == len(mapping)


class TestDbscan:
    def test_single_blob_intact(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(0.0, 0.004, (100, 3))
        out, found, discarded = dn.dbscan_filter(PointCloud(pts), 0.02, 8)
        assert out.size == 100
        assert (found, discarded) == (1, 0)

    def test_two_equal_blobs_both_retained(self):
        rng = np.random.default_rng(5)
        a = rng.normal(0.0, 0.004, (25, 3))
        b = rng.normal(0.0, 0.004, (25, 3)) + [1.0, 0.0, 0.0]
        out, found, discarded = dn.dbscan_filter(PointCloud(np.vstack([a, b])), 0.02, 5)
        assert out.size == 50
        assert (found, discarded) == (2, 0)

    def test_small_blob_discarded(self):
        rng = np.random.default_rng(6)
        big = rng.normal(0.0, 0.006, (200, 3))
        small = rng.normal(0.0, 0.002, (5, 3)) + [0.5, 0.0, 0.0]
        out, found, discarded = dn.dbscan_filter(
            PointCloud(np.vstack([big, small])), 0.02, 4)
        assert out.size == 200
        assert found == 2 and discarded == 1

    @pytest.mark.parametrize("seed", range(8))
    def test_labels_match_reference_on_small_instances(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 51))
        pts = rng.uniform(-0.05, 0.05, (n, 3))
        eps = float(rng.uniform(0.005, 0.03))
        min_pts = int(rng.integers(2, 8))
        got, _ = dn.dbscan_labels(pts, eps, min_pts)
        want, _ = reference_dbscan(pts, eps, min_pts)
        assert same_partition(got, want)


class TestDenoisePipeline:
    def test_clean_object_cloud_passthrough(self):
        rng = np.random.default_rng(7)
        pts = box_surface(rng, 512)
        cfg = dn.DenoiseConfig(target=512, sor_k=16, sor_sigma=4.0)
        out, report = dn.denoise(PointCloud(pts), cfg)
        assert out.size <= 512
        assert report.empty_after is None
        # the surviving points are a subset of the input
        as_set = {tuple(p) for p in pts}
        assert all(tuple(p) in as_set for p in out.points)

    def test_large_scene_hits_target_exactly(self):
        rng = np.random.default_rng(8)
        scene = np.vstack([
            box_surface(rng, 12000, half=(0.06, 0.04, 0.05)),
            box_surface(rng, 8000, half=(0.05, 0.05, 0.02), center=(0.3, 0.2, 0.05)),
        ])
        out, report = dn.denoise(PointCloud(scene), dn.DenoiseConfig())
        assert out.size == 512
        assert not report.underflow

    def test_salt_noise_rejected(self):
        rng = np.random.default_rng(9)
        surface = box_surface(rng, 4000)
        salt = rng.uniform(-0.7, 0.7, (200, 3))
        out, _ = dn.denoise(PointCloud(np.vstack([surface, salt])), dn.DenoiseConfig())
        # oracle: distance from each output point to the dense true surface
        dense = box_surface(np.random.default_rng(10), 20000)
        d = np.sqrt(((out.points[:, None] - dense[None]) ** 2).sum(axis=2)).min(axis=1)
        assert (d < 0.01).mean() >= 0.99

    def test_stage_monotonicity(self):
        rng = np.random.default_rng(11)
        pts = np.vstack([box_surface(rng, 3000), rng.uniform(-1, 1, (500, 3))])
        _, report = dn.denoise(PointCloud(pts), dn.DenoiseConfig())
        for stage, n_in, n_out in report.stages[:-1]:
            assert n_out <= n_in

    def test_determinism(self):
        rng = np.random.default_rng(12)
        pts = np.vstack([box_surface(rng, 9000), rng.uniform(-0.7, 0.7, (400, 3))])
        cfg = dn.DenoiseConfig(seed=77)
        a, _ = dn.denoise(PointCloud(pts), cfg)
        b, _ = dn.denoise(PointCloud(pts), cfg)
        assert a.points.tobytes() == b.points.tobytes()

    def test_underflow_returns_survivors_unpadded(self):
        rng = np.random.default_rng(13)
        pts = box_surface(rng, 100)
        out, report = dn.denoise(PointCloud(pts), dn.DenoiseConfig(target=512))
        assert out.size < 512
        assert report.underflow

    def test_empty_after_crop_reported(self):
        cloud = PointCloud(np.full((50, 3), 5.0))
        out, report = dn.denoise(cloud, dn.DenoiseConfig())
        assert out.size == 0
        assert report.empty_after == "crop"

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            dn.DenoiseConfig(workspace_min=(1, 1, 1), workspace_max=(0, 0, 0))
        with pytest.raises(ConfigError):
            dn.DenoiseConfig(cap=100, target=512)
