import numpy as np
import pytest

from skillet import geometry as geo
from skillet import skills as sk
from skillet.errors import (
    CorruptManifest,
    CorruptRecord,
    InvalidArgument,
    KeyframeNotFound,
    MissingCloudFile,
    VersionMismatch,
)
from skillet.geometry import PlanarPose, PointCloud, Pose6
from skillet.kinematics import bundled_chain, hand_cloud

from conftest import anisotropic_cloud

HAND = bundled_chain("hand16")
FLEX = np.full(16, 0.5)
FAR = Pose6(np.array([2.0, 2.0, 1.0]), np.eye(3))


def contact_base(center):
    """TCP pose that parks the hand cage right on `center`."""
    return Pose6(np.asarray(center, dtype=float), np.eye(3))


def make_object_cloud(rng, center):
    """Cloud built from the flexed hand cage itself, so contact is ~1."""
    cage = hand_cloud(HAND, contact_base(center), FLEX).points
    jitter = rng.normal(0.0, 0.0005, cage.shape)
    return PointCloud(cage + jitter)


def synthetic_episode(onsets, T=160, demo_id="demo0", blips=(), shift=np.zeros(3)):
    """Hand teleports onto each object at its onset frame and stays there.

    `blips` are (object index, frame, length) bursts shorter than the
    sustained-contact window.
    """
    rng = np.random.default_rng(1)
    centers = [np.array([0.4 * (i + 1), 0.0, 0.1]) + shift for i in range(len(onsets))]
    clouds = [make_object_cloud(rng, c) for c in centers]
    objects = [f"obj{i + 1}" for i in range(len(onsets))]
    frames = []
    for t in range(T):
        base = FAR
        q = np.zeros(16)
        # the hand sits on the object whose onset passed most recently
        active = [i for i, onset in enumerate(onsets) if t >= onset]
        if active:
            base = contact_base(centers[max(active)])
            q = FLEX
        for oi, frame, length in blips:
            if frame <= t < frame + length:
                base = contact_base(centers[oi])
                q = FLEX
        frames.append(sk.Frame(
            t=0.1 * t,
            q_arm=np.zeros(7),
            q_hand=q,
            a_arm=base,
            a_hand=q,
            clouds={o: c for o, c in zip(objects, clouds)},
        ))
    return sk.DemoEpisode(demo_id, tuple(objects), tuple(frames))


class TestDetectKeyframes:
    def test_planted_onsets(self):
        ep = synthetic_episode([40, 120])
        kf = sk.detect_keyframes(ep, HAND)
        assert kf == [40, 120]

    def test_blip_shorter_than_window_ignored(self):
        ep = synthetic_episode([60], blips=[(0, 20, 2)])
        assert sk.detect_keyframes(ep, HAND) == [60]

    def test_contact_from_frame_zero(self):
        ep = synthetic_episode([0])
        assert sk.detect_keyframes(ep, HAND) == [0]

    def test_no_contact_raises(self):
        ep = synthetic_episode([200], T=100)  # onset never happens
        with pytest.raises(KeyframeNotFound):
            sk.detect_keyframes(ep, HAND)


class TestCanonicalize:
    def test_fixed_point(self):
        rng = np.random.default_rng(2)
        base = anisotropic_cloud(rng)
        canon, _, _ = sk.canonicalize_cloud(base)
        canon2, pose2, _ = sk.canonicalize_cloud(canon)
        assert np.max(np.abs(canon2.points - canon.points)) < 1e-9
        assert np.linalg.norm(pose2.c) < 1e-9
        assert abs(pose2.psi) < 1e-9

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        base = anisotropic_cloud(rng)
        canon0, pose0, _ = sk.canonicalize_cloud(base)
        shift = np.array([0.3, -0.2, 0.0])
        canon1, pose1, _ = sk.canonicalize_cloud(PointCloud(base.points + shift))
        assert np.max(np.abs(canon1.points - canon0.points)) < 1e-9
        assert np.allclose(pose1.c, pose0.c + shift, atol=1e-9)

    def test_rotation_round_trip_chamfer(self):
        rng = np.random.default_rng(4)
        base = anisotropic_cloud(rng)
        canon0, _, res = sk.canonicalize_cloud(base)
        assert res.anisotropy > 0.3
        rot = geo.transform_planar(base, PlanarPose(np.zeros(3), np.deg2rad(40)))
        canon1, _, _ = sk.canonicalize_cloud(rot)
        flipped = geo.transform_planar(canon1, PlanarPose(np.zeros(3), np.pi))
        d = min(geo.chamfer(canon0, canon1), geo.chamfer(canon0, flipped))
        assert d < 1e-6

    def test_centroid_at_origin(self):
        rng = np.random.default_rng(5)
        canon, _, _ = sk.canonicalize_cloud(anisotropic_cloud(rng))
        assert np.max(np.abs(canon.points.mean(axis=0))) < 1e-9


class TestSegmentEpisode:
    def test_single_object_spans_to_end(self):
        ep = synthetic_episode([30], T=100)
        segs = sk.segment_episode(ep, HAND)
        assert len(segs) == 1
        assert segs[0].keyframe_index == 30
        assert len(segs[0].canonical_trajectory) == 70

    def test_world_round_trip(self):
        ep = synthetic_episode([30, 80], T=120)
        segs = sk.segment_episode(ep, HAND)
        for seg in segs:
            start = seg.keyframe_index
            for i, (pose_c, _) in enumerate(seg.canonical_trajectory):
                back = seg.keyframe_pose.apply_pose(pose_c)
                orig = ep.frames[start + i].a_arm
                assert np.max(np.abs(back.p - orig.p)) < 1e-9
                assert np.max(np.abs(back.R - orig.R)) < 1e-9

    def test_translation_invariance_of_segments(self):
        shift = np.array([0.15, -0.1, 0.0])
        ep0 = synthetic_episode([30, 80], T=120)
        ep1 = synthetic_episode([30, 80], T=120, shift=shift)
        for s0, s1 in zip(sk.segment_episode(ep0, HAND), sk.segment_episode(ep1, HAND)):
            assert np.max(np.abs(s0.canonical_cloud.points - s1.canonical_cloud.points)) < 1e-9
            for (p0, h0), (p1, h1) in zip(s0.canonical_trajectory, s1.canonical_trajectory):
                assert np.max(np.abs(p0.p - p1.p)) < 1e-9
                assert np.max(np.abs(p0.R - p1.R)) < 1e-9
                assert np.array_equal(h0, h1)

    def test_keyframes_strictly_increase(self):
        ep = synthetic_episode([30, 80, 110], T=150)
        segs = sk.segment_episode(ep, HAND)
        kfs = [s.keyframe_index for s in segs]
        assert kfs == sorted(kfs)
        assert len(set(kfs)) == len(kfs)


def small_library(n_demos=3, T=90):
    eps = [synthetic_episode([20, 60], T=T, demo_id=f"demo{i}") for i in range(n_demos)]
    return sk.build_library("grasp_pull", eps, HAND)


def lib_equal(a, b, tol32=True):
    if a.task != b.task or a.objects != b.objects or set(a.skills) != set(b.skills):
        return False
    for key, sa in a.skills.items():
        sb = b.skills[key]
        pa = sa.canonical_cloud.points.astype(np.float32)
        pb = sb.canonical_cloud.points.astype(np.float32)
        if not np.array_equal(pa, pb):
            return False
        if len(sa.canonical_trajectory) != len(sb.canonical_trajectory):
            return False
        for (qa, ha), (qb, hb) in zip(sa.canonical_trajectory, sb.canonical_trajectory):
            if not (np.array_equal(qa.p, qb.p) and np.array_equal(qa.R, qb.R)
                    and np.array_equal(ha, hb)):
                return False
        if sa.yaw_ambiguous != sb.yaw_ambiguous:
            return False
    return True


class TestLibraryPersistence:
    def test_empty_library_round_trips(self, tmp_path):
        lib = sk.SkillLibrary("none", (), {})
        sk.save_library(lib, tmp_path / "lib")
        back = sk.load_library(tmp_path / "lib")
        assert back.task == "none"
        assert back.skills == {}

    def test_round_trip_and_byte_stability(self, tmp_path):
        lib = small_library()
        sk.save_library(lib, tmp_path / "a")
        back = sk.load_library(tmp_path / "a")
        assert lib_equal(lib, back)
        sk.save_library(back, tmp_path / "b")
        for rel in sorted(p.relative_to(tmp_path / "a")
                          for p in (tmp_path / "a").rglob("*") if p.is_file()):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

    def test_truncated_cloud_names_file(self, tmp_path):
        lib = small_library(1)
        sk.save_library(lib, tmp_path / "lib")
        victim = next((tmp_path / "lib" / "skills").glob("*.dxpc"))
        victim.write_bytes(victim.read_bytes()[:-7])
        with pytest.raises(Exception, match=victim.name) as ei:
            sk.load_library(tmp_path / "lib")
        assert ei.value.code == "corrupt_cloud"

    def test_missing_cloud_file(self, tmp_path):
        lib = small_library(1)
        sk.save_library(lib, tmp_path / "lib")
        next((tmp_path / "lib" / "skills").glob("*.dxpc")).unlink()
        with pytest.raises(MissingCloudFile):
            sk.load_library(tmp_path / "lib")

    def test_version_mismatch(self, tmp_path):
        lib = small_library(1)
        sk.save_library(lib, tmp_path / "lib")
        mani = tmp_path / "lib" / "manifest.yaml"
        mani.write_text(mani.read_text().replace("version: 1", "version: 99"))
        with pytest.raises(VersionMismatch):
            sk.load_library(tmp_path / "lib")

    def test_corrupt_manifest(self, tmp_path):
        (tmp_path / "lib").mkdir()
        (tmp_path / "lib" / "manifest.yaml").write_text("{:not yaml::")
        with pytest.raises(CorruptManifest):
            sk.load_library(tmp_path / "lib")
        with pytest.raises(CorruptManifest):
            sk.load_library(tmp_path / "empty")

    def test_corrupt_trajectory(self, tmp_path):
        lib = small_library(1)
        sk.save_library(lib, tmp_path / "lib")
        victim = next((tmp_path / "lib" / "skills").glob("*.traj"))
        victim.write_text("1.0 2.0 nope\n")
        with pytest.raises(CorruptRecord):
            sk.load_library(tmp_path / "lib")


class TestEpisodePersistence:
    def test_round_trip(self, tmp_path):
        ep = synthetic_episode([20, 50], T=60)
        sk.save_episode(ep, tmp_path / "ep")
        back = sk.load_episode(tmp_path / "ep")
        assert back.id == ep.id
        assert back.objects == ep.objects
        assert len(back.frames) == len(ep.frames)
        f0, f1 = ep.frames[33], back.frames[33]
        assert f1.t == f0.t
        assert np.array_equal(f1.a_arm.p, f0.a_arm.p)
        assert np.array_equal(f1.q_hand, f0.q_hand)
        for oid in ep.objects:
            assert np.array_equal(
                f1.clouds[oid].points,
                f0.clouds[oid].points.astype(np.float32).astype(np.float64))
        # segmentation agrees before and after the round trip
        assert sk.detect_keyframes(back, HAND) == sk.detect_keyframes(ep, HAND)

    def test_missing_cloud(self, tmp_path):
        ep = synthetic_episode([10], T=20)
        sk.save_episode(ep, tmp_path / "ep")
        next((tmp_path / "ep" / "clouds").glob("*.dxpc")).unlink()
        with pytest.raises(MissingCloudFile):
            sk.load_episode(tmp_path / "ep")


class TestValidation:
    def test_library_completeness(self):
        lib = small_library(2)
        broken = dict(lib.skills)
        broken.pop(("demo1", 2))
        with pytest.raises(InvalidArgument):
            sk.SkillLibrary(lib.task, lib.objects, broken)

    def test_episode_time_monotonicity(self):
        fr = sk.Frame(0.0, np.zeros(7), np.zeros(16), Pose6.identity(),
                      np.zeros(16), {"o": PointCloud([[0, 0, 0]])})
        with pytest.raises(InvalidArgument):
            sk.DemoEpisode("x", ("o",), (fr, fr))
