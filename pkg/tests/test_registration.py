import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinewarp.registration import (
    RegistrationError,
    RigidTransform,
    SurfaceCloud,
    extract_surface,
    icp_rigid,
    kabsch,
)
from spinewarp.volume import LabelVolume, VolumeGeometry


def rot_about(axis, deg):
    from scipy.spatial.transform import Rotation

    return Rotation.from_rotvec(np.deg2rad(deg) * np.asarray(axis, float)).as_matrix()


def block_mask(shape, lo, size, code=1, spacing=(1.0, 1.0, 1.0)):
    data = np.zeros(shape, dtype=np.int16)
    sl = tuple(slice(a, a + b) for a, b in zip(lo, size))
    data[sl] = code
    return LabelVolume(VolumeGeometry(shape, spacing), data)


class TestRigidTransform:
    def test_identity(self):
        t = RigidTransform.identity()
        np.testing.assert_allclose(t.apply([1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])
        assert t.rotation_angle_deg() == pytest.approx(0.0)

    def test_compose_inverse(self):
        a = RigidTransform(rot_about([0, 0, 1], 30), np.array([1.0, -2.0, 3.0]))
        b = RigidTransform(rot_about([1, 0, 0], -15), np.array([0.0, 4.0, 0.0]))
        p = np.array([2.0, 0.5, -1.0])
        np.testing.assert_allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-12)
        ident = a.compose(a.inverse())
        np.testing.assert_allclose(ident.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(ident.translation, 0.0, atol=1e-12)

    def test_rotation_angle(self):
        t = RigidTransform(rot_about([0, 1, 0], 25.0), np.zeros(3))
        assert t.rotation_angle_deg() == pytest.approx(25.0, abs=1e-9)

    def test_invalid_rotation_rejected(self):
        with pytest.raises(RegistrationError):
            RigidTransform(np.eye(3) * 2.0, np.zeros(3))
        with pytest.raises(RegistrationError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))  # improper

    def test_matrix3x4(self):
        t = RigidTransform(np.eye(3), np.array([1.0, 2.0, 3.0]))
        m = t.matrix3x4()
        assert m.shape == (3, 4)
        np.testing.assert_allclose(m[:, 3], [1.0, 2.0, 3.0])


class TestSurfaceExtraction:
    def test_cube_3_has_26_surface_voxels(self):
        mask = block_mask((7, 7, 7), (2, 2, 2), (3, 3, 3))
        assert extract_surface(mask, 1).points.shape[0] == 26

    def test_cube_2_is_all_surface(self):
        mask = block_mask((6, 6, 6), (2, 2, 2), (2, 2, 2))
        assert extract_surface(mask, 1).points.shape[0] == 8

    def test_single_voxel(self):
        mask = block_mask((5, 5, 5), (2, 2, 2), (1, 1, 1))
        assert extract_surface(mask, 1).points.shape[0] == 1

    def test_absent_code(self):
        mask = block_mask((5, 5, 5), (2, 2, 2), (1, 1, 1))
        with pytest.raises(RegistrationError):
            extract_surface(mask, 9)

    def test_points_in_world_mm(self):
        mask = block_mask((5, 5, 5), (2, 2, 2), (1, 1, 1), spacing=(2.0, 2.0, 2.0))
        np.testing.assert_allclose(extract_surface(mask, 1).points[0], [4.0, 4.0, 4.0])


class TestKabsch:
    def test_exact_recovery(self, rng):
        src = SurfaceCloud(rng.normal(size=(50, 3)) * 10.0)
        rot = rot_about(rng.normal(size=3), 12.0)
        t = np.array([3.0, -7.0, 1.0])
        tgt = SurfaceCloud(src.points @ rot.T + t)
        est = kabsch(src, tgt)
        np.testing.assert_allclose(est.rotation, rot, atol=1e-9)
        np.testing.assert_allclose(est.translation, t, atol=1e-8)

    def test_size_mismatch(self, rng):
        a = SurfaceCloud(rng.normal(size=(10, 3)))
        b = SurfaceCloud(rng.normal(size=(11, 3)))
        with pytest.raises(RegistrationError):
            kabsch(a, b)

    def test_degenerate_collinear(self):
        line = np.stack([np.arange(10.0), np.zeros(10), np.zeros(10)], axis=1)
        with pytest.raises(RegistrationError):
            kabsch(SurfaceCloud(line), SurfaceCloud(line))

    def test_reflection_not_produced(self, rng):
        """Even with noisy targets the fit stays a proper rotation."""
        src = SurfaceCloud(rng.normal(size=(40, 3)) * 5.0)
        tgt = SurfaceCloud(src.points + rng.normal(size=(40, 3)) * 0.5)
        est = kabsch(src, tgt)
        assert np.linalg.det(est.rotation) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(
    deg=st.floats(0.0, 15.0),
    seed=st.integers(0, 2**20),
)
def test_kabsch_property_random_transforms(deg, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    src = SurfaceCloud(rng.normal(size=(30, 3)) * 8.0 + 5.0)
    rot = rot_about(rng.normal(size=3) + 1e-3, deg)
    t = rng.uniform(-10, 10, size=3)
    tgt = SurfaceCloud(src.points @ rot.T + t)
    est = kabsch(src, tgt)
    np.testing.assert_allclose(est.apply(src.points), tgt.points, atol=1e-6)


@pytest.fixture(scope="module")
def vertebra_cloud(unit_atlas):
    cloud = extract_surface(unit_atlas.get(21).mask, 21)
    return cloud.subsampled(3000)


class TestICP:
    def test_recovers_moderate_transform(self, vertebra_cloud, rng):
        rot = rot_about([1, 0.2, 0.1], 10.0)
        t = np.array([4.0, -6.0, 8.0])
        true = RigidTransform(rot, t)
        tgt = SurfaceCloud(true.apply(vertebra_cloud.points))
        est, res = icp_rigid(vertebra_cloud, tgt)
        delta = est.compose(true.inverse())
        assert delta.rotation_angle_deg() < 1.0
        center = tgt.centroid()
        assert np.linalg.norm(est.apply(true.inverse().apply(center)) - center) < 0.5
        assert res < 0.5

    def test_history_rms_non_increasing(self, vertebra_cloud):
        rot = rot_about([0, 1, 0], 8.0)
        tgt = SurfaceCloud(vertebra_cloud.points @ rot.T + np.array([2.0, 1.0, -3.0]))
        history = []
        icp_rigid(vertebra_cloud, tgt, history=history)
        assert len(history) >= 2
        diffs = np.diff(history)
        assert np.all(diffs <= 1e-9)

    def test_translation_equivariance(self, vertebra_cloud):
        """Shifting the target shifts the recovered pose by the same amount."""
        rot = rot_about([1, 0, 0], 6.0)
        base_tgt = SurfaceCloud(vertebra_cloud.points @ rot.T)
        shift = np.array([5.0, -3.0, 2.0])
        moved_tgt = SurfaceCloud(base_tgt.points + shift)
        est_a, _ = icp_rigid(vertebra_cloud, base_tgt)
        est_b, _ = icp_rigid(vertebra_cloud, moved_tgt)
        delta = est_b.compose(est_a.inverse())
        assert delta.rotation_angle_deg() < 2.0
        assert np.linalg.norm(est_b.apply(vertebra_cloud.centroid())
                              - est_a.apply(vertebra_cloud.centroid()) - shift) < 2.0

    def test_identity_when_aligned(self, vertebra_cloud):
        est, res = icp_rigid(vertebra_cloud, vertebra_cloud)
        assert res < 1e-9
        assert est.rotation_angle_deg() < 1e-6
        assert np.linalg.norm(est.translation) < 1e-6

    def test_subsampling_limits_points(self, rng):
        cloud = SurfaceCloud(rng.normal(size=(50000, 3)))
        assert cloud.subsampled(20000).points.shape[0] <= 20000

    def test_empty_cloud_rejected(self):
        with pytest.raises(RegistrationError):
            SurfaceCloud(np.zeros((0, 3)))
