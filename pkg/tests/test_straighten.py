import numpy as np
import pytest
from scipy.spatial.distance import cdist

from spinewarp.analysis import dice, fracture_distance
from spinewarp.registration import RigidTransform
from spinewarp.straighten import (
    StraightenError,
    combine_fields,
    distance_map,
    inside_field_exactness_check,
    output_grid,
    rigid_field,
    straighten_spine,
)
from spinewarp.volume import (
    DisplacementField,
    LabelVolume,
    ScalarVolume,
    VolumeGeometry,
    label_centroids,
    volume_of_label,
    warp,
)


def rot_about(axis, deg):
    from scipy.spatial.transform import Rotation

    return Rotation.from_rotvec(np.deg2rad(deg) * np.asarray(axis, float)).as_matrix()


class TestDistanceMap:
    def test_matches_bruteforce_on_small_volume(self, rng):
        geom = VolumeGeometry((12, 10, 9), (0.7, 1.3, 2.0))
        data = np.zeros(geom.dims, dtype=np.int16)
        fg = rng.random(geom.dims) < 0.05
        fg[5, 5, 5] = True
        data[fg] = 3
        mask = LabelVolume(geom, data)
        dm = distance_map(mask, 3)
        all_pts = geom.world_grid().reshape(-1, 3)
        fg_pts = geom.world(np.argwhere(fg))
        oracle = cdist(all_pts, fg_pts).min(axis=1).reshape(geom.dims)
        np.testing.assert_allclose(dm.values, oracle, atol=1e-9)

    def test_zero_inside_label(self, healthy_case):
        _, mask, _ = healthy_case
        dm = distance_map(mask, 20)
        assert np.all(dm.values[mask.data == 20] == 0.0)
        assert np.all(dm.values[mask.data != 20] > 0.0)

    def test_absent_label(self, healthy_case):
        _, mask, _ = healthy_case
        with pytest.raises(StraightenError):
            distance_map(mask, 1)


def toy_setup():
    """Two-vertebra toy: blocks at known positions with constant fields."""
    geom = VolumeGeometry((9, 3, 9), (1, 1, 1))
    data = np.zeros(geom.dims, dtype=np.int16)
    data[3:6, :, 0:2] = 1
    data[3:6, :, 5:9] = 2
    membership = LabelVolume(geom, data)
    dmaps = {c: distance_map(membership, c) for c in (1, 2)}
    return geom, membership, dmaps


class TestCombineFields:
    def test_weighted_average_example(self):
        """D1=1, D2=3 with F1=(4,0,0), F2=0 blends to (3,0,0)."""
        geom, membership, dmaps = toy_setup()
        f1 = np.zeros(geom.dims + (3,))
        f1[..., 0] = 4.0
        fields = {1: DisplacementField(geom, f1), 2: DisplacementField.zero(geom)}
        combined = combine_fields(fields, dmaps, membership)
        # between the blocks, a voxel 1 mm from label 1 and 3 mm from label 2
        sel = np.isclose(dmaps[1].values, 1.0) & np.isclose(dmaps[2].values, 3.0)
        assert np.any(sel)
        expected = (4.0 / 1.0 + 0.0 / 3.0) / (1.0 / 1.0 + 1.0 / 3.0)
        assert expected == pytest.approx(3.0)
        np.testing.assert_allclose(combined.vectors[sel][:, 0], 3.0, atol=1e-12)
        np.testing.assert_allclose(combined.vectors[sel][:, 1:], 0.0, atol=1e-12)

    def test_membership_voxels_copy_verbatim(self):
        geom, membership, dmaps = toy_setup()
        rng = np.random.Generator(np.random.PCG64(5))
        fields = {
            c: DisplacementField(geom, rng.normal(size=geom.dims + (3,))) for c in (1, 2)
        }
        combined = combine_fields(fields, dmaps, membership)
        for c in (1, 2):
            sel = membership.data == c
            assert np.array_equal(combined.vectors[sel], fields[c].vectors[sel])

    def test_partition_of_unity(self):
        """Identical constant fields blend back to the same constant."""
        geom, membership, dmaps = toy_setup()
        const = np.array([1.5, -2.0, 0.25])
        vec = np.broadcast_to(const, geom.dims + (3,)).copy()
        fields = {c: DisplacementField(geom, vec) for c in (1, 2)}
        combined = combine_fields(fields, dmaps, membership)
        np.testing.assert_allclose(combined.vectors, vec, atol=1e-9)

    def test_convexity_componentwise(self):
        geom, membership, dmaps = toy_setup()
        rng = np.random.Generator(np.random.PCG64(6))
        fields = {
            c: DisplacementField(geom, rng.uniform(-5, 5, size=geom.dims + (3,)))
            for c in (1, 2)
        }
        combined = combine_fields(fields, dmaps, membership)
        stack = np.stack([fields[c].vectors for c in (1, 2)])
        free = membership.data == 0
        lo = stack.min(axis=0)[free]
        hi = stack.max(axis=0)[free]
        assert np.all(combined.vectors[free] >= lo - 1e-12)
        assert np.all(combined.vectors[free] <= hi + 1e-12)

    def test_mismatched_codes_rejected(self):
        geom, membership, dmaps = toy_setup()
        fields = {1: DisplacementField.zero(geom)}
        with pytest.raises(StraightenError):
            combine_fields(fields, dmaps, membership)

    def test_fractured_label_rides_along(self):
        """Membership labels without a field still get the blended average."""
        geom, membership, dmaps = toy_setup()
        data = np.array(membership.data)
        data[4, 1, 4] = 9  # fractured label, no field of its own
        membership9 = LabelVolume(geom, data)
        f1 = np.zeros(geom.dims + (3,))
        f1[..., 0] = 4.0
        fields = {1: DisplacementField(geom, f1), 2: DisplacementField.zero(geom)}
        combined = combine_fields(fields, dmaps, membership9)
        d1 = dmaps[1].values[4, 1, 4]
        d2 = dmaps[2].values[4, 1, 4]
        expected = (4.0 / d1) / (1.0 / d1 + 1.0 / d2)
        assert combined.vectors[4, 1, 4, 0] == pytest.approx(expected, rel=1e-12)


class TestRigidWarp:
    def test_rigid_field_matches_transform(self):
        geom = VolumeGeometry((4, 4, 4), (1, 1, 1), (1.0, 2.0, 3.0))
        t = RigidTransform(rot_about([0, 0, 1], 20.0), np.array([1.0, 0.0, -2.0]))
        fld = rigid_field(t, geom)
        w = geom.world_grid().reshape(-1, 3)
        np.testing.assert_allclose(
            w + fld.vectors.reshape(-1, 3), t.apply(w), atol=1e-12
        )

    def test_rigid_warp_preserves_shape_dice(self, healthy_case):
        """Warping with a rigid field keeps vertebra shapes (Dice >= 0.85)."""
        _, mask, _ = healthy_case
        geom = mask.geometry
        t = RigidTransform(rot_about([1, 0, 0], 7.0), np.array([3.0, -2.0, 5.0]))
        # backward field for "move content by t": sample at t^-1(p)
        inv = t.inverse()
        w = geom.world_grid()
        vec = w @ (inv.rotation - np.eye(3)).T + inv.translation
        moved = warp(mask, DisplacementField(geom, vec))
        code = 20
        orig_n = np.count_nonzero(mask.data == code)
        # compare moved mask against analytically moved voxel positions
        idx = np.argwhere(moved.data == code)
        back = inv.apply(geom.world(idx))
        back_idx = np.rint(geom.index(back)).astype(int)
        ok = np.all((back_idx >= 0) & (back_idx < np.asarray(geom.dims)), axis=1)
        hits = mask.data[tuple(back_idx[ok].T)] == code
        d = 2.0 * hits.sum() / (idx.shape[0] + orig_n)
        assert d >= 0.85


class TestStraightenSpine:
    def test_output_contract(self, pipeline_run, fractured_case):
        out = pipeline_run
        assert out.fractured == (21,)
        assert set(out.transforms) == {17, 18, 19, 20, 22, 23, 24}
        assert out.ct.geometry == out.combined_field.geometry
        assert out.mask.geometry == out.combined_field.geometry
        assert 0.9 < out.scale < 1.1
        assert all(r < 1.5 for r in out.residuals_mm.values())

    def test_inside_field_exactness_zero(self, pipeline_run):
        check = inside_field_exactness_check(pipeline_run)
        assert check["max_deviation_mm"] == 0.0
        assert all(v == 0.0 for v in check["per_code"].values())

    def test_straightening_restores_fracture_distance(self, pipeline_run, fractured_case):
        _, _, f_truth = fractured_case
        cents = label_centroids(pipeline_run.mask)
        restored = fracture_distance(cents, 21)
        pre = fracture_distance(f_truth.healthy_centroids_mm, 21)
        collapsed = fracture_distance(f_truth.centroids_mm, 21)
        assert abs(restored - pre) < 2.0
        assert abs(restored - pre) < abs(collapsed - pre)

    def test_healthy_volumes_roughly_preserved(self, pipeline_run, fractured_case):
        _, f_mask, _ = fractured_case
        for code in (19, 20, 22, 23):
            before = volume_of_label(f_mask, code)
            after = volume_of_label(pipeline_run.mask, code)
            assert after == pytest.approx(before, rel=0.10)

    def test_fixed_point_on_atlas_source(self, unit_atlas):
        """Straightening the spine the atlas was built from is a near no-op."""
        from spinewarp.phantom import PhantomSpec, generate_healthy

        ct, mask, _ = generate_healthy(PhantomSpec(seed=2))
        out = straighten_spine(ct, mask, [21], unit_atlas)
        assert out.scale == pytest.approx(1.0, abs=1e-6)
        for code, t in out.transforms.items():
            assert t.rotation_angle_deg() < 0.5
            assert np.linalg.norm(t.translation) < 0.5
        # compare intensities over the original foreground, mapped into the
        # output grid (same world positions, different grid offsets)
        sel = np.argwhere(mask.data != 0)
        w = mask.geometry.world(sel)
        idx = np.rint(out.ct.geometry.index(w)).astype(int)
        ok = np.all((idx >= 0) & (idx < np.asarray(out.ct.geometry.dims)), axis=1)
        diff = np.abs(out.ct.data[tuple(idx[ok].T)] - ct.data[tuple(sel[ok].T)])
        assert float(np.mean(diff)) < 1.0

    def test_fractured_code_must_be_present(self, healthy_case, unit_atlas):
        ct, mask, _ = healthy_case
        with pytest.raises(StraightenError):
            straighten_spine(ct, mask, [5], unit_atlas)

    def test_needs_three_healthy_codes(self, healthy_case, unit_atlas):
        ct, mask, _ = healthy_case
        with pytest.raises(StraightenError):
            straighten_spine(ct, mask, [18, 19, 20, 21, 22, 23], unit_atlas)

    def test_output_grid_covers_scaled_atlas(self, pipeline_run):
        geom = pipeline_run.ct.geometry
        satlas = pipeline_run.scaled_atlas
        grid = output_grid(satlas, satlas.codes(), geom.spacing)
        lo = np.asarray(grid.origin)
        hi = grid.world(np.asarray(grid.dims) - 1)
        for code in satlas.codes():
            g = satlas.get(code).mask.geometry
            assert np.all(np.asarray(g.origin) >= lo)
            assert np.all(g.world(np.asarray(g.dims) - 1) <= hi)
