"""Shape-prior vertebra inpainting.

Two deterministic estimators stand in for a learned inpainting model: one
places the scaled-atlas shape of the missing vertebra at a pose interpolated
between its two neighbors, the other averages the neighbors' own shapes
moved to that pose. The fusion arithmetic matches the two-view rule: soft
masks are averaged and thresholded at 0.5, candidate CT estimates are
averaged voxelwise. Everything outside the region of interest stays
bit-identical to the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation, Slerp

from ._backend import kernels
from .atlas import ScaledAtlas
from .registration import RigidTransform, extract_surface, icp_rigid
from .volume import (
    DisplacementField,
    LabelVolume,
    ScalarVolume,
    VolumeGeometry,
    label_centroid,
    warp,
)

SOFT_TISSUE_HU = 40.0
ROI_DILATION_MM = 3.0
FUSE_THRESHOLD = 0.5


class InpaintError(ValueError):
    """Invalid inpainting input or degenerate geometry."""


@dataclass(frozen=True)
class SoftMask:
    """Per-voxel shape probability in [0, 1]."""

    geometry: VolumeGeometry
    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        probs = np.ascontiguousarray(self.probs, dtype=np.float32)
        if tuple(probs.shape) != self.geometry.dims:
            raise InpaintError(f"probs shape {probs.shape} != {self.geometry.dims}")
        if probs.min() < 0.0 or probs.max() > 1.0:
            raise InpaintError("probabilities must lie in [0, 1]")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    def threshold(self, level: float = FUSE_THRESHOLD) -> np.ndarray:
        return self.probs >= level


@dataclass(frozen=True)
class FillStats:
    trabecular_hu: float
    cortical_hu: float
    soft_hu: float = SOFT_TISSUE_HU


@dataclass(frozen=True)
class RegionOfInterest:
    """Axial slab between the fracture's neighbors, plus the remnant voxels."""

    geometry: VolumeGeometry
    box_lo: np.ndarray  # inclusive voxel index
    box_hi: np.ndarray  # exclusive voxel index
    slab_z_mm: tuple[float, float]
    voxels: np.ndarray = field(repr=False)  # bool, editable region

    @property
    def slab_height_mm(self) -> float:
        return self.slab_z_mm[1] - self.slab_z_mm[0]


def neighbor_codes(mask: LabelVolume, fractured_code: int) -> tuple[int, int]:
    """(superior, inferior) codes directly adjacent to the fracture.

    Codes increase down the spine, so the superior neighbor is the largest
    present code below fractured_code and vice versa.
    """
    codes = mask.codes()
    above = [c for c in codes if c < fractured_code]
    below = [c for c in codes if c > fractured_code]
    if not above or not below:
        raise InpaintError(
            f"fractured vertebra {fractured_code} needs neighbors on both sides, have {codes}"
        )
    return max(above), min(below)


def region_of_interest(mask: LabelVolume, fractured_code: int,
                       neighbors: tuple[int, int] | None = None,
                       dilation_mm: float = ROI_DILATION_MM) -> RegionOfInterest:
    """Slab between the inferior neighbor's superior surface and the superior
    neighbor's inferior surface, dilated; healthy-vertebra voxels excluded,
    fractured-remnant voxels included."""
    geom = mask.geometry
    sup, inf = neighbors if neighbors is not None else neighbor_codes(mask, fractured_code)
    sup_idx = np.argwhere(mask.data == sup)
    inf_idx = np.argwhere(mask.data == inf)
    if sup_idx.size == 0 or inf_idx.size == 0:
        raise InpaintError(f"neighbor masks {sup}/{inf} missing voxels")

    z_lo = float(geom.world((0, 0, inf_idx[:, 2].max()))[2])  # top of lower neighbor
    z_hi = float(geom.world((0, 0, sup_idx[:, 2].min()))[2])  # bottom of upper neighbor
    if z_hi <= z_lo:
        raise InpaintError(
            f"no gap between neighbors {sup} and {inf} (z {z_hi:.1f} <= {z_lo:.1f} mm)"
        )

    both = np.vstack([sup_idx, inf_idx])
    pad = np.ceil(dilation_mm / np.asarray(geom.spacing)).astype(int)
    lo = np.array([both[:, 0].min(), both[:, 1].min(),
                   int(np.ceil((z_lo - geom.origin[2]) / geom.spacing[2]))]) - pad
    hi = np.array([both[:, 0].max(), both[:, 1].max(),
                   int(np.floor((z_hi - geom.origin[2]) / geom.spacing[2]))]) + pad + 1
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.asarray(geom.dims))

    voxels = np.zeros(geom.dims, dtype=bool)
    voxels[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = True
    healthy = (mask.data != 0) & (mask.data != fractured_code)
    voxels &= ~healthy
    voxels |= mask.data == fractured_code
    return RegionOfInterest(geom, lo, hi, (z_lo, z_hi), voxels)


def clear_remnant(ct: ScalarVolume, mask: LabelVolume, fractured_code: int,
                  soft_hu: float = SOFT_TISSUE_HU):
    """Erase the fractured remnant: soft-tissue HU, background label."""
    sel = mask.data == fractured_code
    ct_data = np.array(ct.data)
    lb_data = np.array(mask.data)
    ct_data[sel] = soft_hu
    lb_data[sel] = 0
    return ScalarVolume(ct.geometry, ct_data), LabelVolume(mask.geometry, lb_data)


def interpolate_pose(satlas: ScaledAtlas, fractured_code: int,
                     poses: dict[int, RigidTransform]) -> RigidTransform:
    """Pose of the missing vertebra from its neighbors' fitted transforms.

    Translation places the atlas centroid on the chord between the moved
    neighbor centroids at the atlas inter-centroid ratio, preserving the
    atlas's off-chord offset; rotation is the spherical average of the
    neighbor rotations with the same weight. Maps scaled-atlas world to
    target world.
    """
    (sup, t_sup), (inf, t_inf) = sorted(poses.items())
    a_sup = satlas.get(sup).centroid
    a_inf = satlas.get(inf).centroid
    a_frac = satlas.get(fractured_code).centroid

    d_sup = float(np.linalg.norm(a_frac - a_sup))
    d_inf = float(np.linalg.norm(a_frac - a_inf))
    t = d_sup / (d_sup + d_inf)

    rots = Rotation.from_matrix(np.stack([t_sup.rotation, t_inf.rotation]))
    r_frac = Slerp([0.0, 1.0], rots)([t])[0].as_matrix()

    p_sup = t_sup.apply(a_sup)
    p_inf = t_inf.apply(a_inf)
    chord_offset = a_frac - (a_sup + t * (a_inf - a_sup))
    c_frac = p_sup + t * (p_inf - p_sup) + r_frac @ chord_offset
    # full transform: x -> R (x - a_frac) + c_frac
    return RigidTransform(r_frac, c_frac - r_frac @ a_frac)


def _soften(binary: np.ndarray, spacing) -> np.ndarray:
    """Linear 1-voxel edge ramp via signed distance; threshold 0.5 recovers binary."""
    if not np.any(binary):
        return np.zeros(binary.shape, dtype=np.float32)
    h = float(np.mean(spacing))
    d_in = ndimage.distance_transform_edt(binary, sampling=spacing)
    d_out = ndimage.distance_transform_edt(~binary, sampling=spacing)
    return np.clip(0.5 + (d_in - d_out) / (2.0 * h), 0.0, 1.0).astype(np.float32)


def candidate_atlas(satlas: ScaledAtlas, fractured_code: int,
                    poses: dict[int, RigidTransform],
                    geom: VolumeGeometry) -> SoftMask:
    """Scaled-atlas shape of the missing vertebra at the interpolated pose."""
    pose = interpolate_pose(satlas, fractured_code, poses)
    crop = satlas.get(fractured_code).mask
    cg = crop.geometry

    corners = np.array([cg.world(np.asarray(c) * (np.asarray(cg.dims) - 1))
                        for c in np.ndindex(2, 2, 2)])
    moved = pose.apply(corners)
    spacing = np.asarray(geom.spacing)
    origin = np.asarray(geom.origin)
    lo = np.maximum(np.floor((moved.min(axis=0) - 2 - origin) / spacing).astype(int), 0)
    hi = np.minimum(np.ceil((moved.max(axis=0) + 2 - origin) / spacing).astype(int) + 1,
                    np.asarray(geom.dims))
    if np.any(hi <= lo):
        raise InpaintError("interpolated pose falls outside the volume")

    sub = VolumeGeometry(tuple(int(n) for n in hi - lo), geom.spacing, tuple(geom.world(lo)))
    pts = pose.inverse().apply(sub.world_grid().reshape(-1, 3))
    values = kernels.sample_nearest(
        crop.data, np.asarray(cg.origin, float), np.asarray(cg.spacing, float),
        pts, np.int16(0)
    ).reshape(sub.dims)
    probs = np.zeros(geom.dims, dtype=np.float32)
    probs[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = _soften(
        values == fractured_code, geom.spacing
    )
    return SoftMask(geom, probs)


def candidate_neighbors(mask: LabelVolume, fractured_code: int,
                        target_centroid=None) -> SoftMask:
    """Average of the two neighbor shapes moved (in their own local frames)
    to the missing vertebra's position."""
    sup, inf = neighbor_codes(mask, fractured_code)
    c_sup = label_centroid(mask, sup)
    c_inf = label_centroid(mask, inf)
    if target_centroid is None:
        target_centroid = 0.5 * (c_sup + c_inf)
    target_centroid = np.asarray(target_centroid, float)

    geom = mask.geometry
    acc = np.zeros(geom.dims, dtype=np.float64)
    for code, centroid in ((sup, c_sup), (inf, c_inf)):
        indicator = ScalarVolume(geom, (mask.data == code).astype(np.float32))
        vec = np.broadcast_to(centroid - target_centroid, geom.dims + (3,))
        shift = DisplacementField(geom, np.ascontiguousarray(vec))
        moved = warp(indicator, shift, fill=0.0)
        acc += moved.data
    return SoftMask(geom, np.clip(acc / 2.0, 0.0, 1.0).astype(np.float32))


def candidate_ct_fill(soft: SoftMask, ct: ScalarVolume, fill: FillStats,
                      roi: RegionOfInterest) -> ScalarVolume:
    """Piecewise-constant CT estimate for one candidate: cortical rim,
    trabecular interior, soft tissue elsewhere in the ROI."""
    data = np.array(ct.data)
    inside = soft.threshold() & roi.voxels
    rim = inside & ~ndimage.binary_erosion(inside)
    data[roi.voxels] = fill.soft_hu
    data[inside] = fill.trabecular_hu
    data[rim] = fill.cortical_hu
    return ScalarVolume(ct.geometry, data)


@dataclass(frozen=True)
class InpaintResult:
    ct: ScalarVolume
    mask: LabelVolume
    code: int
    fused: SoftMask
    candidates: tuple[SoftMask, ...]
    roi: RegionOfInterest

    def inpainted_volume_ml(self) -> float:
        count = int(np.count_nonzero(self.mask.data == self.code))
        return count * self.mask.geometry.voxel_volume_mm3 / 1000.0


def fuse(cands, ct: ScalarVolume, fill: FillStats, roi: RegionOfInterest,
         fractured_code: int, mask: LabelVolume,
         candidate_cts=None) -> InpaintResult:
    """Average candidate soft masks (threshold 0.5) and candidate intensities.

    Only ROI voxels change; the rest of ct/mask pass through bit-identical.
    """
    if len(cands) < 2:
        raise InpaintError(f"need >= 2 candidates, got {len(cands)}")
    geom = ct.geometry
    for cand in cands:
        if cand.geometry != geom:
            raise InpaintError("candidate geometry mismatch")
    if mask.geometry != geom:
        raise InpaintError("mask geometry mismatch")

    fused_probs = np.mean([c.probs.astype(np.float64) for c in cands], axis=0)
    fused = SoftMask(geom, fused_probs.astype(np.float32))
    final = fused.threshold() & roi.voxels

    lb = np.array(mask.data)
    lb[roi.voxels] = 0
    lb[final] = fractured_code

    data = np.array(ct.data)
    if candidate_cts is not None:
        if len(candidate_cts) != len(cands):
            raise InpaintError("candidate CT count mismatch")
        stacked = np.mean([c.data.astype(np.float64) for c in candidate_cts], axis=0)
        data[roi.voxels] = stacked[roi.voxels]
    else:
        rim = final & ~ndimage.binary_erosion(final)
        data[roi.voxels] = fill.soft_hu
        data[final] = fill.trabecular_hu
        data[rim] = fill.cortical_hu

    return InpaintResult(
        ct=ScalarVolume(geom, data),
        mask=LabelVolume(geom, lb),
        code=fractured_code,
        fused=fused,
        candidates=tuple(cands),
        roi=roi,
    )


def estimate_fill_stats(ct: ScalarVolume, mask: LabelVolume, codes) -> FillStats:
    """Trabecular/cortical HU from the interiors and rims of given vertebrae."""
    sel = np.isin(mask.data, list(codes))
    if not np.any(sel):
        raise InpaintError(f"no voxels for codes {codes}")
    interior = ndimage.binary_erosion(sel, iterations=2)
    rim = sel & ~ndimage.binary_erosion(sel)
    trab = float(np.mean(ct.data[interior])) if np.any(interior) else float(np.mean(ct.data[sel]))
    cort = float(np.mean(ct.data[rim])) if np.any(rim) else trab
    return FillStats(trabecular_hu=trab, cortical_hu=cort)


def inpaint_vertebra(ct: ScalarVolume, mask: LabelVolume, fractured_code: int,
                     satlas: ScaledAtlas) -> InpaintResult:
    """ROI -> atlas candidate + neighbor candidate -> fusion.

    Works on a straightened spine (the intended path) or directly on the
    fractured one (the no-straightening ablation)."""
    if fractured_code not in satlas.codes():
        raise InpaintError(f"code {fractured_code} not in atlas {satlas.codes()}")
    sup, inf = neighbor_codes(mask, fractured_code)
    roi = region_of_interest(mask, fractured_code, (sup, inf))
    fill = estimate_fill_stats(ct, mask, (sup, inf))
    ct_clear, mask_clear = clear_remnant(ct, mask, fractured_code, fill.soft_hu)

    poses = {}
    for code in (sup, inf):
        src = extract_surface(satlas.get(code).mask, code)
        tgt = extract_surface(mask_clear, code)
        poses[code], _ = icp_rigid(src, tgt)

    pose = interpolate_pose(satlas, fractured_code, poses)
    target_centroid = pose.apply(satlas.get(fractured_code).centroid)

    cand_a = candidate_atlas(satlas, fractured_code, poses, ct.geometry)
    cand_b = candidate_neighbors(mask_clear, fractured_code, target_centroid)
    cand_cts = [candidate_ct_fill(c, ct_clear, fill, roi) for c in (cand_a, cand_b)]
    return fuse([cand_a, cand_b], ct_clear, fill, roi, fractured_code, mask_clear,
                candidate_cts=cand_cts)
