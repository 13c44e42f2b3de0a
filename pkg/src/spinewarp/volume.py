"""Voxel-grid data model: geometry, volumes, sampling, warping, projections.

Conventions used throughout the package:

* array axis 0 = x (left-right), axis 1 = y (anterior-posterior),
  axis 2 = z (inferior-superior, the spine axis).
* voxel coordinates refer to voxel centers; world(p) = origin + p * spacing,
  all in millimeters, axis-aligned (no rotation or shear).
* all volumes are immutable after construction and safe to share read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels

AIR_HU = -1000.0
BACKGROUND_LABEL = 0

AXES = {"sagittal": 0, "coronal": 1, "axial": 2}


class VolumeError(ValueError):
    """Invalid volume construction or operation."""


@dataclass(frozen=True)
class VolumeGeometry:
    """Axis-aligned voxel grid: dims (h,w,d), spacing mm, origin mm."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(n) < 1 for n in self.dims):
            raise VolumeError(f"dims must be 3 positive ints, got {self.dims}")
        if len(self.spacing) != 3 or any(not (s > 0) for s in self.spacing):
            raise VolumeError(f"spacing must be strictly positive, got {self.spacing}")
        if not np.all(np.isfinite(self.origin)):
            raise VolumeError(f"origin must be finite, got {self.origin}")
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def shape(self):
        return self.dims

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def world(self, index) -> np.ndarray:
        """World position (mm) of a (possibly fractional) voxel index; vectorized."""
        idx = np.asarray(index, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def index(self, world) -> np.ndarray:
        """Continuous voxel index of a world position; vectorized."""
        w = np.asarray(world, dtype=np.float64)
        return (w - np.asarray(self.origin)) / np.asarray(self.spacing)

    def world_grid(self) -> np.ndarray:
        """(h,w,d,3) array of voxel-center world positions."""
        h, w, d = self.dims
        gx, gy, gz = np.meshgrid(
            self.origin[0] + np.arange(h) * self.spacing[0],
            self.origin[1] + np.arange(w) * self.spacing[1],
            self.origin[2] + np.arange(d) * self.spacing[2],
            indexing="ij",
        )
        return np.stack([gx, gy, gz], axis=-1)

    def _arrays(self):
        return (
            np.asarray(self.origin, dtype=np.float64),
            np.asarray(self.spacing, dtype=np.float64),
        )


def _check_geometry_data(geometry, data, name):
    if tuple(data.shape) != geometry.dims:
        raise VolumeError(f"{name} data shape {data.shape} != geometry dims {geometry.dims}")


@dataclass(frozen=True)
class ScalarVolume:
    """3D grid of CT intensities (HU)."""

    geometry: VolumeGeometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        _check_geometry_data(self.geometry, data, "ScalarVolume")
        if not np.all(np.isfinite(data)):
            raise VolumeError("ScalarVolume data must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class LabelVolume:
    """3D grid of vertebra label codes (0 = background, 1..24 = C1..L5)."""

    geometry: VolumeGeometry
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data)
        if not np.issubdtype(data.dtype, np.integer):
            raise VolumeError(f"LabelVolume data must be integer, got {data.dtype}")
        data = data.astype(np.int16, copy=False)
        _check_geometry_data(self.geometry, data, "LabelVolume")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def codes(self) -> list[int]:
        """Sorted nonzero label codes present in the volume."""
        present = np.unique(self.data)
        return [int(c) for c in present if c != 0]

    def mask(self, code: int) -> np.ndarray:
        return self.data == code


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel backward-mapping 3-vectors (mm) on an output grid.

    Output voxel p samples input world position world(p) + vectors[p].
    """

    geometry: VolumeGeometry
    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        vec = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if tuple(vec.shape) != self.geometry.dims + (3,):
            raise VolumeError(
                f"DisplacementField shape {vec.shape} != {self.geometry.dims + (3,)}"
            )
        if not np.all(np.isfinite(vec)):
            raise VolumeError("DisplacementField vectors must be finite")
        vec.setflags(write=False)
        object.__setattr__(self, "vectors", vec)

    @classmethod
    def zero(cls, geometry: VolumeGeometry) -> "DisplacementField":
        return cls(geometry, np.zeros(geometry.dims + (3,), dtype=np.float64))


def _check_positions(pts):
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    if pts.shape[-1] != 3:
        raise VolumeError(f"world positions must be 3-vectors, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise VolumeError("world positions must be finite")
    return pts


def sample_trilinear(vol: ScalarVolume, world_pos, fill: float = AIR_HU):
    """Trilinear interpolation at world positions; outside the grid -> fill."""
    pts = _check_positions(world_pos)
    origin, spacing = vol.geometry._arrays()
    out = kernels.sample_trilinear(vol.data, origin, spacing, pts, float(fill))
    return float(out[0]) if np.asarray(world_pos).ndim == 1 else out


def sample_nearest(vol: LabelVolume, world_pos, fill: int = BACKGROUND_LABEL):
    """Nearest-neighbor label lookup at world positions; outside the grid -> fill."""
    pts = _check_positions(world_pos)
    origin, spacing = vol.geometry._arrays()
    out = kernels.sample_nearest(vol.data, origin, spacing, pts, int(fill))
    return int(out[0]) if np.asarray(world_pos).ndim == 1 else out


def warp(vol, disp: DisplacementField, fill=None):
    """Backward warp onto disp.geometry: out[p] = sample(vol, world(p) + disp[p]).

    Trilinear for ScalarVolume, nearest for LabelVolume.
    """
    s_origin, s_spacing = vol.geometry._arrays()
    o_origin, o_spacing = disp.geometry._arrays()
    if isinstance(vol, ScalarVolume):
        fill = AIR_HU if fill is None else float(fill)
        out = kernels.warp_trilinear(
            vol.data, s_origin, s_spacing, disp.vectors, o_origin, o_spacing, fill
        )
        return ScalarVolume(disp.geometry, out)
    if isinstance(vol, LabelVolume):
        fill = BACKGROUND_LABEL if fill is None else int(fill)
        out = kernels.warp_nearest(
            vol.data, s_origin, s_spacing, disp.vectors, o_origin, o_spacing, fill
        )
        return LabelVolume(disp.geometry, out)
    raise VolumeError(f"cannot warp {type(vol).__name__}")


def mip(vol: ScalarVolume, axis: str = "sagittal") -> np.ndarray:
    """Maximum intensity projection along a named axis -> 2D float32 image."""
    if axis not in AXES:
        raise VolumeError(f"axis must be one of {sorted(AXES)}, got {axis!r}")
    return np.max(vol.data, axis=AXES[axis])


def volume_of_label(mask: LabelVolume, code: int) -> float:
    """Physical volume (mL) of one label; absent code -> 0.0."""
    count = int(np.count_nonzero(mask.data == code))
    return count * mask.geometry.voxel_volume_mm3 / 1000.0


def label_centroid(mask: LabelVolume, code: int) -> np.ndarray:
    """World-space mean of the voxel centers carrying `code` (mm)."""
    idx = np.argwhere(mask.data == code)
    if idx.size == 0:
        raise VolumeError(f"label {code} absent from mask")
    return mask.geometry.world(idx.mean(axis=0))


def label_centroids(mask: LabelVolume) -> dict[int, np.ndarray]:
    return {code: label_centroid(mask, code) for code in mask.codes()}
