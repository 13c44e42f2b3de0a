"""Healthy-spine atlas: per-vertebra shapes + centroids, and patient scaling.

The patient/atlas height comparison sums inter-centroid distances after
projecting the centroids onto the plane of their first two principal
components, which cancels out-of-plane positioning differences. Each spine
gets its own PCA; pairs that span an excluded (fractured) code are omitted
from both sums.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nifti
from .volume import LabelVolume, VolumeGeometry, label_centroid
from ._backend import kernels

ATLAS_INDEX_VERSION = 1
DEFAULT_CROP_MARGIN_MM = 5.0


class AtlasError(ValueError):
    """Invalid atlas construction or scaling input."""


@dataclass(frozen=True)
class AtlasVertebra:
    code: int
    centroid: np.ndarray  # world mm
    mask: LabelVolume  # crop holding values {0, code}


@dataclass(frozen=True)
class Atlas:
    vertebrae: tuple[AtlasVertebra, ...]

    def __post_init__(self):
        codes = [v.code for v in self.vertebrae]
        if len(codes) != len(set(codes)):
            raise AtlasError(f"duplicate vertebra codes in atlas: {codes}")
        if sorted(codes) != codes:
            raise AtlasError("atlas vertebrae must be ordered by code")
        zs = [float(v.centroid[2]) for v in self.vertebrae]
        dz = np.diff(zs)
        if len(zs) > 1 and not (np.all(dz > 0) or np.all(dz < 0)):
            raise AtlasError("atlas centroids must be strictly ordered along the spine axis")
        for v in self.vertebrae:
            if not np.any(v.mask.data == v.code):
                raise AtlasError(f"atlas mask for code {v.code} is empty")

    def codes(self) -> list[int]:
        return [v.code for v in self.vertebrae]

    def get(self, code: int) -> AtlasVertebra:
        for v in self.vertebrae:
            if v.code == code:
                return v
        raise AtlasError(f"code {code} not in atlas {self.codes()}")

    def centroids(self) -> dict[int, np.ndarray]:
        return {v.code: v.centroid for v in self.vertebrae}


@dataclass(frozen=True)
class ScaledAtlas(Atlas):
    source: Atlas = None
    scale: float = 1.0


def centroid_chain_length(centroids: dict[int, np.ndarray], exclude=frozenset()) -> float:
    """Sum of consecutive inter-centroid distances in the 2-PC plane (mm).

    Consecutive pairs whose code interval contains an excluded code are
    omitted. Needs >= 3 non-excluded centroids.
    """
    exclude = set(exclude)
    codes = [c for c in sorted(centroids) if c not in exclude]
    if len(codes) < 3:
        raise AtlasError(f"need >= 3 centroids after exclusion, got {len(codes)}")
    pts = np.array([np.asarray(centroids[c], float) for c in codes])
    centered = pts - pts.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    if svals[0] <= 1e-12:
        raise AtlasError("degenerate centroids: all points identical")
    proj = centered @ vt[:2].T

    total = 0.0
    for (a, pa), (b, pb) in zip(zip(codes, proj), zip(codes[1:], proj[1:])):
        if any(a < e < b for e in exclude):
            continue
        total += float(np.linalg.norm(pb - pa))
    return total


def compute_scale(patient_centroids: dict[int, np.ndarray], atlas: Atlas,
                  fractured=frozenset()) -> float:
    """Patient / atlas chain-length ratio over their common healthy codes."""
    fractured = set(fractured)
    common = sorted((set(patient_centroids) & set(atlas.codes())) - fractured)
    if len(common) < 3:
        raise AtlasError(f"need >= 3 common non-fractured codes, got {common}")
    atlas_centroids = atlas.centroids()
    patient = {c: patient_centroids[c] for c in common}
    reference = {c: atlas_centroids[c] for c in common}
    return centroid_chain_length(patient, fractured) / centroid_chain_length(
        reference, fractured
    )


def _scale_mask(mask: LabelVolume, center: np.ndarray, scale: float) -> LabelVolume:
    geom = mask.geometry
    dims = tuple(max(1, int(round(n * scale))) for n in geom.dims)
    origin = tuple(center + scale * (np.asarray(geom.origin) - center))
    new_geom = VolumeGeometry(dims, geom.spacing, origin)
    # sample the source crop at the pre-image of each new voxel center
    pts = new_geom.world_grid().reshape(-1, 3)
    pts = center[np.newaxis, :] + (pts - center[np.newaxis, :]) / scale
    s_origin = np.asarray(geom.origin, float)
    s_spacing = np.asarray(geom.spacing, float)
    data = kernels.sample_nearest(mask.data, s_origin, s_spacing, pts, np.int16(0))
    return LabelVolume(new_geom, data.reshape(dims))


def scale_atlas(atlas: Atlas, scale: float) -> ScaledAtlas:
    """Scale centroids and masks isotropically about the atlas centroid mean."""
    if not scale > 0:
        raise AtlasError(f"scale must be positive, got {scale}")
    center = np.mean([v.centroid for v in atlas.vertebrae], axis=0)
    if scale == 1.0:
        scaled = tuple(
            AtlasVertebra(v.code, v.centroid.copy(), v.mask) for v in atlas.vertebrae
        )
    else:
        scaled = tuple(
            AtlasVertebra(
                v.code,
                center + scale * (v.centroid - center),
                _scale_mask(v.mask, center, scale),
            )
            for v in atlas.vertebrae
        )
    return ScaledAtlas(vertebrae=scaled, source=atlas, scale=float(scale))


def build_atlas_from_phantom(mask: LabelVolume,
                             margin_mm: float = DEFAULT_CROP_MARGIN_MM) -> Atlas:
    """Atlas from a healthy labeled spine: per-code crops + voxel centroids."""
    geom = mask.geometry
    spacing = np.asarray(geom.spacing)
    vertebrae = []
    for code in mask.codes():
        sel = np.argwhere(mask.data == code)
        pad = np.ceil(margin_mm / spacing).astype(int)
        lo = np.maximum(sel.min(axis=0) - pad, 0)
        hi = np.minimum(sel.max(axis=0) + pad + 1, np.asarray(geom.dims))
        crop = np.where(
            mask.data[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] == code, code, 0
        ).astype(np.int16)
        crop_geom = VolumeGeometry(
            tuple(int(n) for n in (hi - lo)), geom.spacing, tuple(geom.world(lo))
        )
        vertebrae.append(
            AtlasVertebra(code, label_centroid(mask, code), LabelVolume(crop_geom, crop))
        )
    return Atlas(tuple(vertebrae))


def save_atlas(atlas: Atlas, directory) -> None:
    """Write the atlas directory layout: index.json + <code>.nii.gz masks."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {
        "version": ATLAS_INDEX_VERSION,
        "codes": atlas.codes(),
        "centroids_mm": {str(v.code): list(map(float, v.centroid)) for v in atlas.vertebrae},
        "masks": {str(v.code): f"{v.code}.nii.gz" for v in atlas.vertebrae},
    }
    for v in atlas.vertebrae:
        nifti.write_nifti(v.mask, directory / f"{v.code}.nii.gz")
    (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))


def load_atlas(directory) -> Atlas:
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.is_file():
        raise AtlasError(f"no atlas index at {index_path}")
    index = json.loads(index_path.read_text())
    if index.get("version") != ATLAS_INDEX_VERSION:
        raise AtlasError(f"unsupported atlas index version {index.get('version')}")
    vertebrae = []
    for code in index["codes"]:
        mask = nifti.read_nifti(directory / index["masks"][str(code)], labels=True)
        centroid = np.asarray(index["centroids_mm"][str(code)], float)
        vertebrae.append(AtlasVertebra(int(code), centroid, mask))
    return Atlas(tuple(vertebrae))
