"""Seeded synthetic spine CT phantoms with ground truth.

A phantom is a chain of superellipsoid vertebral bodies (exponent 4 in-plane,
2 axially) with a 1.5 mm cortical shell, a posterior-arch box, and a soft
tissue envelope, on a regular grid. Fracture simulation collapses one body's
height (optionally anterior-weighted) and shifts the chain above it down and
forward, mimicking a vertebral compression fracture with a kyphotic kink.

Axis convention follows spinewarp.volume: x = left-right, y = anterior(-)/
posterior(+), z = inferior/superior. Randomness (per-vertebra size jitter)
comes from numpy's PCG64 generator, so a given spec is reproducible
bit-for-bit across platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .volume import LabelVolume, ScalarVolume, VolumeGeometry

TRUTH_SCHEMA_VERSION = 1

CORTICAL_SHELL_MM = 1.5
ARCH_HALF_WIDTH_MM = 8.0
ARCH_DEPTH_MM = 14.0
ARCH_HALF_HEIGHT_FRAC = 0.38


class PhantomError(ValueError):
    """Invalid phantom or fracture specification."""


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    levels: tuple[int, ...] = tuple(range(17, 25))  # T10..L5
    base_body: tuple[float, float, float] = (40.0, 30.0, 25.0)  # width, depth, height mm
    disc_height: float = 5.0
    curvature: tuple[float, float] = (8.0, 400.0)  # amplitude mm, wavelength mm
    intensities: tuple[float, float, float, float] = (200.0, 800.0, 40.0, -1000.0)
    jitter: float = 0.02
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    margin_mm: float = 20.0
    arch: bool = True

    def __post_init__(self):
        if len(self.levels) < 5:
            raise PhantomError(f"need >= 5 levels, got {len(self.levels)}")
        if len(set(self.levels)) != len(self.levels):
            raise PhantomError("levels must be unique")
        if any(not (1 <= c <= 24) for c in self.levels):
            raise PhantomError(f"levels must be codes 1..24, got {self.levels}")
        if any(not (v > 0) for v in self.base_body) or not self.disc_height > 0:
            raise PhantomError("body dimensions and disc height must be positive")
        if not (0.0 <= self.jitter <= 0.1):
            raise PhantomError(f"jitter must be in [0, 0.1], got {self.jitter}")
        if any(not (s > 0) for s in self.spacing):
            raise PhantomError("spacing must be positive")

    @property
    def trabecular_hu(self) -> float:
        return self.intensities[0]

    @property
    def cortical_hu(self) -> float:
        return self.intensities[1]

    @property
    def soft_hu(self) -> float:
        return self.intensities[2]

    @property
    def air_hu(self) -> float:
        return self.intensities[3]


@dataclass(frozen=True)
class FractureSpec:
    level: int
    height_factor: float = 0.6
    wedge: bool = True
    kink_deg: float = 10.0

    def __post_init__(self):
        if not (0.0 < self.height_factor <= 1.0):
            raise PhantomError(f"height_factor must be in (0, 1], got {self.height_factor}")


@dataclass(frozen=True)
class _Body:
    """Analytic description of one vertebra: centroid and body size in mm."""

    code: int
    centroid: np.ndarray  # (3,) mm
    size: np.ndarray  # (width, depth, height) mm


@dataclass(frozen=True)
class PhantomTruth:
    centroids_mm: dict[int, np.ndarray]
    volumes_ml: dict[int, float]
    fractured_levels: tuple[int, ...] = ()
    healthy_centroids_mm: dict[int, np.ndarray] | None = None
    healthy_volumes_ml: dict[int, float] | None = None
    bodies: tuple[_Body, ...] = field(default=(), repr=False)
    spec: PhantomSpec | None = field(default=None, repr=False)

    def intercentroid_distances_mm(self) -> dict[str, float]:
        codes = sorted(self.centroids_mm)
        return {
            f"{a}-{b}": float(np.linalg.norm(self.centroids_mm[a] - self.centroids_mm[b]))
            for a, b in zip(codes, codes[1:])
        }

    def to_json(self) -> str:
        doc = {
            "schema_version": TRUTH_SCHEMA_VERSION,
            "centroids_mm": {str(c): list(map(float, v)) for c, v in self.centroids_mm.items()},
            "volumes_ml": {str(c): float(v) for c, v in self.volumes_ml.items()},
            "fractured_levels": list(self.fractured_levels),
            "intercentroid_distances_mm": self.intercentroid_distances_mm(),
        }
        if self.healthy_centroids_mm is not None:
            doc["healthy_centroids_mm"] = {
                str(c): list(map(float, v)) for c, v in self.healthy_centroids_mm.items()
            }
        if self.healthy_volumes_ml is not None:
            doc["healthy_volumes_ml"] = {
                str(c): float(v) for c, v in self.healthy_volumes_ml.items()
            }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PhantomTruth":
        doc = json.loads(text)
        if doc.get("schema_version") != TRUTH_SCHEMA_VERSION:
            raise PhantomError(f"unsupported truth schema {doc.get('schema_version')}")
        healthy_c = doc.get("healthy_centroids_mm")
        healthy_v = doc.get("healthy_volumes_ml")
        return cls(
            centroids_mm={int(c): np.asarray(v, float) for c, v in doc["centroids_mm"].items()},
            volumes_ml={int(c): float(v) for c, v in doc["volumes_ml"].items()},
            fractured_levels=tuple(doc.get("fractured_levels", ())),
            healthy_centroids_mm=(
                {int(c): np.asarray(v, float) for c, v in healthy_c.items()} if healthy_c else None
            ),
            healthy_volumes_ml=(
                {int(c): float(v) for c, v in healthy_v.items()} if healthy_v else None
            ),
        )


def _layout(spec: PhantomSpec) -> list[_Body]:
    """Analytic vertebra chain: sizes (jittered) and centroids on the curve."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    n = len(spec.levels)
    factors = 1.0 + spec.jitter * rng.uniform(-1.0, 1.0, size=(n, 3))
    sizes = np.asarray(spec.base_body, float)[np.newaxis, :] * factors

    amplitude, wavelength = spec.curvature
    bodies = []
    z = 0.0
    for i, code in enumerate(spec.levels):
        if i > 0:
            z -= 0.5 * sizes[i - 1, 2] + spec.disc_height + 0.5 * sizes[i, 2]
        y = amplitude * np.sin(2.0 * np.pi * z / wavelength) if amplitude != 0.0 else 0.0
        bodies.append(_Body(code, np.array([0.0, y, z]), sizes[i]))
    return bodies


def _grid_for(spec: PhantomSpec, bodies: list[_Body]) -> VolumeGeometry:
    cents = np.array([b.centroid for b in bodies])
    sizes = np.array([b.size for b in bodies])
    half = sizes / 2.0
    lo = (cents - half).min(axis=0)
    hi = (cents + half).max(axis=0)
    if spec.arch:
        hi[1] += ARCH_DEPTH_MM
    lo -= spec.margin_mm
    hi += spec.margin_mm
    # anterior headroom so a kinked superior chain stays inside the grid
    lo[1] -= 40.0
    spacing = np.asarray(spec.spacing)
    dims = np.ceil((hi - lo) / spacing).astype(int) + 1
    return VolumeGeometry(tuple(int(d) for d in dims), tuple(spacing), tuple(lo))


def _paint_vertebra(ct, labels, geom, spec, body, height_profile=None):
    """Rasterize one vertebra (body superellipsoid + shell + arch) into ct/labels.

    height_profile(y_local) -> axial height scale, used for fracture collapse;
    None means 1 everywhere.
    """
    w, d, h = body.size
    cx, cy, cz = body.centroid
    ext = np.array([w / 2, d / 2 + (ARCH_DEPTH_MM if spec.arch else 0.0), h / 2]) + 2.0

    origin = np.asarray(geom.origin)
    spacing = np.asarray(geom.spacing)
    lo = np.maximum(np.floor((body.centroid - ext - origin) / spacing).astype(int), 0)
    hi = np.minimum(
        np.ceil((body.centroid + ext - origin) / spacing).astype(int) + 1,
        np.asarray(geom.dims),
    )
    xs = origin[0] + np.arange(lo[0], hi[0]) * spacing[0] - cx
    ys = origin[1] + np.arange(lo[1], hi[1]) * spacing[1] - cy
    zs = origin[2] + np.arange(lo[2], hi[2]) * spacing[2] - cz
    lx, ly, lz = np.meshgrid(xs, ys, zs, indexing="ij")

    if height_profile is None:
        h_eff = h
    else:
        h_eff = h * height_profile(ly)

    def inside(width, depth, height):
        return (
            np.abs(2.0 * lx / width) ** 4
            + np.abs(2.0 * ly / depth) ** 4
            + (2.0 * lz / height) ** 2
        ) <= 1.0

    shell = 2.0 * CORTICAL_SHELL_MM
    outer = inside(w, d, h_eff)
    inner = inside(max(w - shell, 1e-3), max(d - shell, 1e-3), np.maximum(h_eff - shell, 1e-3))

    region = outer
    if spec.arch:
        if height_profile is None:
            arch_h = h
        else:
            arch_h = h * height_profile(np.full_like(ly, d / 2.0))
        arch = (
            (np.abs(lx) <= ARCH_HALF_WIDTH_MM)
            & (ly >= d / 2.0 - 1.0)
            & (ly <= d / 2.0 + ARCH_DEPTH_MM)
            & (np.abs(lz) <= ARCH_HALF_HEIGHT_FRAC * arch_h)
        )
        region = outer | arch

    view_ct = ct[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    view_lb = labels[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    view_ct[region] = spec.cortical_hu
    view_ct[inner] = spec.trabecular_hu
    view_lb[region] = body.code


def _rasterize(spec: PhantomSpec, bodies: list[_Body], geom: VolumeGeometry,
               height_profiles: dict[int, object] | None = None):
    """Full phantom rasterization: air, soft tissue envelope, vertebrae."""
    height_profiles = height_profiles or {}
    ct = np.full(geom.dims, spec.air_hu, dtype=np.float32)
    labels = np.zeros(geom.dims, dtype=np.int16)

    cents = np.array([b.centroid for b in bodies])
    sizes = np.array([b.size for b in bodies])
    env_center = np.array([0.0, cents[:, 1].mean() + 5.0])
    env_semi = np.array(
        [sizes[:, 0].max() / 2 + 25.0, sizes[:, 1].max() / 2 + ARCH_DEPTH_MM + 30.0]
    )
    z_lo = (cents[:, 2] - sizes[:, 2] / 2).min() - 12.0
    z_hi = (cents[:, 2] + sizes[:, 2] / 2).max() + 12.0

    origin = np.asarray(geom.origin)
    spacing = np.asarray(geom.spacing)
    gx = origin[0] + np.arange(geom.dims[0]) * spacing[0]
    gy = origin[1] + np.arange(geom.dims[1]) * spacing[1]
    gz = origin[2] + np.arange(geom.dims[2]) * spacing[2]
    in_xy = (
        ((gx[:, None] - env_center[0]) / env_semi[0]) ** 2
        + ((gy[None, :] - env_center[1]) / env_semi[1]) ** 2
    ) <= 1.0
    in_z = (gz >= z_lo) & (gz <= z_hi)
    ct[in_xy[:, :, None] & in_z[None, None, :]] = spec.soft_hu

    for body in bodies:
        _paint_vertebra(ct, labels, geom, spec, body, height_profiles.get(body.code))
    return ct, labels


def _truth_from(mask: LabelVolume, bodies: list[_Body], spec, fractured=(),
                centroid_override=None, healthy: PhantomTruth | None = None) -> PhantomTruth:
    vox_ml = mask.geometry.voxel_volume_mm3 / 1000.0
    centroids = {}
    volumes = {}
    for body in bodies:
        sel = np.argwhere(mask.data == body.code)
        if sel.size == 0:
            raise PhantomError(f"vertebra {body.code} rasterized to zero voxels")
        volumes[body.code] = sel.shape[0] * vox_ml
        if centroid_override and body.code in centroid_override:
            centroids[body.code] = np.asarray(centroid_override[body.code], float)
        else:
            centroids[body.code] = mask.geometry.world(sel.mean(axis=0))
    return PhantomTruth(
        centroids_mm=centroids,
        volumes_ml=volumes,
        fractured_levels=tuple(fractured),
        healthy_centroids_mm=None if healthy is None else dict(healthy.centroids_mm),
        healthy_volumes_ml=None if healthy is None else dict(healthy.volumes_ml),
        bodies=tuple(bodies),
        spec=spec,
    )


def generate_healthy(spec: PhantomSpec):
    """Generate a healthy phantom -> (ScalarVolume, LabelVolume, PhantomTruth)."""
    bodies = _layout(spec)
    geom = _grid_for(spec, bodies)
    ct, labels = _rasterize(spec, bodies, geom)
    ct_vol = ScalarVolume(geom, ct)
    mask = LabelVolume(geom, labels)
    truth = _truth_from(mask, bodies, spec)
    return ct_vol, mask, truth


def apply_fracture(ct: ScalarVolume, mask: LabelVolume, truth: PhantomTruth,
                   frac: FractureSpec):
    """Simulate a compression fracture on a healthy phantom.

    The fractured body is re-rasterized with its height scaled by
    height_factor (anterior-weighted when wedge) and its inferior endplate
    kept seated. The chain above is rotated by kink_deg about the fractured
    centroid (sagittal plane) and dropped by the full lost height to close
    the gap; exact centroids go into the truth while the voxel patterns
    translate by whole voxels, so untouched vertebra volumes are preserved
    exactly.
    """
    spec = truth.spec
    bodies = truth.bodies
    if spec is None or not bodies:
        raise PhantomError("truth lacks the generator layout; pass the healthy truth")
    codes = [b.code for b in bodies]
    if frac.level not in codes:
        raise PhantomError(f"fracture level {frac.level} not in phantom levels {codes}")
    pos = codes.index(frac.level)
    if pos < 2 or pos > len(codes) - 3:
        raise PhantomError(
            f"fracture level {frac.level} must have >= 2 neighbors above and below"
        )

    geom = mask.geometry
    spacing = np.asarray(geom.spacing)
    new_ct = np.array(ct.data, dtype=np.float32)
    new_lb = np.array(mask.data, dtype=np.int16)

    frac_body = bodies[pos]
    above = bodies[:pos]  # superior chain (levels ordered top -> bottom)

    # clear the fractured vertebra and the chain above, fill with soft tissue
    moved_codes = [frac.level] + [b.code for b in above]
    clear = np.isin(new_lb, moved_codes)
    new_ct[clear] = spec.soft_hu
    new_lb[clear] = 0

    # collapsed body: anterior face at y_local = -depth/2 keeps height_factor,
    # posterior face keeps full height when wedge
    hf = frac.height_factor
    depth = frac_body.size[1]
    if frac.wedge:
        def profile(y_local, hf=hf, depth=depth):
            t = np.clip((y_local + depth / 2.0) / depth, 0.0, 1.0)
            return hf + (1.0 - hf) * t
        mean_hf = (1.0 + hf) / 2.0
    else:
        def profile(y_local, hf=hf):
            return hf * np.ones_like(y_local)
        mean_hf = hf
    # the collapsed body keeps its inferior endplate seated: the centroid
    # moves down by half the lost height, the chain above settles by all of it
    lost = (1.0 - mean_hf) * frac_body.size[2]
    collapsed = replace(frac_body,
                        centroid=frac_body.centroid - np.array([0.0, 0.0, lost / 2.0]))
    _paint_vertebra(new_ct, new_lb, geom, spec, collapsed,
                    None if hf == 1.0 else profile)

    # rigid motion of the superior chain: kink about the fractured centroid
    # (x axis, forward tilt) then a drop closing the collapsed gap
    theta = np.deg2rad(frac.kink_deg)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    pivot = frac_body.centroid
    drop = np.array([0.0, 0.0, -lost])

    exact_centroids = {}
    healthy_view = _truth_from(mask, bodies, spec)  # voxel-based healthy centroids
    for body in above:
        target = rot @ (body.centroid - pivot) + pivot + drop
        delta_exact = target - body.centroid
        delta_vox = np.rint(delta_exact / spacing).astype(int)
        src = np.argwhere(mask.data == body.code)
        dst = src + delta_vox
        ok = np.all((dst >= 0) & (dst < np.asarray(geom.dims)), axis=1)
        src, dst = src[ok], dst[ok]
        new_ct[dst[:, 0], dst[:, 1], dst[:, 2]] = ct.data[src[:, 0], src[:, 1], src[:, 2]]
        new_lb[dst[:, 0], dst[:, 1], dst[:, 2]] = body.code
        exact_centroids[body.code] = healthy_view.centroids_mm[body.code] + delta_exact

    out_ct = ScalarVolume(geom, new_ct)
    out_mask = LabelVolume(geom, new_lb)
    out_truth = _truth_from(
        out_mask, bodies, spec, fractured=(frac.level,),
        centroid_override=exact_centroids, healthy=healthy_view,
    )
    return out_ct, out_mask, out_truth


def fractured_phantom(spec: PhantomSpec, frac: FractureSpec):
    """Convenience: healthy phantom plus its fractured counterpart."""
    ct, mask, truth = generate_healthy(spec)
    f_ct, f_mask, f_truth = apply_fracture(ct, mask, truth, frac)
    return (ct, mask, truth), (f_ct, f_mask, f_truth)


def superellipsoid_volume_mm3(width, depth, height, n_inplane=4, steps=400):
    """Numerical volume of the body shape, used as an independent oracle.

    Integrates the in-plane cross-section area over z by midpoint quadrature;
    the cross-section |2x/w|^n + |2y/d|^n <= r is itself integrated in 2D.
    """
    # area of |u|^n + |v|^n <= 1 unit superellipse, scaled per slice
    from math import gamma

    n = n_inplane
    unit_area = 4.0 * gamma(1.0 + 1.0 / n) ** 2 / gamma(1.0 + 2.0 / n)
    z = (np.arange(steps) + 0.5) / steps  # half-height samples in [0,1)
    # at height z (fraction of c): in-plane radius r = (1 - z^2)^(1/2) in the
    # superellipsoid metric, i.e. scale factor r^(2/n) per axis
    r = (1.0 - z**2) ** (1.0 / n)
    area = unit_area * (width / 2.0) * (depth / 2.0) * r**2
    return float(2.0 * np.sum(area) * (height / 2.0) / steps)
