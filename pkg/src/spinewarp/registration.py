"""Per-vertebra 6-DoF rigid alignment via surface ICP.

Masks are reduced to boundary-voxel point clouds (6-connectivity), then
aligned by iterating nearest-neighbor correspondence (k-d tree) with a
closed-form least-squares rigid fit (Kabsch/SVD, proper rotation enforced).
Initialization is centroid translation only; vertebra poses within one spine
differ by small rotations, so no rotation init is needed (documented
limitation for kinks beyond ~30 degrees).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .volume import LabelVolume

MAX_CLOUD_POINTS = 20000
ICP_MAX_ITERS = 100
ICP_TOL_MM = 1e-4


class RegistrationError(ValueError):
    """Degenerate input to a registration operation."""


@dataclass(frozen=True)
class RigidTransform:
    """World-to-world rigid map x -> R x + t (mm)."""

    rotation: np.ndarray  # (3,3), proper orthonormal
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        rot = np.asarray(self.rotation, float)
        t = np.asarray(self.translation, float)
        if rot.shape != (3, 3) or t.shape != (3,):
            raise RegistrationError(f"bad transform shapes {rot.shape}, {t.shape}")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-9:
            raise RegistrationError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise RegistrationError("rotation must be proper (det +1)")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, float) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: x -> self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def matrix3x4(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, np.newaxis]])

    def rotation_angle_deg(self) -> float:
        cos = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.degrees(np.arccos(cos)))


@dataclass(frozen=True)
class SurfaceCloud:
    """World-space voxel centers on a mask boundary (6-connectivity)."""

    points: np.ndarray  # (N,3) mm

    def __post_init__(self):
        pts = np.asarray(self.points, float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise RegistrationError(f"surface cloud must be non-empty (N,3), got {pts.shape}")
        object.__setattr__(self, "points", pts)

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def subsampled(self, limit: int = MAX_CLOUD_POINTS) -> "SurfaceCloud":
        n = self.points.shape[0]
        if n <= limit:
            return self
        stride = int(np.ceil(n / limit))
        return SurfaceCloud(self.points[::stride])


def extract_surface(mask: LabelVolume, code: int) -> SurfaceCloud:
    """Boundary voxels of one label: foreground with a background face-neighbor."""
    fg = mask.data == code
    if not np.any(fg):
        raise RegistrationError(f"label {code} absent from mask")
    padded = np.pad(fg, 1, constant_values=False)
    interior = np.ones_like(fg)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    boundary = fg & ~interior
    idx = np.argwhere(boundary)
    return SurfaceCloud(mask.geometry.world(idx))


def kabsch(source: SurfaceCloud, target: SurfaceCloud) -> RigidTransform:
    """Least-squares rigid fit between corresponding clouds (equal sizes >= 3)."""
    src = source.points
    tgt = target.points
    if src.shape != tgt.shape:
        raise RegistrationError(f"cloud sizes differ: {src.shape} vs {tgt.shape}")
    if src.shape[0] < 3:
        raise RegistrationError(f"need >= 3 correspondences, got {src.shape[0]}")
    sc = src.mean(axis=0)
    tc = tgt.mean(axis=0)
    cov = (src - sc).T @ (tgt - tc)
    u, svals, vt = np.linalg.svd(cov)
    if svals[1] <= 1e-9 * max(svals[0], 1.0):
        raise RegistrationError("degenerate covariance (rank < 2)")
    sign = np.sign(np.linalg.det(vt.T @ u.T))
    d = np.diag([1.0, 1.0, sign if sign != 0 else 1.0])
    rot = vt.T @ d @ u.T
    # clean up orthonormality drift so the RigidTransform invariant holds
    uu, _, vvt = np.linalg.svd(rot)
    rot = uu @ vvt
    return RigidTransform(rot, tc - rot @ sc)


def icp_rigid(source: SurfaceCloud, target: SurfaceCloud, max_iters: int = ICP_MAX_ITERS,
              tol_mm: float = ICP_TOL_MM, history: list | None = None):
    """Rigid ICP source -> target; returns (RigidTransform, mean residual mm).

    Centroid-translation init, nearest-neighbor correspondence with lowest
    index winning ties, full Kabsch refit per iteration. Non-convergence is
    not an error; the best iterate is returned. When a list is passed as
    `history` it collects the per-iteration RMS residuals (non-increasing by
    construction of the alternation).
    """
    src = source.subsampled()
    tgt = target.subsampled()

    transform = RigidTransform(np.eye(3), tgt.centroid() - src.centroid())
    tree = cKDTree(tgt.points)

    best = transform
    best_res = np.inf
    prev_res = np.inf
    for _ in range(max_iters):
        moved = transform.apply(src.points)
        dists, idx = tree.query(moved)
        res = float(np.mean(dists))
        if history is not None:
            history.append(float(np.sqrt(np.mean(dists**2))))
        if res < best_res:
            best_res = res
            best = transform
        if abs(prev_res - res) < tol_mm:
            break
        prev_res = res
        matched = SurfaceCloud(tgt.points[idx])
        transform = kabsch(src, matched)
    return best, best_res
