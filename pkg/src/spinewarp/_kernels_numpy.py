"""Pure-numpy implementations of the hot per-voxel kernels.

Semantics shared with _kernels_numba:

* world(p) = origin + p * spacing, voxel coordinates at voxel centers.
* A sample position is inside the grid iff its continuous index lies in
  [0, dim-1] on every axis after snapping; otherwise the fill value applies.
* Continuous indices within 1e-6 voxel of an integer are snapped to it, so
  warping with a zero field reproduces the input bit-exactly.
"""

import numpy as np

SNAP = 1e-6


def _continuous_index(origin, spacing, pts):
    t = (pts - origin[np.newaxis, :]) / spacing[np.newaxis, :]
    r = np.rint(t)
    np.copyto(t, r, where=np.abs(t - r) < SNAP)
    return t


def sample_trilinear(data, origin, spacing, pts, fill):
    """Trilinear sampling of `data` at world positions `pts` (N,3) -> (N,) f64."""
    dims = np.asarray(data.shape, dtype=np.int64)
    t = _continuous_index(origin, spacing, pts)
    inside = np.all((t >= 0.0) & (t <= (dims - 1)[np.newaxis, :]), axis=1)
    t = np.where(inside[:, np.newaxis], t, 0.0)

    i0 = np.floor(t).astype(np.int64)
    np.clip(i0, 0, np.maximum(dims - 2, 0)[np.newaxis, :], out=i0)
    f = t - i0
    i1 = np.minimum(i0 + 1, dims - 1)

    d = data.astype(np.float64, copy=False)
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1, y1, z1 = i1[:, 0], i1[:, 1], i1[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]

    c00 = d[x0, y0, z0] * (1.0 - fx) + d[x1, y0, z0] * fx
    c10 = d[x0, y1, z0] * (1.0 - fx) + d[x1, y1, z0] * fx
    c01 = d[x0, y0, z1] * (1.0 - fx) + d[x1, y0, z1] * fx
    c11 = d[x0, y1, z1] * (1.0 - fx) + d[x1, y1, z1] * fx
    c0 = c00 * (1.0 - fy) + c10 * fy
    c1 = c01 * (1.0 - fy) + c11 * fy
    out = c0 * (1.0 - fz) + c1 * fz
    out[~inside] = fill
    return out


def sample_nearest(labels, origin, spacing, pts, fill):
    """Nearest-neighbor sampling of `labels` at world positions `pts` -> (N,)."""
    dims = np.asarray(labels.shape, dtype=np.int64)
    t = _continuous_index(origin, spacing, pts)
    inside = np.all((t >= 0.0) & (t <= (dims - 1)[np.newaxis, :]), axis=1)
    i = np.floor(t + 0.5).astype(np.int64)
    np.clip(i, 0, (dims - 1)[np.newaxis, :], out=i)
    out = labels[i[:, 0], i[:, 1], i[:, 2]].copy()
    out[~inside] = fill
    return out


def _output_points(vec, o_origin, o_spacing):
    h, w, d = vec.shape[:3]
    gx, gy, gz = np.meshgrid(
        o_origin[0] + np.arange(h) * o_spacing[0],
        o_origin[1] + np.arange(w) * o_spacing[1],
        o_origin[2] + np.arange(d) * o_spacing[2],
        indexing="ij",
    )
    pts = np.stack([gx, gy, gz], axis=-1) + vec
    return pts.reshape(-1, 3)


def warp_trilinear(data, s_origin, s_spacing, vec, o_origin, o_spacing, fill):
    """Backward warp: out[p] = trilinear(data, world(p) + vec[p])."""
    pts = _output_points(vec, o_origin, o_spacing)
    out = sample_trilinear(data, s_origin, s_spacing, pts, fill)
    return out.reshape(vec.shape[:3]).astype(data.dtype)


def warp_nearest(labels, s_origin, s_spacing, vec, o_origin, o_spacing, fill):
    """Backward warp with nearest-neighbor sampling (label volumes)."""
    pts = _output_points(vec, o_origin, o_spacing)
    out = sample_nearest(labels, s_origin, s_spacing, pts, fill)
    return out.reshape(vec.shape[:3]).astype(labels.dtype)


def blend_fields(field_stack, dmap_stack, member_idx, eps):
    """Distance-weighted blend of per-vertebra displacement fields.

    field_stack (J,H,W,D,3) f64, dmap_stack (J,H,W,D) f64 mm, member_idx
    (H,W,D) int32 = stack index of the vertebra owning the voxel, -1 outside
    all vertebrae. Inside vertebra j the field is copied verbatim; elsewhere
    the fields are averaged with weights 1/D_j. Voxels nearer than eps to
    some vertebra take that vertebra's field (argmin, lowest j on ties).
    """
    J = field_stack.shape[0]
    shape = dmap_stack.shape[1:]
    V = int(np.prod(shape))
    fs = field_stack.reshape(J, V, 3)
    dm = dmap_stack.reshape(J, V)
    mi = member_idx.reshape(V).astype(np.int64).copy()

    blended = mi < 0
    if np.any(blended):
        near = np.argmin(dm[:, blended], axis=0)
        dmin = dm[near, np.flatnonzero(blended)]
        take = dmin < eps
        mi[np.flatnonzero(blended)[take]] = near[take]

    out = np.empty((V, 3), dtype=np.float64)
    owned = mi >= 0
    if np.any(owned):
        out[owned] = fs[mi[owned], np.flatnonzero(owned)]
    free = ~owned
    if np.any(free):
        w = 1.0 / dm[:, free]
        num = np.zeros((int(free.sum()), 3), dtype=np.float64)
        den = np.zeros(int(free.sum()), dtype=np.float64)
        for j in range(J):
            num += w[j][:, np.newaxis] * fs[j][free]
            den += w[j]
        out[free] = num / den[:, np.newaxis]
    return out.reshape(shape + (3,))


def blend_affine(amats, bvecs, dmap_stack, member_idx, origin, spacing, eps):
    """blend_fields specialization for fields of the form F_j(x) = A_j x + b_j.

    Avoids materializing the per-vertebra field stack; used by the pipeline
    where each field comes from a rigid transform (A = R - I, b = t).
    """
    J = dmap_stack.shape[0]
    shape = dmap_stack.shape[1:]
    V = int(np.prod(shape))
    dm = dmap_stack.reshape(J, V)
    mi = member_idx.reshape(V).astype(np.int64).copy()

    h, w, d = shape
    gx, gy, gz = np.meshgrid(
        origin[0] + np.arange(h) * spacing[0],
        origin[1] + np.arange(w) * spacing[1],
        origin[2] + np.arange(d) * spacing[2],
        indexing="ij",
    )
    world = np.stack([gx, gy, gz], axis=-1).reshape(V, 3)

    blended = mi < 0
    if np.any(blended):
        near = np.argmin(dm[:, blended], axis=0)
        dmin = dm[near, np.flatnonzero(blended)]
        take = dmin < eps
        mi[np.flatnonzero(blended)[take]] = near[take]

    out = np.empty((V, 3), dtype=np.float64)
    free = mi < 0
    num = np.zeros((int(free.sum()), 3), dtype=np.float64)
    den = np.zeros(int(free.sum()), dtype=np.float64)
    wfree = world[free]
    for j in range(J):
        wj = 1.0 / dm[j, free]
        a = amats[j]
        # explicit component form: same evaluation order as the numba kernel
        for axis in range(3):
            fj = (
                a[axis, 0] * wfree[:, 0]
                + a[axis, 1] * wfree[:, 1]
                + a[axis, 2] * wfree[:, 2]
                + bvecs[j, axis]
            )
            num[:, axis] += wj * fj
        den += wj
    if np.any(free):
        out[free] = num / den[:, np.newaxis]
    owned = ~free
    if np.any(owned):
        jo = mi[owned]
        wo = world[owned]
        a = amats[jo]
        b = bvecs[jo]
        # explicit component form keeps the evaluation order identical to the
        # numba kernel, so owned voxels match it bit-for-bit
        for axis in range(3):
            out[owned, axis] = (
                a[:, axis, 0] * wo[:, 0]
                + a[:, axis, 1] * wo[:, 1]
                + a[:, axis, 2] * wo[:, 2]
                + b[:, axis]
            )
    return out.reshape(shape + (3,))
