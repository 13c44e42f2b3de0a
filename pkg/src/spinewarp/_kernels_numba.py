"""Numba-jitted implementations of the hot per-voxel kernels.

Same semantics as _kernels_numpy (see that module for the contract). Loops
parallelize over output voxels with prange; every voxel is independent and
per-voxel reductions run in a fixed order over the vertebra index, so results
do not depend on the thread count.
"""

import numpy as np
from numba import njit, prange

SNAP = 1e-6


@njit(cache=True, inline="always")
def _snap(t):
    r = round(t)
    if abs(t - r) < SNAP:
        return r
    return t


@njit(cache=True, inline="always")
def _trilinear_at(data, origin, spacing, px, py, pz, fill):
    n0, n1, n2 = data.shape
    tx = _snap((px - origin[0]) / spacing[0])
    ty = _snap((py - origin[1]) / spacing[1])
    tz = _snap((pz - origin[2]) / spacing[2])
    if tx < 0.0 or tx > n0 - 1 or ty < 0.0 or ty > n1 - 1 or tz < 0.0 or tz > n2 - 1:
        return fill
    x0 = min(max(int(np.floor(tx)), 0), max(n0 - 2, 0))
    y0 = min(max(int(np.floor(ty)), 0), max(n1 - 2, 0))
    z0 = min(max(int(np.floor(tz)), 0), max(n2 - 2, 0))
    fx = tx - x0
    fy = ty - y0
    fz = tz - z0
    x1 = min(x0 + 1, n0 - 1)
    y1 = min(y0 + 1, n1 - 1)
    z1 = min(z0 + 1, n2 - 1)

    c00 = data[x0, y0, z0] * (1.0 - fx) + data[x1, y0, z0] * fx
    c10 = data[x0, y1, z0] * (1.0 - fx) + data[x1, y1, z0] * fx
    c01 = data[x0, y0, z1] * (1.0 - fx) + data[x1, y0, z1] * fx
    c11 = data[x0, y1, z1] * (1.0 - fx) + data[x1, y1, z1] * fx
    c0 = c00 * (1.0 - fy) + c10 * fy
    c1 = c01 * (1.0 - fy) + c11 * fy
    return c0 * (1.0 - fz) + c1 * fz


@njit(cache=True, inline="always")
def _nearest_at(labels, origin, spacing, px, py, pz, fill):
    n0, n1, n2 = labels.shape
    tx = _snap((px - origin[0]) / spacing[0])
    ty = _snap((py - origin[1]) / spacing[1])
    tz = _snap((pz - origin[2]) / spacing[2])
    if tx < 0.0 or tx > n0 - 1 or ty < 0.0 or ty > n1 - 1 or tz < 0.0 or tz > n2 - 1:
        return fill
    x = min(max(int(np.floor(tx + 0.5)), 0), n0 - 1)
    y = min(max(int(np.floor(ty + 0.5)), 0), n1 - 1)
    z = min(max(int(np.floor(tz + 0.5)), 0), n2 - 1)
    return labels[x, y, z]


@njit(cache=True, parallel=True)
def _sample_trilinear(data, origin, spacing, pts, fill):
    n = pts.shape[0]
    out = np.empty(n, dtype=np.float64)
    for i in prange(n):
        out[i] = _trilinear_at(data, origin, spacing, pts[i, 0], pts[i, 1], pts[i, 2], fill)
    return out


def sample_trilinear(data, origin, spacing, pts, fill):
    return _sample_trilinear(data.astype(np.float64, copy=False), origin, spacing, pts, float(fill))


@njit(cache=True, parallel=True)
def _sample_nearest(labels, origin, spacing, pts, fill):
    n = pts.shape[0]
    out = np.empty(n, dtype=labels.dtype)
    for i in prange(n):
        out[i] = _nearest_at(labels, origin, spacing, pts[i, 0], pts[i, 1], pts[i, 2], fill)
    return out


def sample_nearest(labels, origin, spacing, pts, fill):
    return _sample_nearest(labels, origin, spacing, pts, labels.dtype.type(fill))


@njit(cache=True, parallel=True)
def _warp_trilinear(data, s_origin, s_spacing, vec, o_origin, o_spacing, fill):
    h, w, d = vec.shape[:3]
    out = np.empty((h, w, d), dtype=np.float64)
    for i in prange(h):
        for j in range(w):
            for k in range(d):
                px = o_origin[0] + i * o_spacing[0] + vec[i, j, k, 0]
                py = o_origin[1] + j * o_spacing[1] + vec[i, j, k, 1]
                pz = o_origin[2] + k * o_spacing[2] + vec[i, j, k, 2]
                out[i, j, k] = _trilinear_at(data, s_origin, s_spacing, px, py, pz, fill)
    return out


def warp_trilinear(data, s_origin, s_spacing, vec, o_origin, o_spacing, fill):
    out = _warp_trilinear(
        data.astype(np.float64, copy=False), s_origin, s_spacing, vec, o_origin, o_spacing, float(fill)
    )
    return out.astype(data.dtype)


@njit(cache=True, parallel=True)
def _warp_nearest(labels, s_origin, s_spacing, vec, o_origin, o_spacing, fill):
    h, w, d = vec.shape[:3]
    out = np.empty((h, w, d), dtype=labels.dtype)
    for i in prange(h):
        for j in range(w):
            for k in range(d):
                px = o_origin[0] + i * o_spacing[0] + vec[i, j, k, 0]
                py = o_origin[1] + j * o_spacing[1] + vec[i, j, k, 1]
                pz = o_origin[2] + k * o_spacing[2] + vec[i, j, k, 2]
                out[i, j, k] = _nearest_at(labels, s_origin, s_spacing, px, py, pz, fill)
    return out


def warp_nearest(labels, s_origin, s_spacing, vec, o_origin, o_spacing, fill):
    return _warp_nearest(labels, s_origin, s_spacing, vec, o_origin, o_spacing, labels.dtype.type(fill))


@njit(cache=True, parallel=True)
def _blend_fields(field_stack, dmap_stack, member_idx, eps):
    J = field_stack.shape[0]
    h, w, d = dmap_stack.shape[1:]
    out = np.empty((h, w, d, 3), dtype=np.float64)
    for i in prange(h):
        for j in range(w):
            for k in range(d):
                m = member_idx[i, j, k]
                if m < 0:
                    dmin = dmap_stack[0, i, j, k]
                    jmin = 0
                    for q in range(1, J):
                        if dmap_stack[q, i, j, k] < dmin:
                            dmin = dmap_stack[q, i, j, k]
                            jmin = q
                    if dmin < eps:
                        m = jmin
                if m >= 0:
                    out[i, j, k, 0] = field_stack[m, i, j, k, 0]
                    out[i, j, k, 1] = field_stack[m, i, j, k, 1]
                    out[i, j, k, 2] = field_stack[m, i, j, k, 2]
                else:
                    n0 = 0.0
                    n1 = 0.0
                    n2 = 0.0
                    den = 0.0
                    for q in range(J):
                        wq = 1.0 / dmap_stack[q, i, j, k]
                        n0 += wq * field_stack[q, i, j, k, 0]
                        n1 += wq * field_stack[q, i, j, k, 1]
                        n2 += wq * field_stack[q, i, j, k, 2]
                        den += wq
                    out[i, j, k, 0] = n0 / den
                    out[i, j, k, 1] = n1 / den
                    out[i, j, k, 2] = n2 / den
    return out


def blend_fields(field_stack, dmap_stack, member_idx, eps):
    return _blend_fields(field_stack, dmap_stack, member_idx, float(eps))


@njit(cache=True, parallel=True)
def _blend_affine(amats, bvecs, dmap_stack, member_idx, origin, spacing, eps):
    J = dmap_stack.shape[0]
    h, w, d = dmap_stack.shape[1:]
    out = np.empty((h, w, d, 3), dtype=np.float64)
    for i in prange(h):
        for j in range(w):
            for k in range(d):
                wx = origin[0] + i * spacing[0]
                wy = origin[1] + j * spacing[1]
                wz = origin[2] + k * spacing[2]
                m = member_idx[i, j, k]
                if m < 0:
                    dmin = dmap_stack[0, i, j, k]
                    jmin = 0
                    for q in range(1, J):
                        if dmap_stack[q, i, j, k] < dmin:
                            dmin = dmap_stack[q, i, j, k]
                            jmin = q
                    if dmin < eps:
                        m = jmin
                if m >= 0:
                    a = amats[m]
                    out[i, j, k, 0] = a[0, 0] * wx + a[0, 1] * wy + a[0, 2] * wz + bvecs[m, 0]
                    out[i, j, k, 1] = a[1, 0] * wx + a[1, 1] * wy + a[1, 2] * wz + bvecs[m, 1]
                    out[i, j, k, 2] = a[2, 0] * wx + a[2, 1] * wy + a[2, 2] * wz + bvecs[m, 2]
                else:
                    n0 = 0.0
                    n1 = 0.0
                    n2 = 0.0
                    den = 0.0
                    for q in range(J):
                        wq = 1.0 / dmap_stack[q, i, j, k]
                        a = amats[q]
                        n0 += wq * (a[0, 0] * wx + a[0, 1] * wy + a[0, 2] * wz + bvecs[q, 0])
                        n1 += wq * (a[1, 0] * wx + a[1, 1] * wy + a[1, 2] * wz + bvecs[q, 1])
                        n2 += wq * (a[2, 0] * wx + a[2, 1] * wy + a[2, 2] * wz + bvecs[q, 2])
                        den += wq
                    out[i, j, k, 0] = n0 / den
                    out[i, j, k, 1] = n1 / den
                    out[i, j, k, 2] = n2 / den
    return out


def blend_affine(amats, bvecs, dmap_stack, member_idx, origin, spacing, eps):
    return _blend_affine(amats, bvecs, dmap_stack, member_idx, origin, spacing, float(eps))
