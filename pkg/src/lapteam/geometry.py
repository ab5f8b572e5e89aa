"""Distance and ray-cast primitives for capsules, segments and triangle meshes.

The closest-point routines follow the classic formulations from Ericson's
"Real-Time Collision Detection", written scalar-style so the compiled loops
allocate nothing.  Everything is sequential and deterministic.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


@njit(cache=True, fastmath=False)
def _closest_on_triangle(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    """Closest point to p on triangle abc (returns its coordinates)."""
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az

    bpx, bpy, bpz = px - bx, py - by, pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz

    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz

    cpx, cpy, cpz = px - cx, py - cy, pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz

    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz

    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return (bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz))

    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (ax + abx * v + acx * w, ay + aby * v + acy * w,
            az + abz * v + acz * w)


@njit(cache=True, fastmath=False)
def _segment_segment_distance(p1x, p1y, p1z, q1x, q1y, q1z,
                              p2x, p2y, p2z, q2x, q2y, q2z):
    d1x, d1y, d1z = q1x - p1x, q1y - p1y, q1z - p1z
    d2x, d2y, d2z = q2x - p2x, q2y - p2y, q2z - p2z
    rx, ry, rz = p1x - p2x, p1y - p2y, p1z - p2z
    a = d1x * d1x + d1y * d1y + d1z * d1z
    e = d2x * d2x + d2y * d2y + d2z * d2z
    f = d2x * rx + d2y * ry + d2z * rz
    eps = 1e-12

    if a <= eps and e <= eps:
        return math.sqrt(rx * rx + ry * ry + rz * rz)
    if a <= eps:
        s = 0.0
        t = min(max(f / e, 0.0), 1.0)
    else:
        c = d1x * rx + d1y * ry + d1z * rz
        if e <= eps:
            t = 0.0
            s = min(max(-c / a, 0.0), 1.0)
        else:
            b = d1x * d2x + d1y * d2y + d1z * d2z
            denom = a * e - b * b
            if denom > eps:
                s = min(max((b * f - c * e) / denom, 0.0), 1.0)
            else:
                s = 0.0
            t = b * s + f
            if t < 0.0:
                t = 0.0
                s = min(max(-c / a, 0.0), 1.0)
            elif t > e:
                t = 1.0
                s = min(max((b - c) / a, 0.0), 1.0)
            else:
                t = t / e
    cx = p1x + d1x * s - (p2x + d2x * t)
    cy = p1y + d1y * s - (p2y + d2y * t)
    cz = p1z + d1z * s - (p2z + d2z * t)
    return math.sqrt(cx * cx + cy * cy + cz * cz)


@njit(cache=True, fastmath=False)
def _segment_crosses_triangle(sx, sy, sz, ex, ey, ez,
                              ax, ay, az, bx, by, bz, cx, cy, cz):
    dx, dy, dz = ex - sx, ey - sy, ez - sz
    e1x, e1y, e1z = bx - ax, by - ay, bz - az
    e2x, e2y, e2z = cx - ax, cy - ay, cz - az
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-14:
        return False
    inv = 1.0 / det
    tx, ty, tz = sx - ax, sy - ay, sz - az
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return False
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return False
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return 0.0 <= t <= 1.0


@njit(cache=True, fastmath=False)
def _segment_triangle_distance(sx, sy, sz, ex, ey, ez,
                               ax, ay, az, bx, by, bz, cx, cy, cz):
    if _segment_crosses_triangle(sx, sy, sz, ex, ey, ez,
                                 ax, ay, az, bx, by, bz, cx, cy, cz):
        return 0.0
    qx, qy, qz = _closest_on_triangle(sx, sy, sz, ax, ay, az, bx, by, bz, cx, cy, cz)
    dxx, dyy, dzz = sx - qx, sy - qy, sz - qz
    best = math.sqrt(dxx * dxx + dyy * dyy + dzz * dzz)
    qx, qy, qz = _closest_on_triangle(ex, ey, ez, ax, ay, az, bx, by, bz, cx, cy, cz)
    dxx, dyy, dzz = ex - qx, ey - qy, ez - qz
    d = math.sqrt(dxx * dxx + dyy * dyy + dzz * dzz)
    if d < best:
        best = d
    d = _segment_segment_distance(sx, sy, sz, ex, ey, ez, ax, ay, az, bx, by, bz)
    if d < best:
        best = d
    d = _segment_segment_distance(sx, sy, sz, ex, ey, ez, bx, by, bz, cx, cy, cz)
    if d < best:
        best = d
    d = _segment_segment_distance(sx, sy, sz, ex, ey, ez, cx, cy, cz, ax, ay, az)
    if d < best:
        best = d
    return best


@njit(cache=True, fastmath=False)
def capsule_mesh_contacts(s0, s1, vertices, triangles, threshold):
    """Scan a capsule axis against a mesh.

    Returns (min distance over triangles, number of triangles strictly
    closer than ``threshold``).
    """
    sx, sy, sz = s0[0], s0[1], s0[2]
    ex, ey, ez = s1[0], s1[1], s1[2]
    best = 1e30
    count = 0
    for t in range(triangles.shape[0]):
        ia, ib, ic = triangles[t, 0], triangles[t, 1], triangles[t, 2]
        d = _segment_triangle_distance(
            sx, sy, sz, ex, ey, ez,
            vertices[ia, 0], vertices[ia, 1], vertices[ia, 2],
            vertices[ib, 0], vertices[ib, 1], vertices[ib, 2],
            vertices[ic, 0], vertices[ic, 1], vertices[ic, 2])
        if d < best:
            best = d
        if d < threshold:
            count += 1
    return best, count


@njit(cache=True, fastmath=False)
def ray_hits_mask(origin, targets, vertices, triangles, blocked_out, tri_hit_out):
    """Moller-Trumbore segment casts from one origin to many target points.

    ``blocked_out[r]`` is set when segment r strikes any mesh triangle before
    reaching its target point; ``tri_hit_out[t]`` marks triangles struck by
    any such segment.
    """
    ox, oy, oz = origin[0], origin[1], origin[2]
    for r in range(targets.shape[0]):
        dx = targets[r, 0] - ox
        dy = targets[r, 1] - oy
        dz = targets[r, 2] - oz
        hit_any = False
        for t in range(triangles.shape[0]):
            ia, ib, ic = triangles[t, 0], triangles[t, 1], triangles[t, 2]
            ax, ay, az = vertices[ia, 0], vertices[ia, 1], vertices[ia, 2]
            e1x = vertices[ib, 0] - ax
            e1y = vertices[ib, 1] - ay
            e1z = vertices[ib, 2] - az
            e2x = vertices[ic, 0] - ax
            e2y = vertices[ic, 1] - ay
            e2z = vertices[ic, 2] - az
            px = dy * e2z - dz * e2y
            py = dz * e2x - dx * e2z
            pz = dx * e2y - dy * e2x
            det = e1x * px + e1y * py + e1z * pz
            if abs(det) < 1e-14:
                continue
            inv = 1.0 / det
            tx, ty, tz = ox - ax, oy - ay, oz - az
            u = (tx * px + ty * py + tz * pz) * inv
            if u < 0.0 or u > 1.0:
                continue
            qx = ty * e1z - tz * e1y
            qy = tz * e1x - tx * e1z
            qz = tx * e1y - ty * e1x
            v = (dx * qx + dy * qy + dz * qz) * inv
            if v < 0.0 or u + v > 1.0:
                continue
            thit = (e2x * qx + e2y * qy + e2z * qz) * inv
            if 1e-9 < thit < 1.0 - 1e-7:
                hit_any = True
                tri_hit_out[t] = True
        blocked_out[r] = hit_any


def closest_point_on_triangle(p, a, b, c):
    """Closest point to ``p`` on triangle ``abc`` (array convenience wrapper)."""
    q = _closest_on_triangle(p[0], p[1], p[2], a[0], a[1], a[2],
                             b[0], b[1], b[2], c[0], c[1], c[2])
    return np.array(q)


def segment_segment_distance(p1, q1, p2, q2):
    """Minimum distance between segments p1q1 and p2q2."""
    return _segment_segment_distance(p1[0], p1[1], p1[2], q1[0], q1[1], q1[2],
                                     p2[0], p2[1], p2[2], q2[0], q2[1], q2[2])


def segment_triangle_distance(s0, s1, a, b, c):
    """Minimum distance between a segment and a triangle (0 when piercing)."""
    return _segment_triangle_distance(s0[0], s0[1], s0[2], s1[0], s1[1], s1[2],
                                      a[0], a[1], a[2], b[0], b[1], b[2],
                                      c[0], c[1], c[2])


def hemisphere_points(center, radius, toward, n_points):
    """Deterministic spherical-Fibonacci samples on the hemisphere of a
    sphere facing ``toward`` (a world point, typically the camera origin)."""
    center = np.asarray(center, dtype=np.float64)
    axis = np.asarray(toward, dtype=np.float64) - center
    norm = np.linalg.norm(axis)
    if norm < 1e-12:
        axis = np.array([0.0, 0.0, 1.0])
    else:
        axis = axis / norm
    ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, ref)
    u /= np.linalg.norm(u)
    v = np.cross(axis, u)

    k = np.arange(n_points, dtype=np.float64)
    z = (k + 0.5) / n_points        # height along the facing axis, in (0, 1)
    rho = np.sqrt(1.0 - z * z)
    phi = k * GOLDEN_ANGLE
    local = (np.outer(rho * np.cos(phi), u)
             + np.outer(rho * np.sin(phi), v)
             + np.outer(z, axis))
    return center + radius * local


def enclosed_volume(vertices: np.ndarray, triangles: np.ndarray) -> float:
    """Signed volume enclosed by a triangulated surface (mm^3)."""
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)
