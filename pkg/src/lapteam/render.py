"""Deterministic software rasterizer for the endoscopic view.

Flat-shaded z-buffered triangles for the organs, screen-space capsules for
the instrument shafts, a white disc for the target sphere and dark ground
capsules as instrument drop shadows.  Colors follow the scene constants:
liver red, gallbladder yellow, gripper blue, cauter green, target white.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from . import kinematics as kin
from .scene import (COLOR_BACKGROUND, COLOR_CAUTER, COLOR_GALLBLADDER,
                    COLOR_GRIPPER, COLOR_LIVER, COLOR_TARGET)
from .softbody import INSTRUMENT_RADIUS_MM

_LIGHT = np.array([0.3, 0.8, 0.5])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)
_NEAR = 2.0


class CameraModel:
    """Pinhole projection: world -> (pixel x, pixel y, view depth)."""

    def __init__(self, position, look_at, fov_deg, width, height):
        self.position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(look_at, dtype=np.float64) - self.position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        self.basis = np.stack([right, up, forward])
        self.width = width
        self.height = height
        self.focal = (height / 2.0) / math.tan(math.radians(fov_deg) / 2.0)

    def project(self, points):
        view = (np.atleast_2d(points) - self.position) @ self.basis.T
        depth = view[:, 2]
        safe = np.maximum(depth, 1e-6)
        px = self.width / 2.0 + self.focal * view[:, 0] / safe
        py = self.height / 2.0 - self.focal * view[:, 1] / safe
        return np.column_stack([px, py, depth])


@njit(cache=True, fastmath=False)
def _raster_triangles(pix, zbuf, pts, depth, tris, shade, color):
    h, w = zbuf.shape
    for t in range(tris.shape[0]):
        ia, ib, ic = tris[t, 0], tris[t, 1], tris[t, 2]
        if depth[ia] < _NEAR or depth[ib] < _NEAR or depth[ic] < _NEAR:
            continue
        ax, ay = pts[ia, 0], pts[ia, 1]
        bx, by = pts[ib, 0], pts[ib, 1]
        cx, cy = pts[ic, 0], pts[ic, 1]
        xmin = max(int(math.floor(min(ax, bx, cx))), 0)
        xmax = min(int(math.ceil(max(ax, bx, cx))), w - 1)
        ymin = max(int(math.floor(min(ay, by, cy))), 0)
        ymax = min(int(math.ceil(max(ay, by, cy))), h - 1)
        if xmin > xmax or ymin > ymax:
            continue
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < 1e-12:
            continue
        inv_area = 1.0 / area
        s = shade[t]
        r = min(255.0, color[0] * s)
        g = min(255.0, color[1] * s)
        b = min(255.0, color[2] * s)
        for py in range(ymin, ymax + 1):
            for px in range(xmin, xmax + 1):
                x = px + 0.5
                y = py + 0.5
                w0 = ((cx - bx) * (y - by) - (cy - by) * (x - bx)) * inv_area
                w1 = ((ax - cx) * (y - cy) - (ay - cy) * (x - cx)) * inv_area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                z = w0 * depth[ia] + w1 * depth[ib] + w2 * depth[ic]
                if z < zbuf[py, px]:
                    zbuf[py, px] = z
                    pix[py, px, 0] = r
                    pix[py, px, 1] = g
                    pix[py, px, 2] = b


@njit(cache=True, fastmath=False)
def _raster_capsule(pix, zbuf, x0, y0, z0, r0, x1, y1, z1, r1, cr, cg, cb):
    h, w = zbuf.shape
    rmax = max(r0, r1)
    xmin = max(int(math.floor(min(x0, x1) - rmax)), 0)
    xmax = min(int(math.ceil(max(x0, x1) + rmax)), w - 1)
    ymin = max(int(math.floor(min(y0, y1) - rmax)), 0)
    ymax = min(int(math.ceil(max(y0, y1) + rmax)), h - 1)
    dx = x1 - x0
    dy = y1 - y0
    seg2 = dx * dx + dy * dy
    for py in range(ymin, ymax + 1):
        for px in range(xmin, xmax + 1):
            x = px + 0.5
            y = py + 0.5
            if seg2 > 1e-12:
                t = ((x - x0) * dx + (y - y0) * dy) / seg2
                t = min(max(t, 0.0), 1.0)
            else:
                t = 0.0
            qx = x0 + t * dx
            qy = y0 + t * dy
            d2 = (x - qx) ** 2 + (y - qy) ** 2
            radius = r0 + t * (r1 - r0)
            if d2 > radius * radius:
                continue
            z = z0 + t * (z1 - z0)
            if z < zbuf[py, px]:
                zbuf[py, px] = z
                pix[py, px, 0] = cr
                pix[py, px, 1] = cg
                pix[py, px, 2] = cb


def _face_shades(vertices, triangles):
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    n = np.cross(b - a, c - a)
    norms = np.linalg.norm(n, axis=1)
    norms[norms < 1e-12] = 1.0
    lit = np.abs((n / norms[:, None]) @ _LIGHT)
    return 0.55 + 0.45 * lit


def _draw_mesh(pix, zbuf, cam, vertices, triangles, color):
    proj = cam.project(vertices)
    pts = np.ascontiguousarray(proj[:, :2])
    depth = np.ascontiguousarray(proj[:, 2])
    shade = _face_shades(vertices, triangles)
    _raster_triangles(pix, zbuf, pts, depth,
                      np.ascontiguousarray(triangles), shade,
                      np.asarray(color, dtype=np.float64))


def _draw_capsule_world(pix, zbuf, cam, p0, p1, radius_mm, color):
    proj = cam.project(np.stack([p0, p1]))
    if proj[0, 2] < _NEAR and proj[1, 2] < _NEAR:
        return
    r0 = cam.focal * radius_mm / max(proj[0, 2], _NEAR)
    r1 = cam.focal * radius_mm / max(proj[1, 2], _NEAR)
    _raster_capsule(pix, zbuf,
                    proj[0, 0], proj[0, 1], proj[0, 2], r0,
                    proj[1, 0], proj[1, 1], proj[1, 2], r1,
                    float(color[0]), float(color[1]), float(color[2]))


def _shadow_segment(scene, p):
    """Project a shaft point straight down onto the liver top, clipped."""
    x = min(max(p[0], scene.liver_vertices[:, 0].min()),
            scene.liver_vertices[:, 0].max())
    z = min(max(p[2], scene.liver_vertices[:, 2].min()),
            scene.liver_vertices[:, 2].max())
    return np.array([x, 0.35, z])


def render_scene(state, scene, config) -> np.ndarray:
    """Rasterize the current world state to an RGB uint8 image (H, W, 3)."""
    width, height = config.image_size
    cam = CameraModel(scene.camera_position, scene.camera_look_at,
                      scene.camera_fov_deg, width, height)
    pix = np.empty((height, width, 3), dtype=np.float64)
    pix[:, :] = COLOR_BACKGROUND
    zbuf = np.full((height, width), np.inf)

    _draw_mesh(pix, zbuf, cam, scene.liver_vertices, scene.liver_triangles,
               COLOR_LIVER)
    _draw_mesh(pix, zbuf, cam, state.body.vertices, state.body.triangles,
               COLOR_GALLBLADDER)

    proj_t = cam.project(state.target.center_mm)[0]
    if proj_t[2] > _NEAR:
        r_px = cam.focal * state.target.radius_mm / proj_t[2]
        _raster_capsule(pix, zbuf, proj_t[0], proj_t[1], proj_t[2], r_px,
                        proj_t[0], proj_t[1], proj_t[2], r_px,
                        float(COLOR_TARGET[0]), float(COLOR_TARGET[1]),
                        float(COLOR_TARGET[2]))

    shadow = (40.0, 22.0, 24.0)
    gripper_frame = scene.gripper_frame()
    cauter_frame = scene.cauter_frame()
    for frame, pose, color in (
            (gripper_frame, state.gripper_pose, COLOR_GRIPPER),
            (cauter_frame, state.cauter_pose, COLOR_CAUTER)):
        p0, p1 = kin.shaft_segment(frame, pose)
        s0 = _shadow_segment(scene, p0)
        s1 = _shadow_segment(scene, p1)
        _draw_capsule_world(pix, zbuf, cam, s0, s1, INSTRUMENT_RADIUS_MM, shadow)
        _draw_capsule_world(pix, zbuf, cam, p0, p1, INSTRUMENT_RADIUS_MM, color)

    return pix.astype(np.uint8)


def count_color_pixels(image, color, tol=30):
    """Pixels within an L-inf tolerance of a reference color."""
    diff = np.abs(image.astype(np.int64) - np.asarray(color, dtype=np.int64))
    return int(np.all(diff <= tol, axis=-1).sum())
