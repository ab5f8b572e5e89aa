"""Procedural surgical scene: organs, trocar ports, camera and targets.

World frame: x right, y up (gravity is -y), z toward the endoscope.  All
lengths in millimeters.  The gallbladder is an ellipsoidal closed surface
whose rear-bottom strip is fused to the liver (the attachment patch); its
front pole is the neck the gripper holds.  Three candidate targets sit on
the liver surface along the front border of the attachment patch, hidden
under the gallbladder body until it is lifted.

Scenes serialize to a versioned JSON mesh file so experiments are
reproducible artifacts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kinematics import TrocarFrame, frame_aimed_at
from .softbody import DeformableBody, edges_from_triangles

SCENE_SCHEMA_VERSION = 1

# Fig-1 style color scheme, RGB in [0, 255].
COLOR_LIVER = (170, 40, 40)
COLOR_GALLBLADDER = (210, 190, 60)
COLOR_GRIPPER = (60, 90, 220)
COLOR_CAUTER = (60, 180, 80)
COLOR_TARGET = (255, 255, 255)
COLOR_BACKGROUND = (24, 16, 20)


class SceneFormatError(ValueError):
    """Scene file is malformed or has an unsupported schema version."""


@dataclass
class Scene:
    """Immutable geometry template shared by all episodes."""

    gb_rest_vertices: np.ndarray     # (n, 3)
    gb_triangles: np.ndarray         # (m, 3)
    fixed_ids: np.ndarray            # attachment patch vertex ids
    grasp_ids: np.ndarray            # neck vertex ids held by the gripper
    liver_vertices: np.ndarray
    liver_triangles: np.ndarray
    target_positions: np.ndarray     # (3, 3) candidate target centers
    target_radius_mm: float
    gripper_pivot: np.ndarray
    gripper_aim: np.ndarray
    cauter_pivot: np.ndarray
    cauter_aim: np.ndarray
    gripper_insertion0: float
    cauter_insertion0: float
    camera_position: np.ndarray
    camera_look_at: np.ndarray
    camera_fov_deg: float
    vertex_mass_kg: float

    def gripper_frame(self) -> TrocarFrame:
        return frame_aimed_at(self.gripper_pivot, self.gripper_aim)

    def cauter_frame(self) -> TrocarFrame:
        return frame_aimed_at(self.cauter_pivot, self.cauter_aim)

    def make_body(self) -> DeformableBody:
        verts = self.gb_rest_vertices.copy()
        tris = self.gb_triangles
        edges = edges_from_triangles(tris)
        rest = np.linalg.norm(verts[edges[:, 0]] - verts[edges[:, 1]], axis=1)
        fixed = np.zeros(len(verts), dtype=bool)
        fixed[self.fixed_ids] = True
        from .geometry import enclosed_volume
        return DeformableBody(
            vertices=verts,
            velocities=np.zeros_like(verts),
            triangles=tris,
            edges=edges,
            rest_lengths=rest,
            rest_volume=enclosed_volume(verts, tris),
            fixed_mask=fixed,
            masses=np.full(len(verts), self.vertex_mass_kg),
        )


def _ellipsoid(center, semi_axes, rings=12, segments=16):
    """Closed UV-triangulated ellipsoid, long axis along z."""
    cx, cy, cz = center
    ax, ay, az = semi_axes
    verts = [(cx, cy, cz + az)]                       # front pole (neck)
    for r in range(1, rings + 1):
        theta = math.pi * r / (rings + 1)
        st, ct = math.sin(theta), math.cos(theta)
        for s in range(segments):
            phi = 2.0 * math.pi * s / segments
            verts.append((cx + ax * st * math.cos(phi),
                          cy + ay * st * math.sin(phi),
                          cz + az * ct))
    verts.append((cx, cy, cz - az))                   # rear pole (fundus)
    last = len(verts) - 1

    tris = []
    for s in range(segments):
        tris.append((0, 1 + s, 1 + (s + 1) % segments))
    for r in range(rings - 1):
        row0 = 1 + r * segments
        row1 = row0 + segments
        for s in range(segments):
            s1 = (s + 1) % segments
            tris.append((row0 + s, row1 + s, row1 + s1))
            tris.append((row0 + s, row1 + s1, row0 + s1))
    row = 1 + (rings - 1) * segments
    for s in range(segments):
        tris.append((last, row + (s + 1) % segments, row + s))
    return (np.array(verts, dtype=np.float64),
            np.array(tris, dtype=np.int64))


def _liver_slab(x_half=70.0, z_min=-55.0, z_max=35.0, thickness=14.0,
                nx=15, nz=10, dent_center=(0.0, -16.0), dent_depth=2.0,
                dent_sigma=12.0):
    """Rigid liver: gridded top surface with a shallow fossa, skirt and base."""
    xs = np.linspace(-x_half, x_half, nx)
    zs = np.linspace(z_min, z_max, nz)
    verts = []
    for iz, z in enumerate(zs):
        for ix, x in enumerate(xs):
            d2 = (x - dent_center[0]) ** 2 + (z - dent_center[1]) ** 2
            y = -dent_depth * math.exp(-d2 / (2.0 * dent_sigma ** 2))
            verts.append((x, y, z))
    tris = []
    for iz in range(nz - 1):
        for ix in range(nx - 1):
            a = iz * nx + ix
            b = a + 1
            c = a + nx
            d = c + 1
            tris.append((a, c, b))
            tris.append((b, c, d))

    # Perimeter skirt down to a flat base.
    rim = ([iz * nx for iz in range(nz)]
           + [(nz - 1) * nx + ix for ix in range(1, nx)]
           + [iz * nx + nx - 1 for iz in range(nz - 2, -1, -1)]
           + [ix for ix in range(nx - 2, 0, -1)])
    base_start = len(verts)
    for idx in rim:
        x, _, z = verts[idx]
        verts.append((x, -thickness, z))
    n_rim = len(rim)
    for k in range(n_rim):
        k1 = (k + 1) % n_rim
        top_a, top_b = rim[k], rim[k1]
        bot_a, bot_b = base_start + k, base_start + k1
        tris.append((top_a, bot_a, top_b))
        tris.append((top_b, bot_a, bot_b))
    center_idx = len(verts)
    verts.append((0.0, -thickness, (z_min + z_max) / 2.0))
    for k in range(n_rim):
        k1 = (k + 1) % n_rim
        tris.append((center_idx, base_start + k1, base_start + k))
    return (np.array(verts, dtype=np.float64),
            np.array(tris, dtype=np.int64))


def _liver_surface_height(x, z, dent_center=(0.0, -16.0), dent_depth=2.0,
                          dent_sigma=12.0):
    d2 = (x - dent_center[0]) ** 2 + (z - dent_center[1]) ** 2
    return -dent_depth * math.exp(-d2 / (2.0 * dent_sigma ** 2))


def build_default_scene() -> Scene:
    center = (0.0, 9.0, -2.0)
    semi = (18.0, 10.0, 27.5)
    gb_verts, gb_tris = _ellipsoid(center, semi)

    # Attachment: rear-bottom strip fused to the liver bed.
    fixed = np.where((gb_verts[:, 1] < 3.5) & (gb_verts[:, 2] < -11.0))[0]

    # Neck: the four free vertices closest to the front pole.
    front_pole = np.array([center[0], center[1], center[2] + semi[2]])
    order = np.argsort(np.linalg.norm(gb_verts - front_pole, axis=1))
    grasp = [i for i in order if i not in set(fixed.tolist())][:4]

    liver_verts, liver_tris = _liver_slab()

    target_xs = (-8.0, 0.0, 8.0)
    target_z = -9.0
    targets = np.array([
        (x, _liver_surface_height(x, target_z) + 1.0, target_z)
        for x in target_xs
    ])

    gripper_pivot = np.array([-12.0, 105.0, -27.0])
    gripper_aim = gb_verts[grasp].mean(axis=0)
    cauter_pivot = np.array([40.0, 55.0, 160.0])
    cauter_aim = np.array([0.0, 1.0, -9.0])

    return Scene(
        gb_rest_vertices=gb_verts,
        gb_triangles=gb_tris,
        fixed_ids=np.asarray(fixed, dtype=np.int64),
        grasp_ids=np.asarray(grasp, dtype=np.int64),
        liver_vertices=liver_verts,
        liver_triangles=liver_tris,
        target_positions=targets,
        target_radius_mm=2.5,
        gripper_pivot=gripper_pivot,
        gripper_aim=gripper_aim,
        cauter_pivot=cauter_pivot,
        cauter_aim=cauter_aim,
        gripper_insertion0=float(np.linalg.norm(gripper_aim - gripper_pivot)),
        cauter_insertion0=120.0,
        camera_position=np.array([0.0, 40.0, 190.0]),
        camera_look_at=np.array([0.0, 5.0, 0.0]),
        camera_fov_deg=42.0,
        vertex_mass_kg=1e-4,
    )


def save_scene(scene: Scene, path) -> None:
    data = {
        "schema_version": SCENE_SCHEMA_VERSION,
        "gb_vertices": scene.gb_rest_vertices.tolist(),
        "gb_triangles": scene.gb_triangles.tolist(),
        "fixed_ids": scene.fixed_ids.tolist(),
        "grasp_ids": scene.grasp_ids.tolist(),
        "liver_vertices": scene.liver_vertices.tolist(),
        "liver_triangles": scene.liver_triangles.tolist(),
        "target_positions": scene.target_positions.tolist(),
        "target_radius_mm": scene.target_radius_mm,
        "gripper_pivot": scene.gripper_pivot.tolist(),
        "gripper_aim": scene.gripper_aim.tolist(),
        "cauter_pivot": scene.cauter_pivot.tolist(),
        "cauter_aim": scene.cauter_aim.tolist(),
        "gripper_insertion0": scene.gripper_insertion0,
        "cauter_insertion0": scene.cauter_insertion0,
        "camera_position": scene.camera_position.tolist(),
        "camera_look_at": scene.camera_look_at.tolist(),
        "camera_fov_deg": scene.camera_fov_deg,
        "vertex_mass_kg": scene.vertex_mass_kg,
    }
    Path(path).write_text(json.dumps(data, indent=1))


def load_scene(path) -> Scene:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"unreadable scene file {path}: {exc}") from exc
    version = data.get("schema_version")
    if version != SCENE_SCHEMA_VERSION:
        raise SceneFormatError(
            f"scene schema version {version!r} unsupported "
            f"(expected {SCENE_SCHEMA_VERSION})")
    arr = lambda key, dtype=np.float64: np.asarray(data[key], dtype=dtype)
    return Scene(
        gb_rest_vertices=arr("gb_vertices"),
        gb_triangles=arr("gb_triangles", np.int64),
        fixed_ids=arr("fixed_ids", np.int64),
        grasp_ids=arr("grasp_ids", np.int64),
        liver_vertices=arr("liver_vertices"),
        liver_triangles=arr("liver_triangles", np.int64),
        target_positions=arr("target_positions"),
        target_radius_mm=float(data["target_radius_mm"]),
        gripper_pivot=arr("gripper_pivot"),
        gripper_aim=arr("gripper_aim"),
        cauter_pivot=arr("cauter_pivot"),
        cauter_aim=arr("cauter_aim"),
        gripper_insertion0=float(data["gripper_insertion0"]),
        cauter_insertion0=float(data["cauter_insertion0"]),
        camera_position=arr("camera_position"),
        camera_look_at=arr("camera_look_at"),
        camera_fov_deg=float(data["camera_fov_deg"]),
        vertex_mass_kg=float(data["vertex_mass_kg"]),
    )
