"""Deformable gallbladder physics and contact queries.

The tissue is a closed triangulated surface driven by position-based
dynamics: per substep, gravity and damping act on velocities, predicted
positions are projected onto edge-length and enclosed-volume constraints,
then grasp pins snap their vertices to the gripper tip.  There is no
tissue-tissue or instrument-tissue contact response; instruments interact
through grasp pins and through detection-only collision reports.

All solver passes are sequential and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from .geometry import (capsule_mesh_contacts, enclosed_volume,
                       hemisphere_points, ray_hits_mask,
                       segment_segment_distance)

INSTRUMENT_RADIUS_MM = 2.5
TISSUE_OFFSET_MM = 0.5
GRASP_BREAK_THRESHOLD_MM = 5.0


class SimulationDivergedError(RuntimeError):
    """A physics step produced non-finite vertex positions."""


@dataclass(frozen=True)
class SimParams:
    """Solver constants for the position-based tissue model."""

    gravity_mm_s2: tuple[float, float, float] = (0.0, -9810.0, 0.0)
    damping_per_substep: float = 0.98
    substeps: int = 4
    iterations: int = 10
    edge_stiffness: float = 1.0
    volume_stiffness: float = 1.0
    # Un-pinned relaxation passes used to probe grasp tension.  One pass
    # measures the immediate pull of the tissue on each pinned vertex.
    grasp_probe_iterations: int = 1


@dataclass
class DeformableBody:
    """Closed deformable surface with distance and volume constraints.

    ``fixed_mask`` marks vertices attached to the liver; they are never
    written by the solver.  Constraint topology is immutable for the life
    of the body, only ``vertices`` and ``velocities`` evolve.
    """

    vertices: np.ndarray        # (n, 3) mm
    velocities: np.ndarray      # (n, 3) mm/s
    triangles: np.ndarray       # (m, 3) int
    edges: np.ndarray           # (e, 2) int
    rest_lengths: np.ndarray    # (e,) mm
    rest_volume: float          # mm^3
    fixed_mask: np.ndarray      # (n,) bool
    masses: np.ndarray          # (n,) kg

    def __post_init__(self):
        n = self.vertices.shape[0]
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise ValueError("triangle indices out of range")
        if np.any(self.rest_lengths <= 0.0):
            raise ValueError("edge rest lengths must be positive")
        if self.masses.shape != (n,) or np.any(self.masses <= 0.0):
            raise ValueError("every vertex needs positive mass")

    @property
    def inverse_masses(self) -> np.ndarray:
        cached = getattr(self, "_inv_mass", None)
        if cached is None:
            cached = 1.0 / self.masses
            cached[self.fixed_mask] = 0.0
            object.__setattr__(self, "_inv_mass", cached)
        return cached

    def enclosed_volume(self) -> float:
        return enclosed_volume(self.vertices, self.triangles)

    def copy_state(self) -> "DeformableBody":
        new = replace(self, vertices=self.vertices.copy(),
                      velocities=self.velocities.copy())
        cached = getattr(self, "_inv_mass", None)
        if cached is not None:
            object.__setattr__(new, "_inv_mass", cached)
        return new


@dataclass(frozen=True)
class GraspBinding:
    """Point attachment of one gallbladder vertex to the gripper tip.

    ``local_offset_mm`` is expressed in the gripper-tip frame so the pinned
    point rides rigidly with the tip.  Once broken a binding never
    reattaches.
    """

    vertex_id: int
    local_offset_mm: np.ndarray
    elongation_mm: float = 0.0
    broken: bool = False


@dataclass(frozen=True)
class PairContact:
    hit: bool = False
    contacts: int = 0


@dataclass(frozen=True)
class CollisionReport:
    """Per-pair contact flags for one simulation step.

    Grasping is not contact: the gripper-gallbladder pair is deliberately
    not reported.
    """

    gripper_liver: PairContact = PairContact()
    cauter_liver: PairContact = PairContact()
    cauter_gallbladder: PairContact = PairContact()
    instrument_instrument: PairContact = PairContact()

    def any(self) -> bool:
        return (self.gripper_liver.hit or self.cauter_liver.hit
                or self.cauter_gallbladder.hit or self.instrument_instrument.hit)


@dataclass(frozen=True)
class TargetSphere:
    center_mm: np.ndarray
    radius_mm: float

    def __post_init__(self):
        object.__setattr__(self, "center_mm",
                           np.asarray(self.center_mm, dtype=np.float64))
        if self.radius_mm <= 0.0:
            raise ValueError("target radius must be positive")


@dataclass(frozen=True)
class Capsule:
    """Instrument shaft proxy: segment from p0 to p1 with a radius."""

    p0: np.ndarray
    p1: np.ndarray
    radius: float = INSTRUMENT_RADIUS_MM


@njit(cache=True, fastmath=False)
def _edge_pass(pos, inv_mass, edges, rest_len, k_edge):
    for e in range(edges.shape[0]):
        i = edges[e, 0]
        j = edges[e, 1]
        wi = inv_mass[i]
        wj = inv_mass[j]
        wsum = wi + wj
        if wsum <= 0.0:
            continue
        dx = pos[i, 0] - pos[j, 0]
        dy = pos[i, 1] - pos[j, 1]
        dz = pos[i, 2] - pos[j, 2]
        length = (dx * dx + dy * dy + dz * dz) ** 0.5
        if length < 1e-12:
            continue
        scale = k_edge * (length - rest_len[e]) / (length * wsum)
        if wi > 0.0:
            pos[i, 0] -= wi * scale * dx
            pos[i, 1] -= wi * scale * dy
            pos[i, 2] -= wi * scale * dz
        if wj > 0.0:
            pos[j, 0] += wj * scale * dx
            pos[j, 1] += wj * scale * dy
            pos[j, 2] += wj * scale * dz


@njit(cache=True, fastmath=False)
def _volume_pass(pos, inv_mass, tris, rest_volume, k_vol, grad):
    volume = 0.0
    grad[:] = 0.0
    for t in range(tris.shape[0]):
        ia = tris[t, 0]
        ib = tris[t, 1]
        ic = tris[t, 2]
        ax, ay, az = pos[ia, 0], pos[ia, 1], pos[ia, 2]
        bx, by, bz = pos[ib, 0], pos[ib, 1], pos[ib, 2]
        cx, cy, cz = pos[ic, 0], pos[ic, 1], pos[ic, 2]
        # b x c, c x a, a x b
        volume += (ax * (by * cz - bz * cy)
                   + ay * (bz * cx - bx * cz)
                   + az * (bx * cy - by * cx)) / 6.0
        grad[ia, 0] += (by * cz - bz * cy) / 6.0
        grad[ia, 1] += (bz * cx - bx * cz) / 6.0
        grad[ia, 2] += (bx * cy - by * cx) / 6.0
        grad[ib, 0] += (cy * az - cz * ay) / 6.0
        grad[ib, 1] += (cz * ax - cx * az) / 6.0
        grad[ib, 2] += (cx * ay - cy * ax) / 6.0
        grad[ic, 0] += (ay * bz - az * by) / 6.0
        grad[ic, 1] += (az * bx - ax * bz) / 6.0
        grad[ic, 2] += (ax * by - ay * bx) / 6.0
    denom = 0.0
    for i in range(pos.shape[0]):
        w = inv_mass[i]
        if w > 0.0:
            denom += w * (grad[i, 0] ** 2 + grad[i, 1] ** 2 + grad[i, 2] ** 2)
    if denom < 1e-12:
        return
    s = k_vol * (volume - rest_volume) / denom
    for i in range(pos.shape[0]):
        w = inv_mass[i]
        if w > 0.0:
            pos[i, 0] -= s * w * grad[i, 0]
            pos[i, 1] -= s * w * grad[i, 1]
            pos[i, 2] -= s * w * grad[i, 2]


@njit(cache=True, fastmath=False)
def _project(pos, inv_mass, edges, rest_len, tris, rest_volume,
             k_edge, k_vol, iterations, pin_ids, pin_targets, grad):
    for _ in range(iterations):
        _edge_pass(pos, inv_mass, edges, rest_len, k_edge)
        _volume_pass(pos, inv_mass, tris, rest_volume, k_vol, grad)
        for p in range(pin_ids.shape[0]):
            i = pin_ids[p]
            pos[i, 0] = pin_targets[p, 0]
            pos[i, 1] = pin_targets[p, 1]
            pos[i, 2] = pin_targets[p, 2]


@njit(cache=True, fastmath=False)
def _pbd_step(pos, vel, inv_mass, edges, rest_len, tris, rest_volume,
              gravity, damping, dt, substeps, iterations, k_edge, k_vol,
              pin_ids, pin_targets):
    n = pos.shape[0]
    h = dt / substeps
    prev = np.empty_like(pos)
    grad = np.empty_like(pos)
    for _ in range(substeps):
        for i in range(n):
            prev[i, 0] = pos[i, 0]
            prev[i, 1] = pos[i, 1]
            prev[i, 2] = pos[i, 2]
            if inv_mass[i] > 0.0:
                for k in range(3):
                    v = (vel[i, k] + gravity[k] * h) * damping
                    vel[i, k] = v
                    pos[i, k] += v * h
        _project(pos, inv_mass, edges, rest_len, tris, rest_volume,
                 k_edge, k_vol, iterations, pin_ids, pin_targets, grad)
        for i in range(n):
            if inv_mass[i] > 0.0:
                for k in range(3):
                    vel[i, k] = (pos[i, k] - prev[i, k]) / h


def _pin_arrays(grasps, gripper_tip):
    rotation, tip = gripper_tip
    live = [g for g in grasps if not g.broken]
    if not live:
        return (np.empty(0, dtype=np.int64), np.empty((0, 3), dtype=np.float64))
    ids = np.array([g.vertex_id for g in live], dtype=np.int64)
    offsets = np.stack([g.local_offset_mm for g in live])
    targets = tip[None, :] + offsets @ np.asarray(rotation).T
    return ids, np.ascontiguousarray(targets)


def step_physics(body: DeformableBody, grasps, gripper_tip, dt: float,
                 substeps: int | None = None,
                 params: SimParams = SimParams()) -> DeformableBody:
    """Advance the tissue by one step of duration ``dt`` seconds.

    ``gripper_tip`` is the (rotation, position) pair of the gripper tip;
    unbroken grasp bindings pin their vertices to it.  Returns a new body;
    the input is left untouched.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    substeps = params.substeps if substeps is None else substeps
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    pin_ids, pin_targets = _pin_arrays(grasps, gripper_tip)
    out = body.copy_state()
    _pbd_step(out.vertices, out.velocities, body.inverse_masses,
              body.edges, body.rest_lengths, body.triangles, body.rest_volume,
              np.asarray(params.gravity_mm_s2, dtype=np.float64),
              params.damping_per_substep, dt, substeps, params.iterations,
              params.edge_stiffness, params.volume_stiffness,
              pin_ids, pin_targets)
    if not np.isfinite(out.vertices).all():
        raise SimulationDivergedError("non-finite vertex positions after physics step")
    return out


def update_grasp(grasps, body: DeformableBody, gripper_tip,
                 break_threshold_mm: float = GRASP_BREAK_THRESHOLD_MM,
                 params: SimParams = SimParams()):
    """Re-measure binding tension and break overstretched bindings.

    Elongation of a binding is the gap between its pin target and where the
    tissue constraints alone would place the vertex (one un-pinned
    relaxation pass from the current state).  A binding whose elongation
    exceeds the threshold breaks permanently.
    """
    if break_threshold_mm <= 0.0:
        raise ValueError("break threshold must be positive")
    live = [g for g in grasps if not g.broken]
    if not live:
        return tuple(grasps)
    rotation, tip = gripper_tip
    relaxed = body.vertices.copy()
    grad = np.empty_like(relaxed)
    no_pins = np.empty(0, dtype=np.int64)
    no_targets = np.empty((0, 3), dtype=np.float64)
    _project(relaxed, body.inverse_masses, body.edges, body.rest_lengths,
             body.triangles, body.rest_volume, params.edge_stiffness,
             params.volume_stiffness, params.grasp_probe_iterations,
             no_pins, no_targets, grad)
    out = []
    for g in grasps:
        if g.broken:
            out.append(g)
            continue
        target = tip + np.asarray(rotation) @ g.local_offset_mm
        elongation = float(np.linalg.norm(target - relaxed[g.vertex_id]))
        out.append(replace(g, elongation_mm=elongation,
                           broken=elongation > break_threshold_mm))
    return tuple(out)


def attach_grasp(body: DeformableBody, vertex_ids, gripper_tip):
    """Bind vertices to the gripper tip with their current offsets."""
    rotation, tip = gripper_tip
    inv_rot = np.asarray(rotation).T
    bindings = []
    for vid in vertex_ids:
        if body.fixed_mask[vid]:
            raise ValueError(f"cannot grasp fixed vertex {vid}")
        offset = inv_rot @ (body.vertices[vid] - tip)
        bindings.append(GraspBinding(int(vid), offset))
    return tuple(bindings)


def detect_collisions(body: DeformableBody, liver_vertices, liver_triangles,
                      gripper_shaft: Capsule, cauter_shaft: Capsule) -> CollisionReport:
    """Proximity tests between instrument shafts, organs and each other.

    A pair is in contact when its minimum distance is strictly below the
    sum of surface offsets (capsule radius + tissue offset for organ pairs,
    the two radii for the instrument pair).
    """
    if gripper_shaft.radius <= 0.0 or cauter_shaft.radius <= 0.0:
        raise ValueError("capsule radii must be positive")
    lv = np.ascontiguousarray(liver_vertices, dtype=np.float64)
    lt = np.ascontiguousarray(liver_triangles, dtype=np.int64)
    gv = np.ascontiguousarray(body.vertices)
    gt = np.ascontiguousarray(body.triangles)

    def pair(capsule, verts, tris):
        threshold = capsule.radius + TISSUE_OFFSET_MM
        _, count = capsule_mesh_contacts(
            np.asarray(capsule.p0, dtype=np.float64),
            np.asarray(capsule.p1, dtype=np.float64),
            verts, tris, threshold)
        return PairContact(count > 0, count)

    d_ii = segment_segment_distance(
        np.asarray(gripper_shaft.p0, dtype=np.float64),
        np.asarray(gripper_shaft.p1, dtype=np.float64),
        np.asarray(cauter_shaft.p0, dtype=np.float64),
        np.asarray(cauter_shaft.p1, dtype=np.float64))
    ii_hit = d_ii < gripper_shaft.radius + cauter_shaft.radius
    return CollisionReport(
        gripper_liver=pair(gripper_shaft, lv, lt),
        cauter_liver=pair(cauter_shaft, lv, lt),
        cauter_gallbladder=pair(cauter_shaft, gv, gt),
        instrument_instrument=PairContact(bool(ii_hit), int(ii_hit)),
    )


def occlusion_query(body: DeformableBody, camera_origin, target: TargetSphere,
                    n_rays: int) -> tuple[float, int]:
    """Fraction of sight lines to the target not blocked by the gallbladder.

    Rays run from the camera origin to deterministic low-discrepancy points
    on the camera-facing hemisphere of the target sphere.  Also reports how
    many distinct gallbladder triangles block any ray.
    """
    if n_rays < 1:
        raise ValueError("n_rays must be >= 1")
    origin = np.asarray(camera_origin, dtype=np.float64)
    points = hemisphere_points(target.center_mm, target.radius_mm, origin, n_rays)
    return occlusion_query_points(body, origin, points)


def occlusion_query_points(body: DeformableBody, camera_origin,
                           sample_points: np.ndarray) -> tuple[float, int]:
    """Occlusion against precomputed sample points (target and camera are
    static within an episode, so callers may cache the hemisphere)."""
    origin = np.asarray(camera_origin, dtype=np.float64)
    n_rays = sample_points.shape[0]
    blocked = np.zeros(n_rays, dtype=np.bool_)
    tri_hit = np.zeros(body.triangles.shape[0], dtype=np.bool_)
    ray_hits_mask(origin, np.ascontiguousarray(sample_points),
                  np.ascontiguousarray(body.vertices),
                  np.ascontiguousarray(body.triangles), blocked, tri_hit)
    visible = 1.0 - blocked.sum() / n_rays
    return float(visible), int(tri_hit.sum())


def edges_from_triangles(triangles: np.ndarray) -> np.ndarray:
    """Unique undirected edges of a triangle mesh."""
    pairs = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]],
                            triangles[:, [2, 0]]])
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0).astype(np.int64)
