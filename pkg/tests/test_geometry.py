import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lapteam import geometry as geo


def brute_point_triangle(p, a, b, c, n=400):
    """Oracle: dense barycentric sampling of the triangle."""
    best = np.inf
    for i in range(n + 1):
        for j in range(n + 1 - i):
            u, v = i / n, j / n
            q = a + u * (b - a) + v * (c - a)
            best = min(best, np.linalg.norm(p - q))
    return best


def brute_segment_triangle(s0, s1, a, b, c, n=120):
    """Oracle: dense sampling of segment points against the triangle."""
    best = np.inf
    for t in np.linspace(0.0, 1.0, n + 1):
        p = s0 + t * (s1 - s0)
        best = min(best, brute_point_triangle(p, a, b, c, n=60))
    return best


TRI = (np.array([0.0, 0.0, 0.0]), np.array([10.0, 0.0, 0.0]),
       np.array([0.0, 10.0, 0.0]))


def test_closest_point_inside_projection():
    p = np.array([2.0, 2.0, 5.0])
    q = geo.closest_point_on_triangle(p, *TRI)
    np.testing.assert_allclose(q, [2.0, 2.0, 0.0], atol=1e-12)


def test_closest_point_vertex_and_edge_regions():
    q = geo.closest_point_on_triangle(np.array([-1.0, -1.0, 0.0]), *TRI)
    np.testing.assert_allclose(q, [0.0, 0.0, 0.0], atol=1e-12)
    q = geo.closest_point_on_triangle(np.array([5.0, -3.0, 1.0]), *TRI)
    np.testing.assert_allclose(q, [5.0, 0.0, 0.0], atol=1e-12)


@given(st.lists(st.floats(-12, 12), min_size=3, max_size=3))
@settings(max_examples=40, deadline=None)
def test_closest_point_matches_brute_force(coords):
    p = np.array(coords)
    q = geo.closest_point_on_triangle(p, *TRI)
    d = np.linalg.norm(p - q)
    assert d <= brute_point_triangle(p, *TRI) + 2e-2


def test_segment_segment_parallel_and_crossing():
    d = geo.segment_segment_distance(np.array([0.0, 0, 0]), np.array([1.0, 0, 0]),
                                     np.array([0.0, 1, 0]), np.array([1.0, 1, 0]))
    assert d == pytest.approx(1.0)
    d = geo.segment_segment_distance(np.array([-1.0, 0, 0]), np.array([1.0, 0, 0]),
                                     np.array([0.0, -1, 1]), np.array([0.0, 1, 1]))
    assert d == pytest.approx(1.0)


def test_segment_triangle_piercing_is_zero():
    s0 = np.array([2.0, 2.0, -5.0])
    s1 = np.array([2.0, 2.0, 5.0])
    assert geo.segment_triangle_distance(s0, s1, *TRI) == 0.0


def test_segment_triangle_exact_offset():
    # Segment parallel to the triangle plane at height h.
    s0 = np.array([1.0, 1.0, 3.0])
    s1 = np.array([4.0, 2.0, 3.0])
    assert geo.segment_triangle_distance(s0, s1, *TRI) == pytest.approx(3.0)


@given(st.lists(st.floats(-15, 15), min_size=6, max_size=6))
@settings(max_examples=30, deadline=None)
def test_segment_triangle_matches_brute_force(coords):
    s0 = np.array(coords[:3])
    s1 = np.array(coords[3:])
    d = geo.segment_triangle_distance(s0, s1, *TRI)
    ref = brute_segment_triangle(s0, s1, *TRI)
    assert d <= ref + 1e-9          # never overestimates the true minimum
    assert ref - d <= 0.25          # sampling resolution of the oracle


def test_capsule_mesh_contacts_counts():
    verts = np.array([TRI[0], TRI[1], TRI[2], [20.0, 0.0, 0.0],
                      [30.0, 0.0, 0.0], [20.0, 10.0, 0.0]])
    tris = np.array([[0, 1, 2], [3, 4, 5]], dtype=np.int64)
    s0 = np.array([2.0, 2.0, 2.0])
    s1 = np.array([3.0, 3.0, 2.0])
    dist, count = geo.capsule_mesh_contacts(s0, s1, verts, tris, 2.5)
    assert dist == pytest.approx(2.0)
    assert count == 1
    # Strict inequality: at exactly the threshold there is no contact.
    dist, count = geo.capsule_mesh_contacts(s0, s1, verts, tris, 2.0)
    assert count == 0


def test_ray_hits_wall():
    # Unit wall between origin and targets.
    verts = np.array([[-5.0, -5.0, 5.0], [5.0, -5.0, 5.0], [0.0, 8.0, 5.0]])
    tris = np.array([[0, 1, 2]], dtype=np.int64)
    origin = np.zeros(3)
    targets = np.array([[0.0, 0.0, 10.0],   # through the wall
                        [0.0, 0.0, -10.0],  # opposite direction
                        [0.0, 0.0, 4.0]])   # stops short of the wall
    blocked = np.zeros(3, dtype=np.bool_)
    tri_hit = np.zeros(1, dtype=np.bool_)
    geo.ray_hits_mask(origin, targets, verts, tris, blocked, tri_hit)
    assert blocked.tolist() == [True, False, False]
    assert tri_hit[0]


def test_hemisphere_points_face_camera_and_lie_on_sphere():
    center = np.array([1.0, 2.0, 3.0])
    toward = np.array([1.0, 2.0, 50.0])
    pts = geo.hemisphere_points(center, 2.5, toward, 128)
    radii = np.linalg.norm(pts - center, axis=1)
    np.testing.assert_allclose(radii, 2.5, atol=1e-12)
    axis = (toward - center) / np.linalg.norm(toward - center)
    assert np.all((pts - center) @ axis > 0.0)


def test_hemisphere_points_deterministic():
    a = geo.hemisphere_points([0, 0, 0], 1.0, [0, 0, 9], 64)
    b = geo.hemisphere_points([0, 0, 0], 1.0, [0, 0, 9], 64)
    assert np.array_equal(a, b)


def test_enclosed_volume_of_cube():
    # Unit cube, outward-oriented triangles.
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)],
                 dtype=np.float64)
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1),
             (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    vol = geo.enclosed_volume(v, np.array(tris, dtype=np.int64))
    assert abs(vol) == pytest.approx(1.0)
