import numpy as np
import pytest

from gauss_avatar.body_model import PoseParams, pose_body
from gauss_avatar.bvh import TriangleBVH, closest_points_brute_force
from gauss_avatar.lift import nearest_surface_point, nearest_surface_points

from oracles import brute_closest


def test_vertex_query_returns_lowest_incident_face(tube):
    posed = tube.rest_mesh()
    v = int(tube.faces[5, 1])
    incident = np.flatnonzero(np.any(tube.faces == v, axis=1))
    f, bary, d = nearest_surface_point(tube.rest_vertices[v], posed)
    assert f == incident.min()
    assert d == pytest.approx(0.0, abs=1e-12)
    corner = list(tube.faces[f]).index(v)
    np.testing.assert_allclose(bary, np.eye(3)[corner], atol=1e-12)


def test_height_above_triangle():
    tri = np.array([[[0.0, 0, 0], [2, 0, 0], [0, 2, 0]]])
    bvh = TriangleBVH.build(tri)
    f, bary, d = bvh.query(np.array([[0.5, 0.25, 0.7]]))
    assert f[0] == 0
    assert d[0] == pytest.approx(0.7, abs=1e-12)
    np.testing.assert_allclose(bary[0] @ tri[0], [0.5, 0.25, 0.0], atol=1e-12)


def test_random_queries_match_brute_force(tube, rng):
    posed = pose_body(tube, PoseParams.identity(tube.num_joints))
    tris = posed.face_corners()
    lo, hi = tris.reshape(-1, 3).min(0), tris.reshape(-1, 3).max(0)
    pts = rng.uniform(lo - 0.1, hi + 0.1, size=(1000, 3))
    face, bary, dist = nearest_surface_points(pts, posed)
    for k in range(1000):
        f_ref, d_ref, dists = brute_closest(pts[k], tris)
        assert abs(dist[k] - d_ref) <= 1e-9
        assert face[k] == f_ref or abs(dists[face[k]] - d_ref) <= 1e-9
        np.testing.assert_allclose(np.linalg.norm(bary[k] @ tris[face[k]] - pts[k]), d_ref, atol=1e-9)


def test_bvh_equals_linear_scan(rng):
    tris = rng.normal(size=(300, 3, 3))
    pts = rng.normal(size=(500, 3)) * 2
    a = TriangleBVH.build(tris, leaf_size=2).query(pts)
    b = closest_points_brute_force(tris, pts)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_allclose(a[2], b[2], atol=1e-12)


def test_empty_mesh():
    with pytest.raises(ValueError):
        TriangleBVH.build(np.zeros((0, 3, 3)))
