import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gauss_avatar import synthetic
from gauss_avatar.body_model import PosedMesh, PoseParams, pose_body
from gauss_avatar.camera import Camera
from gauss_avatar.errors import ValidationError
from gauss_avatar.rotations import quat_to_matrix, random_quaternions
from gauss_avatar.uv_atlas import (
    UVMap,
    UVRasterization,
    condition_maps,
    face_frames,
    plucker_rays,
    rasterize_uv_attribute,
    tangent_frames,
    texel_centers,
)

from conftest import single_triangle_body


def test_texel_centers():
    c = texel_centers(4, 2)
    assert c.shape == (2, 4, 2)
    np.testing.assert_allclose(c[0, 0], [0.125, 0.25])
    np.testing.assert_allclose(c[1, 3], [0.875, 0.75])


class TestRasterize:
    def test_constant_attribute(self, tube):
        m = rasterize_uv_attribute(tube.rest_mesh(), np.full((tube.num_vertices, 2), 3.5), 32, 32)
        assert m.valid.any()
        np.testing.assert_allclose(m.data[m.valid], 3.5)

    def test_hand_barycentric(self):
        body = single_triangle_body()
        m = rasterize_uv_attribute(body.rest_mesh(), np.array([0.0, 1.0, 2.0]), 2, 2)
        # texel (0, 0) has center (0.25, 0.25): weights (0.5, 0.25, 0.25)
        assert m.valid[0, 0]
        assert m.data[0, 0, 0] == pytest.approx(0.75, abs=1e-15)

    def test_uncovered_texel_is_zero_and_invalid(self):
        body = single_triangle_body()
        m = rasterize_uv_attribute(body.rest_mesh(), np.array([1.0, 1.0, 1.0]), 2, 2)
        # center (0.75, 0.75) lies outside u + v <= 1
        assert not m.valid[1, 1]
        assert m.data[1, 1, 0] == 0.0

    def test_first_face_wins_on_shared_edge(self):
        uv = np.array([[[0.0, 0], [1, 0], [0, 1]], [[1.0, 0], [1, 1], [0, 1]]])
        r = UVRasterization.build(uv, 4, 4)
        # centers on the diagonal u + v = 1 belong to both; the lower index wins
        assert r.face_index[0, 3] == 0 and r.face_index[3, 0] == 0
        assert r.valid.all()

    def test_barycentrics_reproduce_uv(self, tube):
        r = UVRasterization.build(tube.uv_corners, 64, 64)
        uv = np.einsum("nk,nkc->nc", r.barycentric[r.valid], tube.uv_corners[r.face_index[r.valid]])
        np.testing.assert_allclose(uv, texel_centers(64, 64)[r.valid], atol=1e-12)

    def test_attribute_size_mismatch(self, tube):
        with pytest.raises(ValidationError):
            rasterize_uv_attribute(tube.rest_mesh(), np.zeros(5), 8, 8)


class TestConditionMaps:
    def cam(self):
        return synthetic.default_camera(64, 64)

    def test_relative_zero_at_neutral(self, tube):
        rest = tube.rest_mesh()
        maps = condition_maps(tube, rest, rest, self.cam(), 32, 32)
        np.testing.assert_array_equal(maps.relative.data[maps.relative.valid], 0.0)

    def test_flat_triangle_normal(self):
        body = single_triangle_body()
        rest = body.rest_mesh()
        maps = condition_maps(body, rest, rest, self.cam(), 8, 8)
        np.testing.assert_allclose(maps.normals.data[maps.normals.valid], [[0, 0, 1]] * maps.normals.valid.sum())

    def test_segmentation_one_hot(self, tube):
        rest = tube.rest_mesh()
        maps = condition_maps(tube, rest, rest, self.cam(), 32, 32)
        seg = maps.segmentation.data[maps.segmentation.valid]
        np.testing.assert_array_equal(seg.sum(axis=1), 1.0)
        assert seg.shape[1] == tube.num_segments

    def test_plucker_unit_and_orthogonal(self, tube):
        posed = pose_body(tube, synthetic.swing_pose(tube, 0.7))
        maps = condition_maps(tube, posed, tube.rest_mesh(), self.cam(), 64, 64)
        pl = maps.plucker.data[maps.plucker.valid]
        d, m = pl[:, :3], pl[:, 3:]
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(np.sum(d * m, axis=1), 0.0, atol=1e-6)

    def test_ray_through_origin(self):
        ray = plucker_rays(np.zeros(3), np.array([[0.0, 0.0, 1.0]]))
        np.testing.assert_allclose(ray[0], [0, 0, 1, 0, 0, 0])

    def test_moment_is_origin_cross_direction(self):
        o = np.array([1.0, 2.0, 3.0])
        ray = plucker_rays(o, np.array([[1.0, 2.0, 5.0]]))
        np.testing.assert_allclose(ray[0, :3], [0, 0, 1])
        np.testing.assert_allclose(ray[0, 3:], np.cross(o, [0, 0, 1]))


class TestTangentFrames:
    def test_unit_right_triangle(self):
        body = single_triangle_body()
        fr = tangent_frames(body.rest_mesh(), np.array([0]), np.array([[0.2, 0.3, 0.5]]))
        np.testing.assert_allclose(fr.R[0], np.eye(3), atol=1e-15)
        assert fr.S[0] == pytest.approx(1.0)
        np.testing.assert_allclose(fr.T[0], [0.3, 0.5, 0.0])

    def test_scale_follows_area_ratio(self):
        body = single_triangle_body(verts=[[0.0, 0, 0], [2, 0, 0], [0, 2, 0]])
        fr = tangent_frames(body.rest_mesh(), np.array([0]), np.array([[1.0, 0, 0]]))
        assert fr.S[0] == pytest.approx(2.0)

    def test_degenerate_face_flagged(self):
        body = single_triangle_body(verts=[[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
        fr = tangent_frames(body.rest_mesh(), np.array([0]), np.array([[1.0, 0, 0]]))
        assert not fr.valid[0]

    def test_bad_barycentrics(self, tube):
        with pytest.raises(ValidationError):
            tangent_frames(tube.rest_mesh(), np.array([0]), np.array([[0.5, 0.6, 0.1]]))

    def test_orthonormal_on_posed_tube(self, tube):
        posed = pose_body(tube, synthetic.swing_pose(tube, 1.3))
        R, S, valid = face_frames(posed)
        assert valid.all()
        np.testing.assert_allclose(np.einsum("fba,fbc->fac", R, R), np.broadcast_to(np.eye(3), R.shape), atol=1e-6)
        np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-6)

    def test_normal_column_matches_face_normal(self, tube):
        R, _, _ = face_frames(tube.rest_mesh())
        p = tube.rest_vertices[tube.faces]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        np.testing.assert_allclose(R[:, :, 2], n, atol=1e-12)

    @given(st.integers(0, 2**31 - 1))
    def test_rigid_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        body = synthetic.make_tube_body(n_around=8, n_along=6)
        posed = pose_body(body, synthetic.random_pose(body, rng))
        Q = quat_to_matrix(random_quaternions(rng, 1)[0])
        moved = PosedMesh(posed.vertices @ Q.T, posed.vertex_normals @ Q.T, posed.faces, posed.uv_corners,
                          posed.part_labels, posed.num_segments)
        f = rng.integers(0, body.num_faces, 20)
        b = rng.dirichlet(np.ones(3), 20)
        a, m = tangent_frames(posed, f, b), tangent_frames(moved, f, b)
        np.testing.assert_allclose(m.T, a.T @ Q.T, atol=1e-6)
        np.testing.assert_allclose(m.R, Q @ a.R, atol=1e-6)
        np.testing.assert_allclose(m.S, a.S, atol=1e-6)


def test_uvmap_validation():
    with pytest.raises(ValidationError):
        UVMap(np.zeros((4, 4, 2)), np.zeros((4, 3), dtype=bool))
    z = UVMap.zeros(8, 4, 3)
    assert (z.height, z.width, z.channels) == (4, 8, 3)
