import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gauss_avatar.body_model import PoseParams, pose_body
from gauss_avatar.errors import ValidationError
from gauss_avatar.gaussians import CompactFeature, PoseSpaceGaussianSet
from gauss_avatar.lift import (
    AttentionWeights,
    LatentCode,
    attention_matrix,
    cross_attention_lift,
    positional_encode,
    unproject_to_uv,
)
from gauss_avatar.rotations import matrix_to_quat, quat_multiply, quat_to_matrix
from gauss_avatar.uv_atlas import UVMap

from conftest import single_triangle_body
from oracles import quat_matrix
from pipelines import lift_round_trip


def one_gaussian(pos, rot=(1.0, 0, 0, 0), alpha=0.8, scale=0.01):
    return PoseSpaceGaussianSet([pos], [rot], [[scale] * 3], [alpha], [[0.1, 0.2, 0.3]])


def tri_mesh():
    body = single_triangle_body()
    return body, pose_body(body, PoseParams.identity(1))


class TestUnproject:
    def test_on_surface_identity_rotation(self):
        body, posed = tri_mesh()
        res = unproject_to_uv(one_gaussian([0.25, 0.25, 0.0]), posed, 8, 8)
        texel = res.param_map.data[2, 2]
        assert res.param_map.valid[2, 2] and res.written == 1
        np.testing.assert_allclose(texel[4:7], 0.0, atol=1e-9)
        # tangent frame for this triangle is the identity: t = x, b = y, n = z
        np.testing.assert_allclose(quat_matrix(texel[7:11]), np.eye(3), atol=1e-9)
        np.testing.assert_allclose(texel[0:4], [0.8, 0.1, 0.2, 0.3])

    def test_rotated_frame_gives_inverse_rotation(self):
        # triangle in the y-z plane: t = y, b = z, n = x
        body = single_triangle_body(verts=[[0.0, 0, 0], [0, 1, 0], [0, 0, 1]])
        posed = pose_body(body, PoseParams.identity(1))
        res = unproject_to_uv(one_gaussian([0.0, 0.3, 0.3]), posed, 8, 8)
        R = np.array([[0.0, 0, 1], [1, 0, 0], [0, 1, 0]])
        texel = res.param_map.data[res.param_map.valid][0]
        np.testing.assert_allclose(quat_matrix(texel[7:11]), R.T, atol=1e-9)

    def test_normal_displacement(self):
        body, posed = tri_mesh()
        res = unproject_to_uv(one_gaussian([0.3, 0.2, 0.05]), posed, 8, 8)
        texel = res.param_map.data[res.param_map.valid][0]
        np.testing.assert_allclose(texel[4:7], [0.0, 0.0, 0.05], atol=1e-6)

    def test_scale_divided_by_frame_scale(self):
        body = single_triangle_body(verts=[[0.0, 0, 0], [2, 0, 0], [0, 2, 0]])
        posed = pose_body(body, PoseParams.identity(1))
        res = unproject_to_uv(one_gaussian([0.5, 0.5, 0.0], scale=0.02), posed, 8, 8)
        np.testing.assert_allclose(res.param_map.data[res.param_map.valid][0][11:14], 0.01)

    def test_collision_keeps_highest_alpha(self):
        body, posed = tri_mesh()
        g = PoseSpaceGaussianSet(
            [[0.26, 0.26, 0], [0.27, 0.27, 0], [0.26, 0.27, 0.01]],
            [[1.0, 0, 0, 0]] * 3, [[0.01] * 3] * 3, [0.3, 0.9, 0.9], [[0, 0, 0], [1, 0, 0], [0, 1, 0]],
        )
        res = unproject_to_uv(g, posed, 8, 8)
        assert (res.written, res.collisions, res.skipped) == (1, 2, 0)
        np.testing.assert_array_equal(res.param_map.data[2, 2, 1:4], [1, 0, 0])

    def test_average_mode(self):
        body, posed = tri_mesh()
        g = PoseSpaceGaussianSet(
            [[0.26, 0.26, 0], [0.27, 0.27, 0]], [[1.0, 0, 0, 0], [-1.0, 0, 0, 0]], [[0.01] * 3] * 2,
            [0.2, 0.6], [[0, 0, 0], [1, 0, 0]],
        )
        res = unproject_to_uv(g, posed, 8, 8, collision="average")
        texel = res.param_map.data[2, 2]
        assert texel[0] == pytest.approx(0.4)
        np.testing.assert_allclose(np.abs(texel[7:11]), [1, 0, 0, 0], atol=1e-12)
        assert res.total == 2

    def test_degenerate_face_skipped(self):
        body = single_triangle_body(verts=[[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
        posed = pose_body(body, PoseParams.identity(1))
        res = unproject_to_uv(one_gaussian([0.5, 0.1, 0]), posed, 8, 8)
        assert (res.written, res.skipped) == (0, 1)
        assert not res.param_map.valid.any()

    def test_unknown_policy(self):
        body, posed = tri_mesh()
        with pytest.raises(ValidationError):
            unproject_to_uv(one_gaussian([0, 0, 0]), posed, 8, 8, collision="min")

    @given(st.integers(1, 60), st.integers(0, 2**31 - 1))
    def test_counts_add_up(self, n, seed):
        rng = np.random.default_rng(seed)
        body, posed = tri_mesh()
        pos = rng.uniform(-0.2, 1.2, size=(n, 3))
        rot = np.tile([1.0, 0, 0, 0], (n, 1))
        g = PoseSpaceGaussianSet(pos, rot, np.full((n, 3), 0.01), rng.random(n), rng.random((n, 3)))
        res = unproject_to_uv(g, posed, 4, 4)
        assert res.total == n
        assert res.written == int(res.param_map.valid.sum())

    def test_round_trip(self, tube, canonical):
        sampled, recovered, res = lift_round_trip(tube, canonical)
        assert res.collisions == 0 and res.skipped == 0
        for sl in (slice(0, 1), slice(1, 4), slice(4, 7), slice(11, 14)):
            np.testing.assert_allclose(recovered[:, sl], sampled[:, sl], atol=1e-5, rtol=0)
        dots = np.abs(np.sum(recovered[:, 7:11] * sampled[:, 7:11], axis=1))
        np.testing.assert_allclose(dots, 1.0, atol=1e-9)


class TestPositionalEncoding:
    def test_zero_frequencies(self, rng):
        m = UVMap(rng.normal(size=(4, 4, 3)), np.ones((4, 4), bool))
        np.testing.assert_array_equal(positional_encode(m, 0).data, m.data)

    def test_origin(self):
        out = positional_encode(UVMap(np.zeros((2, 2, 3)), np.ones((2, 2), bool)), 4)
        assert out.channels == 27
        for i in range(4):
            base = 3 + 6 * i
            np.testing.assert_array_equal(out.data[..., base:base + 3], 0.0)
            np.testing.assert_array_equal(out.data[..., base + 3:base + 6], 1.0)

    def test_values(self):
        x = np.array([0.25, -0.5, 1.0])
        out = positional_encode(UVMap(x.reshape(1, 1, 3), np.ones((1, 1), bool)), 2).data[0, 0]
        np.testing.assert_allclose(out[3:6], np.sin(np.pi * x))
        np.testing.assert_allclose(out[12:15], np.cos(2 * np.pi * x))

    def test_wrong_channels(self):
        with pytest.raises(ValidationError):
            positional_encode(UVMap(np.zeros((2, 2, 4)), np.ones((2, 2), bool)))


def small_weights(rng, d_model=27, cp=14, d_out=8):
    return AttentionWeights.random(rng, d_model=d_model, context_width=cp, d_q=16, d_v=16, d_out=d_out)


def query_map(rng, size=8, d_model=27):
    return UVMap(rng.normal(size=(size, size, d_model)), np.ones((size, size), bool))


class TestAttention:
    def test_single_row_context(self, rng):
        w = small_weights(rng)
        x = rng.normal(size=(1, 14))
        z = cross_attention_lift(query_map(rng), x, w, latent_size=(8, 8))
        expect = (x @ w.w_v @ w.w_o)[0]
        np.testing.assert_array_equal(z.data, np.broadcast_to(expect[:, None, None], z.shape))

    def test_matches_explicit_formula(self, rng):
        w = small_weights(rng)
        x = rng.normal(size=(5, 14))
        qm = query_map(rng, 4)
        z = cross_attention_lift(qm, x, w, latent_size=(4, 4))
        q = qm.data[1, 2]
        logits = np.array([(q @ w.w_q) @ (xi @ w.w_k) for xi in x]) / np.sqrt(16)
        a = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(z.data[:, 1, 2], ((a @ (x @ w.w_v)) @ w.w_o), rtol=1e-10, atol=1e-12)

    @given(st.integers(1, 40), st.integers(0, 2**31 - 1))
    def test_permutation_invariant(self, p, seed):
        rng = np.random.default_rng(seed)
        w = small_weights(rng)
        x = rng.normal(size=(p, 14))
        qm = query_map(rng, 4)
        a = cross_attention_lift(qm, x, w, latent_size=(4, 4))
        b = cross_attention_lift(qm, x[rng.permutation(p)], w, latent_size=(4, 4))
        np.testing.assert_allclose(a.data, b.data, atol=1e-6, rtol=0)

    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 50))
    def test_softmax_rows(self, seed, gain):
        rng = np.random.default_rng(seed)
        w = small_weights(rng)
        attn = attention_matrix(gain * rng.normal(size=(30, 27)), rng.normal(size=(20, 14)), w)
        assert np.all(attn >= 0)
        np.testing.assert_allclose(attn.sum(axis=1), 1.0, atol=1e-6)

    def test_default_shape(self, rng):
        w = AttentionWeights.random(rng)
        cf = CompactFeature(rng.normal(size=(64, 14)), np.arange(64))
        z = cross_attention_lift(query_map(rng, 64), cf, w)
        assert z.shape == (256, 64, 64)
        assert np.all(np.isfinite(z.data))

    def test_shape_errors(self, rng):
        w = small_weights(rng)
        with pytest.raises(ValidationError):
            cross_attention_lift(query_map(rng, 8), rng.normal(size=(3, 14)), w, latent_size=(4, 4))
        with pytest.raises(ValidationError):
            cross_attention_lift(query_map(rng, 4, 9), rng.normal(size=(3, 14)), w, latent_size=(4, 4))
        with pytest.raises(ValidationError):
            cross_attention_lift(query_map(rng, 4), rng.normal(size=(3, 15)), w, latent_size=(4, 4))
        with pytest.raises(ValidationError):
            cross_attention_lift(query_map(rng, 4), np.zeros((0, 14)), w, latent_size=(4, 4))

    def test_weight_validation(self):
        with pytest.raises(ValidationError):
            AttentionWeights(np.zeros((27, 4)), np.zeros((14, 5)), np.zeros((14, 4)), np.zeros((4, 8)))
        with pytest.raises(ValidationError):
            AttentionWeights(np.full((27, 4), np.nan), np.zeros((14, 4)), np.zeros((14, 4)), np.zeros((4, 8)))

    def test_latent_round_trip(self, rng):
        z = LatentCode(rng.normal(size=(5, 3, 4)))
        np.testing.assert_array_equal(LatentCode.from_uvmap(z.to_uvmap()).data, z.data)
        with pytest.raises(ValidationError):
            LatentCode(np.zeros((3, 3)))
