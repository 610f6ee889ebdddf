import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gauss_avatar import synthetic
from gauss_avatar.body_model import forward_kinematics, lbs_deform
from gauss_avatar.camera import Camera
from gauss_avatar.errors import FormatError, ValidationError
from gauss_avatar.gaussians import SamplerCache, StructuredGaussianSet, compose_param_maps, sample_structured
from gauss_avatar.render import (
    WorldGaussians,
    configure_threads,
    place_gaussians,
    project_gaussian,
    project_gaussians,
    rasterize,
    render_avatar,
)
from gauss_avatar.rotations import axis_angle_to_quat
from gauss_avatar.uv_atlas import TangentFrames, tangent_frames

from oracles import composite_brute, homogeneous, project_ewa, quat_matrix
from pipelines import random_frames_and_offsets, random_scene

IDENTITY_Q = np.array([1.0, 0, 0, 0])


def world(means, alphas, rgbs, scale=0.05, quats=None):
    n = len(means)
    quats = np.tile(IDENTITY_Q, (n, 1)) if quats is None else np.asarray(quats, float)
    return WorldGaussians(np.asarray(means, float), quats, np.full((n, 3), scale), np.asarray(alphas, float),
                          np.asarray(rgbs, float))


def axis_camera(size=32):
    return Camera(40.0, 40.0, size / 2, size / 2, size, size)


def one_structured(params):
    params = np.atleast_2d(params)
    n = len(params)
    return StructuredGaussianSet(np.zeros(n, dtype=np.int64), np.tile([1.0, 0, 0], (n, 1)), np.zeros((n, 2)), params)


def params_row(dxyz=(0, 0, 0), drot=IDENTITY_Q, dscale=(0.01, 0.01, 0.01)):
    p = np.zeros(14)
    p[0], p[1:4], p[4:7], p[7:11], p[11:14] = 0.5, (0.2, 0.4, 0.6), dxyz, drot, dscale
    return p


def single_frame(T=(0, 0, 0), R=np.eye(3), S=1.0, valid=True):
    return TangentFrames(np.array([T], float), np.array([R], float), np.array([S]), np.array([valid]))


class TestPlacement:
    def test_identity_frame(self):
        q = axis_angle_to_quat([0, 1, 0], 0.4)
        p = params_row((0.1, 0, 0), q, (0.01, 0.02, 0.03))
        w, dropped = place_gaussians(one_structured(p), single_frame())
        assert dropped == 0
        np.testing.assert_allclose(w.means[0], [0.1, 0, 0], atol=1e-15)
        np.testing.assert_allclose(w.rotations[0], q, atol=1e-15)
        np.testing.assert_allclose(w.scales[0], [0.01, 0.02, 0.03], atol=1e-15)
        np.testing.assert_array_equal(w.alphas, [0.5])
        np.testing.assert_array_equal(w.rgbs[0], [0.2, 0.4, 0.6])

    def test_rotated_frame(self):
        Rz = quat_matrix(axis_angle_to_quat([0, 0, 1], np.pi / 2))
        w, _ = place_gaussians(one_structured(params_row((0.1, 0, 0))), single_frame((1, 2, 3), Rz))
        np.testing.assert_allclose(w.means[0], [1, 2.1, 3], atol=1e-12)

    def test_scale(self):
        w, _ = place_gaussians(one_structured(params_row()), single_frame(S=2.0))
        np.testing.assert_allclose(w.scales[0], 0.02)

    def test_invalid_frame_dropped(self):
        w, dropped = place_gaussians(one_structured(params_row()), single_frame(valid=False))
        assert (len(w), dropped) == (0, 1)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            place_gaussians(one_structured(np.stack([params_row()] * 2)), single_frame())

    @given(st.integers(0, 2**31 - 1))
    def test_matches_rigid_composition(self, seed):
        rng = np.random.default_rng(seed)
        s, frames = random_frames_and_offsets(rng, 20)
        w, _ = place_gaussians(s, frames)
        for i in range(20):
            F = homogeneous(frames.R[i], frames.T[i])
            D = homogeneous(quat_matrix(s.params[i, 7:11]), s.params[i, 4:7])
            G = F @ D
            np.testing.assert_allclose(w.means[i], G[:3, 3], atol=1e-6)
            np.testing.assert_allclose(quat_matrix(w.rotations[i]), G[:3, :3], atol=1e-6)
            np.testing.assert_allclose(w.scales[i], frames.S[i] * s.params[i, 11:14], atol=1e-6)
            assert abs(np.linalg.norm(w.rotations[i]) - 1) < 1e-12


class TestProjection:
    def test_on_axis(self):
        cam = axis_camera()
        mean2d, cov, depth = project_gaussian(world([[0, 0, 2.0]], [1], [[1, 1, 1]], scale=0.05), cam)
        np.testing.assert_allclose(mean2d, [16, 16])
        np.testing.assert_allclose(cov, ((40 * 0.05 / 2) ** 2 + 0.3) * np.eye(2), atol=1e-12)
        assert depth == 2.0

    def test_behind_camera_culled(self):
        assert project_gaussian(world([[0, 0, -1.0]], [1], [[1, 1, 1]]), axis_camera()) is None

    def test_matches_oracle(self, rng):
        g, cam, _ = random_scene(rng)
        pr = project_gaussians(g, cam)
        for i in range(len(g)):
            r = project_ewa(g.means[i], g.rotations[i], g.scales[i], cam.R, cam.t, cam.fx, cam.fy, cam.cx, cam.cy)
            assert (r is not None) == pr.visible[i]
            if r is not None:
                np.testing.assert_allclose(pr.mean2d[i], r[0], atol=1e-9)
                np.testing.assert_allclose(pr.cov2d[i], r[1], rtol=1e-9, atol=1e-9)


class TestRasterize:
    def test_empty_scene(self):
        img = rasterize(WorldGaussians.empty(), axis_camera(), background=(0.1, 0.2, 0.3))
        np.testing.assert_array_equal(img.rgb, np.broadcast_to([0.1, 0.2, 0.3], (32, 32, 3)))
        np.testing.assert_array_equal(img.alpha, 0.0)

    def test_single_gaussian_clamped(self):
        c = np.array([0.2, 0.5, 0.9])
        img = rasterize(world([[0, 0, 2.0]], [1.0], [c]), axis_camera())
        np.testing.assert_allclose(img.rgb[16, 16], 0.999 * c, atol=1e-12)
        assert img.alpha[16, 16] == pytest.approx(0.999, abs=1e-12)

    def test_two_coincident(self):
        c1, c2, bg = np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), np.array([0, 0, 1.0])
        img = rasterize(world([[0, 0, 3.0], [0, 0, 2.0]], [0.5, 0.5], [c2, c1]), axis_camera(), background=bg)
        np.testing.assert_allclose(img.rgb[16, 16], 0.5 * c1 + 0.25 * c2 + 0.25 * bg, atol=1e-12)
        assert img.alpha[16, 16] == pytest.approx(0.75, abs=1e-12)

    def test_zero_alpha_is_background(self, rng):
        g, cam, bg = random_scene(rng)
        g.alphas[:] = 0.0
        img = rasterize(g, cam, bg)
        np.testing.assert_array_equal(img.rgb, np.broadcast_to(bg, img.rgb.shape))
        np.testing.assert_array_equal(img.alpha, 0.0)

    @pytest.mark.parametrize("tile", [1, 5, 16, 64])
    def test_matches_brute_force(self, rng, tile):
        for _ in range(5):
            g, cam, bg = random_scene(rng)
            img = rasterize(g, cam, bg, tile=tile)
            rgb, alpha = composite_brute(g.means, g.rotations, g.scales, g.alphas, g.rgbs, cam, bg)
            assert np.abs(img.rgb - rgb).max() <= 1e-5
            assert np.abs(img.alpha - alpha).max() <= 1e-5

    def test_bad_tile(self):
        with pytest.raises(ValidationError):
            rasterize(WorldGaussians.empty(), axis_camera(), tile=0)

    def test_order_invariant(self, rng):
        g, cam, bg = random_scene(rng, max_gaussians=64)
        perm = rng.permutation(len(g))
        a = rasterize(g, cam, bg)
        b = rasterize(g.subset(perm), cam, bg)
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.alpha, b.alpha)

    def test_thread_count_independent(self, rng):
        g, cam, bg = random_scene(rng)
        a = rasterize(g, cam, bg)
        configure_threads(1)
        try:
            b = rasterize(g, cam, bg)
        finally:
            configure_threads()
        np.testing.assert_array_equal(a.rgb, b.rgb)

    @given(st.integers(0, 2**31 - 1), st.floats(0, 1))
    def test_alpha_monotone(self, seed, bump):
        rng = np.random.default_rng(seed)
        g, cam, bg = random_scene(rng, max_gaussians=16, size=16)
        before = rasterize(g, cam, bg).alpha
        k = int(rng.integers(len(g)))
        g.alphas[k] = max(g.alphas[k], bump)
        after = rasterize(g, cam, bg).alpha
        assert np.all(after >= before - 1e-12)
        assert np.all((after >= 0) & (after <= 1))

    def test_rgba8(self):
        img = rasterize(world([[0, 0, 2.0]], [1.0], [[1, 1, 1]]), axis_camera())
        out = img.rgba8()
        assert out.dtype == np.uint8 and out.shape == (32, 32, 4)
        assert out[16, 16, 3] == 255


@pytest.fixture(scope="module")
def scene(tube, canonical):
    cam = synthetic.default_camera(width=64, height=64)
    pose = synthetic.swing_pose(tube, 0.5)
    return tube, canonical, synthetic.make_offset_map(canonical), pose, cam


class TestRenderAvatar:
    def test_stage_composition(self, scene):
        body, canonical, offset, pose, cam = scene
        img = render_avatar(canonical, offset, body, pose, cam, n_uv=2000, n_surface=2000, seed=3)
        s = sample_structured(compose_param_maps(canonical, offset), body, 2000, 2000, 3)
        posed = lbs_deform(body, forward_kinematics(body, pose))
        w, _ = place_gaussians(s, tangent_frames(posed, s.faces, s.barycentric))
        ref = rasterize(w, cam)
        np.testing.assert_array_equal(img.rgb, ref.rgb)
        np.testing.assert_array_equal(img.alpha, ref.alpha)

    def test_none_offset_equals_zero_map(self, scene):
        body, canonical, _, pose, cam = scene
        a = render_avatar(canonical, None, body, pose, cam, n_uv=1000, n_surface=1000)
        b = render_avatar(canonical, canonical.zeros_like(), body, pose, cam, n_uv=1000, n_surface=1000)
        np.testing.assert_array_equal(a.rgb, b.rgb)

    def test_cache_transparent(self, scene):
        body, canonical, offset, pose, cam = scene
        cache = SamplerCache.build(canonical, body, 1500, 1500, seed=2)
        timings = {}
        a = render_avatar(canonical, offset, body, pose, cam, cache, n_uv=1500, n_surface=1500, seed=2, timings=timings)
        b = render_avatar(canonical, offset, body, pose, cam, n_uv=1500, n_surface=1500, seed=2)
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.alpha, b.alpha)
        assert set(timings) == {"compose", "sample", "skin", "frames", "place", "rasterize"}
        assert a.alpha.max() > 0.5

    def test_mismatched_cache(self, scene):
        body, canonical, offset, pose, cam = scene
        cache = SamplerCache.build(canonical, body, 10, 10, seed=2)
        with pytest.raises(ValidationError):
            render_avatar(canonical, offset, body, pose, cam, cache, n_uv=10, n_surface=10, seed=3)


class TestCamera:
    def test_look_at(self):
        cam = Camera.look_at([0, 0, -3], [0, 0, 0], width=64, height=48)
        np.testing.assert_allclose(cam.center, [0, 0, -3], atol=1e-12)
        np.testing.assert_allclose(cam.world_to_camera([[0, 0, 0]]), [[0, 0, 3]], atol=1e-12)
        # world up lands in the upper half of the image (y down)
        p = cam.world_to_camera([[0, 1, 0]])[0]
        assert cam.fy * p[1] / p[2] + cam.cy < cam.cy

    def test_dict_round_trip(self):
        cam = Camera.look_at([1, 2, 3], [0, 0, 0])
        back = Camera.from_dict(cam.to_dict())
        np.testing.assert_array_equal(back.R, cam.R)
        assert back.fx == cam.fx and back.width == cam.width

    def test_invalid(self):
        with pytest.raises(ValidationError):
            Camera(0, 1, 0, 0, 4, 4)
        with pytest.raises(ValidationError):
            Camera(1, 1, 0, 0, 4, 4, R=2 * np.eye(3))
        with pytest.raises(FormatError):
            Camera.from_dict({"fx": 1})
