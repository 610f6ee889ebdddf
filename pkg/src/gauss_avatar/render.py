"""Tangent-frame placement, Gaussian projection and tile-based splatting.

Compositing per pixel runs front to back in a single global depth order
(ties by input index), so the tiled result matches a brute-force evaluation
of every Gaussian at every pixel.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numba as nb
import numpy as np

from .body_model import PoseParams, SkinnedBody, forward_kinematics, lbs_deform
from .camera import Camera
from .errors import ValidationError
from .gaussians import (
    DEFAULT_N_SURFACE,
    DEFAULT_N_UV,
    GaussianParamMap,
    SamplerCache,
    StructuredGaussianSet,
    compose_param_maps,
    sample_structured,
)
from .rotations import quat_to_matrix
from .uv_atlas import TangentFrames, UVRasterization, tangent_frames

LOW_PASS = 0.3
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.999
Z_NEAR = 0.01
TILE = 16
MIN_COV_DET = 1e-12
THREADS_ENV = "GAUSS_AVATAR_THREADS"


def configure_threads(n: int | None = None) -> int:
    """Cap numba worker threads (argument, else ``GAUSS_AVATAR_THREADS``)."""
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else nb.config.NUMBA_NUM_THREADS
    n = max(1, min(int(n), nb.config.NUMBA_NUM_THREADS))
    nb.set_num_threads(n)
    return n


@dataclass
class WorldGaussians:
    means: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) unit
    scales: np.ndarray  # (N, 3)
    alphas: np.ndarray  # (N,)
    rgbs: np.ndarray  # (N, 3)

    def __len__(self) -> int:
        return self.means.shape[0]

    def subset(self, idx) -> "WorldGaussians":
        return WorldGaussians(self.means[idx], self.rotations[idx], self.scales[idx], self.alphas[idx], self.rgbs[idx])

    @classmethod
    def empty(cls) -> "WorldGaussians":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))


@dataclass
class RenderedImage:
    rgb: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    def rgba8(self) -> np.ndarray:
        rgba = np.concatenate([self.rgb, self.alpha[..., None]], axis=-1)
        return np.round(np.clip(rgba, 0.0, 1.0) * 255.0).astype(np.uint8)


@nb.njit(cache=True, parallel=True)
def _place_kernel(T, R, S, params, means, rots, scales):
    n = T.shape[0]
    for i in nb.prange(n):
        m = R[i]
        for a in range(3):
            means[i, a] = T[i, a] + m[a, 0] * params[i, 4] + m[a, 1] * params[i, 5] + m[a, 2] * params[i, 6]
            scales[i, a] = S[i] * params[i, 11 + a]
        # Shepperd's method, same pivot rule as rotations.matrix_to_quat
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        dmax = max(m[0, 0], max(m[1, 1], m[2, 2]))
        if tr > dmax:
            s = np.sqrt(1.0 + tr) * 2.0
            w, x, y, z = 0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s
        elif m[0, 0] == dmax:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            w, x, y, z = (m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s
        elif m[1, 1] == dmax:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            w, x, y, z = (m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            w, x, y, z = (m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s
        if w < 0.0:
            w, x, y, z = -w, -x, -y, -z
        bw, bx, by, bz = params[i, 7], params[i, 8], params[i, 9], params[i, 10]
        qw = w * bw - x * bx - y * by - z * bz
        qx = w * bx + x * bw + y * bz - z * by
        qy = w * by - x * bz + y * bw + z * bx
        qz = w * bz + x * by - y * bx + z * bw
        nq = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
        rots[i, 0] = qw / nq
        rots[i, 1] = qx / nq
        rots[i, 2] = qy / nq
        rots[i, 3] = qz / nq


def place_gaussians(gaussians: StructuredGaussianSet, frames: TangentFrames) -> tuple[WorldGaussians, int]:
    """Apply ``mean = T + R d_xyz``, ``rot = q(R) * d_rot``, ``scale = S d_scale``.

    Gaussians on invalid frames are dropped; returns the placed set and the
    drop count.
    """
    if len(frames) != len(gaussians):
        raise ValidationError(f"{len(frames)} frames for {len(gaussians)} Gaussians")
    ok = frames.valid
    params = np.ascontiguousarray(gaussians.params[ok], dtype=np.float64)
    n = params.shape[0]
    means, rots, scales = np.empty((n, 3)), np.empty((n, 4)), np.empty((n, 3))
    _place_kernel(
        np.ascontiguousarray(frames.T[ok], dtype=np.float64),
        np.ascontiguousarray(frames.R[ok], dtype=np.float64),
        np.ascontiguousarray(frames.S[ok], dtype=np.float64),
        params, means, rots, scales,
    )
    placed = WorldGaussians(means, rots, scales, params[:, 0].copy(), params[:, 1:4].copy())
    return placed, int(len(gaussians) - ok.sum())


@dataclass
class Projection:
    mean2d: np.ndarray  # (N, 2) pixels
    cov2d: np.ndarray  # (N, 2, 2)
    depth: np.ndarray  # (N,)
    visible: np.ndarray  # (N,) False when culled


def project_gaussians(g: WorldGaussians, cam: Camera, z_near: float = Z_NEAR, low_pass: float = LOW_PASS) -> Projection:
    """EWA projection: ``cov2d = J W Sigma W^T J^T + low_pass * I``."""
    n = len(g)
    Rq = quat_to_matrix(g.rotations)
    M = Rq * g.scales[:, None, :]
    sigma = M @ np.swapaxes(M, 1, 2)
    p = g.means @ cam.R.T + cam.t
    z = p[:, 2]
    visible = z > z_near
    zs = np.where(visible, z, 1.0)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / zs
    J[:, 0, 2] = -cam.fx * p[:, 0] / (zs * zs)
    J[:, 1, 1] = cam.fy / zs
    J[:, 1, 2] = -cam.fy * p[:, 1] / (zs * zs)
    T = J @ cam.R
    cov = T @ sigma @ np.swapaxes(T, 1, 2)
    cov[:, 0, 0] += low_pass
    cov[:, 1, 1] += low_pass
    mean2d = np.stack([cam.fx * p[:, 0] / zs + cam.cx, cam.fy * p[:, 1] / zs + cam.cy], axis=1)
    return Projection(mean2d, cov, z, visible)


def project_gaussian(g: WorldGaussians, cam: Camera):
    """Project a single Gaussian; returns ``(mean2d, cov2d, depth)`` or ``None`` if culled."""
    pr = project_gaussians(g, cam)
    if not pr.visible[0]:
        return None
    return pr.mean2d[0], pr.cov2d[0], float(pr.depth[0])


@nb.njit(cache=True)
def _bin_tiles(x0, x1, y0, y1, tile, tiles_x, tiles_y):
    n = x0.shape[0]
    counts = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    for i in range(n):
        if x1[i] < x0[i] or y1[i] < y0[i]:
            continue
        for ty in range(y0[i] // tile, y1[i] // tile + 1):
            for tx in range(x0[i] // tile, x1[i] // tile + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    items = np.empty(offsets[-1], dtype=np.int64)
    for i in range(n):
        if x1[i] < x0[i] or y1[i] < y0[i]:
            continue
        for ty in range(y0[i] // tile, y1[i] // tile + 1):
            for tx in range(x0[i] // tile, x1[i] // tile + 1):
                t = ty * tiles_x + tx
                items[fill[t]] = i
                fill[t] += 1
    return offsets, items


@nb.njit(cache=True, parallel=True)
def _prepare_kernel(means, quats, scales, alphas, cam_R, cam_t, fx, fy, cx, cy, width, height, z_near, low_pass,
                    mean2d, conic, qmax, depth, bbox, keep):
    n = means.shape[0]
    for i in nb.prange(n):
        keep[i] = False
        px = cam_R[0, 0] * means[i, 0] + cam_R[0, 1] * means[i, 1] + cam_R[0, 2] * means[i, 2] + cam_t[0]
        py = cam_R[1, 0] * means[i, 0] + cam_R[1, 1] * means[i, 1] + cam_R[1, 2] * means[i, 2] + cam_t[1]
        pz = cam_R[2, 0] * means[i, 0] + cam_R[2, 1] * means[i, 1] + cam_R[2, 2] * means[i, 2] + cam_t[2]
        depth[i] = pz
        a = alphas[i]
        if not (pz > z_near) or min(a, ALPHA_MAX) < ALPHA_MIN:
            continue
        w, x, y, z = quats[i, 0], quats[i, 1], quats[i, 2], quats[i, 3]
        nq = np.sqrt(w * w + x * x + y * y + z * z)
        w, x, y, z = w / nq, x / nq, y / nq, z / nq
        r00 = 1 - 2 * (y * y + z * z)
        r01 = 2 * (x * y - w * z)
        r02 = 2 * (x * z + w * y)
        r10 = 2 * (x * y + w * z)
        r11 = 1 - 2 * (x * x + z * z)
        r12 = 2 * (y * z - w * x)
        r20 = 2 * (x * z - w * y)
        r21 = 2 * (y * z + w * x)
        r22 = 1 - 2 * (x * x + y * y)
        s0, s1, s2 = scales[i, 0], scales[i, 1], scales[i, 2]
        # M = R_q diag(s); T = J W; U = T M; cov = U U^T
        inv_z = 1.0 / pz
        j00 = fx * inv_z
        j02 = -fx * px * inv_z * inv_z
        j11 = fy * inv_z
        j12 = -fy * py * inv_z * inv_z
        t00 = j00 * cam_R[0, 0] + j02 * cam_R[2, 0]
        t01 = j00 * cam_R[0, 1] + j02 * cam_R[2, 1]
        t02 = j00 * cam_R[0, 2] + j02 * cam_R[2, 2]
        t10 = j11 * cam_R[1, 0] + j12 * cam_R[2, 0]
        t11 = j11 * cam_R[1, 1] + j12 * cam_R[2, 1]
        t12 = j11 * cam_R[1, 2] + j12 * cam_R[2, 2]
        u00 = (t00 * r00 + t01 * r10 + t02 * r20) * s0
        u01 = (t00 * r01 + t01 * r11 + t02 * r21) * s1
        u02 = (t00 * r02 + t01 * r12 + t02 * r22) * s2
        u10 = (t10 * r00 + t11 * r10 + t12 * r20) * s0
        u11 = (t10 * r01 + t11 * r11 + t12 * r21) * s1
        u12 = (t10 * r02 + t11 * r12 + t12 * r22) * s2
        c00 = u00 * u00 + u01 * u01 + u02 * u02 + low_pass
        c01 = u00 * u10 + u01 * u11 + u02 * u12
        c11 = u10 * u10 + u11 * u11 + u12 * u12 + low_pass
        det = c00 * c11 - c01 * c01
        if not (det >= MIN_COV_DET):
            continue
        mx = fx * px * inv_z + cx
        my = fy * py * inv_z + cy
        if not (np.isfinite(mx) and np.isfinite(my)):
            continue
        mean2d[i, 0] = mx
        mean2d[i, 1] = my
        conic[i, 0] = c11 / det
        conic[i, 1] = -c01 / det
        conic[i, 2] = c00 / det
        # alpha * exp(-q/2) >= 1/255  iff  q <= 2 ln(255 alpha)
        q = 2.0 * np.log(max(255.0 * a, 1.0)) * (1.0 + 1e-6) + 1e-6
        qmax[i] = q
        rx = np.sqrt(q * c00)
        ry = np.sqrt(q * c11)
        bx0 = max(np.ceil(mx - rx), 0.0)
        bx1 = min(np.floor(mx + rx), width - 1.0)
        by0 = max(np.ceil(my - ry), 0.0)
        by1 = min(np.floor(my + ry), height - 1.0)
        if bx1 < bx0 or by1 < by0:
            continue
        bbox[i, 0] = int(bx0)
        bbox[i, 1] = int(bx1)
        bbox[i, 2] = int(by0)
        bbox[i, 3] = int(by1)
        keep[i] = True


@nb.njit(cache=True, parallel=True)
def _composite_tiles(offsets, items, mean2d, conic, qmax, alpha, rgb, bbox, width, height, tile, tiles_x,
                     out_rgb, out_t):
    n_tiles = offsets.shape[0] - 1
    for t in nb.prange(n_tiles):
        tx0 = (t % tiles_x) * tile
        ty0 = (t // tiles_x) * tile
        tx1 = min(tx0 + tile, width) - 1
        ty1 = min(ty0 + tile, height) - 1
        if offsets[t] == offsets[t + 1]:
            continue
        # tile-local accumulators
        acc_t = np.ones((tile, tile))
        acc_c = np.zeros((3, tile, tile))
        for k in range(offsets[t], offsets[t + 1]):
            i = items[k]
            mx, my = mean2d[i, 0], mean2d[i, 1]
            ca, cb, cc = conic[i, 0], conic[i, 1], conic[i, 2]
            q = qmax[i]
            a = alpha[i]
            cr, cg, cbl = rgb[i, 0], rgb[i, 1], rgb[i, 2]
            py0 = max(bbox[i, 2], ty0)
            py1 = min(bbox[i, 3], ty1)
            for py in range(py0, py1 + 1):
                dy = py - my
                # x-span where the quadratic form can stay below q, padded by a pixel
                disc = (cb * dy) ** 2 - ca * (cc * dy * dy - q)
                if disc < 0.0:
                    continue
                root = np.sqrt(disc) / ca
                mid = mx - cb * dy / ca
                px0 = max(max(bbox[i, 0], tx0), int(np.floor(mid - root)) - 1)
                px1 = min(min(bbox[i, 1], tx1), int(np.ceil(mid + root)) + 1)
                ly = py - ty0
                for px in range(px0, px1 + 1):
                    dx = px - mx
                    qf = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if qf > q:
                        continue
                    w = min(a * np.exp(-0.5 * qf), ALPHA_MAX)
                    # w = 0 leaves both accumulators bit-identical
                    w = w if w >= ALPHA_MIN else 0.0
                    lx = px - tx0
                    tr = acc_t[ly, lx]
                    wt = w * tr
                    acc_c[0, ly, lx] += wt * cr
                    acc_c[1, ly, lx] += wt * cg
                    acc_c[2, ly, lx] += wt * cbl
                    acc_t[ly, lx] = tr * (1.0 - w)
        for py in range(ty0, ty1 + 1):
            for px in range(tx0, tx1 + 1):
                out_t[py, px] = acc_t[py - ty0, px - tx0]
                out_rgb[py, px, 0] = acc_c[0, py - ty0, px - tx0]
                out_rgb[py, px, 1] = acc_c[1, py - ty0, px - tx0]
                out_rgb[py, px, 2] = acc_c[2, py - ty0, px - tx0]


@dataclass
class Splats:
    """Depth-sorted 2D splats ready for compositing."""

    mean2d: np.ndarray  # (N, 2)
    conic: np.ndarray  # (N, 3) inverse covariance entries (a, b, c)
    qmax: np.ndarray  # (N,) largest quadratic form that can pass the opacity cutoff
    alpha: np.ndarray
    rgb: np.ndarray
    bbox: np.ndarray  # (N, 4) inclusive pixel range x0, x1, y0, y1
    order: np.ndarray  # indices into the input set


def prepare_splats(g: WorldGaussians, cam: Camera, z_near: float = Z_NEAR, low_pass: float = LOW_PASS) -> Splats:
    """Project, cull and depth-sort (stable, so ties keep input order)."""
    n = len(g)
    mean2d = np.zeros((n, 2))
    conic = np.zeros((n, 3))
    qmax = np.zeros(n)
    depth = np.zeros(n)
    bbox = np.zeros((n, 4), dtype=np.int64)
    keep = np.zeros(n, dtype=np.bool_)
    alphas = np.ascontiguousarray(g.alphas, dtype=np.float64)
    _prepare_kernel(
        np.ascontiguousarray(g.means, dtype=np.float64),
        np.ascontiguousarray(g.rotations, dtype=np.float64),
        np.ascontiguousarray(g.scales, dtype=np.float64),
        alphas, cam.R, cam.t, float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy),
        cam.width, cam.height, z_near, low_pass, mean2d, conic, qmax, depth, bbox, keep,
    )
    idx = np.flatnonzero(keep)
    idx = idx[np.argsort(depth[idx], kind="stable")]
    rgbs = np.asarray(g.rgbs, dtype=np.float64)
    return Splats(mean2d[idx], conic[idx], qmax[idx], alphas[idx], rgbs[idx], bbox[idx], idx)


def rasterize(
    gaussians: WorldGaussians,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    tile: int = TILE,
) -> RenderedImage:
    """Tile-based front-to-back alpha compositing over ``background``."""
    if tile < 1:
        raise ValidationError(f"tile size must be positive, got {tile}")
    W, H = cam.width, cam.height
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    out_rgb = np.zeros((H, W, 3))
    out_t = np.ones((H, W))
    if len(gaussians):
        s = prepare_splats(gaussians, cam)
        tiles_x = (W + tile - 1) // tile
        tiles_y = (H + tile - 1) // tile
        x0, x1, y0, y1 = (np.ascontiguousarray(s.bbox[:, k]) for k in range(4))
        offsets, items = _bin_tiles(x0, x1, y0, y1, tile, tiles_x, tiles_y)
        _composite_tiles(
            offsets, items, s.mean2d, s.conic, s.qmax, s.alpha, s.rgb, s.bbox,
            W, H, tile, tiles_x, out_rgb, out_t,
        )
    rgb = out_rgb + out_t[..., None] * bg
    return RenderedImage(rgb, 1.0 - out_t)


# ---------------------------------------------------------------------------
# full avatar pipeline


def render_avatar(
    canonical: GaussianParamMap,
    offset: GaussianParamMap | None,
    body: SkinnedBody,
    pose: PoseParams,
    cam: Camera,
    cache: SamplerCache | None = None,
    *,
    n_uv: int = DEFAULT_N_UV,
    n_surface: int = DEFAULT_N_SURFACE,
    seed: int = 0,
    background=(0.0, 0.0, 0.0),
    raster: UVRasterization | None = None,
    tile: int = TILE,
    timings: dict | None = None,
) -> RenderedImage:
    """Compose, sample, pose, frame, place and rasterize.

    With a ``cache`` (see :class:`SamplerCache`) the canonical sampling work is
    reused; the image is bit-identical to the uncached path.
    """
    clock = time.perf_counter
    t0 = clock()
    if cache is not None:
        if not cache.matches(canonical, body, n_uv, n_surface, seed):
            raise ValidationError("sampler cache was built for different inputs")
        structured = cache.structured(offset)
        t1 = t2 = clock()
    else:
        off = offset if offset is not None else canonical.zeros_like()
        composed = compose_param_maps(canonical, off)
        t1 = clock()
        structured = sample_structured(composed, body, n_uv, n_surface, seed, raster)
        t2 = clock()
    posed = lbs_deform(body, forward_kinematics(body, pose))
    t3 = clock()
    frames = tangent_frames(posed, structured.faces, structured.barycentric)
    t4 = clock()
    world, _ = place_gaussians(structured, frames)
    t5 = clock()
    image = rasterize(world, cam, background, tile)
    t6 = clock()
    if timings is not None:
        for key, dt in (
            ("compose", t1 - t0),
            ("sample", t2 - t1),
            ("skin", t3 - t2),
            ("frames", t4 - t3),
            ("place", t5 - t4),
            ("rasterize", t6 - t5),
        ):
            timings[key] = timings.get(key, 0.0) + dt
    return image
