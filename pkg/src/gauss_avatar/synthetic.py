"""Procedural test avatar: a skinned, UV-mapped tube with a small joint tree.

Used by the test suite, the ``bench`` command and the demo generator; it
stands in for a real body-model asset, which is not redistributable.
"""

from __future__ import annotations

import numpy as np

from .body_model import PoseParams, SkinnedBody
from .camera import Camera
from .gaussians import GaussianParamMap, PoseSpaceGaussianSet
from .rotations import axis_angle_to_quat, quat_normalize
from .uv_atlas import UVRasterization

# (parent, rest y) for a root with two-link chains up and down
TUBE_JOINTS = ((-1, 0.0), (0, 0.2), (1, 0.4), (0, -0.2), (3, -0.4))


def make_tube_body(
    n_around: int = 32,
    n_along: int = 32,
    radius: float = 0.15,
    height: float = 1.0,
    uv_margin: float = 0.05,
    falloff: float = 0.12,
) -> SkinnedBody:
    """Open cylinder along +y, centered on the root joint, outward-facing normals."""
    ys = np.linspace(-height / 2, height / 2, n_along + 1)
    theta = 2 * np.pi * np.arange(n_around) / n_around
    ring = np.stack([radius * np.sin(theta), np.zeros_like(theta), radius * np.cos(theta)], axis=1)
    verts = np.concatenate([ring + (0.0, y, 0.0) for y in ys])

    span = 1.0 - 2 * uv_margin
    faces, uvs = [], []
    for r in range(n_along):
        for k in range(n_around):
            k1 = (k + 1) % n_around
            a, b = r * n_around + k, r * n_around + k1
            c, d = (r + 1) * n_around + k, (r + 1) * n_around + k1
            u0, u1 = uv_margin + span * k / n_around, uv_margin + span * (k + 1) / n_around
            v0, v1 = uv_margin + span * r / n_along, uv_margin + span * (r + 1) / n_along
            faces.append((a, b, d))
            uvs.append(((u0, v0), (u1, v0), (u1, v1)))
            faces.append((a, d, c))
            uvs.append(((u0, v0), (u1, v1), (u0, v1)))
    faces = np.array(faces, dtype=np.int64)
    uv_corners = np.array(uvs)

    parents = np.array([p for p, _ in TUBE_JOINTS], dtype=np.int64)
    jy = np.array([y for _, y in TUBE_JOINTS]) * height
    joints = np.stack([np.zeros_like(jy), jy, np.zeros_like(jy)], axis=1)
    w = np.exp(-(((verts[:, 1:2] - jy[None, :]) / falloff) ** 2))
    w[w < 1e-4] = 0.0
    w /= w.sum(axis=1, keepdims=True)
    centroid_y = verts[faces].mean(axis=1)[:, 1]
    labels = np.argmin(np.abs(centroid_y[:, None] - jy[None, :]), axis=1)
    return SkinnedBody(
        rest_vertices=verts,
        faces=faces,
        uv_corners=uv_corners,
        joint_parents=parents,
        joint_rest_positions=joints,
        skin_weights=w,
        part_labels=labels,
        num_segments=len(TUBE_JOINTS),
        joint_names=("pelvis", "spine", "chest", "thigh", "shin"),
    )


def make_canonical_map(
    body: SkinnedBody,
    size: int = 256,
    offset_normal: float = 0.002,
    scale: tuple[float, float, float] = (0.0025, 0.0025, 0.001),
    seed: int = 0,
) -> GaussianParamMap:
    """A plausible canonical parameter map: striped colours, small outward offsets."""
    rng = np.random.default_rng(seed)
    raster = UVRasterization.build(body.uv_corners, size, size)
    valid = raster.valid
    H = W = size
    data = np.zeros((H, W, 14))
    v, u = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
    data[..., 0] = 0.85 + 0.1 * rng.random((H, W))
    data[..., 1] = 0.5 + 0.5 * np.sin(2 * np.pi * 3 * u)
    data[..., 2] = 0.5 + 0.5 * np.cos(2 * np.pi * 5 * v)
    data[..., 3] = 0.5 + 0.4 * np.sin(2 * np.pi * (u + v))
    data[..., 6] = offset_normal
    q = quat_normalize(np.concatenate([np.ones((H, W, 1)), 0.1 * rng.normal(size=(H, W, 3))], axis=-1))
    data[..., 7:11] = q
    data[..., 11:14] = scale
    data[~valid] = 0.0
    return GaussianParamMap(data, valid.copy())


def make_offset_map(canonical: GaussianParamMap, amplitude: float = 0.05, seed: int = 1) -> GaussianParamMap:
    rng = np.random.default_rng(seed)
    data = amplitude * rng.normal(size=canonical.data.shape)
    data[..., 4:7] *= 0.01
    data[..., 11:14] *= 0.01
    data[~canonical.valid] = 0.0
    return GaussianParamMap(data, canonical.valid.copy())


def make_pose_space_gaussians(
    body: SkinnedBody,
    n: int,
    seed: int = 0,
    feature_width: int = 0,
    above_fraction: float = 0.45,
    tau: float = 0.05,
    max_offset: float = 0.01,
) -> PoseSpaceGaussianSet:
    """Gaussians scattered just outside the rest surface.

    Exactly ``floor(above_fraction * n)`` of them have alpha at or above ``tau``.
    """
    rng = np.random.default_rng(seed)
    area = 0.5 * np.linalg.norm(
        np.cross(
            body.rest_vertices[body.faces[:, 1]] - body.rest_vertices[body.faces[:, 0]],
            body.rest_vertices[body.faces[:, 2]] - body.rest_vertices[body.faces[:, 0]],
        ),
        axis=1,
    )
    f = rng.choice(body.num_faces, size=n, p=area / area.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    p = np.einsum("nk,nkc->nc", bary, body.rest_vertices[body.faces[f]])
    radial = p * np.array([1.0, 0.0, 1.0])
    radial /= np.linalg.norm(radial, axis=1, keepdims=True)
    p = p + radial * rng.uniform(0.0, max_offset, size=(n, 1))

    n_above = int(np.floor(above_fraction * n))
    alphas = np.empty(n)
    alphas[:n_above] = rng.uniform(max(tau, 0.2), 1.0, n_above)
    alphas[n_above:] = rng.uniform(0.0, tau * 0.999, n - n_above)
    alphas = alphas[rng.permutation(n)]
    return PoseSpaceGaussianSet(
        positions=p,
        rotations=quat_normalize(rng.normal(size=(n, 4))),
        scales=rng.uniform(0.002, 0.01, size=(n, 3)),
        alphas=alphas,
        rgbs=rng.random((n, 3)),
        features=rng.normal(size=(n, feature_width)) if feature_width else None,
        source_view=rng.integers(0, 4, n),
        pixels=rng.integers(0, 128, (n, 2)),
    )


def default_camera(width: int = 512, height: int = 512, distance: float = 2.6) -> Camera:
    """Frontal camera on +z looking at the origin, world +y up in the image."""
    return Camera.look_at((0.0, 0.0, distance), (0.0, 0.0, 0.0), width=width, height=height, fov_y_deg=25.0)


def swing_pose(body: SkinnedBody, phase: float, amplitude: float = 0.5) -> PoseParams:
    """Deterministic bending pose used for animation sequences."""
    J = body.num_joints
    q = np.zeros((J, 4))
    q[:, 0] = 1.0
    axes = [(0, 1, 0), (1, 0, 0), (0, 0, 1), (1, 0, 0), (0, 0, 1)]
    for j in range(J):
        angle = amplitude * np.sin(phase + 0.7 * j) * (0.3 if j == 0 else 1.0)
        q[j] = axis_angle_to_quat(axes[j % len(axes)], angle)
    return PoseParams(q, np.array([0.05 * np.sin(phase), 0.0, 0.0]))


def pose_sequence(body: SkinnedBody, n_frames: int) -> list[PoseParams]:
    return [swing_pose(body, 2 * np.pi * i / max(n_frames, 1)) for i in range(n_frames)]


def random_pose(body: SkinnedBody, rng: np.random.Generator, max_angle: float = 1.0) -> PoseParams:
    J = body.num_joints
    axes = rng.normal(size=(J, 3))
    angles = rng.uniform(-max_angle, max_angle, J)
    return PoseParams(axis_angle_to_quat(axes, angles), rng.normal(scale=0.1, size=3))
