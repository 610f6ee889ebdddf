"""Lifting unstructured pose-space Gaussians into UV space.

Two routes: direct mesh unprojection (nearest surface point, then inverse
placement into the tangent frame) and a single-head cross-attention kernel
whose queries are the positionally encoded vertex position map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body_model import PosedMesh
from .bvh import TriangleBVH
from .errors import ValidationError
from .gaussians import CompactFeature, GaussianParamMap, NUM_CHANNELS, PoseSpaceGaussianSet
from .rotations import matrix_to_quat, quat_to_matrix
from .uv_atlas import UVMap, tangent_frames

LATENT_CHANNELS = 256
LATENT_SIZE = 64
DEFAULT_N_FREQ = 4


def nearest_surface_points(points: np.ndarray, posed: PosedMesh, bvh: TriangleBVH | None = None):
    """Closest (face, barycentric, distance) on the posed mesh for each point."""
    if posed.num_faces == 0:
        raise ValidationError("mesh has no faces")
    if bvh is None:
        bvh = TriangleBVH.build(posed.face_corners())
    return bvh.query(points)


def nearest_surface_point(p, posed: PosedMesh, bvh: TriangleBVH | None = None) -> tuple[int, np.ndarray, float]:
    f, b, d = nearest_surface_points(np.asarray(p, dtype=np.float64).reshape(1, 3), posed, bvh)
    return int(f[0]), b[0], float(d[0])


@dataclass
class UnprojectResult:
    param_map: GaussianParamMap
    written: int
    skipped: int
    collisions: int

    @property
    def total(self) -> int:
        return self.written + self.skipped + self.collisions


def unproject_to_uv(
    gaussians: PoseSpaceGaussianSet,
    posed: PosedMesh,
    width: int = 256,
    height: int = 256,
    collision: str = "max-alpha",
) -> UnprojectResult:
    """Project Gaussians onto the mesh and write tangent-space parameters to UV texels.

    Collisions keep the highest-alpha Gaussian (lowest index on ties), or the
    per-texel mean with ``collision="average"``. Gaussians landing on a
    degenerate face are skipped.
    """
    if collision not in ("max-alpha", "average"):
        raise ValidationError(f"unknown collision policy {collision!r}")
    out = GaussianParamMap.empty(width, height)
    n = len(gaussians)
    if n == 0:
        return UnprojectResult(out, 0, 0, 0)

    faces, bary, _ = nearest_surface_points(gaussians.positions, posed)
    frames = tangent_frames(posed, faces, bary)
    ok = frames.valid
    skipped = int(n - ok.sum())
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return UnprojectResult(out, 0, skipped, 0)

    R = frames.R[idx]
    Rt = np.swapaxes(R, 1, 2)
    d_xyz = np.einsum("nab,nb->na", Rt, gaussians.positions[idx] - frames.T[idx])
    d_rot = matrix_to_quat(Rt @ quat_to_matrix(gaussians.rotations[idx]))
    d_scale = gaussians.scales[idx] / frames.S[idx, None]
    params = np.concatenate(
        [gaussians.alphas[idx, None], gaussians.rgbs[idx], d_xyz, d_rot, d_scale], axis=1
    )

    uv = np.einsum("nk,nkc->nc", bary[idx], posed.uv_corners[faces[idx]])
    col = np.clip(np.floor(uv[:, 0] * width).astype(np.int64), 0, width - 1)
    row = np.clip(np.floor(uv[:, 1] * height).astype(np.int64), 0, height - 1)
    texel = row * width + col

    flat = out.data.reshape(-1, NUM_CHANNELS)
    valid = out.valid.reshape(-1)
    if collision == "max-alpha":
        order = np.lexsort((idx, -params[:, 0], texel))
        first = np.ones(order.size, dtype=bool)
        first[1:] = texel[order][1:] != texel[order][:-1]
        win = order[first]
        flat[texel[win]] = params[win]
        valid[texel[win]] = True
        written = int(win.size)
    else:
        uniq, first, inv, counts = np.unique(texel, return_index=True, return_inverse=True, return_counts=True)
        # align quaternion signs with the first Gaussian in each texel before averaging
        first_q = params[first, 7:11]
        sign = np.where(np.sum(params[:, 7:11] * first_q[inv], axis=1) < 0, -1.0, 1.0)
        aligned = params.copy()
        aligned[:, 7:11] *= sign[:, None]
        acc = np.zeros((uniq.size, NUM_CHANNELS))
        np.add.at(acc, inv, aligned)
        acc /= counts[:, None]
        q = acc[:, 7:11]
        acc[:, 7:11] = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        flat[uniq] = acc
        valid[uniq] = True
        written = int(uniq.size)
    return UnprojectResult(out, written, skipped, int(idx.size - written))


def positional_encode(m: UVMap, n_freq: int = DEFAULT_N_FREQ) -> UVMap:
    """``[x, sin(2^i pi x), cos(2^i pi x) for i < n_freq]`` per coordinate.

    Output channel order: the 3 raw coordinates, then for each frequency the 3
    sines followed by the 3 cosines. Invalid texels stay 0.
    """
    if m.channels != 3:
        raise ValidationError(f"positional encoding expects 3 channels, got {m.channels}")
    if n_freq < 0:
        raise ValidationError("n_freq must be non-negative")
    x = m.data
    parts = [x]
    for i in range(n_freq):
        arg = (2.0**i) * np.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    out = np.concatenate(parts, axis=-1)
    out[~m.valid] = 0.0
    return UVMap(out, m.valid.copy())


@dataclass
class AttentionWeights:
    """Projection matrices for one cross-attention head.

    Shapes: ``w_q (d_model, d_q)``, ``w_k (C_p, d_q)``, ``w_v (C_p, d_v)``,
    ``w_o (d_v, d_out)``.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def __post_init__(self) -> None:
        for name in ("w_q", "w_k", "w_v", "w_o"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.ndim != 2:
                raise ValidationError(f"{name} must be a matrix")
            if not np.all(np.isfinite(a)):
                raise ValidationError(f"{name} has non-finite entries")
            setattr(self, name, a)
        if self.w_q.shape[1] != self.w_k.shape[1]:
            raise ValidationError("query and key projections must share d_q")
        if self.w_k.shape[0] != self.w_v.shape[0]:
            raise ValidationError("key and value projections must share C_p")
        if self.w_v.shape[1] != self.w_o.shape[0]:
            raise ValidationError("value and output projections must share d_v")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def context_width(self) -> int:
        return self.w_k.shape[0]

    @property
    def d_out(self) -> int:
        return self.w_o.shape[1]

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        d_model: int = 3 * (1 + 2 * DEFAULT_N_FREQ),
        context_width: int = NUM_CHANNELS,
        d_q: int = 64,
        d_v: int = 64,
        d_out: int = LATENT_CHANNELS,
    ) -> "AttentionWeights":
        def init(a: int, b: int) -> np.ndarray:
            return rng.normal(scale=1.0 / np.sqrt(a), size=(a, b))

        return cls(init(d_model, d_q), init(context_width, d_q), init(context_width, d_v), init(d_v, d_out))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_o": self.w_o}


@dataclass
class LatentCode:
    data: np.ndarray  # (C, H, W)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValidationError("latent code must be (C, H, W)")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("latent code has non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def to_uvmap(self) -> UVMap:
        return UVMap(np.moveaxis(self.data, 0, -1), np.ones(self.data.shape[1:], dtype=bool))

    @classmethod
    def from_uvmap(cls, m: UVMap) -> "LatentCode":
        return cls(np.moveaxis(m.data, -1, 0))


def attention_matrix(queries: np.ndarray, context: np.ndarray, weights: AttentionWeights) -> np.ndarray:
    """Row-stochastic ``(n_queries, P)`` attention with max-subtracted softmax."""
    q = queries @ weights.w_q
    k = context @ weights.w_k
    logits = (q @ k.T) / np.sqrt(weights.w_q.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def cross_attention_lift(
    query_map: UVMap,
    context: CompactFeature | np.ndarray,
    weights: AttentionWeights,
    latent_size: tuple[int, int] = (LATENT_SIZE, LATENT_SIZE),
) -> LatentCode:
    """Attend from every texel of the encoded position map to the compact feature rows.

    The output projection is folded into the values (``X W_v W_o``) before the
    attention-weighted sum.
    """
    rows = context.rows if isinstance(context, CompactFeature) else np.asarray(context, dtype=np.float64)
    if (query_map.height, query_map.width) != tuple(latent_size):
        raise ValidationError(
            f"query map is {query_map.height}x{query_map.width}, latent is {latent_size[0]}x{latent_size[1]}"
        )
    if query_map.channels != weights.d_model:
        raise ValidationError(f"query map has {query_map.channels} channels, weights expect {weights.d_model}")
    if rows.ndim != 2 or rows.shape[1] != weights.context_width or rows.shape[0] == 0:
        raise ValidationError(f"context must be (P, {weights.context_width}) with P >= 1, got {rows.shape}")
    if not np.all(np.isfinite(rows)):
        raise ValidationError("context has non-finite values")
    H, W = latent_size
    attn = attention_matrix(query_map.data.reshape(H * W, -1), rows, weights)
    values = (rows @ weights.w_v) @ weights.w_o
    out = attn @ values
    return LatentCode(out.T.reshape(weights.d_out, H, W))
