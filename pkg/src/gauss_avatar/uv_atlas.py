"""UV-space rasterization, conditioning maps and per-texel tangent frames.

Texel ``(row j, column i)`` samples the UV point ``((i + 0.5) / W, (j + 0.5) / H)``;
rows run along +v. Uncovered texels hold 0 and are masked out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body_model import PosedMesh, SkinnedBody, face_cross
from .camera import Camera
from .errors import ValidationError

DEGENERATE_AREA = 1e-12


@dataclass
class UVMap:
    data: np.ndarray  # (H, W, C) float64
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[..., None]
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.data.ndim != 3 or self.valid.shape != self.data.shape[:2]:
            raise ValidationError(f"UVMap data {self.data.shape} does not match mask {self.valid.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def zeros(cls, width: int, height: int, channels: int, valid: np.ndarray | None = None) -> "UVMap":
        if valid is None:
            valid = np.zeros((height, width), dtype=bool)
        return cls(np.zeros((height, width, channels)), valid.copy())


def texel_centers(width: int, height: int) -> np.ndarray:
    """``(H, W, 2)`` UV coordinates of texel centers."""
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


@dataclass(frozen=True)
class UVRasterization:
    """Which face covers each texel center, and where.

    Depends only on the UV atlas and resolution, so it is computed once per
    body and reused for every attribute.
    """

    face_index: np.ndarray  # (H, W) int64, -1 where uncovered
    barycentric: np.ndarray  # (H, W, 3)

    @property
    def valid(self) -> np.ndarray:
        return self.face_index >= 0

    @property
    def height(self) -> int:
        return self.face_index.shape[0]

    @property
    def width(self) -> int:
        return self.face_index.shape[1]

    @classmethod
    def build(cls, uv_corners: np.ndarray, width: int, height: int) -> "UVRasterization":
        if width < 1 or height < 1:
            raise ValidationError("UV raster size must be at least 1x1")
        face_index = np.full((height, width), -1, dtype=np.int64)
        bary = np.zeros((height, width, 3))
        uv = np.asarray(uv_corners, dtype=np.float64)
        for f in range(uv.shape[0]):
            a, b, c = uv[f]
            e1, e2 = b - a, c - a
            den = e1[0] * e2[1] - e1[1] * e2[0]
            if abs(den) < 1e-300:
                continue
            lo = np.minimum(np.minimum(a, b), c)
            hi = np.maximum(np.maximum(a, b), c)
            # candidate texel ranges whose centers may fall inside the bbox
            i0 = max(int(np.floor(lo[0] * width - 0.5)), 0)
            i1 = min(int(np.ceil(hi[0] * width - 0.5)), width - 1)
            j0 = max(int(np.floor(lo[1] * height - 0.5)), 0)
            j1 = min(int(np.ceil(hi[1] * height - 0.5)), height - 1)
            if i1 < i0 or j1 < j0:
                continue
            pu = (np.arange(i0, i1 + 1) + 0.5) / width
            pv = (np.arange(j0, j1 + 1) + 0.5) / height
            du = pu[None, :] - a[0]
            dv = pv[:, None] - a[1]
            b1 = (du * e2[1] - dv * e2[0]) / den
            b2 = (e1[0] * dv - e1[1] * du) / den
            b0 = 1.0 - b1 - b2
            eps = -1e-12
            inside = (b0 >= eps) & (b1 >= eps) & (b2 >= eps)
            sub = face_index[j0 : j1 + 1, i0 : i1 + 1]
            take = inside & (sub < 0)
            if not take.any():
                continue
            sub[take] = f
            w = np.stack([b0, b1, b2], axis=-1)
            w = np.clip(w, 0.0, None)
            w /= w.sum(axis=-1, keepdims=True)
            bsub = bary[j0 : j1 + 1, i0 : i1 + 1]
            bsub[take] = w[take]
        return cls(face_index, bary)


def rasterize_uv_attribute(
    mesh: PosedMesh,
    attr: np.ndarray,
    width: int,
    height: int,
    raster: UVRasterization | None = None,
) -> UVMap:
    """Barycentric interpolation of per-vertex attributes at texel centers."""
    attr = np.asarray(attr, dtype=np.float64)
    if attr.ndim == 1:
        attr = attr[:, None]
    if attr.shape[0] != mesh.vertices.shape[0]:
        raise ValidationError(f"attribute has {attr.shape[0]} rows, mesh has {mesh.vertices.shape[0]} vertices")
    if raster is None:
        raster = UVRasterization.build(mesh.uv_corners, width, height)
    elif (raster.width, raster.height) != (width, height):
        raise ValidationError("rasterization resolution mismatch")
    valid = raster.valid
    out = np.zeros((height, width, attr.shape[1]))
    f = raster.face_index[valid]
    b = raster.barycentric[valid]
    corners = attr[mesh.faces[f]]  # (n, 3, C)
    out[valid] = b[:, 0, None] * corners[:, 0] + b[:, 1, None] * corners[:, 1] + b[:, 2, None] * corners[:, 2]
    return UVMap(out, valid.copy())


@dataclass
class ConditionMaps:
    position: UVMap
    relative: UVMap
    normals: UVMap
    plucker: UVMap
    segmentation: UVMap


def plucker_rays(origin: np.ndarray, points: np.ndarray, forward: np.ndarray | None = None) -> np.ndarray:
    """``(n, 6)`` rays ``(d, m)`` from ``origin`` through ``points``, ``m = o x d``."""
    origin = np.asarray(origin, dtype=np.float64)
    d = np.asarray(points, dtype=np.float64) - origin
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    fallback = np.array([0.0, 0.0, 1.0]) if forward is None else np.asarray(forward, dtype=np.float64)
    d = np.where(n > 1e-12, d / np.where(n > 1e-12, n, 1.0), fallback)
    m = np.cross(np.broadcast_to(origin, d.shape), d)
    return np.concatenate([d, m], axis=-1)


def condition_maps(
    body: SkinnedBody,
    posed: PosedMesh,
    neutral: PosedMesh,
    camera: Camera,
    width: int,
    height: int,
    raster: UVRasterization | None = None,
) -> ConditionMaps:
    """Position, relative-position, normal, Plücker and segmentation maps.

    Interpolated normals are renormalized per texel.
    """
    if posed.vertices.shape != body.rest_vertices.shape or neutral.vertices.shape != body.rest_vertices.shape:
        raise ValidationError("posed and neutral meshes must share the body's topology")
    if raster is None:
        raster = UVRasterization.build(body.uv_corners, width, height)
    valid = raster.valid
    position = rasterize_uv_attribute(posed, posed.vertices, width, height, raster)
    relative = rasterize_uv_attribute(posed, posed.vertices - neutral.vertices, width, height, raster)
    normals = rasterize_uv_attribute(posed, posed.vertex_normals, width, height, raster)
    nv = normals.data[valid]
    nn = np.linalg.norm(nv, axis=-1, keepdims=True)
    fn = face_cross(posed.vertices, posed.faces)[raster.face_index[valid]]
    fn = fn / np.maximum(np.linalg.norm(fn, axis=-1, keepdims=True), 1e-300)
    normals.data[valid] = np.where(nn > 1e-12, nv / np.where(nn > 1e-12, nn, 1.0), fn)

    plucker = np.zeros((height, width, 6))
    plucker[valid] = plucker_rays(camera.center, position.data[valid], camera.R[2])

    seg = np.zeros((height, width, body.num_segments))
    labels = body.part_labels[raster.face_index[valid]]
    rows, cols = np.nonzero(valid)
    seg[rows, cols, labels] = 1.0
    return ConditionMaps(
        position=position,
        relative=relative,
        normals=normals,
        plucker=UVMap(plucker, valid.copy()),
        segmentation=UVMap(seg, valid.copy()),
    )


@dataclass
class TangentFrames:
    """Batched tangent frames: origin ``T``, rotation ``R`` (columns t, b, n), scale ``S``."""

    T: np.ndarray  # (N, 3)
    R: np.ndarray  # (N, 3, 3)
    S: np.ndarray  # (N,)
    valid: np.ndarray  # (N,) bool

    def __len__(self) -> int:
        return self.T.shape[0]


def face_frames(posed: PosedMesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-face rotation ``(F, 3, 3)``, scale ``(F,)`` and validity ``(F,)``."""
    p = posed.vertices[posed.faces]
    uv = posed.uv_corners
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    d1, d2 = uv[:, 1] - uv[:, 0], uv[:, 2] - uv[:, 0]
    cross = np.cross(e1, e2)
    area3 = 0.5 * np.linalg.norm(cross, axis=-1)
    det = d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1]
    area_uv = 0.5 * np.abs(det)
    valid = (area3 >= DEGENERATE_AREA) & (area_uv >= DEGENERATE_AREA)

    safe_area3 = np.where(valid, area3, 1.0)
    n = cross / (2.0 * safe_area3[:, None])
    safe_det = np.where(valid, det, 1.0)
    tu = (e1 * d2[:, 1, None] - e2 * d1[:, 1, None]) / safe_det[:, None]
    tu = tu - np.sum(tu * n, axis=-1, keepdims=True) * n
    tl = np.linalg.norm(tu, axis=-1)
    valid &= tl > 1e-12
    t = tu / np.where(valid, tl, 1.0)[:, None]
    b = np.cross(n, t)
    R = np.stack([t, b, n], axis=-1)
    R[~valid] = np.eye(3)
    S = np.where(valid, np.sqrt(safe_area3 / np.where(valid, area_uv, 1.0)), 1.0)
    return R, S, valid


def tangent_frames(
    posed: PosedMesh,
    faces: np.ndarray,
    barycentric: np.ndarray,
    precomputed: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> TangentFrames:
    """Tangent frames at surface points given as (face, barycentric) pairs.

    Frames on degenerate faces (3D or UV area below 1e-12) are flagged invalid.
    """
    faces = np.asarray(faces, dtype=np.int64)
    bary = np.asarray(barycentric, dtype=np.float64)
    if bary.shape != (faces.shape[0], 3):
        raise ValidationError("need one barycentric triple per face index")
    if np.any(bary < -1e-6) or np.any(np.abs(bary.sum(axis=1) - 1.0) > 1e-6):
        raise ValidationError("barycentric coordinates must be non-negative and sum to 1")
    R_f, S_f, valid_f = face_frames(posed) if precomputed is None else precomputed
    corners = posed.vertices[posed.faces[faces]]
    T = bary[:, 0, None] * corners[:, 0] + bary[:, 1, None] * corners[:, 1] + bary[:, 2, None] * corners[:, 2]
    return TangentFrames(T=T, R=R_f[faces], S=S_f[faces], valid=valid_f[faces].copy())
