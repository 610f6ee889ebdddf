"""Gaussian containers and the structured UV-space representation.

Parameter-map channel layout (14 channels)::

    [0]      alpha
    [1:4]    rgb
    [4:7]    position offset in tangent units
    [7:11]   rotation offset quaternion (w, x, y, z)
    [11:14]  scale offset in tangent units
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .body_model import SkinnedBody, face_cross
from .errors import ValidationError
from .rotations import quat_norm, quat_normalize
from .uv_atlas import UVMap, UVRasterization

NUM_CHANNELS = 14
ALPHA = slice(0, 1)
RGB = slice(1, 4)
OFFSET_XYZ = slice(4, 7)
OFFSET_ROT = slice(7, 11)
OFFSET_SCALE = slice(11, 14)
MIN_SCALE = 1e-6

DEFAULT_MAP_SIZE = 256
DEFAULT_TAU = 0.05
DEFAULT_COMPACT_ROWS = 2048
DEFAULT_N_UV = 65_536
DEFAULT_N_SURFACE = 65_536
RNG_NAME = "numpy.random.PCG64"

CHANNEL_LAYOUT = {
    "alpha": [0],
    "rgb": [1, 2, 3],
    "offset_xyz": [4, 5, 6],
    "offset_rotation_wxyz": [7, 8, 9, 10],
    "offset_scale": [11, 12, 13],
}
ACTIVATION_RULES = {
    "alpha": "clamp [0, 1]",
    "rgb": "clamp [0, 1]",
    "offset_rotation_wxyz": "renormalize to unit length (zero -> identity)",
    "offset_scale": f"clamp >= {MIN_SCALE}",
}


# ---------------------------------------------------------------------------
# pose-space Gaussians


@dataclass
class PoseSpaceGaussianSet:
    """Unstructured, pixel-aligned Gaussians in the input body pose."""

    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) unit (w, x, y, z)
    scales: np.ndarray  # (N, 3) > 0
    alphas: np.ndarray  # (N,)
    rgbs: np.ndarray  # (N, 3)
    features: np.ndarray | None = None  # (N, C_f)
    source_view: np.ndarray | None = None  # (N,)
    pixels: np.ndarray | None = None  # (N, 2) (row, col)

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.alphas = np.asarray(self.alphas, dtype=np.float64).reshape(n)
        self.rgbs = np.asarray(self.rgbs, dtype=np.float64).reshape(n, 3)
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64).reshape(n, -1)
        self.source_view = (
            np.zeros(n, dtype=np.int64) if self.source_view is None else np.asarray(self.source_view, dtype=np.int64)
        )
        self.pixels = np.zeros((n, 2), dtype=np.int64) if self.pixels is None else np.asarray(self.pixels, dtype=np.int64)
        if np.any(np.abs(quat_norm(self.rotations) - 1.0) > 1e-6):
            raise ValidationError("Gaussian rotations must be unit quaternions")
        if np.any(self.scales <= 0):
            raise ValidationError("Gaussian scales must be positive")
        if np.any((self.alphas < 0) | (self.alphas > 1)) or np.any((self.rgbs < 0) | (self.rgbs > 1)):
            raise ValidationError("alpha and rgb must lie in [0, 1]")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_width(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    def raw_params(self) -> np.ndarray:
        """``(N, 14)`` rows in map channel order with world-space geometry."""
        return np.concatenate(
            [self.alphas[:, None], self.rgbs, self.positions, self.rotations, self.scales], axis=1
        )

    def subset(self, idx: np.ndarray) -> "PoseSpaceGaussianSet":
        return PoseSpaceGaussianSet(
            self.positions[idx],
            self.rotations[idx],
            self.scales[idx],
            self.alphas[idx],
            self.rgbs[idx],
            None if self.features is None else self.features[idx],
            self.source_view[idx],
            self.pixels[idx],
        )


def filter_opacity(gaussians: PoseSpaceGaussianSet, tau: float = DEFAULT_TAU) -> PoseSpaceGaussianSet:
    """Keep Gaussians with ``alpha >= tau``, preserving order."""
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must lie in [0, 1], got {tau}")
    return gaussians.subset(np.flatnonzero(gaussians.alphas >= tau))


def farthest_point_sample(points: np.ndarray, k: int) -> np.ndarray:
    """Greedy farthest-point sampling seeded at index 0.

    Each step picks the point with the largest distance to the chosen set;
    ties go to the lowest index. Returns ``k`` distinct indices in selection
    order.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"k must lie in [1, {n}], got {k}")
    out = np.empty(k, dtype=np.int64)
    out[0] = 0
    diff = pts - pts[0]
    mind = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    mind[0] = -1.0
    for s in range(1, k):
        nxt = int(np.argmax(mind))
        out[s] = nxt
        diff = pts - pts[nxt]
        np.minimum(mind, np.sqrt(np.einsum("ij,ij->i", diff, diff)), out=mind)
        mind[out[: s + 1]] = -1.0
    return out


@dataclass
class CompactFeature:
    rows: np.ndarray  # (P, 14 + C_f)
    indices: np.ndarray  # (P,) indices into the filtered set

    @property
    def num_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def width(self) -> int:
        return self.rows.shape[1]


def build_compact_feature(
    gaussians: PoseSpaceGaussianSet, tau: float = DEFAULT_TAU, k: int = DEFAULT_COMPACT_ROWS
) -> CompactFeature:
    """Opacity filter, then FPS on positions; rows are raw params followed by features."""
    kept = filter_opacity(gaussians, tau)
    if len(kept) < k:
        raise ValidationError(f"only {len(kept)} Gaussians survive filtering, need {k}")
    idx = farthest_point_sample(kept.positions, k)
    rows = kept.raw_params()[idx]
    if kept.features is not None:
        rows = np.concatenate([rows, kept.features[idx]], axis=1)
    return CompactFeature(rows, idx)


# ---------------------------------------------------------------------------
# parameter maps


class GaussianParamMap(UVMap):
    """A 14-channel UV map of tangent-space Gaussian parameters."""

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.channels != NUM_CHANNELS:
            raise ValidationError(f"parameter map needs {NUM_CHANNELS} channels, got {self.channels}")

    @classmethod
    def empty(cls, width: int = DEFAULT_MAP_SIZE, height: int = DEFAULT_MAP_SIZE) -> "GaussianParamMap":
        return cls(np.zeros((height, width, NUM_CHANNELS)), np.zeros((height, width), dtype=bool))

    @classmethod
    def from_uvmap(cls, m: UVMap) -> "GaussianParamMap":
        return cls(m.data, m.valid)

    def zeros_like(self) -> "GaussianParamMap":
        return GaussianParamMap(np.zeros_like(self.data), self.valid.copy())

    def normalized(self) -> "GaussianParamMap":
        out = np.zeros_like(self.data)
        out[self.valid] = normalize_params(self.data[self.valid])
        return GaussianParamMap(out, self.valid.copy())

    @staticmethod
    def sidecar() -> dict:
        return {"channels": NUM_CHANNELS, "layout": CHANNEL_LAYOUT, "activation": ACTIVATION_RULES}


def normalize_params(p: np.ndarray) -> np.ndarray:
    """Per-row activation pass: clamp alpha/rgb, renormalize rotation, floor scale.

    Purely elementwise per row, so results do not depend on array shape.
    """
    out = np.array(p, dtype=np.float64, copy=True)
    out[..., 0:4] = np.clip(out[..., 0:4], 0.0, 1.0)
    out[..., OFFSET_ROT] = quat_normalize(out[..., OFFSET_ROT])
    out[..., OFFSET_SCALE] = np.maximum(out[..., OFFSET_SCALE], MIN_SCALE)
    return out


def _check_same_shape(a: UVMap, b: UVMap) -> None:
    if a.data.shape != b.data.shape:
        raise ValidationError(f"map dimensions differ: {a.data.shape} vs {b.data.shape}")


def compose_param_maps(canonical: GaussianParamMap, offset: GaussianParamMap) -> GaussianParamMap:
    """Canonical plus offset, then the activation pass.

    The canonical map's mask defines the support; offset texels outside it are
    ignored.
    """
    _check_same_shape(canonical, offset)
    valid = canonical.valid
    out = np.zeros_like(canonical.data)
    out[valid] = normalize_params(canonical.data[valid] + offset.data[valid])
    return GaussianParamMap(out, valid.copy())


def edit_param_map(
    a: GaussianParamMap,
    b: GaussianParamMap,
    mode: str,
    mask: np.ndarray | None = None,
    t: float | None = None,
) -> GaussianParamMap:
    """Region swap (``mode="swap"``) or linear blend (``mode="interpolate"``).

    Interpolation works on parameter maps rather than latent codes, so it is
    only a non-learned analog of latent interpolation.
    """
    _check_same_shape(a, b)
    if mode in ("swap", "swap-region"):
        if mask is None:
            raise ValidationError("swap mode needs a mask")
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.valid.shape:
            raise ValidationError(f"mask shape {mask.shape} does not match map {a.valid.shape}")
        data = np.where(mask[..., None], b.data, a.data)
        valid = np.where(mask, b.valid, a.valid)
        return GaussianParamMap(data, valid)
    if mode == "interpolate":
        if t is None or not 0.0 <= t <= 1.0:
            raise ValidationError("interpolate mode needs t in [0, 1]")
        valid = (a.valid & (t < 1.0)) | (b.valid & (t > 0.0))
        blend = (1.0 - t) * a.data + t * b.data
        out = np.zeros_like(blend)
        out[valid] = normalize_params(blend[valid])
        return GaussianParamMap(out, valid)
    raise ValidationError(f"unknown edit mode {mode!r}")


# ---------------------------------------------------------------------------
# structured sampling


@dataclass
class StructuredGaussianSet:
    """UV-anchored Gaussians with tangent-space parameters (rows in map layout)."""

    faces: np.ndarray  # (N,)
    barycentric: np.ndarray  # (N, 3)
    uv: np.ndarray  # (N, 2)
    params: np.ndarray  # (N, 14)

    def __len__(self) -> int:
        return self.faces.shape[0]

    @property
    def alpha(self) -> np.ndarray:
        return self.params[:, 0]

    @property
    def rgb(self) -> np.ndarray:
        return self.params[:, RGB]

    @property
    def offset_xyz(self) -> np.ndarray:
        return self.params[:, OFFSET_XYZ]

    @property
    def offset_rot(self) -> np.ndarray:
        return self.params[:, OFFSET_ROT]

    @property
    def offset_scale(self) -> np.ndarray:
        return self.params[:, OFFSET_SCALE]


@nb.njit(cache=True, parallel=True)
def _blend_normalize(values, tap_index, tap_weight, min_scale, out):
    # same arithmetic order as blending four taps and calling normalize_params
    n, c = out.shape
    for i in nb.prange(n):
        for ch in range(c):
            v = tap_weight[i, 0] * values[tap_index[i, 0], ch]
            v += tap_weight[i, 1] * values[tap_index[i, 1], ch]
            v += tap_weight[i, 2] * values[tap_index[i, 2], ch]
            v += tap_weight[i, 3] * values[tap_index[i, 3], ch]
            out[i, ch] = v
        for ch in range(4):
            out[i, ch] = min(max(out[i, ch], 0.0), 1.0)
        w, x, y, z = out[i, 7], out[i, 8], out[i, 9], out[i, 10]
        nq = np.sqrt(w * w + x * x + y * y + z * z)
        if nq < 1e-12:
            out[i, 7], out[i, 8], out[i, 9], out[i, 10] = 1.0, 0.0, 0.0, 0.0
        else:
            out[i, 7], out[i, 8], out[i, 9], out[i, 10] = w / nq, x / nq, y / nq, z / nq
        for ch in range(11, 14):
            out[i, ch] = max(out[i, ch], min_scale)


@dataclass
class SamplingPlan:
    """Anchors and bilinear taps for sampling a parameter map.

    Depends only on the canonical map's mask, the body and the counts, which is
    what makes it cacheable across frames. ``texels`` lists the distinct valid
    texels the plan reads; ``tap_index`` points into that list. Taps that would
    land on invalid texels are redirected to a valid one with weight zero.
    """

    faces: np.ndarray
    barycentric: np.ndarray
    uv: np.ndarray
    texels: np.ndarray  # (M,) flat texel ids
    tap_index: np.ndarray  # (N, 4) rows of ``texels``
    tap_weight: np.ndarray  # (N, 4)
    n_uv: int
    n_surface: int
    seed: int
    width: int
    height: int
    rng: str = RNG_NAME

    def __len__(self) -> int:
        return self.faces.shape[0]

    def gather(self, data: np.ndarray) -> np.ndarray:
        """Values ``(M, C)`` of the referenced texels from an ``(H, W, C)`` raster."""
        return data.reshape(-1, data.shape[-1])[self.texels]

    def fetch(self, texel_values: np.ndarray) -> np.ndarray:
        """Bilinear blend of (already activated) texel values, then the activation pass."""
        out = np.empty((len(self), texel_values.shape[1]))
        _blend_normalize(
            np.ascontiguousarray(texel_values, dtype=np.float64), self.tap_index, self.tap_weight, MIN_SCALE, out
        )
        return out

    def structured(self, texel_values: np.ndarray) -> StructuredGaussianSet:
        return StructuredGaussianSet(self.faces, self.barycentric, self.uv, self.fetch(texel_values))


def surface_samples(body: SkinnedBody, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Area-uniform (face, barycentric) samples on the rest mesh."""
    rng = np.random.Generator(np.random.PCG64(seed))
    area = 0.5 * np.linalg.norm(face_cross(body.rest_vertices, body.faces), axis=1)
    cdf = np.cumsum(area)
    if n == 0 or cdf[-1] <= 0:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    r = rng.random((n, 3))
    faces = np.searchsorted(cdf, r[:, 0] * cdf[-1], side="right")
    faces = np.minimum(faces, len(cdf) - 1)
    s = np.sqrt(r[:, 1])
    bary = np.stack([1.0 - s, s * (1.0 - r[:, 2]), s * r[:, 2]], axis=1)
    return faces.astype(np.int64), bary


def _nearest_valid_index(valid: np.ndarray) -> np.ndarray:
    from scipy.ndimage import distance_transform_edt

    _, (rows, cols) = distance_transform_edt(~valid, return_indices=True)
    return rows * valid.shape[1] + cols


def build_sampling_plan(
    valid: np.ndarray,
    body: SkinnedBody,
    n_uv: int = DEFAULT_N_UV,
    n_surface: int = DEFAULT_N_SURFACE,
    seed: int = 0,
    raster: UVRasterization | None = None,
) -> SamplingPlan:
    if n_uv < 0 or n_surface < 0:
        raise ValidationError("sample counts must be non-negative")
    H, W = valid.shape
    if raster is None:
        raster = UVRasterization.build(body.uv_corners, W, H)
    eligible = valid & raster.valid
    flat = np.flatnonzero(eligible.reshape(-1))
    if flat.size == 0:
        raise ValidationError("parameter map has no valid texels on the body's UV atlas")
    nearest = _nearest_valid_index(valid).reshape(-1)

    # uniform grid over valid texels, row-major; wraps when n_uv exceeds the count
    if n_uv >= flat.size:
        pick = flat[np.arange(n_uv) % flat.size]
    else:
        pick = flat[(np.arange(n_uv, dtype=np.int64) * flat.size) // n_uv]
    uv_faces = raster.face_index.reshape(-1)[pick]
    uv_bary = raster.barycentric.reshape(-1, 3)[pick]
    uv_uv = np.stack([(pick % W + 0.5) / W, (pick // W + 0.5) / H], axis=1)
    uv_taps = np.repeat(pick[:, None], 4, axis=1)
    uv_w = np.zeros((n_uv, 4))
    uv_w[:, 0] = 1.0

    s_faces, s_bary = surface_samples(body, n_surface, seed)
    s_uv = np.einsum("nk,nkc->nc", s_bary, body.uv_corners[s_faces])
    x = s_uv[:, 0] * W - 0.5
    y = s_uv[:, 1] * H - 0.5
    i0 = np.floor(x).astype(np.int64)
    j0 = np.floor(y).astype(np.int64)
    fx, fy = x - i0, y - j0
    ii = np.clip(np.stack([i0, i0 + 1, i0, i0 + 1], axis=1), 0, W - 1)
    jj = np.clip(np.stack([j0, j0, j0 + 1, j0 + 1], axis=1), 0, H - 1)
    s_taps = jj * W + ii
    s_w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    tap_ok = valid.reshape(-1)[s_taps]
    s_w = np.where(tap_ok, s_w, 0.0)
    total = s_w.sum(axis=1)
    empty = total <= 0
    s_w = s_w / np.where(empty, 1.0, total)[:, None]
    home = np.clip(np.floor(s_uv[:, 1] * H).astype(np.int64), 0, H - 1) * W + np.clip(
        np.floor(s_uv[:, 0] * W).astype(np.int64), 0, W - 1
    )
    s_taps = np.where(tap_ok, s_taps, nearest[home][:, None])
    s_w[empty] = (1.0, 0.0, 0.0, 0.0)

    texels, tap_index = np.unique(np.concatenate([uv_taps, s_taps]), return_inverse=True)
    return SamplingPlan(
        faces=np.concatenate([uv_faces, s_faces]),
        barycentric=np.concatenate([uv_bary, s_bary]),
        uv=np.concatenate([uv_uv, s_uv]),
        texels=texels,
        tap_index=tap_index.reshape(-1, 4),
        tap_weight=np.concatenate([uv_w, s_w]),
        n_uv=n_uv,
        n_surface=n_surface,
        seed=seed,
        width=W,
        height=H,
    )


def sample_structured(
    param_map: GaussianParamMap,
    body: SkinnedBody,
    n_uv: int = DEFAULT_N_UV,
    n_surface: int = DEFAULT_N_SURFACE,
    seed: int = 0,
    raster: UVRasterization | None = None,
) -> StructuredGaussianSet:
    """Sample Gaussians on a UV grid and area-uniformly on the surface.

    Parameters are fetched by bilinear interpolation over valid texels and
    passed through the activation pass.
    """
    plan = build_sampling_plan(param_map.valid, body, n_uv, n_surface, seed, raster)
    return plan.structured(plan.gather(param_map.data))


@dataclass
class SamplerCache:
    """Reusable canonical-map sampling state for repeated renders.

    Holds the sampling plan and the canonical map's raw values at the texels
    the plan reads. Offsets are added per texel before the activation pass,
    which matches composing the full maps first because that pass is a
    per-texel function.
    """

    plan: SamplingPlan
    canonical_texels: np.ndarray
    key: tuple = field(default=())

    @classmethod
    def build(
        cls,
        canonical: GaussianParamMap,
        body: SkinnedBody,
        n_uv: int = DEFAULT_N_UV,
        n_surface: int = DEFAULT_N_SURFACE,
        seed: int = 0,
        raster: UVRasterization | None = None,
    ) -> "SamplerCache":
        plan = build_sampling_plan(canonical.valid, body, n_uv, n_surface, seed, raster)
        return cls(plan, plan.gather(canonical.data), (id(canonical), id(body), n_uv, n_surface, seed))

    def matches(self, canonical: GaussianParamMap, body: SkinnedBody, n_uv: int, n_surface: int, seed: int) -> bool:
        return self.key == (id(canonical), id(body), n_uv, n_surface, seed)

    def structured(self, offset: GaussianParamMap | None) -> StructuredGaussianSet:
        plan = self.plan
        if offset is None:
            off = np.zeros_like(self.canonical_texels)
        else:
            if (offset.height, offset.width) != (plan.height, plan.width):
                raise ValidationError("offset map size differs from the cached canonical map")
            off = plan.gather(offset.data)
        return plan.structured(normalize_params(self.canonical_texels + off))
