"""On-disk formats: UVMap rasters, Gaussian record streams, weight archives, images.

See ``docs/formats.md`` for byte layouts.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError
from .gaussians import GaussianParamMap, PoseSpaceGaussianSet, StructuredGaussianSet
from .lift import AttentionWeights
from .uv_atlas import UVMap

UVM_MAGIC = b"UVM1"
GAUSS_MAGIC = b"PGS1"
STRUCT_MAGIC = b"SGS1"
WEIGHTS_MAGIC = b"GAW1"
_HEADER = struct.Struct("<4sIII")


def uvmap_to_bytes(m: UVMap) -> bytes:
    header = _HEADER.pack(UVM_MAGIC, m.width, m.height, m.channels)
    raster = np.ascontiguousarray(m.data, dtype="<f4").tobytes()
    mask = np.ascontiguousarray(m.valid, dtype=np.uint8).tobytes()
    return header + raster + mask


def uvmap_from_bytes(buf: bytes) -> UVMap:
    if len(buf) < _HEADER.size:
        raise FormatError("UVMap blob shorter than its header")
    magic, w, h, c = _HEADER.unpack_from(buf)
    if magic != UVM_MAGIC:
        raise FormatError(f"bad UVMap magic {magic!r}")
    n = w * h * c
    expected = _HEADER.size + 4 * n + w * h
    if len(buf) != expected:
        raise FormatError(f"UVMap blob is {len(buf)} bytes, expected {expected}")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size).reshape(h, w, c)
    mask = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=_HEADER.size + 4 * n).reshape(h, w)
    return UVMap(data.astype(np.float64), mask.astype(bool))


def write_uvmap(m: UVMap, path: str | Path) -> None:
    path = Path(path)
    path.write_bytes(uvmap_to_bytes(m))
    if isinstance(m, GaussianParamMap):
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(GaussianParamMap.sidecar(), indent=2))


def read_uvmap(path: str | Path) -> UVMap:
    try:
        return uvmap_from_bytes(Path(path).read_bytes())
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def read_param_map(path: str | Path) -> GaussianParamMap:
    m = read_uvmap(path)
    if m.channels != 14:
        raise FormatError(f"{path}: parameter map needs 14 channels, found {m.channels}")
    return GaussianParamMap.from_uvmap(m)


# ---------------------------------------------------------------------------
# Gaussian record streams: magic, u32 header length, JSON header, packed records


def _record_dtype(feature_width: int) -> np.dtype:
    fields = [
        ("position", "<f4", (3,)),
        ("rotation", "<f4", (4,)),
        ("scale", "<f4", (3,)),
        ("alpha", "<f4"),
        ("rgb", "<f4", (3,)),
        ("view", "<i4"),
        ("pixel", "<i4", (2,)),
    ]
    if feature_width:
        fields.append(("feature", "<f4", (feature_width,)))
    return np.dtype(fields)


def _pack(magic: bytes, header: dict, records: np.ndarray) -> bytes:
    h = json.dumps(header).encode()
    return magic + struct.pack("<I", len(h)) + h + records.tobytes()


def _unpack(buf: bytes, magic: bytes) -> tuple[dict, bytes]:
    if buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}")
    (n,) = struct.unpack_from("<I", buf, 4)
    try:
        header = json.loads(buf[8 : 8 + n])
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad record header: {exc}") from exc
    return header, buf[8 + n :]


def gaussians_to_bytes(g: PoseSpaceGaussianSet) -> bytes:
    dt = _record_dtype(g.feature_width)
    rec = np.zeros(len(g), dtype=dt)
    rec["position"] = g.positions
    rec["rotation"] = g.rotations
    rec["scale"] = g.scales
    rec["alpha"] = g.alphas
    rec["rgb"] = g.rgbs
    rec["view"] = g.source_view
    rec["pixel"] = g.pixels
    if g.feature_width:
        rec["feature"] = g.features
    return _pack(GAUSS_MAGIC, {"count": len(g), "feature_width": g.feature_width, "dtype": "float32"}, rec)


def gaussians_from_bytes(buf: bytes) -> PoseSpaceGaussianSet:
    header, body = _unpack(buf, GAUSS_MAGIC)
    try:
        count, fw = int(header["count"]), int(header["feature_width"])
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"bad Gaussian header: {exc}") from exc
    dt = _record_dtype(fw)
    if len(body) != count * dt.itemsize:
        raise FormatError(f"Gaussian stream has {len(body)} bytes, expected {count * dt.itemsize}")
    rec = np.frombuffer(body, dtype=dt, count=count)
    rot = rec["rotation"].astype(np.float64)
    rot /= np.maximum(np.linalg.norm(rot, axis=1, keepdims=True), 1e-12)  # float32 round-off
    return PoseSpaceGaussianSet(
        rec["position"].astype(np.float64),
        rot,
        rec["scale"].astype(np.float64),
        np.clip(rec["alpha"].astype(np.float64), 0, 1),
        np.clip(rec["rgb"].astype(np.float64), 0, 1),
        rec["feature"].astype(np.float64) if fw else None,
        rec["view"].astype(np.int64),
        rec["pixel"].astype(np.int64),
    )


def write_gaussians(g: PoseSpaceGaussianSet, path: str | Path) -> None:
    Path(path).write_bytes(gaussians_to_bytes(g))


def read_gaussians(path: str | Path) -> PoseSpaceGaussianSet:
    try:
        return gaussians_from_bytes(Path(path).read_bytes())
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def structured_to_bytes(s: StructuredGaussianSet, extra: dict | None = None) -> bytes:
    dt = np.dtype([("face", "<i4"), ("barycentric", "<f8", (3,)), ("uv", "<f8", (2,)), ("params", "<f8", (14,))])
    rec = np.zeros(len(s), dtype=dt)
    rec["face"] = s.faces
    rec["barycentric"] = s.barycentric
    rec["uv"] = s.uv
    rec["params"] = s.params
    header = {"count": len(s), "layout": GaussianParamMap.sidecar()["layout"], **(extra or {})}
    return _pack(STRUCT_MAGIC, header, rec)


def structured_from_bytes(buf: bytes) -> tuple[StructuredGaussianSet, dict]:
    header, body = _unpack(buf, STRUCT_MAGIC)
    dt = np.dtype([("face", "<i4"), ("barycentric", "<f8", (3,)), ("uv", "<f8", (2,)), ("params", "<f8", (14,))])
    count = int(header["count"])
    if len(body) != count * dt.itemsize:
        raise FormatError("structured Gaussian stream length mismatch")
    rec = np.frombuffer(body, dtype=dt, count=count)
    s = StructuredGaussianSet(
        rec["face"].astype(np.int64), rec["barycentric"].copy(), rec["uv"].copy(), rec["params"].copy()
    )
    return s, header


# ---------------------------------------------------------------------------
# weight archive: magic, u32 manifest length, JSON manifest, UVM1 blobs


def weights_to_bytes(w: AttentionWeights) -> bytes:
    blobs = []
    entries = []
    offset = 0
    for name, mat in w.as_dict().items():
        blob = uvmap_to_bytes(UVMap(mat[..., None], np.ones(mat.shape, dtype=bool)))
        entries.append({"name": name, "rows": mat.shape[0], "cols": mat.shape[1], "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"tensors": entries, "dtype": "float32"}).encode()
    return WEIGHTS_MAGIC + struct.pack("<I", len(manifest)) + manifest + b"".join(blobs)


def weights_from_bytes(buf: bytes) -> AttentionWeights:
    manifest, body = _unpack(buf, WEIGHTS_MAGIC)
    mats = {}
    try:
        for e in manifest["tensors"]:
            m = uvmap_from_bytes(body[e["offset"] : e["offset"] + e["length"]])
            mats[e["name"]] = m.data[..., 0]
        return AttentionWeights(mats["w_q"], mats["w_k"], mats["w_v"], mats["w_o"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad weight archive: {exc}") from exc


def write_weights(w: AttentionWeights, path: str | Path) -> None:
    Path(path).write_bytes(weights_to_bytes(w))


def read_weights(path: str | Path) -> AttentionWeights:
    try:
        return weights_from_bytes(Path(path).read_bytes())
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# images


def write_png(rgba8: np.ndarray, path: str | Path) -> None:
    Image.fromarray(rgba8, mode="RGBA").save(path, format="PNG")


def read_image(path: str | Path) -> tuple[np.ndarray, np.ndarray | None]:
    """Float RGB in [0, 1] and the alpha channel if present."""
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    arr = np.asarray(img.convert("RGBA"), dtype=np.float64) / 255.0
    has_alpha = img.mode in ("RGBA", "LA") or "transparency" in img.info
    return arr[..., :3], (arr[..., 3] if has_alpha else None)
