"""Skinned body model: loading, canonicalization, forward kinematics and LBS."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .rotations import quat_norm, quat_to_matrix

WEIGHT_TOL = 1e-6
QUAT_UNIT_TOL = 1e-6
QUAT_DEGENERATE = 1e-8


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SkinnedBody:
    """Rest mesh, UV atlas, joint tree and skinning weights.

    Arrays are made read-only on construction so a body can be shared freely.

    Attributes:
        rest_vertices: ``(V, 3)`` rest positions in meters.
        faces: ``(F, 3)`` vertex indices.
        uv_corners: ``(F, 3, 2)`` per-corner UV coordinates in ``[0, 1]``.
        joint_parents: ``(J,)`` parent index, ``-1`` for the root.
        joint_rest_positions: ``(J, 3)``.
        skin_weights: ``(V, J)`` dense weight rows, each summing to one.
        part_labels: ``(F,)`` segment ids in ``[0, num_segments)``.
    """

    rest_vertices: np.ndarray
    faces: np.ndarray
    uv_corners: np.ndarray
    joint_parents: np.ndarray
    joint_rest_positions: np.ndarray
    skin_weights: np.ndarray
    part_labels: np.ndarray
    num_segments: int
    joint_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name in (
            "rest_vertices",
            "faces",
            "uv_corners",
            "joint_parents",
            "joint_rest_positions",
            "skin_weights",
            "part_labels",
        ):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if not self.joint_names:
            object.__setattr__(self, "joint_names", tuple(f"joint_{i}" for i in range(self.num_joints)))
        self.validate()

    @property
    def num_vertices(self) -> int:
        return self.rest_vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joint_parents.shape[0]

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.joint_parents < 0)[0])

    def validate(self) -> None:
        V, F, J = self.num_vertices, self.num_faces, self.num_joints
        if self.rest_vertices.shape != (V, 3) or self.faces.shape != (F, 3):
            raise ValidationError("vertices must be (V, 3) and faces (F, 3)")
        if F and (self.faces.min() < 0 or self.faces.max() >= V):
            raise ValidationError("face index out of range")
        if self.uv_corners.shape != (F, 3, 2):
            raise ValidationError("uv_corners must be (F, 3, 2)")
        if np.any(self.uv_corners < 0.0) or np.any(self.uv_corners > 1.0):
            raise ValidationError("uv coordinates must lie in [0, 1]^2")
        if self.skin_weights.shape != (V, J):
            raise ValidationError(f"skin weights must be ({V}, {J}), got {self.skin_weights.shape}")
        if np.any(self.skin_weights < 0):
            raise ValidationError("skin weights must be non-negative")
        if np.any(np.abs(self.skin_weights.sum(axis=1) - 1.0) > WEIGHT_TOL):
            raise ValidationError("skin weight rows must sum to 1")
        if self.joint_rest_positions.shape != (J, 3):
            raise ValidationError("joint rest positions must be (J, 3)")
        if self.part_labels.shape != (F,):
            raise ValidationError("part_labels must have one entry per face")
        if F and (self.part_labels.min() < 0 or self.part_labels.max() >= self.num_segments):
            raise ValidationError("part label out of range")
        joint_order(self.joint_parents)

    def order(self) -> np.ndarray:
        return joint_order(self.joint_parents)

    def rest_mesh(self) -> "PosedMesh":
        return PosedMesh.from_vertices(self, np.array(self.rest_vertices, dtype=np.float64))


def joint_order(parents: np.ndarray) -> np.ndarray:
    """Topological order of a single-rooted joint tree (parents first).

    Raises ValidationError for multiple roots, bad parent indices or cycles.
    """
    parents = np.asarray(parents)
    J = parents.shape[0]
    roots = np.flatnonzero(parents < 0)
    if len(roots) != 1:
        raise ValidationError(f"joint tree must have exactly one root, found {len(roots)}")
    if np.any(parents >= J):
        raise ValidationError("joint parent index out of range")
    children: list[list[int]] = [[] for _ in range(J)]
    for j, p in enumerate(parents):
        if p >= 0:
            children[p].append(j)
    order = []
    stack = [int(roots[0])]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != J:
        raise ValidationError("joint tree contains a cycle")
    return np.array(order, dtype=np.int64)


@dataclass(frozen=True)
class PoseParams:
    joint_rotations: np.ndarray  # (J, 4) unit quaternions (w, x, y, z)
    root_translation: np.ndarray  # (3,)

    def __post_init__(self) -> None:
        q = np.asarray(self.joint_rotations, dtype=np.float64).reshape(-1, 4)
        t = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        n = quat_norm(q)
        if np.any(n < QUAT_DEGENERATE):
            raise ValidationError("degenerate joint quaternion (norm < 1e-8)")
        if np.any(np.abs(n - 1.0) > QUAT_UNIT_TOL):
            raise ValidationError("joint quaternions must have unit norm")
        object.__setattr__(self, "joint_rotations", _frozen(q))
        object.__setattr__(self, "root_translation", _frozen(t))

    @property
    def num_joints(self) -> int:
        return self.joint_rotations.shape[0]

    @classmethod
    def identity(cls, num_joints: int) -> "PoseParams":
        q = np.zeros((num_joints, 4))
        q[:, 0] = 1.0
        return cls(q, np.zeros(3))

    @classmethod
    def from_dict(cls, d: dict) -> "PoseParams":
        try:
            q = np.asarray(d["joint_rotations"], dtype=np.float64).reshape(-1, 4)
            t = np.asarray(d.get("root_translation", [0.0, 0.0, 0.0]), dtype=np.float64).reshape(3)
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"invalid pose record: {exc}") from exc
        n = quat_norm(q)
        if np.any(n < QUAT_DEGENERATE):
            raise ValidationError("degenerate joint quaternion (norm < 1e-8)")
        # JSON round-off only; degenerate input was rejected above
        return cls(q / n[:, None], t)

    def to_dict(self) -> dict:
        return {
            "joint_rotations": self.joint_rotations.tolist(),
            "root_translation": self.root_translation.tolist(),
        }


@dataclass(frozen=True)
class JointTransforms:
    """Rest-to-posed rigid transforms per joint.

    ``rotations[j] @ x + translations[j]`` maps a rest-space point rigidly
    attached to joint ``j`` into posed space. ``positions`` are the posed joint
    locations.
    """

    rotations: np.ndarray  # (J, 3, 3)
    translations: np.ndarray  # (J, 3)
    positions: np.ndarray  # (J, 3)

    def validate(self, tol: float = 1e-6) -> None:
        R = self.rotations
        eye = np.eye(3)
        if np.any(np.abs(np.einsum("jba,jbc->jac", R, R) - eye) > tol):
            raise ValidationError("joint rotation not orthonormal")
        if np.any(np.abs(np.linalg.det(R) - 1.0) > tol):
            raise ValidationError("joint rotation determinant is not +1")

    def as_matrices(self) -> np.ndarray:
        J = self.rotations.shape[0]
        M = np.zeros((J, 4, 4))
        M[:, :3, :3] = self.rotations
        M[:, :3, 3] = self.translations
        M[:, 3, 3] = 1.0
        return M


@dataclass(frozen=True)
class PosedMesh:
    vertices: np.ndarray  # (V, 3)
    vertex_normals: np.ndarray  # (V, 3) unit
    faces: np.ndarray
    uv_corners: np.ndarray
    part_labels: np.ndarray
    num_segments: int

    @classmethod
    def from_vertices(cls, body: SkinnedBody, vertices: np.ndarray) -> "PosedMesh":
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != body.rest_vertices.shape:
            raise ValidationError("posed vertex count must equal rest vertex count")
        return cls(
            vertices=vertices,
            vertex_normals=vertex_normals(vertices, body.faces),
            faces=body.faces,
            uv_corners=body.uv_corners,
            part_labels=body.part_labels,
            num_segments=body.num_segments,
        )

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def face_corners(self) -> np.ndarray:
        """``(F, 3, 3)`` corner positions."""
        return self.vertices[self.faces]


def face_cross(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalized face normals, length equal to twice the face area."""
    p = vertices[faces]
    return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals; isolated vertices get ``+z``."""
    V = vertices.shape[0]
    fn = face_cross(vertices, faces)
    acc = np.zeros((V, 3))
    for k in range(3):
        idx = faces[:, k]
        for c in range(3):
            acc[:, c] += np.bincount(idx, weights=fn[:, c], minlength=V)
    n = np.linalg.norm(acc, axis=1)
    out = np.zeros_like(acc)
    ok = n > 1e-300
    out[ok] = acc[ok] / n[ok, None]
    out[~ok] = (0.0, 0.0, 1.0)
    return out


def forward_kinematics(body: SkinnedBody, pose: PoseParams) -> JointTransforms:
    """Compose local joint rotations down the tree.

    Each joint rotates its subtree about its own rest position; the root is
    additionally translated by ``pose.root_translation`` in posed space.
    """
    J = body.num_joints
    if pose.num_joints != J:
        raise ValidationError(f"pose has {pose.num_joints} rotations, body has {J} joints")
    local = quat_to_matrix(pose.joint_rotations)
    rest = np.asarray(body.joint_rest_positions, dtype=np.float64)
    rot = np.zeros((J, 3, 3))
    trans = np.zeros((J, 3))
    parents = body.joint_parents
    for j in body.order():
        # local: x -> R_j (x - r_j) + r_j
        lt = rest[j] - local[j] @ rest[j]
        p = parents[j]
        if p < 0:
            rot[j] = local[j]
            trans[j] = lt + pose.root_translation
        else:
            rot[j] = rot[p] @ local[j]
            trans[j] = rot[p] @ lt + trans[p]
    positions = np.einsum("jab,jb->ja", rot, rest) + trans
    return JointTransforms(rot, trans, positions)


def lbs_deform(body: SkinnedBody, transforms: JointTransforms) -> PosedMesh:
    """Linear blend skinning of the rest mesh, with recomputed normals."""
    W = body.skin_weights
    # sum_j w_j (R_j v + t_j) written as v + sum_j w_j ((R_j - I) v + t_j); equal
    # for unit-sum rows, and exactly v when every transform is the identity
    delta_R = np.einsum("vj,jab->vab", W, transforms.rotations - np.eye(3))
    delta_t = W @ transforms.translations
    rest = body.rest_vertices
    verts = rest + (np.einsum("vab,vb->va", delta_R, rest) + delta_t)
    return PosedMesh.from_vertices(body, verts)


def pose_body(body: SkinnedBody, pose: PoseParams) -> PosedMesh:
    return lbs_deform(body, forward_kinematics(body, pose))


# ---------------------------------------------------------------------------
# loading


def _read_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if isinstance(source, (str, Path)):
        return Path(source).read_bytes()
    return source.read()


def parse_obj(data: bytes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Parse ``v``/``vt``/``f`` records; polygons are fan-triangulated.

    Returns vertices ``(V, 3)``, faces ``(F, 3)`` and uv corners ``(F, 3, 2)``.
    """
    verts: list[list[float]] = []
    uvs: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    face_uv: list[tuple[int, int, int]] = []
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("mesh file is not UTF-8 text") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        try:
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif tag == "vt":
                uvs.append([float(x) for x in parts[1:3]])
                if len(uvs[-1]) != 2:
                    raise ValueError("vt needs 2 coordinates")
            elif tag == "f":
                corners = []
                for tok in parts[1:]:
                    fields = tok.split("/")
                    if len(fields) < 2 or not fields[1]:
                        raise ValueError("face corner without a uv index")
                    vi, ti = int(fields[0]), int(fields[1])
                    vi = vi - 1 if vi > 0 else len(verts) + vi
                    ti = ti - 1 if ti > 0 else len(uvs) + ti
                    corners.append((vi, ti))
                if len(corners) < 3:
                    raise ValueError("face needs at least 3 corners")
                for k in range(1, len(corners) - 1):
                    tri = (corners[0], corners[k], corners[k + 1])
                    faces.append(tuple(c[0] for c in tri))
                    face_uv.append(tuple(c[1] for c in tri))
        except ValueError as exc:
            raise FormatError(f"mesh line {lineno}: {exc}") from exc
    if not verts or not faces:
        raise FormatError("mesh has no vertices or faces")
    V = np.array(verts, dtype=np.float64)
    F = np.array(faces, dtype=np.int64)
    T = np.array(uvs, dtype=np.float64).reshape(-1, 2)
    FT = np.array(face_uv, dtype=np.int64)
    if F.min() < 0 or F.max() >= len(V) or FT.min() < 0 or FT.max() >= len(T):
        raise FormatError("face references a missing vertex or uv")
    return V, F, T[FT]


def parse_skin(data: bytes, num_vertices: int, num_faces: int) -> dict:
    try:
        doc = json.loads(data)
        joints = doc["joints"]
        names = tuple(str(j.get("name", f"joint_{i}")) for i, j in enumerate(joints))
        parents = np.array([-1 if j.get("parent") is None else int(j["parent"]) for j in joints], dtype=np.int64)
        rest = np.array([j["rest_position"] for j in joints], dtype=np.float64).reshape(-1, 3)
        rows = doc["weights"]
        labels = np.array(doc.get("labels", [0] * num_faces), dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed skin file: {exc}") from exc
    J = len(joints)
    if J == 0:
        raise FormatError("skin file defines no joints")
    if len(rows) != num_vertices:
        raise ValidationError(f"skin file has {len(rows)} weight rows, mesh has {num_vertices} vertices")
    if labels.shape != (num_faces,):
        raise ValidationError(f"skin file has {labels.size} labels, mesh has {num_faces} faces")
    W = np.zeros((num_vertices, J))
    try:
        for v, row in enumerate(rows):
            for j, w in row:
                if not 0 <= int(j) < J:
                    raise IndexError(f"joint index {j} out of range")
                W[v, int(j)] += float(w)
    except (IndexError, TypeError, ValueError) as exc:
        raise FormatError(f"bad weight row: {exc}") from exc
    if np.any(W < 0):
        raise ValidationError("negative skin weight")
    sums = W.sum(axis=1)
    if np.any(sums <= 0):
        raise ValidationError(f"weight row {int(np.argmax(sums <= 0))} sums to 0")
    num_segments = int(doc.get("num_segments", int(labels.max()) + 1 if labels.size else 1))
    return dict(
        joint_names=names,
        joint_parents=parents,
        joint_rest_positions=rest,
        skin_weights=W / sums[:, None],
        part_labels=labels,
        num_segments=num_segments,
    )


def load_body(mesh_source: BinaryIO | bytes | str | Path, skin_source: BinaryIO | bytes | str | Path) -> SkinnedBody:
    """Load an OBJ mesh and JSON skin description into a canonical body.

    The body is translated so the root joint's rest position is the origin and
    weight rows are renormalized to sum to one.
    """
    V, F, UV = parse_obj(_read_bytes(mesh_source))
    skin = parse_skin(_read_bytes(skin_source), len(V), len(F))
    joint_order(skin["joint_parents"])
    root = int(np.flatnonzero(skin["joint_parents"] < 0)[0])
    offset = skin["joint_rest_positions"][root].copy()
    return SkinnedBody(
        rest_vertices=V - offset,
        faces=F,
        uv_corners=UV,
        joint_parents=skin["joint_parents"],
        joint_rest_positions=skin["joint_rest_positions"] - offset,
        skin_weights=skin["skin_weights"],
        part_labels=skin["part_labels"],
        num_segments=skin["num_segments"],
        joint_names=skin["joint_names"],
    )


def write_obj(body: SkinnedBody, path: str | Path | None = None) -> bytes:
    """Serialize the rest mesh as OBJ with one ``vt`` per face corner."""
    buf = io.StringIO()
    # repr of a Python float round-trips exactly
    for x, y, z in body.rest_vertices.tolist():
        buf.write(f"v {x!r} {y!r} {z!r}\n")
    for u, v in body.uv_corners.reshape(-1, 2).tolist():
        buf.write(f"vt {u!r} {v!r}\n")
    for f, tri in enumerate(body.faces):
        a, b, c = (int(x) + 1 for x in tri)
        t = 3 * f + 1
        buf.write(f"f {a}/{t} {b}/{t + 1} {c}/{t + 2}\n")
    data = buf.getvalue().encode()
    if path is not None:
        Path(path).write_bytes(data)
    return data


def write_skin(body: SkinnedBody, path: str | Path | None = None) -> bytes:
    joints = [
        {
            "name": body.joint_names[j],
            "parent": None if body.joint_parents[j] < 0 else int(body.joint_parents[j]),
            "rest_position": body.joint_rest_positions[j].tolist(),
        }
        for j in range(body.num_joints)
    ]
    weights = [[[int(j), float(row[j])] for j in np.flatnonzero(row)] for row in body.skin_weights]
    doc = {
        "joints": joints,
        "weights": weights,
        "labels": body.part_labels.tolist(),
        "num_segments": body.num_segments,
    }
    data = json.dumps(doc).encode()
    if path is not None:
        Path(path).write_bytes(data)
    return data


def load_poses(source: Sequence | dict | str | Path) -> list[PoseParams]:
    """Read one pose record or a JSON array of them."""
    if isinstance(source, (str, Path)):
        try:
            source = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid pose JSON: {exc}") from exc
    if isinstance(source, dict):
        source = source.get("frames", [source]) if "frames" in source else [source]
    return [PoseParams.from_dict(d) for d in source]
