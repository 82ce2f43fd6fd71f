"""Triangle meshes: OBJ loading, surface sampling, and anatomy labels.

Meshes are immutable after load and safe for concurrent reads; surface
sampling takes an externally supplied numpy Generator so callers own
their random streams.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)


class MeshError(Exception):
    """Invalid mesh input (missing UVs, bad face, empty mesh...)."""


# Per-vertex anatomy ids on the labeled template body.
ANATOMY_NAMES_16 = {
    0: "head",
    1: "upper_torso",
    2: "lower_torso",
    3: "hips",
    4: "upper_leg_left",
    5: "upper_leg_right",
    6: "lower_leg_left",
    7: "lower_leg_right",
    8: "feet_left",
    9: "feet_right",
    10: "upper_arm_left",
    11: "upper_arm_right",
    12: "lower_arm_left",
    13: "lower_arm_right",
    14: "hand_left",
    15: "hand_right",
}

# Grouped ids start at 1; 0 is reserved for background in rendered labels.
GROUP_NAMES_7 = {
    1: "head",
    2: "torso",
    3: "hips",
    4: "legs",
    5: "feet",
    6: "arms",
    7: "hands",
}

ANATOMY_GROUPING = {
    0: 1,
    1: 2,
    2: 2,
    3: 3,
    4: 4,
    5: 4,
    6: 4,
    7: 4,
    8: 5,
    9: 5,
    10: 6,
    11: 6,
    12: 6,
    13: 6,
    14: 7,
    15: 7,
}


@dataclass
class Mesh:
    """Triangle mesh with per-face-corner UVs.

    vertices: (N, 3) float positions in scene units.
    faces: (F, 3) int vertex indices, right-hand winding.
    uv: (F, 3, 2) float texture coordinates in [0, 1]^2, one per face corner.
        Convention: u right, v up, so v=0 maps to the bottom row of the
        texture image.
    anatomy: optional (N,) int per-vertex label ids.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    anatomy: np.ndarray | None = None
    texture_file: str | None = None
    dropped_faces: int = 0

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int32).reshape(-1, 3)
        self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 3, 2)
        if self.uv.shape[0] != self.faces.shape[0]:
            raise MeshError("uv must provide one coordinate per face corner")
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise MeshError("face index out of range")
        if self.faces.size and self.faces.min() < 0:
            raise MeshError("negative face index")
        if self.uv.size and (self.uv.min() < -1e-9 or self.uv.max() > 1 + 1e-9):
            raise MeshError("uv coordinates must lie in [0, 1]")
        self.uv = np.clip(self.uv, 0.0, 1.0)
        if self.anatomy is not None:
            self.anatomy = np.asarray(self.anatomy, dtype=np.int32).reshape(-1)
            if len(self.anatomy) != len(self.vertices):
                raise MeshError("anatomy labels must be per-vertex")

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def face_cross(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross, axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        cross = self.face_cross
        norm = np.linalg.norm(cross, axis=1, keepdims=True)
        return cross / np.maximum(norm, 1e-300)

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of adjacent face normals, unit length."""
        acc = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(acc, self.faces[:, k], self.face_cross)
        norm = np.linalg.norm(acc, axis=1, keepdims=True)
        out = np.divide(acc, norm, out=np.zeros_like(acc), where=norm > 1e-300)
        return out


@dataclass(frozen=True)
class FaceSample:
    """A point on the mesh surface: face, barycentric weights, position, normal."""

    face_index: int
    barycentric: np.ndarray
    world_point: np.ndarray
    normal: np.ndarray


@dataclass
class AnatomyLabelMap:
    """Per-vertex anatomy ids plus the id->name table.

    grouping maps fine ids onto the 7 coarse classes; it is None once the
    map has already been grouped.
    """

    labels: np.ndarray
    names: dict[int, str] = field(default_factory=lambda: dict(ANATOMY_NAMES_16))
    grouping: dict[int, int] | None = field(default_factory=lambda: dict(ANATOMY_GROUPING))

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32).reshape(-1)


def load_mesh(path: str | Path, anatomy_path: str | Path | None = None) -> Mesh:
    """Load a Wavefront OBJ with texture coordinates.

    Polygonal faces are fan-triangulated. Faces with (near) zero area are
    dropped; the count is logged and recorded on the mesh. Faces without
    a vt reference are rejected.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)

    positions: list[list[float]] = []
    texcoords: list[list[float]] = []
    faces: list[list[int]] = []
    face_uv_idx: list[list[int]] = []
    mtl_files: list[str] = []

    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                positions.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                texcoords.append([float(x) for x in parts[1:3]])
            elif tag == "mtllib" and len(parts) > 1:
                mtl_files.append(parts[1])
            elif tag == "f":
                corners = parts[1:]
                if len(corners) < 3:
                    raise MeshError(f"{path}:{lineno}: face with fewer than 3 vertices")
                v_idx = []
                t_idx = []
                for corner in corners:
                    fields = corner.split("/")
                    v = int(fields[0])
                    v_idx.append(v - 1 if v > 0 else len(positions) + v)
                    if len(fields) < 2 or not fields[1]:
                        raise MeshError(f"{path}:{lineno}: face corner has no texture coordinate")
                    t = int(fields[1])
                    t_idx.append(t - 1 if t > 0 else len(texcoords) + t)
                for k in range(1, len(corners) - 1):
                    faces.append([v_idx[0], v_idx[k], v_idx[k + 1]])
                    face_uv_idx.append([t_idx[0], t_idx[k], t_idx[k + 1]])

    if not texcoords:
        raise MeshError(f"{path}: OBJ has no texture coordinates")
    if not faces:
        raise MeshError(f"{path}: OBJ has no faces")

    verts = np.asarray(positions, dtype=np.float64)
    vts = np.asarray(texcoords, dtype=np.float64)
    face_arr = np.asarray(faces, dtype=np.int32)
    uv = vts[np.asarray(face_uv_idx, dtype=np.int64)]

    # Degenerate-face filter; threshold relative to the mesh extent.
    tri = verts[face_arr]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    extent = float(np.linalg.norm(verts.max(axis=0) - verts.min(axis=0))) if len(verts) else 1.0
    keep = areas > 1e-12 * max(extent, 1e-30) ** 2
    dropped = int((~keep).sum())
    if dropped:
        logger.warning("%s: dropped %d degenerate face(s)", path.name, dropped)
        face_arr = face_arr[keep]
        uv = uv[keep]

    texture_file = _texture_from_mtl(path.parent, mtl_files)

    anatomy = None
    if anatomy_path is not None:
        anatomy = load_vertex_labels(anatomy_path)

    return Mesh(
        vertices=verts,
        faces=face_arr,
        uv=uv,
        anatomy=anatomy,
        texture_file=texture_file,
        dropped_faces=dropped,
    )


def _texture_from_mtl(directory: Path, mtl_files: list[str]) -> str | None:
    # Everything in the MTL except the diffuse texture filename is ignored.
    for name in mtl_files:
        mtl_path = directory / name
        if not mtl_path.is_file():
            continue
        with open(mtl_path) as fh:
            for raw in fh:
                parts = raw.strip().split()
                if parts and parts[0] == "map_Kd" and len(parts) > 1:
                    return parts[-1]
    return None


def save_mesh(mesh: Mesh, path: str | Path) -> None:
    """Write a mesh back out as an OBJ (v / vt / f v/vt), one vt per corner."""
    path = Path(path)
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for corner_uv in mesh.uv.reshape(-1, 2):
            fh.write(f"vt {corner_uv[0]:.9g} {corner_uv[1]:.9g}\n")
        for i, face in enumerate(mesh.faces):
            t = 3 * i
            fh.write(f"f {face[0] + 1}/{t + 1} {face[1] + 1}/{t + 2} {face[2] + 1}/{t + 3}\n")


def sample_surface(mesh: Mesh, rng: np.random.Generator) -> FaceSample:
    """Sample a surface point: face chosen with probability proportional to
    area, position uniform inside the face, normal = face normal."""
    if mesh.num_faces == 0:
        raise MeshError("cannot sample an empty mesh")
    areas = mesh.face_areas
    total = areas.sum()
    if total <= 0:
        raise MeshError("mesh has no positive-area faces")
    face = int(rng.choice(mesh.num_faces, p=areas / total))
    u, v = rng.random(2)
    if u + v > 1.0:
        u, v = 1.0 - u, 1.0 - v
    bary = np.array([1.0 - u - v, u, v])
    tri = mesh.vertices[mesh.faces[face]]
    point = bary @ tri
    return FaceSample(
        face_index=face,
        barycentric=bary,
        world_point=point,
        normal=mesh.face_normals[face].copy(),
    )


def transfer_anatomy(labeled: Mesh, target: Mesh) -> AnatomyLabelMap:
    """Assign each target vertex the label of its nearest labeled vertex.

    The meshes must already be spatially aligned. Exact distance ties are
    broken by the lowest labeled-vertex index.
    """
    if labeled.anatomy is None:
        raise MeshError("source mesh has no per-vertex labels")
    tree = cKDTree(labeled.vertices)
    k = min(8, len(labeled.vertices))
    dist, idx = tree.query(target.vertices, k=k)
    if k == 1:
        dist = dist[:, None]
        idx = idx[:, None]
    nearest = idx[:, 0].copy()
    ties = dist == dist[:, :1]
    multi = ties.sum(axis=1) > 1
    if multi.any():
        masked = np.where(ties, idx, np.iinfo(np.int64).max)
        nearest[multi] = masked[multi].min(axis=1)
    return AnatomyLabelMap(labels=labeled.anatomy[nearest])


def group_labels(map16: AnatomyLabelMap) -> AnatomyLabelMap:
    """Collapse the 16 fine anatomy ids onto the 7 coarse classes."""
    if map16.grouping is None:
        raise ValueError("label map is already grouped")
    unknown = set(np.unique(map16.labels)) - set(map16.grouping)
    if unknown:
        raise ValueError(f"unknown label id(s): {sorted(unknown)}")
    lut = np.zeros(max(map16.grouping) + 1, dtype=np.int32)
    for fine, coarse in map16.grouping.items():
        lut[fine] = coarse
    return AnatomyLabelMap(labels=lut[map16.labels], names=dict(GROUP_NAMES_7), grouping=None)


def majority_face_labels(mesh: Mesh, labels: np.ndarray) -> np.ndarray:
    """Per-face label: majority vote of the three vertex labels, ties going
    to the lowest id."""
    tri = np.sort(np.asarray(labels, dtype=np.int32)[mesh.faces], axis=1)
    out = np.where(tri[:, 1] == tri[:, 0], tri[:, 0], np.where(tri[:, 1] == tri[:, 2], tri[:, 1], tri[:, 0]))
    return out.astype(np.int32)


def load_vertex_labels(path: str | Path) -> np.ndarray:
    """Read per-vertex label ids from JSON: either a bare list or {"labels": [...]}."""
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = data["labels"]
    return np.asarray(data, dtype=np.int32)


def load_label_table(path: str | Path) -> tuple[dict[int, str], dict[int, int]]:
    """Read a label table JSON: [{"id": 0, "name": "head", "group": "head"}, ...].

    Returns (id -> name, id -> coarse group id); group ids follow GROUP_NAMES_7.
    """
    with open(path) as fh:
        rows = json.load(fh)
    group_ids = {name: gid for gid, name in GROUP_NAMES_7.items()}
    names: dict[int, str] = {}
    grouping: dict[int, int] = {}
    for row in rows:
        names[int(row["id"])] = row["name"]
        group = row["group"]
        if group not in group_ids:
            raise ValueError(f"unknown group name: {group}")
        grouping[int(row["id"])] = group_ids[group]
    if set(grouping.values()) != set(GROUP_NAMES_7):
        raise ValueError("grouping must cover all 7 coarse classes")
    return names, grouping


def default_label_table() -> list[dict]:
    """The built-in 16-part table in the JSON schema used by load_label_table."""
    return [
        {"id": i, "name": name, "group": GROUP_NAMES_7[ANATOMY_GROUPING[i]]}
        for i, name in ANATOMY_NAMES_16.items()
    ]
