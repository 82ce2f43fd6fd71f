"""Procedural fixtures: simple meshes, skin-like textures, synthetic lesions.

Used by the test suite and by the demo config writer, so the pipeline can
run end to end without any external scan or clinical data.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import yaml

from .geometry import Mesh, save_mesh
from .imgio import save_image
from .placement import LesionSource, dilate_mask

__all__ = [
    "make_plane_mesh",
    "make_two_plane_mesh",
    "make_uv_sphere",
    "make_skin_texture",
    "make_lesion",
    "make_background",
    "write_demo_assets",
]


def make_plane_mesh(size: float = 2.0, z: float = 0.0) -> Mesh:
    """A two-triangle square in the z=const plane, normal +z, UVs covering
    the whole texture (u right, v up)."""
    s = size / 2.0
    vertices = np.array(
        [[-s, -s, z], [s, -s, z], [s, s, z], [-s, s, z]],
        dtype=np.float64,
    )
    faces = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    uv = np.array(
        [
            [[0, 0], [1, 0], [1, 1]],
            [[0, 0], [1, 1], [0, 1]],
        ],
        dtype=np.float64,
    )
    return Mesh(vertices=vertices, faces=faces, uv=uv)


def make_two_plane_mesh(gap: float = 0.5, front_size: float = 0.5, back_size: float = 4.0) -> Mesh:
    """A small front plane occluding a large back plane (an "arm over torso"
    stand-in). Both face +z; the front plane sits `gap` closer to the camera.
    The front plane owns the left half of the UV square, the back the right."""
    front = make_plane_mesh(front_size, z=gap)
    back = make_plane_mesh(back_size, z=0.0)
    vertices = np.vstack([front.vertices, back.vertices])
    faces = np.vstack([front.faces, back.faces + 4])
    uv = np.vstack([front.uv * [0.5, 1.0], back.uv * [0.5, 1.0] + [0.5, 0.0]])
    return Mesh(vertices=vertices, faces=faces, uv=uv)


def make_uv_sphere(
    radius: float = 1.0,
    rings: int = 16,
    segments: int = 24,
    with_anatomy: bool = False,
) -> Mesh:
    """A latitude/longitude sphere with an equirectangular UV atlas and
    outward normals. with_anatomy assigns the 16 anatomy ids in latitude
    bands from the north pole down (purely for label-plumbing tests)."""
    lat = np.linspace(0.0, np.pi, rings + 1)
    lon = np.linspace(0.0, 2.0 * np.pi, segments + 1)

    grid_idx = np.zeros((rings + 1, segments + 1), dtype=np.int64)
    vertices: list[np.ndarray] = []
    for i, theta in enumerate(lat):
        for j, phi in enumerate(lon):
            if j == segments and i not in (0, rings):
                grid_idx[i, j] = grid_idx[i, 0]  # share the seam vertex
                continue
            point = radius * np.array(
                [np.sin(theta) * np.cos(phi), np.cos(theta), np.sin(theta) * np.sin(phi)]
            )
            grid_idx[i, j] = len(vertices)
            vertices.append(point)

    def uv_at(i: int, j: int) -> tuple[float, float]:
        return j / segments, 1.0 - i / rings

    faces: list[list[int]] = []
    uvs: list[list[tuple[float, float]]] = []
    for i in range(rings):
        for j in range(segments):
            a, b = grid_idx[i, j], grid_idx[i, j + 1]
            c, d = grid_idx[i + 1, j + 1], grid_idx[i + 1, j]
            ua, ub = uv_at(i, j), uv_at(i, j + 1)
            uc, ud = uv_at(i + 1, j + 1), uv_at(i + 1, j)
            if i != 0:
                faces.append([a, b, c])
                uvs.append([ua, ub, uc])
            if i != rings - 1:
                faces.append([a, c, d])
                uvs.append([ua, uc, ud])

    verts = np.asarray(vertices)
    anatomy = None
    if with_anatomy:
        frac = np.arccos(np.clip(verts[:, 1] / radius, -1.0, 1.0)) / np.pi
        anatomy = np.minimum((frac * 16).astype(np.int32), 15)
    return Mesh(vertices=verts, faces=np.asarray(faces, dtype=np.int32), uv=np.asarray(uvs), anatomy=anatomy)


def make_skin_texture(
    size: int = 256, rng: np.random.Generator | None = None, base=(0.76, 0.57, 0.46)
) -> np.ndarray:
    """A smooth skin-toned texture with gentle low-frequency variation."""
    rng = rng or np.random.default_rng(0)
    yy, xx = np.mgrid[0:size, 0:size] / size
    swirl = 0.03 * np.sin(2 * np.pi * (xx * 1.7 + 0.3)) + 0.02 * np.cos(2 * np.pi * (yy * 2.3))
    noise = rng.normal(0.0, 0.004, size=(size, size))
    tex = np.empty((size, size, 3))
    for c, value in enumerate(base):
        tex[..., c] = value + swirl + noise
    return np.clip(tex, 0.0, 1.0)


def make_lesion(
    size: int = 64,
    rng: np.random.Generator | None = None,
    lesion_id: int = 1,
    color=(0.45, 0.22, 0.19),
    contrast: float = 1.0,
) -> LesionSource:
    """A roughly circular lesion with an irregular boundary on a skin-toned
    backdrop. contrast scales how far the lesion color departs from skin."""
    rng = rng or np.random.default_rng(1)
    yy, xx = np.mgrid[0:size, 0:size]
    cy = cx = (size - 1) / 2.0
    r = np.hypot(yy - cy, xx - cx)
    angle = np.arctan2(yy - cy, xx - cx)
    wobble = 1.0 + 0.18 * np.sin(3 * angle + rng.uniform(0, 2 * np.pi)) + 0.1 * np.sin(
        5 * angle + rng.uniform(0, 2 * np.pi)
    )
    mask = (r < 0.30 * size * wobble).astype(np.uint8)

    skin = np.array([0.76, 0.57, 0.46])
    lesion_rgb = skin + (np.asarray(color) - skin) * contrast
    image = np.empty((size, size, 3))
    falloff = np.clip(1.0 - r / (0.33 * size), 0.0, 1.0) ** 0.7
    speckle = rng.normal(0.0, 0.015, size=(size, size))
    for c in range(3):
        image[..., c] = skin[c] + (lesion_rgb[c] - skin[c]) * falloff + speckle * mask
    image = np.clip(image, 0.0, 1.0)
    return LesionSource(image=image, mask=mask, lesion_id=lesion_id, dilated_mask=dilate_mask(mask))


def make_background(size: int = 256, rng: np.random.Generator | None = None) -> np.ndarray:
    """An indoor-ish background: muted vertical gradient plus soft blotches."""
    rng = rng or np.random.default_rng(2)
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = 0.35 + 0.25 * yy
    tint = rng.uniform(0.7, 1.0, size=3)
    img = np.empty((size, size, 3))
    for c in range(3):
        img[..., c] = base * tint[c] + 0.05 * np.sin(2 * np.pi * (xx * rng.uniform(1, 3)))
    return np.clip(img, 0.0, 1.0)


def write_demo_assets(
    root: str | Path,
    *,
    texture_size: int = 192,
    lesions: int = 3,
    views: int = 2,
    view_size: int = 128,
    blend_steps: int = 5,
    seed: int = 7,
) -> Path:
    """Create a self-contained demo workspace and return its config path.

    Layout: assets/{sphere.obj, texture.png, nonskin.png, anatomy.json,
    lesions/{manifest.json, lesion_*.png}, backgrounds/} plus config.yaml
    pointing at everything with small, fast settings.
    """
    root = Path(root)
    assets = root / "assets"
    (assets / "lesions").mkdir(parents=True, exist_ok=True)
    (assets / "backgrounds").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    sphere = make_uv_sphere(radius=1.0, rings=16, segments=24, with_anatomy=True)
    save_mesh(sphere, assets / "sphere.obj")
    with open(assets / "anatomy.json", "w") as fh:
        json.dump({"labels": sphere.anatomy.tolist()}, fh)

    texture = make_skin_texture(texture_size, rng)
    save_image(assets / "texture.png", texture)
    nonskin = np.zeros((texture_size, texture_size), dtype=np.uint8)
    nonskin[: texture_size // 16, :] = 1  # a "hairband" strip at the top chart rows
    save_image(assets / "nonskin.png", np.repeat(nonskin[:, :, None] * 1.0, 3, axis=2))

    manifest = {"lesions": []}
    for i in range(lesions):
        lesion = make_lesion(48, rng, lesion_id=i + 1, contrast=0.6)
        save_image(assets / "lesions" / f"lesion_{i}.png", lesion.image)
        save_image(assets / "lesions" / f"mask_{i}.png", np.repeat(lesion.mask[:, :, None] * 1.0, 3, axis=2))
        manifest["lesions"].append(
            {"id": i + 1, "image": f"lesion_{i}.png", "mask": f"mask_{i}.png"}
        )
    with open(assets / "lesions" / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)

    for i in range(2):
        save_image(assets / "backgrounds" / f"bg_{i}.png", make_background(160, rng))

    config = {
        "schema_version": 1,
        "seed": seed,
        "output_dir": str(root / "out"),
        "meshes": [
            {
                "id": "sphere",
                "obj": str(assets / "sphere.obj"),
                "texture": str(assets / "texture.png"),
                "nonskin_mask": str(assets / "nonskin.png"),
                "anatomy_labels": str(assets / "anatomy.json"),
            }
        ],
        "lesions": str(assets / "lesions" / "manifest.json"),
        "backgrounds": str(assets / "backgrounds"),
        "lesions_per_mesh": lesions,
        "views_per_mesh": views,
        "view_width": view_size,
        "view_height": view_size,
        "blend": {"steps": blend_steps, "view_size": view_size},
        "placement": {"max_tries": 50},
    }
    config_path = root / "config.yaml"
    with open(config_path, "w") as fh:
        yaml.safe_dump(config, fh, sort_keys=True)
    return config_path
