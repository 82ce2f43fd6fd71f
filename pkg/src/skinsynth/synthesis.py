"""Dataset synthesis: sample scenes, validate views, emit annotation bundles.

Every generated view carries an RGB composite over a background image plus
dense annotations: lesion-id mask, skin mask, non-skin mask, grouped
anatomy labels, a depth map, and tight per-lesion bounding boxes. The four
masks {lesion, skin, nonskin, background} partition the image exactly.

Views are embarrassingly parallel: each view owns an RNG stream derived
from a base seed and its view index, so output is independent of
scheduling.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import AnatomyLabelMap, Mesh, group_labels, majority_face_labels, sample_surface
from .imgio import fit_to_shape, load_image, save_depth_image, save_image, save_label_image, save_palette_image
from .placement import TextureSet, camera_from_surface
from .renderer import Camera, Material, PointLight, rasterize, sample_label, shade

logger = logging.getLogger(__name__)

RETRY_BUDGET = 20
DEPTH_SCALE = 1e4

# Indexed-color palette for anatomy label images: background, head, torso,
# hips, legs, feet, arms, hands.
ANATOMY_PALETTE = np.array(
    [
        [0, 0, 0],
        [230, 80, 60],
        [70, 130, 180],
        [240, 200, 80],
        [110, 190, 90],
        [150, 90, 200],
        [250, 140, 50],
        [80, 210, 210],
    ],
    dtype=np.uint8,
)


@dataclass(frozen=True)
class SceneRanges:
    """Uniform sampling intervals for scene parameters, [lo, hi] each."""

    distance: tuple[float, float] = (0.1, 1.3)
    ambient: tuple[float, float] = (0.2, 0.99)
    diffuse: tuple[float, float] = (0.2, 0.99)
    light_specular: tuple[float, float] = (0.0, 0.1)
    material_specular: tuple[float, float] = (0.0, 0.05)
    shininess: tuple[float, float] = (30.0, 60.0)

    def __post_init__(self):
        for name in (
            "distance",
            "ambient",
            "diffuse",
            "light_specular",
            "material_specular",
            "shininess",
        ):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} range must satisfy lo <= hi")


@dataclass
class SceneSample:
    """One fully specified scene; serializable for exact reproduction."""

    camera: Camera
    lights: list[PointLight]
    material: Material
    background_id: str | None
    seed: int

    def to_dict(self) -> dict:
        return {
            "camera": {
                "position": self.camera.position.tolist(),
                "look_at": self.camera.look_at.tolist(),
                "up": self.camera.up.tolist(),
                "fov": self.camera.fov,
                "width": self.camera.width,
                "height": self.camera.height,
            },
            "lights": [
                {
                    "position": light.position.tolist(),
                    "ambient": light.ambient.tolist(),
                    "diffuse": light.diffuse.tolist(),
                    "specular": light.specular.tolist(),
                }
                for light in self.lights
            ],
            "material": {
                "specular_color": self.material.specular_color.tolist(),
                "shininess": self.material.shininess,
            },
            "background_id": self.background_id,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSample":
        cam = data["camera"]
        return cls(
            camera=Camera(
                position=cam["position"],
                look_at=cam["look_at"],
                up=cam["up"],
                fov=cam["fov"],
                width=cam["width"],
                height=cam["height"],
            ),
            lights=[PointLight(**light) for light in data["lights"]],
            material=Material(**data["material"]),
            background_id=data["background_id"],
            seed=data["seed"],
        )


@dataclass
class AnnotationBundle:
    """One rendered view plus its dense annotations.

    The boolean masks derived from lesion_mask, skin_mask, nonskin_mask and
    the off-body region partition the image. anatomy is 0 on background and
    1..7 on the body (None when the mesh has no labels).
    """

    view_index: int
    rgb: np.ndarray
    lesion_mask: np.ndarray
    skin_mask: np.ndarray
    nonskin_mask: np.ndarray
    anatomy: np.ndarray | None
    depth: np.ndarray
    boxes: list[dict]
    scene: SceneSample
    ignore_mask: np.ndarray | None = None


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (reproducible across runs)."""
    text = ":".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def shades_of_gray(image: np.ndarray, p: float = 6.0) -> np.ndarray:
    """Color constancy via the Minkowski p-norm illuminant estimate.

    Each channel's illuminant is (mean(I^p))^(1/p); channels are divided by
    sqrt(3) times the unit-norm illuminant so a neutral image is unchanged.
    An all-black image is returned as is.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    image = np.asarray(image, dtype=np.float64)
    illuminant = np.mean(np.clip(image, 0.0, None) ** p, axis=(0, 1)) ** (1.0 / p)
    norm = np.linalg.norm(illuminant)
    if norm == 0.0:
        return image.copy()
    gain = 1.0 / (illuminant / norm * np.sqrt(3.0))
    return np.clip(image * gain[None, None, :], 0.0, 1.0)


def sample_scene(
    ranges: SceneRanges,
    mesh: Mesh,
    rng: np.random.Generator,
    *,
    backgrounds: list[str] | None = None,
    width: int = 512,
    height: int = 512,
    fov: float = 30.0,
    seed: int = 0,
) -> SceneSample:
    """Draw one scene: an area-weighted surface point, a camera along its
    normal, a point light riding on the camera with channelwise-uniform
    colors, a material, and a background."""
    surface = sample_surface(mesh, rng)
    distance = float(rng.uniform(*ranges.distance))
    camera = camera_from_surface(
        surface.world_point, surface.normal, distance, fov=fov, width=width, height=height
    )
    light = PointLight(
        position=camera.position.copy(),
        ambient=rng.uniform(*ranges.ambient, size=3),
        diffuse=rng.uniform(*ranges.diffuse, size=3),
        specular=rng.uniform(*ranges.light_specular, size=3),
    )
    material = Material(
        specular_color=np.full(3, rng.uniform(*ranges.material_specular)),
        shininess=float(rng.uniform(*ranges.shininess)),
    )
    background_id = None
    if backgrounds:
        background_id = str(backgrounds[int(rng.integers(len(backgrounds)))])
    return SceneSample(camera=camera, lights=[light], material=material, background_id=background_id, seed=seed)


def _ray_hits(origin, direction, mesh: Mesh, t_min=1e-9, t_max=np.inf) -> np.ndarray:
    """Parameters t of ray/triangle intersections (Moller-Trumbore, vectorized)."""
    tri = mesh.vertices[mesh.faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    pvec = np.cross(direction, e2)
    det = np.einsum("fi,fi->f", e1, pvec)
    ok = np.abs(det) > 1e-12
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = origin - tri[:, 0]
    u = np.einsum("fi,fi->f", tvec, pvec) * inv_det
    qvec = np.cross(tvec, e1)
    v = (qvec @ direction) * inv_det
    t = np.einsum("fi,fi->f", e2, qvec) * inv_det
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > t_min) & (t < t_max)
    return t[hit]


def validate_view(mesh: Mesh, scene: SceneSample) -> tuple[bool, str]:
    """Check that the camera sits outside the mesh (ray-crossing parity) and
    that no light is occluded by the mesh on its way to the camera."""
    direction = np.array([0.577350269, 0.789, 0.211])
    direction /= np.linalg.norm(direction)
    crossings = len(_ray_hits(scene.camera.position, direction, mesh))
    if crossings % 2 == 1:
        return False, "camera-inside-mesh"
    for light in scene.lights:
        span = scene.camera.position - light.position
        length = float(np.linalg.norm(span))
        if length < 1e-12:
            continue  # light co-located with the camera
        hits = _ray_hits(light.position, span / length, mesh, t_min=1e-9, t_max=length - 1e-9)
        if len(hits):
            return False, "light-occluded"
    return True, "ok"


def composite_background(view: np.ndarray, body_mask: np.ndarray, background: np.ndarray) -> np.ndarray:
    """body * view + (1 - body) * background, elementwise."""
    if background.shape != view.shape:
        raise ValueError("background must already match the view size")
    m = np.asarray(body_mask, dtype=np.float64)
    if m.ndim == 2:
        m = m[:, :, None]
    return m * view + (1.0 - m) * background


def boxes_from_mask(lesion_mask: np.ndarray) -> list[dict]:
    """Tight axis-aligned boxes per 4-connected component of each lesion id.

    Boxes are {lesion_id, x0, y0, x1, y1} with inclusive pixel coordinates
    (x = column, y = row).
    """
    lesion_mask = np.asarray(lesion_mask)
    boxes: list[dict] = []
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    for lesion_id in np.unique(lesion_mask):
        if lesion_id == 0:
            continue
        labeled, count = ndimage.label(lesion_mask == lesion_id, structure=structure)
        for sl in ndimage.find_objects(labeled, max_label=count):
            if sl is None:
                continue
            boxes.append(
                {
                    "lesion_id": int(lesion_id),
                    "x0": int(sl[1].start),
                    "y0": int(sl[0].start),
                    "x1": int(sl[1].stop - 1),
                    "y1": int(sl[0].stop - 1),
                }
            )
    return boxes


def _load_background(entry, shape: tuple[int, int]) -> np.ndarray:
    if isinstance(entry, np.ndarray):
        img = entry
    else:
        img = load_image(entry)
    return fit_to_shape(img, shape)


def generate_views(
    mesh: Mesh,
    textures: TextureSet,
    anatomy: AnatomyLabelMap | None,
    backgrounds,
    n: int,
    ranges: SceneRanges,
    rng: np.random.Generator,
    *,
    width: int = 512,
    height: int = 512,
    fov: float = 30.0,
    out_dir: str | Path | None = None,
    mesh_id: str = "mesh",
    start_index: int = 0,
    retry_budget: int = RETRY_BUDGET,
    ignore_texture: np.ndarray | None = None,
    manifest_records: list | None = None,
) -> list[AnnotationBundle]:
    """Render n annotated views of the blended mesh.

    Per view: sample a scene, validate it (camera outside the mesh, lights
    unoccluded; resampled up to retry_budget times), render RGB with the
    blended texture, sample the uniformly-lit label views, derive the mask
    partition and anatomy/depth annotations, composite the background, and
    (when out_dir is given) write the bundle to disk plus one manifest
    record. Views whose retry budget runs out are skipped with a log entry.
    """
    blended = textures.blended if textures.blended is not None else textures.pasted
    pool_entries = list(backgrounds) if backgrounds is not None else []
    pool_ids = [
        entry if isinstance(entry, str) else (str(entry) if isinstance(entry, Path) else f"background:{i}")
        for i, entry in enumerate(pool_entries)
    ]
    entry_by_id = dict(zip(pool_ids, pool_entries))
    background_cache: dict[str, np.ndarray] = {}
    face_labels = None
    if anatomy is not None and mesh.num_faces:
        grouped = group_labels(anatomy) if anatomy.grouping is not None else anatomy
        face_labels = majority_face_labels(mesh, grouped.labels)
    nonskin_tex = textures.nonskin_mask.astype(np.int32)
    base_entropy = int(rng.integers(np.iinfo(np.int64).max))

    bundles: list[AnnotationBundle] = []
    writer = _BundleWriter(out_dir, mesh_id) if out_dir is not None else None

    for i in range(n):
        view_index = start_index + i
        view_seed = derive_seed(base_entropy, "view", view_index)
        view_rng = np.random.default_rng(view_seed)

        scene = None
        for attempt in range(retry_budget):
            candidate = sample_scene(
                ranges,
                mesh,
                view_rng,
                backgrounds=pool_ids,
                width=width,
                height=height,
                fov=fov,
                seed=view_seed,
            )
            ok, reason = validate_view(mesh, candidate)
            if ok:
                scene = candidate
                break
            logger.debug("view %d attempt %d rejected: %s", view_index, attempt, reason)
        if scene is None:
            logger.warning("view %d skipped: retry budget (%d) exhausted", view_index, retry_budget)
            continue

        fragments = rasterize(mesh, scene.camera)
        out = shade(fragments, mesh, blended, scene.lights, scene.material)
        body = fragments.body_mask

        lesion_view = sample_label(fragments, textures.lesion_ids)
        nonskin_view = sample_label(fragments, nonskin_tex) > 0
        lesion = lesion_view > 0
        skin = body & ~lesion & ~nonskin_view
        nonskin = body & ~lesion & nonskin_view

        anatomy_view = None
        if face_labels is not None:
            anatomy_view = np.zeros(fragments.depth.shape, dtype=np.int32)
            anatomy_view[body] = face_labels[fragments.face_index[body]]

        ignore_view = None
        if ignore_texture is not None:
            ignore_view = (sample_label(fragments, ignore_texture.astype(np.int32)) > 0) & body

        boxes = boxes_from_mask(lesion_view)

        if scene.background_id is not None:
            if scene.background_id not in background_cache:
                background_cache[scene.background_id] = _load_background(
                    entry_by_id[scene.background_id], (height, width)
                )
            background = background_cache[scene.background_id]
        else:
            background = np.zeros((height, width, 3))
        rgb = composite_background(out.view, body.astype(np.float64), background)

        bundle = AnnotationBundle(
            view_index=view_index,
            rgb=rgb,
            lesion_mask=lesion_view,
            skin_mask=skin,
            nonskin_mask=nonskin,
            anatomy=anatomy_view,
            depth=fragments.depth,
            boxes=boxes,
            scene=scene,
            ignore_mask=ignore_view,
        )
        bundles.append(bundle)
        if writer is not None:
            record = writer.write(bundle)
            if manifest_records is not None:
                manifest_records.append(record)
    return bundles


class _BundleWriter:
    """Writes bundles into the out/{images,masks_*,anatomy,depth} layout."""

    SUBDIRS = ("images", "masks_lesion", "masks_skin", "masks_nonskin", "anatomy", "depth")

    def __init__(self, out_dir: str | Path, mesh_id: str):
        self.out_dir = Path(out_dir)
        self.mesh_id = mesh_id
        for sub in self.SUBDIRS:
            (self.out_dir / sub).mkdir(parents=True, exist_ok=True)

    def write(self, bundle: AnnotationBundle) -> dict:
        name = f"view_{bundle.view_index:06d}.png"
        save_image(self.out_dir / "images" / name, bundle.rgb)
        save_label_image(self.out_dir / "masks_lesion" / name, bundle.lesion_mask)
        save_label_image(self.out_dir / "masks_skin" / name, bundle.skin_mask.astype(np.uint8) * 255)
        save_label_image(
            self.out_dir / "masks_nonskin" / name, bundle.nonskin_mask.astype(np.uint8) * 255
        )
        record = {
            "view": bundle.view_index,
            "mesh_id": self.mesh_id,
            "files": {
                "image": f"images/{name}",
                "mask_lesion": f"masks_lesion/{name}",
                "mask_skin": f"masks_skin/{name}",
                "mask_nonskin": f"masks_nonskin/{name}",
                "depth": f"depth/{name}",
            },
            "boxes": bundle.boxes,
            "lesion_ids": sorted(int(v) for v in np.unique(bundle.lesion_mask) if v != 0),
            "scene": bundle.scene.to_dict(),
            "depth_scale": DEPTH_SCALE,
        }
        save_depth_image(self.out_dir / "depth" / name, bundle.depth, DEPTH_SCALE)
        if bundle.anatomy is not None:
            save_palette_image(self.out_dir / "anatomy" / name, bundle.anatomy, ANATOMY_PALETTE)
            record["files"]["anatomy"] = f"anatomy/{name}"
        if bundle.ignore_mask is not None:
            ignore_dir = self.out_dir / "masks_ignore"
            ignore_dir.mkdir(exist_ok=True)
            save_label_image(ignore_dir / name, bundle.ignore_mask.astype(np.uint8) * 255)
            record["files"]["mask_ignore"] = f"masks_ignore/{name}"
        return record


def write_manifest(path: str | Path, records: list[dict]) -> None:
    """One JSON object per line, key-sorted for byte-stable output."""
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def boxes_to_ignore_texture(boxes: list[dict], shape: tuple[int, int]) -> np.ndarray:
    """Burn texture-space boxes (inclusive x0,y0,x1,y1 texel coords) into a
    binary ignore mask of the given texture shape."""
    mask = np.zeros(shape, dtype=np.int32)
    for box in boxes:
        mask[box["y0"] : box["y1"] + 1, box["x0"] : box["x1"] + 1] = 1
    return mask
