"""Choosing lesion locations on the body and pasting lesions into texture space.

A location is acceptable when the pasted (dilated) lesion stays on skin,
stays on the body, does not sit across a large depth change, and does not
map onto texels already claimed by another lesion. Accepted pastes write
into the pasted/dilated textures and the integer id masks.

Placement for different lesions on the same TextureSet must be serialized:
the id mask is read-checked and then written.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import FaceSample, Mesh, sample_surface
from .imgio import resize_image
from .renderer import (
    Camera,
    Fragments,
    Material,
    PointLight,
    RenderOutput,
    _bilinear_indices,
    rasterize,
    sample_label,
    shade,
)

logger = logging.getLogger(__name__)

# Fixed lighting used while placing and blending lesions: a single point
# light riding on the camera, modest specular material.
BLEND_LIGHT_RGB = {"ambient": 0.5, "diffuse": 0.5, "specular": 0.025}
BLEND_MATERIAL = Material(specular_color=(0.025, 0.025, 0.025), shininess=50.0)

# Relative radius of the mask dilation disk (fraction of the lesion
# bounding-box diagonal), keeping dilation scale-free.
DILATION_FRACTION = 0.05

CRITERION_NONSKIN = "nonskin-overlap"
CRITERION_BACKGROUND = "background-overlap"
CRITERION_DEPTH = "depth-change"
CRITERION_TEXEL_OVERLAP = "lesion-overlap"
CRITERION_FIT = "lesion-does-not-fit"


class PasteCollisionError(Exception):
    """A paste footprint hit texels already claimed by another lesion."""


def blend_light(camera: Camera) -> PointLight:
    return PointLight(
        position=camera.position.copy(),
        ambient=np.full(3, BLEND_LIGHT_RGB["ambient"]),
        diffuse=np.full(3, BLEND_LIGHT_RGB["diffuse"]),
        specular=np.full(3, BLEND_LIGHT_RGB["specular"]),
    )


@dataclass
class LesionSource:
    """A segmented clinical photo of one skin condition.

    image: (H, W, 3) float RGB in [0, 1].
    mask: (H, W) 0/1, nonzero over the diseased region.
    dilated_mask: superset of mask including a ring of surrounding skin;
        computed with a disk of radius DILATION_FRACTION * bbox diagonal
        when not supplied.
    """

    image: np.ndarray
    mask: np.ndarray
    lesion_id: int
    dilated_mask: np.ndarray | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = (np.asarray(self.mask) > 0).astype(np.uint8)
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError("lesion image and mask shapes differ")
        if self.lesion_id < 1:
            raise ValueError("lesion_id must be a positive integer")
        if self.dilated_mask is None:
            self.dilated_mask = dilate_mask(self.mask)
        else:
            self.dilated_mask = (np.asarray(self.dilated_mask) > 0).astype(np.uint8)
            if self.dilated_mask.shape != self.mask.shape:
                raise ValueError("dilated mask shape differs from mask")
        if (self.mask & ~self.dilated_mask).any():
            raise ValueError("dilated mask must contain the mask")


def dilate_mask(mask: np.ndarray, fraction: float = DILATION_FRACTION) -> np.ndarray:
    """Morphological dilation with a disk sized relative to the mask bbox."""
    mask = np.asarray(mask) > 0
    if not mask.any():
        return mask.astype(np.uint8)
    ys, xs = np.nonzero(mask)
    diag = float(np.hypot(ys.max() - ys.min() + 1, xs.max() - xs.min() + 1))
    radius = max(1, int(round(fraction * diag)))
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    disk = (yy**2 + xx**2) <= radius**2
    return ndimage.binary_dilation(mask, structure=disk).astype(np.uint8)


@dataclass
class TextureSet:
    """The texture-space images of one mesh.

    texture: original RGB texture.
    nonskin_mask: 0/1, nonzero over clothing/hair/etc.
    pasted: texture with lesions pasted verbatim.
    lesion_ids: integer id per texel, 0 outside pasted regions.
    dilated_paste: texture with dilated lesions pasted (lesion + skin ring).
    dilated_ids: integer id per texel for the dilated footprints; this is
        the update region ("ring") used during blending.
    blended: the optimized texture; None until blending starts.
    """

    texture: np.ndarray
    nonskin_mask: np.ndarray
    pasted: np.ndarray
    lesion_ids: np.ndarray
    dilated_paste: np.ndarray
    dilated_ids: np.ndarray
    blended: np.ndarray | None = None

    def __post_init__(self):
        shape = self.texture.shape[:2]
        for name in ("nonskin_mask", "pasted", "lesion_ids", "dilated_paste", "dilated_ids"):
            if getattr(self, name).shape[:2] != shape:
                raise ValueError(f"{name} does not match the texture size")
        if self.blended is not None and self.blended.shape[:2] != shape:
            raise ValueError("blended does not match the texture size")

    @classmethod
    def fresh(cls, texture: np.ndarray, nonskin_mask: np.ndarray | None = None) -> "TextureSet":
        texture = np.asarray(texture, dtype=np.float64)
        if nonskin_mask is None:
            nonskin_mask = np.zeros(texture.shape[:2], dtype=np.uint8)
        return cls(
            texture=texture,
            nonskin_mask=(np.asarray(nonskin_mask) > 0).astype(np.uint8),
            pasted=texture.copy(),
            lesion_ids=np.zeros(texture.shape[:2], dtype=np.int32),
            dilated_paste=texture.copy(),
            dilated_ids=np.zeros(texture.shape[:2], dtype=np.int32),
        )


@dataclass
class PlacementCandidate:
    """An accepted lesion location plus the view-space paste used to check it."""

    lesion_id: int
    surface: FaceSample
    distance: float
    depth_change: float
    camera: Camera | None = None
    fragments: Fragments | None = None
    paste_view: np.ndarray | None = None  # a_x: view with lesion pixels substituted
    paste_mask: np.ndarray | None = None  # a_s
    dilated_view: np.ndarray | None = None  # a_x with the dilated mask applied
    dilated_mask: np.ndarray | None = None  # a_s_d


@dataclass
class PlacementFailure:
    """All tries rejected; reason names the most-binding criterion."""

    lesion_id: int
    tries: int
    reason: str
    failure_counts: dict[str, int] = field(default_factory=dict)
    best_depth_change: float = float("inf")


def camera_from_surface(
    point: np.ndarray,
    normal: np.ndarray,
    distance: float,
    *,
    fov: float = 30.0,
    width: int = 512,
    height: int = 512,
) -> Camera:
    """Place the camera at point + normal * distance, looking back at the point."""
    if distance <= 0:
        raise ValueError("camera distance must be positive")
    normal = np.asarray(normal, dtype=np.float64)
    n = np.linalg.norm(normal)
    if abs(n - 1.0) > 1e-6:
        logger.warning("camera_from_surface: normalizing non-unit normal (|n|=%g)", n)
        normal = normal / n
    position = np.asarray(point, dtype=np.float64) + distance * normal
    up = np.array([0.0, 1.0, 0.0])
    if abs(np.dot(normal, up)) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    return Camera(position=position, look_at=np.asarray(point, dtype=np.float64), up=up, fov=fov, width=width, height=height)


def compose_paste_view(
    render_out: RenderOutput, lesion: LesionSource, scale: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Overlay the scaled lesion at the view center.

    Returns (paste_view, paste_mask, dilated_view, dilated_mask): the view
    with lesion pixels substituted under the mask, and the same under the
    dilated mask. The lesion image is resized bilinearly, masks with
    nearest-neighbor.
    """
    view = render_out.view
    vh, vw = view.shape[:2]
    lh, lw = lesion.mask.shape
    th, tw = max(1, int(round(lh * scale))), max(1, int(round(lw * scale)))
    if th > vh or tw > vw:
        raise ValueError(f"scaled lesion ({th}x{tw}) exceeds the view ({vh}x{vw})")

    img = resize_image(lesion.image, (th, tw), order=1)
    mask = resize_image(lesion.mask.astype(np.float64), (th, tw), order=0) > 0.5
    dmask = resize_image(lesion.dilated_mask.astype(np.float64), (th, tw), order=0) > 0.5
    dmask |= mask  # resampling must not shrink the superset relation

    y0 = (vh - th) // 2
    x0 = (vw - tw) // 2
    win = (slice(y0, y0 + th), slice(x0, x0 + tw))

    paste_mask = np.zeros((vh, vw), dtype=np.uint8)
    dilated_mask = np.zeros((vh, vw), dtype=np.uint8)
    paste_mask[win] = mask
    dilated_mask[win] = dmask

    paste_view = view.copy()
    paste_view[win][mask] = img[mask]
    dilated_view = view.copy()
    dilated_view[win][dmask] = img[dmask]
    return paste_view, paste_mask, dilated_view, dilated_mask


def body_and_skin_masks(
    fragments: Fragments, nonskin_view: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Body mask, skin mask, and skin-only depth.

    a_body = [depth > 0]; a_skin = a_body * (1 - nonskin); and
    z_skin = a_skin * depth + (a_skin - 1), i.e. depth on skin and -1 elsewhere.
    """
    if nonskin_view.shape != fragments.depth.shape:
        raise ValueError("nonskin view shape differs from fragments")
    a_body = (fragments.depth > 0).astype(np.float64)
    a_skin = a_body * (1.0 - np.asarray(nonskin_view, dtype=np.float64))
    z_skin = a_skin * fragments.depth + (a_skin - 1.0)
    return a_body, a_skin, z_skin


def depth_change(z_skin: np.ndarray, distance: float, mask: np.ndarray) -> float:
    """Maximum |z_skin - distance| over the masked pixels; +inf for an empty
    mask (forcing rejection)."""
    sel = np.asarray(mask) > 0
    if not sel.any():
        return float("inf")
    return float(np.abs(z_skin - distance)[sel].max())


def _augment_lesion(lesion: LesionSource, rng: np.random.Generator) -> LesionSource:
    """Random horizontal/vertical flips and quarter-turn rotations."""
    img, mask, dmask = lesion.image, lesion.mask, lesion.dilated_mask
    if rng.random() < 0.5:
        img, mask, dmask = img[:, ::-1], mask[:, ::-1], dmask[:, ::-1]
    if rng.random() < 0.5:
        img, mask, dmask = img[::-1], mask[::-1], dmask[::-1]
    turns = int(rng.integers(0, 4))
    if turns:
        img = np.rot90(img, turns)
        mask = np.rot90(mask, turns)
        dmask = np.rot90(dmask, turns)
    return LesionSource(
        image=np.ascontiguousarray(img),
        mask=np.ascontiguousarray(mask),
        lesion_id=lesion.lesion_id,
        dilated_mask=np.ascontiguousarray(dmask),
    )


def _footprint_texels(fragments: Fragments, view_mask: np.ndarray, tex_shape: tuple[int, int]) -> np.ndarray:
    """Texels touched by the bilinear footprints of the masked view pixels."""
    hit = np.zeros(tex_shape, dtype=bool)
    sel = (np.asarray(view_mask) > 0) & fragments.body_mask
    if not sel.any():
        return hit
    x0, x1, y0, y1, _, _ = _bilinear_indices(fragments.uv[sel], *tex_shape)
    hit[y0, x0] = True
    hit[y0, x1] = True
    hit[y1, x0] = True
    hit[y1, x1] = True
    return hit


def check_location(
    textures: TextureSet,
    fragments: Fragments,
    distance: float,
    paste_mask: np.ndarray,
    dilated_mask: np.ndarray,
    threshold: float,
) -> tuple[list[str], float]:
    """Apply the acceptance criteria to one composed placement.

    Returns (failed criterion names, depth-change score). An empty list
    means the location is acceptable.
    """
    nonskin_view = (sample_label(fragments, textures.nonskin_mask.astype(np.int32)) > 0).astype(
        np.float64
    )
    _, _, z_skin = body_and_skin_masks(fragments, nonskin_view)
    sel = np.asarray(dilated_mask) > 0

    failed = []
    if (nonskin_view[sel] > 0).any():
        failed.append(CRITERION_NONSKIN)
    if (fragments.depth[sel] <= 0).any():
        failed.append(CRITERION_BACKGROUND)
    c = depth_change(z_skin, distance, dilated_mask)
    if c > threshold:
        failed.append(CRITERION_DEPTH)
    footprint = _footprint_texels(fragments, paste_mask, textures.lesion_ids.shape)
    if (textures.lesion_ids[footprint] != 0).any():
        failed.append(CRITERION_TEXEL_OVERLAP)
    return failed, c


def find_placement(
    mesh: Mesh,
    textures: TextureSet,
    lesion: LesionSource,
    rng: np.random.Generator,
    threshold: float = 0.02,
    max_tries: int = 50,
    *,
    distance_range: tuple[float, float] = (0.4, 0.6),
    view_size: int = 512,
    fov: float = 30.0,
    lesion_view_fraction: float = 0.25,
    augment: bool = True,
) -> PlacementCandidate | PlacementFailure:
    """Sample camera placements until the pasted lesion passes every criterion.

    Per try: sample a surface point and a distance, render, compose the
    paste, and reject when the dilated paste overlaps non-skin, overlaps
    the background, sits across a depth change larger than threshold, or
    maps onto texels already claimed by a previous lesion.
    """
    counts = {
        CRITERION_NONSKIN: 0,
        CRITERION_BACKGROUND: 0,
        CRITERION_DEPTH: 0,
        CRITERION_TEXEL_OVERLAP: 0,
        CRITERION_FIT: 0,
    }
    best_c = float("inf")

    for _ in range(max_tries):
        surface = sample_surface(mesh, rng)
        distance = float(rng.uniform(*distance_range))
        camera = camera_from_surface(
            surface.world_point, surface.normal, distance, fov=fov, width=view_size, height=view_size
        )
        fragments = rasterize(mesh, camera)
        out = shade(fragments, mesh, textures.texture, [blend_light(camera)], BLEND_MATERIAL)

        src = _augment_lesion(lesion, rng) if augment else lesion
        scale = lesion_view_fraction * view_size / src.mask.shape[1]
        try:
            paste_view, paste_mask, dilated_view, dilated_mask = compose_paste_view(out, src, scale)
        except ValueError:
            counts[CRITERION_FIT] += 1
            continue

        failed, c = check_location(textures, fragments, distance, paste_mask, dilated_mask, threshold)
        best_c = min(best_c, c)

        if not failed:
            return PlacementCandidate(
                lesion_id=lesion.lesion_id,
                surface=surface,
                distance=distance,
                depth_change=c,
                camera=camera,
                fragments=fragments,
                paste_view=paste_view,
                paste_mask=paste_mask,
                dilated_view=dilated_view,
                dilated_mask=dilated_mask,
            )
        for name in failed:
            counts[name] += 1

    reason = max(counts, key=lambda k: (counts[k], -list(counts).index(k)))
    logger.info(
        "placement failed for lesion %d after %d tries (%s; best depth change %.4g)",
        lesion.lesion_id,
        max_tries,
        counts,
        best_c,
    )
    return PlacementFailure(
        lesion_id=lesion.lesion_id,
        tries=max_tries,
        reason=reason,
        failure_counts=counts,
        best_depth_change=best_c,
    )


def _splat_average(
    fragments: Fragments, view_mask: np.ndarray, view_rgb: np.ndarray, tex_shape: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted-average splat of masked view pixels into their bilinear texels."""
    acc = np.zeros(tex_shape + (3,))
    wsum = np.zeros(tex_shape)
    sel = (np.asarray(view_mask) > 0) & fragments.body_mask
    if not sel.any():
        return acc, wsum
    x0, x1, y0, y1, fx, fy = _bilinear_indices(fragments.uv[sel], *tex_shape)
    rgb = view_rgb[sel]
    for yy, xx, w in (
        (y0, x0, (1 - fx) * (1 - fy)),
        (y0, x1, fx * (1 - fy)),
        (y1, x0, (1 - fx) * fy),
        (y1, x1, fx * fy),
    ):
        np.add.at(acc, (yy, xx), w[:, None] * rgb)
        np.add.at(wsum, (yy, xx), w)
    return acc, wsum


def _fill_holes(values: np.ndarray, filled: np.ndarray, holes: np.ndarray) -> None:
    """Fill interior texels missed by the splat by iterative 1-ring averaging."""
    kernel = np.ones((3, 3))
    holes = holes.copy()
    while holes.any():
        weight = ndimage.convolve(filled.astype(np.float64), kernel, mode="constant")
        ready = holes & (weight > 0)
        if not ready.any():
            break
        for c in range(values.shape[2]):
            summed = ndimage.convolve(values[..., c] * filled, kernel, mode="constant")
            values[ready, c] = summed[ready] / weight[ready]
        filled = filled | ready
        holes = holes & ~ready


def _paste_region(
    fragments: Fragments,
    view_mask: np.ndarray,
    view_rgb: np.ndarray,
    target: np.ndarray,
) -> np.ndarray:
    """Write masked view pixels into target texels; returns the footprint mask
    (splatted texels plus filled interior holes)."""
    tex_shape = target.shape[:2]
    acc, wsum = _splat_average(fragments, view_mask, view_rgb, tex_shape)
    hit = wsum > 1e-12
    if not hit.any():
        return hit
    footprint = ndimage.binary_fill_holes(hit)
    target[hit] = acc[hit] / wsum[hit, None]
    _fill_holes(target, hit, footprint & ~hit)
    return footprint


def paste_to_texture(
    fragments: Fragments,
    paste_view: np.ndarray,
    paste_mask: np.ndarray,
    textures: TextureSet,
    lesion_id: int,
    *,
    dilated_view: np.ndarray | None = None,
    dilated_mask: np.ndarray | None = None,
) -> TextureSet:
    """Paste an accepted lesion into the texture set (in place).

    Masked view pixels are splatted into their bilinear texels of `pasted`
    (weighted average); the same footprint is claimed in `lesion_ids`. The
    dilated paste goes into `dilated_paste` / `dilated_ids`. The original
    texture and non-skin mask are untouched.
    """
    tex_shape = textures.lesion_ids.shape
    probe = _footprint_texels(fragments, paste_mask, tex_shape)
    collision = probe & (textures.lesion_ids != 0)
    if collision.any():
        raise PasteCollisionError(
            f"lesion {lesion_id} footprint hits {int(collision.sum())} texel(s) of an existing lesion"
        )

    footprint = _paste_region(fragments, paste_mask, paste_view, textures.pasted)
    textures.lesion_ids[footprint] = lesion_id

    if dilated_mask is not None and dilated_view is not None:
        dfoot = _paste_region(fragments, dilated_mask, dilated_view, textures.dilated_paste)
        dfoot |= footprint
        textures.dilated_ids[dfoot] = np.maximum(textures.dilated_ids[dfoot], lesion_id)
    else:
        textures.dilated_ids[footprint] = np.maximum(textures.dilated_ids[footprint], lesion_id)
    return textures


def infer_skin_mask(lesions_mask: np.ndarray, nonskin_mask: np.ndarray) -> np.ndarray:
    """Skin = neither lesion nor non-skin: (1 - lesions) * (1 - nonskin)."""
    lesions_mask = np.asarray(lesions_mask)
    nonskin_mask = np.asarray(nonskin_mask)
    if lesions_mask.shape != nonskin_mask.shape:
        raise ValueError("mask shapes differ")
    return (1 - (lesions_mask > 0).astype(np.uint8)) * (1 - (nonskin_mask > 0).astype(np.uint8))
