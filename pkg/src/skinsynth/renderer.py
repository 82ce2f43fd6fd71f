"""Software perspective rasterizer with Phong shading and a texture backward pass.

The renderer maps (mesh, texture, camera, lights, material) to a 2D view
plus fragment data: per-pixel visible face index, barycentric weights,
camera-space depth, and interpolated UV. Depth is the distance along the
camera's forward axis; off-body pixels carry face index -1 and depth -1.

Gradients are taken through texel values at fixed fragment assignments:
for given fragments the ambient+diffuse part of the view is linear in the
texture, and texture_vjp is the exact adjoint of that linear map. The
specular term does not multiply the texture and therefore does not enter
shade_gain.

All operations are pure functions of their inputs and deterministic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

BACKGROUND_FACE = -1
BACKGROUND_DEPTH = -1.0

_NEAR_PLANE = 1e-6


@dataclass(frozen=True)
class Camera:
    """Perspective pinhole camera. fov is the vertical field of view in degrees."""

    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = (0.0, 1.0, 0.0)
    fov: float = 30.0
    width: int = 512
    height: int = 512

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "look_at", np.asarray(self.look_at, dtype=np.float64).reshape(3))
        object.__setattr__(self, "up", np.asarray(self.up, dtype=np.float64).reshape(3))
        if not np.linalg.norm(self.position - self.look_at) > 0:
            raise ValueError("camera position must differ from look_at")
        if not 0.0 < self.fov < 180.0:
            raise ValueError("fov must lie in (0, 180) degrees")
        if self.width < 1 or self.height < 1:
            raise ValueError("view size must be at least 1x1")

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal (right, up, forward); forward points at look_at."""
        forward = self.look_at - self.position
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, self.up)
        n = np.linalg.norm(right)
        if n < 1e-12:
            raise ValueError("camera up vector is parallel to the view direction")
        right = right / n
        true_up = np.cross(right, forward)
        return right, true_up, forward


@dataclass(frozen=True)
class PointLight:
    position: np.ndarray
    ambient: np.ndarray = (0.5, 0.5, 0.5)
    diffuse: np.ndarray = (0.5, 0.5, 0.5)
    specular: np.ndarray = (0.025, 0.025, 0.025)

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        for name in ("ambient", "diffuse", "specular"):
            value = np.asarray(getattr(self, name), dtype=np.float64).reshape(3)
            if value.min() < 0 or value.max() > 1:
                raise ValueError(f"light {name} channels must lie in [0, 1]")
            object.__setattr__(self, name, value)


@dataclass(frozen=True)
class Material:
    specular_color: np.ndarray = (0.025, 0.025, 0.025)
    shininess: float = 50.0

    def __post_init__(self):
        value = np.asarray(self.specular_color, dtype=np.float64).reshape(3)
        if value.min() < 0 or value.max() > 1:
            raise ValueError("material specular channels must lie in [0, 1]")
        object.__setattr__(self, "specular_color", value)
        if not self.shininess > 0:
            raise ValueError("shininess must be positive")


@dataclass
class Fragments:
    """Per-pixel rasterization output (plus the generating camera).

    face_index: (H, W) int, -1 off-body.
    barycentric: (H, W, 3) weights w.r.t. the original face, summing to 1 on body.
    depth: (H, W) camera-forward distance, -1 off-body.
    uv: (H, W, 2) interpolated texture coordinates.
    """

    face_index: np.ndarray
    barycentric: np.ndarray
    depth: np.ndarray
    uv: np.ndarray
    camera: Camera

    @property
    def body_mask(self) -> np.ndarray:
        return self.face_index >= 0


@dataclass
class RenderOutput:
    """view: (H, W, 3) clamped to [0, 1]. shade_gain: the per-pixel RGB factor
    multiplying the texture sample (ambient + diffuse). specular: the additive
    specular term, kept separately because it does not scale with the texture."""

    view: np.ndarray
    fragments: Fragments
    shade_gain: np.ndarray
    specular: np.ndarray


def _project(camera: Camera, cam_pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    half = math.tan(math.radians(camera.fov) / 2.0)
    aspect = camera.width / camera.height
    z = cam_pts[:, 2]
    x_ndc = cam_pts[:, 0] / (z * half * aspect)
    y_ndc = cam_pts[:, 1] / (z * half)
    sx = (x_ndc + 1.0) * camera.width / 2.0
    sy = (1.0 - y_ndc) * camera.height / 2.0
    return sx, sy


def _clip_near(pts: np.ndarray, near: float) -> tuple[np.ndarray, np.ndarray]:
    """Clip a camera-space triangle against z >= near, carrying barycentric
    coordinates w.r.t. the original triangle as vertex attributes."""
    eye = np.eye(3)
    out_p: list[np.ndarray] = []
    out_b: list[np.ndarray] = []
    for i in range(3):
        a, b = pts[i], pts[(i + 1) % 3]
        ba, bb = eye[i], eye[(i + 1) % 3]
        a_in = a[2] >= near
        b_in = b[2] >= near
        if a_in:
            out_p.append(a)
            out_b.append(ba)
        if a_in != b_in:
            t = (near - a[2]) / (b[2] - a[2])
            out_p.append(a + t * (b - a))
            out_b.append(ba + t * (bb - ba))
    if len(out_p) < 3:
        return np.empty((0, 3)), np.empty((0, 3))
    return np.asarray(out_p), np.asarray(out_b)


def _top_left(dx: np.ndarray | float, dy: np.ndarray | float):
    # Screen coords have y pointing down; with positive-inside winding an
    # edge is owned by this triangle iff it is a left edge (dy > 0) or the
    # top edge (dy == 0, dx < 0).
    return (dy > 0) | ((dy == 0) & (dx < 0))


def rasterize(mesh, camera: Camera) -> Fragments:
    """Z-buffered rasterization with perspective-correct interpolation.

    An empty mesh yields all-background fragments. Pixel-center coverage
    ties on shared edges follow the top-left fill rule so adjacent faces
    never double-cover a pixel.
    """
    H, W = camera.height, camera.width
    face_index = np.full((H, W), BACKGROUND_FACE, dtype=np.int32)
    depth = np.full((H, W), BACKGROUND_DEPTH, dtype=np.float64)
    bary = np.zeros((H, W, 3), dtype=np.float64)
    uv = np.zeros((H, W, 2), dtype=np.float64)
    frags = Fragments(face_index, bary, depth, uv, camera)
    if mesh is None or mesh.num_faces == 0:
        return frags

    right, up, forward = camera.axes()
    basis = np.stack([right, up, forward], axis=1)  # world -> camera columns
    cam_pts = (mesh.vertices - camera.position) @ basis

    tri_all = cam_pts[mesh.faces]
    z_all = tri_all[..., 2]
    candidates = np.nonzero((z_all > _NEAR_PLANE).any(axis=1))[0]

    eye = np.eye(3)
    for f in candidates:
        pts = tri_all[f]
        if (pts[:, 2] >= _NEAR_PLANE).all():
            poly_p, poly_b = pts, eye
        else:
            poly_p, poly_b = _clip_near(pts, _NEAR_PLANE)
            if len(poly_p) < 3:
                continue
        sx, sy = _project(camera, poly_p)
        inv_z = 1.0 / poly_p[:, 2]
        for k in range(len(poly_p) - 2):
            idx = (0, k + 1, k + 2)
            _raster_triangle(
                frags,
                int(f),
                sx[list(idx)],
                sy[list(idx)],
                inv_z[list(idx)],
                poly_b[list(idx)],
                mesh.uv[f],
            )
    return frags


def _raster_triangle(frags: Fragments, face: int, sx, sy, inv_z, battr, face_uv) -> None:
    H, W = frags.depth.shape
    # Signed area with the same orientation as the edge functions below, so
    # after the flip every interior point has E_i > 0.
    area = (sx[2] - sx[0]) * (sy[1] - sy[0]) - (sy[2] - sy[0]) * (sx[1] - sx[0])
    if area == 0:
        return
    if area < 0:
        sx = sx[[0, 2, 1]]
        sy = sy[[0, 2, 1]]
        inv_z = inv_z[[0, 2, 1]]
        battr = battr[[0, 2, 1]]
        area = -area

    x_lo = max(0, int(math.ceil(sx.min() - 0.5)))
    x_hi = min(W - 1, int(math.floor(sx.max() - 0.5)))
    y_lo = max(0, int(math.ceil(sy.min() - 0.5)))
    y_hi = min(H - 1, int(math.floor(sy.max() - 0.5)))
    if x_lo > x_hi or y_lo > y_hi:
        return

    px = np.arange(x_lo, x_hi + 1) + 0.5
    py = np.arange(y_lo, y_hi + 1) + 0.5
    PX, PY = np.meshgrid(px, py)

    lam = np.empty((y_hi - y_lo + 1, x_hi - x_lo + 1, 3))
    cover = np.ones(lam.shape[:2], dtype=bool)
    for i in range(3):
        # Edge opposite vertex i runs from vertex i+1 to vertex i+2.
        a, b = (i + 1) % 3, (i + 2) % 3
        dx, dy = sx[b] - sx[a], sy[b] - sy[a]
        e = (PX - sx[a]) * dy - (PY - sy[a]) * dx
        cover &= (e > 0) | ((e == 0) & _top_left(dx, dy))
        lam[..., i] = e / area
    if not cover.any():
        return

    wsum = lam[..., 0] * inv_z[0] + lam[..., 1] * inv_z[1] + lam[..., 2] * inv_z[2]
    z = np.where(wsum > 0, 1.0 / np.where(wsum > 0, wsum, 1.0), np.inf)

    win = (slice(y_lo, y_hi + 1), slice(x_lo, x_hi + 1))
    zbuf = frags.depth[win]
    update = cover & ((zbuf < 0) | (z < zbuf))
    if not update.any():
        return

    persp = lam * inv_z[None, None, :] / wsum[..., None]
    orig_bary = persp @ battr  # weights w.r.t. the original face corners
    pix_uv = orig_bary @ face_uv

    frags.face_index[win][update] = face
    frags.depth[win][update] = z[update]
    frags.barycentric[win][update] = orig_bary[update]
    frags.uv[win][update] = pix_uv[update]


def _bilinear_indices(uv: np.ndarray, tex_h: int, tex_w: int):
    """Clamp-to-edge bilinear footprint: corner indices and weights.

    UV (0,0) maps to the bottom-left texel area of the image (row tex_h-1),
    matching the OBJ texture-coordinate convention.
    """
    x = np.clip(uv[..., 0] * tex_w - 0.5, 0.0, tex_w - 1.0)
    y = np.clip((1.0 - uv[..., 1]) * tex_h - 0.5, 0.0, tex_h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, tex_w - 1)
    y1 = np.minimum(y0 + 1, tex_h - 1)
    fx = x - x0
    fy = y - y0
    return x0, x1, y0, y1, fx, fy


def sample_bilinear(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear texture lookup with clamp-to-edge addressing."""
    tex_h, tex_w = texture.shape[:2]
    x0, x1, y0, y1, fx, fy = _bilinear_indices(uv, tex_h, tex_w)
    if texture.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = (1 - fx) * texture[y0, x0] + fx * texture[y0, x1]
    bot = (1 - fx) * texture[y1, x0] + fx * texture[y1, x1]
    return (1 - fy) * top + fy * bot


def sample_nearest(texture: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Nearest-texel lookup; use this for integer label textures."""
    tex_h, tex_w = texture.shape[:2]
    x = np.clip(np.floor(uv[..., 0] * tex_w), 0, tex_w - 1).astype(np.int64)
    y = np.clip(np.floor((1.0 - uv[..., 1]) * tex_h), 0, tex_h - 1).astype(np.int64)
    return texture[y, x]


def shading_images(fragments: Fragments, mesh, lights, material: Material):
    """Phong shading terms as full images: (shade_gain, specular).

    shade_gain multiplies the texture sample (ambient + diffuse contributions
    summed over lights); specular is the additive highlight term. Both are
    zero off-body. Shading normals are interpolated vertex normals, flipped
    toward the viewer so thin open surfaces light correctly from both sides.
    """
    H, W = fragments.depth.shape
    gain = np.zeros((H, W, 3))
    spec = np.zeros((H, W, 3))
    body = fragments.body_mask
    if not body.any():
        return gain, spec

    fidx = fragments.face_index[body]
    bar = fragments.barycentric[body]
    tri = mesh.vertices[mesh.faces[fidx]]
    pos = np.einsum("pi,pij->pj", bar, tri)

    vn = mesh.vertex_normals[mesh.faces[fidx]]
    n = np.einsum("pi,pij->pj", bar, vn)
    nlen = np.linalg.norm(n, axis=1, keepdims=True)
    fallback = mesh.face_normals[fidx]
    n = np.where(nlen > 1e-12, n / np.maximum(nlen, 1e-300), fallback)

    to_cam = fragments.camera.position[None, :] - pos
    vlen = np.linalg.norm(to_cam, axis=1, keepdims=True)
    vdir = to_cam / np.maximum(vlen, 1e-300)
    # Two-sided shading: orient normals toward the viewer.
    flip = np.sign(np.sum(n * vdir, axis=1, keepdims=True))
    n = n * np.where(flip == 0, 1.0, flip)

    g = np.zeros_like(pos)
    s = np.zeros_like(pos)
    for light in lights:
        to_light = light.position[None, :] - pos
        llen = np.linalg.norm(to_light, axis=1, keepdims=True)
        ldir = to_light / np.maximum(llen, 1e-300)
        ndotl = np.clip(np.sum(n * ldir, axis=1), 0.0, None)
        g += light.ambient[None, :] + light.diffuse[None, :] * ndotl[:, None]
        refl = 2.0 * ndotl[:, None] * n - ldir
        rdotv = np.clip(np.sum(refl * vdir, axis=1), 0.0, None)
        highlight = np.where(ndotl > 0, rdotv**material.shininess, 0.0)
        s += (light.specular * material.specular_color)[None, :] * highlight[:, None]

    gain[body] = g
    spec[body] = s
    return gain, spec


def apply_shading(fragments: Fragments, shade_gain: np.ndarray, specular: np.ndarray, texture: np.ndarray):
    """Combine shading terms with a texture: returns (clamped view, raw view)."""
    H, W = fragments.depth.shape
    raw = np.zeros((H, W, 3))
    body = fragments.body_mask
    if body.any():
        tex = sample_bilinear(texture, fragments.uv[body])
        raw[body] = shade_gain[body] * tex + specular[body]
    return np.clip(raw, 0.0, 1.0), raw


def shade(fragments: Fragments, mesh, texture: np.ndarray, lights, material: Material) -> RenderOutput:
    """Phong-shade rasterized fragments with a bilinearly sampled texture."""
    if texture.ndim != 3 or texture.shape[2] != 3 or texture.shape[0] < 1 or texture.shape[1] < 1:
        raise ValueError("texture must be (H, W, 3) with positive size")
    if mesh.num_faces and fragments.face_index.max() >= mesh.num_faces:
        raise ValueError("fragments reference faces beyond this mesh")
    gain, spec = shading_images(fragments, mesh, lights, material)
    view, _ = apply_shading(fragments, gain, spec, texture)
    return RenderOutput(view=view, fragments=fragments, shade_gain=gain, specular=spec)


def render(mesh, texture: np.ndarray, camera: Camera, lights, material: Material) -> RenderOutput:
    """Rasterize then shade: the full (view, fragments, depth) render contract."""
    fragments = rasterize(mesh, camera)
    return shade(fragments, mesh, texture, lights, material)


def sample_label(fragments: Fragments, label_texture: np.ndarray) -> np.ndarray:
    """Nearest-neighbor label lookup at fragment UVs; background pixels get 0."""
    out = np.zeros(fragments.depth.shape, dtype=np.asarray(label_texture).dtype)
    body = fragments.body_mask
    if body.any():
        out[body] = sample_nearest(label_texture, fragments.uv[body])
    return out


def render_label(mesh, label_texture: np.ndarray, camera: Camera) -> np.ndarray:
    """Render an integer-valued texture without lighting (uniform illumination)."""
    return sample_label(rasterize(mesh, camera), label_texture)


def texture_vjp(
    fragments: Fragments,
    shade_gain: np.ndarray,
    view_grad: np.ndarray,
    texture_shape: tuple[int, int],
) -> np.ndarray:
    """Pull a view-space gradient back to texture space.

    Exact adjoint of the texture->view linear map at fixed fragments: each
    on-body pixel scatters view_grad * shade_gain into its four bilinear
    source texels with the same weights used when sampling. Accumulation is
    a plain sum, so the result is independent of pixel order.
    """
    if view_grad.shape[:2] != fragments.depth.shape or shade_gain.shape != view_grad.shape:
        raise ValueError("view_grad / shade_gain shape mismatch with fragments")
    tex_h, tex_w = texture_shape
    grad = np.zeros((tex_h, tex_w, 3))
    body = fragments.body_mask
    if not body.any():
        return grad
    uv = fragments.uv[body]
    x0, x1, y0, y1, fx, fy = _bilinear_indices(uv, tex_h, tex_w)
    contrib = view_grad[body] * shade_gain[body]
    for yy, xx, w in (
        (y0, x0, (1 - fx) * (1 - fy)),
        (y0, x1, fx * (1 - fy)),
        (y1, x0, (1 - fx) * fy),
        (y1, x1, fx * fy),
    ):
        np.add.at(grad, (yy, xx), w[:, None] * contrib)
    return grad
