import math

import numpy as np
import pytest

from skinsynth.fixtures import make_plane_mesh, make_uv_sphere
from skinsynth.geometry import Mesh
from skinsynth.renderer import (
    BACKGROUND_DEPTH,
    BACKGROUND_FACE,
    Camera,
    Fragments,
    Material,
    PointLight,
    rasterize,
    render,
    render_label,
    sample_bilinear,
    sample_label,
    shade,
    shading_images,
    texture_vjp,
)


def _tri_mesh(vertices, uv=None):
    vertices = np.asarray(vertices, float)
    uv = np.zeros((1, 3, 2)) if uv is None else np.asarray(uv, float).reshape(1, 3, 2)
    return Mesh(vertices=vertices, faces=[[0, 1, 2]], uv=uv)


class TestCameraValidation:
    def test_position_equals_look_at(self):
        with pytest.raises(ValueError):
            Camera(position=(0, 0, 1), look_at=(0, 0, 1))

    @pytest.mark.parametrize("fov", [0.0, 180.0, -10.0])
    def test_bad_fov(self, fov):
        with pytest.raises(ValueError):
            Camera(position=(0, 0, 1), look_at=(0, 0, 0), fov=fov)

    def test_bad_size(self):
        with pytest.raises(ValueError):
            Camera(position=(0, 0, 1), look_at=(0, 0, 0), width=0)

    def test_axes_orthonormal(self):
        cam = Camera(position=(1, 2, 3), look_at=(-2, 0.5, 0.2))
        r, u, f = cam.axes()
        for v in (r, u, f):
            assert abs(np.linalg.norm(v) - 1) < 1e-12
        assert abs(r @ u) < 1e-12 and abs(r @ f) < 1e-12 and abs(u @ f) < 1e-12


class TestRasterize:
    def test_empty_mesh_all_background(self):
        mesh = Mesh(vertices=np.zeros((0, 3)), faces=np.zeros((0, 3)), uv=np.zeros((0, 3, 2)))
        cam = Camera(position=(0, 0, 2), look_at=(0, 0, 0), width=16, height=16)
        frags = rasterize(mesh, cam)
        assert (frags.face_index == BACKGROUND_FACE).all()
        assert (frags.depth == BACKGROUND_DEPTH).all()

    def test_full_frustum_triangle_at_distance_two(self):
        mesh = _tri_mesh([[-100, -100, 0], [100, -100, 0], [0, 100, 0]])
        cam = Camera(position=(0, 0, 2), look_at=(0, 0, 0), width=32, height=32)
        frags = rasterize(mesh, cam)
        assert (frags.face_index == 0).all()
        np.testing.assert_allclose(frags.depth, 2.0, atol=1e-5)

    def test_zbuffer_takes_nearer_face(self):
        verts = np.array(
            [[-10, -10, 1], [10, -10, 1], [0, 10, 1], [-10, -10, -1], [10, -10, -1], [0, 10, -1]],
            float,
        )
        mesh = Mesh(vertices=verts, faces=[[3, 4, 5], [0, 1, 2]], uv=np.zeros((2, 3, 2)))
        cam = Camera(position=(0, 0, 2), look_at=(0, 0, 0), width=24, height=24)
        frags = rasterize(mesh, cam)  # face 1 sits at depth 1, face 0 at depth 3
        assert (frags.face_index == 1).all()
        np.testing.assert_allclose(frags.depth, 1.0, atol=1e-9)

    def test_shared_edge_covered_exactly_once(self):
        plane = make_plane_mesh(size=2.0)
        cam = Camera(position=(0, 0, 1.2), look_at=(0, 0, 0), width=33, height=47)
        one = rasterize(Mesh(vertices=plane.vertices, faces=plane.faces[:1], uv=plane.uv[:1]), cam)
        two = rasterize(Mesh(vertices=plane.vertices, faces=plane.faces[1:], uv=plane.uv[1:]), cam)
        assert not (one.body_mask & two.body_mask).any()
        assert (one.body_mask | two.body_mask).all()

    def test_barycentric_weights_sum_to_one(self):
        sphere = make_uv_sphere(rings=10, segments=14)
        cam = Camera(position=(0, 0, 3), look_at=(0, 0, 0), width=48, height=48)
        frags = rasterize(sphere, cam)
        body = frags.body_mask
        np.testing.assert_allclose(frags.barycentric[body].sum(axis=1), 1.0, atol=1e-9)
        assert (frags.barycentric[body] > -1e-9).all()
        assert (frags.depth[body] > 0).all()
        assert (frags.depth[~body] == BACKGROUND_DEPTH).all()

    def test_fragments_match_ray_casting_oracle(self):
        # Independent per-pixel ray/triangle intersection on a tilted plane.
        verts = np.array([[-1, -1, -0.4], [1, -1, 0.3], [1, 1, 0.5], [-1, 1, -0.2]], float)
        uv = np.array([[[0, 0], [1, 0], [1, 1]], [[0, 0], [1, 1], [0, 1]]], float)
        mesh = Mesh(vertices=verts, faces=[[0, 1, 2], [0, 2, 3]], uv=uv)
        cam = Camera(position=(0.2, -0.3, 2.5), look_at=(0, 0, 0), width=40, height=40, fov=35)
        frags = rasterize(mesh, cam)

        right, up, forward = cam.axes()
        half = math.tan(math.radians(cam.fov) / 2)
        rng = np.random.default_rng(0)
        body_pixels = np.argwhere(frags.body_mask)
        for i, j in body_pixels[rng.choice(len(body_pixels), 60, replace=False)]:
            x_ndc = 2 * (j + 0.5) / cam.width - 1
            y_ndc = 1 - 2 * (i + 0.5) / cam.height
            direction = right * x_ndc * half + up * y_ndc * half + forward
            face = frags.face_index[i, j]
            tri = mesh.vertices[mesh.faces[face]]
            # Solve origin + t*dir = bary @ tri for (t, bary).
            A = np.column_stack([tri[1] - tri[0], tri[2] - tri[0], -direction])
            b1, b2, t = np.linalg.solve(A, cam.position - tri[0])
            bary = np.array([1 - b1 - b2, b1, b2])
            np.testing.assert_allclose(frags.depth[i, j], t, rtol=1e-9)
            np.testing.assert_allclose(frags.barycentric[i, j], bary, atol=1e-9)
            np.testing.assert_allclose(frags.uv[i, j], bary @ mesh.uv[face], atol=1e-9)

    def test_deterministic(self):
        sphere = make_uv_sphere(rings=8, segments=12)
        cam = Camera(position=(0, 0.4, 2.6), look_at=(0, 0, 0), width=32, height=32)
        a, b = rasterize(sphere, cam), rasterize(sphere, cam)
        np.testing.assert_array_equal(a.face_index, b.face_index)
        np.testing.assert_array_equal(a.depth, b.depth)
        np.testing.assert_array_equal(a.uv, b.uv)


class TestShade:
    def _setup(self, width=48, height=48, tex_size=8, seed=0):
        mesh = make_plane_mesh(size=2.0)
        cam = Camera(position=(0.1, -0.2, 1.8), look_at=(0, 0, 0), width=width, height=height)
        frags = rasterize(mesh, cam)
        texture = np.random.default_rng(seed).random((tex_size, tex_size, 3))
        return mesh, cam, frags, texture

    def test_ambient_only_is_texture_lookup(self):
        mesh, cam, frags, texture = self._setup()
        light = PointLight(position=(0, 0, 3), ambient=(1, 1, 1), diffuse=(0, 0, 0), specular=(0, 0, 0))
        out = shade(frags, mesh, texture, [light], Material())
        body = frags.body_mask
        np.testing.assert_array_equal(out.view[body], sample_bilinear(texture, frags.uv[body]))

    def test_all_dark_lights_give_black_body(self):
        mesh, cam, frags, texture = self._setup()
        light = PointLight(position=(0, 0, 3), ambient=(0, 0, 0), diffuse=(0, 0, 0), specular=(0, 0, 0))
        out = shade(frags, mesh, texture, [light], Material())
        assert (out.view == 0).all()

    def test_phong_closed_form_at_center_pixel(self):
        # Flat wall facing the camera, light at the camera: at the pixel under
        # the camera n.l = 1 and r.v = 1, so color = ambient + diffuse + ls*ms.
        mesh = make_plane_mesh(size=4.0)
        cam = Camera(position=(0, 0, 1), look_at=(0, 0, 0), width=33, height=33)
        frags = rasterize(mesh, cam)
        light = PointLight(position=(0, 0, 1), ambient=(0.2,) * 3, diffuse=(0.5,) * 3, specular=(0.4,) * 3)
        material = Material(specular_color=(0.3,) * 3, shininess=17.0)
        white = np.ones((4, 4, 3))
        out = shade(frags, mesh, white, [light], material)
        expected = 0.2 + 0.5 + 0.4 * 0.3
        np.testing.assert_allclose(out.view[16, 16], expected, atol=1e-9)
        np.testing.assert_allclose(out.shade_gain[16, 16], 0.7, atol=1e-9)
        np.testing.assert_allclose(out.specular[16, 16], 0.12, atol=1e-9)

    def test_view_clamped(self):
        mesh, cam, frags, _ = self._setup()
        texture = np.ones((4, 4, 3))
        light = PointLight(position=(0, 0, 3), ambient=(1, 1, 1), diffuse=(1, 1, 1), specular=(0, 0, 0))
        out = shade(frags, mesh, texture, [light], Material())
        assert out.view.max() <= 1.0
        assert out.shade_gain.max() > 1.0  # the raw gain is preserved

    def test_mismatched_mesh_rejected(self):
        mesh, cam, frags, texture = self._setup()
        tiny = _tri_mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]])
        light = PointLight(position=(0, 0, 3))
        frags.face_index[:] = 5
        with pytest.raises(ValueError, match="beyond this mesh"):
            shade(frags, tiny, texture, [light], Material())

    def test_render_composes_rasterize_and_shade(self):
        mesh, cam, _, texture = self._setup()
        light = PointLight(position=(0, 0, 3))
        out = render(mesh, texture, cam, [light], Material())
        assert out.view.shape == (48, 48, 3)
        assert out.fragments.body_mask.any()
        again = render(mesh, texture, cam, [light], Material())
        np.testing.assert_array_equal(out.view, again.view)


class TestRenderLabel:
    def test_uniform_label_everywhere_on_body(self):
        mesh = make_plane_mesh(size=2.0)
        cam = Camera(position=(0, 0, 3), look_at=(0, 0, 0), width=32, height=32)
        labels = np.full((8, 8), 7, dtype=np.int32)
        out = render_label(mesh, labels, cam)
        frags = rasterize(mesh, cam)
        assert (out[frags.body_mask] == 7).all()
        assert (out[~frags.body_mask] == 0).all()

    def test_halves_match_uv_halves(self):
        # Left half of the texture (u < 0.5) label 1, right half label 2.
        mesh = make_plane_mesh(size=2.0)
        cam = Camera(position=(0, 0, 1.0), look_at=(0, 0, 0), width=40, height=40)
        labels = np.ones((16, 16), dtype=np.int32)
        labels[:, 8:] = 2
        out = render_label(mesh, labels, cam)
        frags = rasterize(mesh, cam)
        body = frags.body_mask
        u = frags.uv[..., 0]
        expected = np.where(u < 0.5, 1, 2)
        np.testing.assert_array_equal(out[body], expected[body])


class TestTextureVjp:
    def _scene(self, tex_size=8, width=48):
        mesh = make_plane_mesh(size=2.0)
        cam = Camera(position=(0.15, 0.1, 1.7), look_at=(0, 0, 0), width=width, height=width)
        frags = rasterize(mesh, cam)
        light = PointLight(
            position=(0.5, 0.8, 2.0), ambient=(0.35, 0.3, 0.4), diffuse=(0.5, 0.45, 0.4), specular=(0.02,) * 3
        )
        material = Material(specular_color=(0.03,) * 3, shininess=40.0)
        gain, spec = shading_images(frags, mesh, [light], material)
        return mesh, frags, light, material, gain, spec

    def test_zero_grad_gives_zero(self):
        _, frags, _, _, gain, _ = self._scene()
        g = texture_vjp(frags, gain, np.zeros(gain.shape), (8, 8))
        assert (g == 0).all()

    def test_single_texel_receives_gradient(self):
        # One pixel sampling exactly the center of texel (1, 2), gain 1.
        cam = Camera(position=(0, 0, 1), look_at=(0, 0, 0), width=1, height=1)
        uv = np.array([[[(2 + 0.5) / 4, 1 - (1 + 0.5) / 4]]])
        frags = Fragments(
            face_index=np.zeros((1, 1), np.int32),
            barycentric=np.full((1, 1, 3), 1 / 3),
            depth=np.full((1, 1), 0.5),
            uv=uv,
            camera=cam,
        )
        g = np.array([[[0.3, -0.7, 2.0]]])
        out = texture_vjp(frags, np.ones((1, 1, 3)), g, (4, 4))
        np.testing.assert_array_equal(out[1, 2], g[0, 0])
        out[1, 2] = 0
        assert (out == 0).all()

    def test_adjoint_identity(self):
        _, frags, _, _, gain, spec = self._scene()
        rng = np.random.default_rng(5)
        v = rng.random((8, 8, 3))
        g = rng.standard_normal(gain.shape)
        from skinsynth.renderer import apply_shading

        av, _ = apply_shading(frags, gain, np.zeros_like(spec), v)  # ambient+diffuse map, no clamp active
        lhs = float((av * g).sum())
        rhs = float((v * texture_vjp(frags, gain, g, (8, 8))).sum())
        assert abs(lhs - rhs) < 1e-10

    def test_matches_finite_differences(self):
        mesh, frags, light, material, gain, _ = self._scene(tex_size=4, width=24)
        rng = np.random.default_rng(11)
        base = 0.25 + 0.5 * rng.random((4, 4, 3))
        probe = rng.standard_normal(gain.shape)

        def loss(texture):
            out = shade(frags, mesh, texture, [light], material)
            return float((out.view * probe).sum())

        analytic = texture_vjp(frags, gain, probe, (4, 4))
        h = 1e-6
        fd = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            tp, tm = base.copy(), base.copy()
            tp[idx] += h
            tm[idx] -= h
            fd[idx] = (loss(tp) - loss(tm)) / (2 * h)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(fd))
        assert np.linalg.norm(analytic - fd) / denom < 1e-7

    def test_shape_mismatch_rejected(self):
        _, frags, _, _, gain, _ = self._scene()
        with pytest.raises(ValueError):
            texture_vjp(frags, gain, np.zeros((3, 3, 3)), (8, 8))


class TestSampling:
    def test_bilinear_at_texel_centers_is_exact(self, rng):
        tex = rng.random((6, 5, 3))
        ys, xs = np.mgrid[0:6, 0:5]
        uv = np.stack([(xs + 0.5) / 5, 1 - (ys + 0.5) / 6], axis=-1)
        np.testing.assert_allclose(sample_bilinear(tex, uv), tex, atol=1e-12)

    def test_clamp_to_edge(self, rng):
        tex = rng.random((4, 4, 3))
        np.testing.assert_allclose(sample_bilinear(tex, np.array([0.0, 1.0])), tex[0, 0])
        np.testing.assert_allclose(sample_bilinear(tex, np.array([1.0, 0.0])), tex[3, 3])

    def test_nearest_matches_labels(self):
        labels = np.arange(16).reshape(4, 4)
        cam = Camera(position=(0, 0, 1), look_at=(0, 0, 0), width=1, height=1)
        frags = Fragments(
            face_index=np.zeros((1, 1), np.int32),
            barycentric=np.full((1, 1, 3), 1 / 3),
            depth=np.full((1, 1), 0.5),
            uv=np.array([[[0.6, 0.9]]]),  # texel column 2, row 0
            camera=cam,
        )
        assert sample_label(frags, labels)[0, 0] == labels[0, 2]
