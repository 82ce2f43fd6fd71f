import json

import numpy as np
import pytest

from skinsynth.geometry import (
    ANATOMY_GROUPING,
    ANATOMY_NAMES_16,
    GROUP_NAMES_7,
    AnatomyLabelMap,
    Mesh,
    MeshError,
    default_label_table,
    group_labels,
    load_label_table,
    load_mesh,
    majority_face_labels,
    sample_surface,
    save_mesh,
    transfer_anatomy,
)

TRIANGLE_OBJ = """
v 0 0 0
v 1 0 0
v 0 1 0
vt 0 0
vt 1 0
vt 0 1
f 1/1 2/2 3/3
"""

DEGENERATE_OBJ = TRIANGLE_OBJ + "f 1/1 1/1 2/2\n"


def _write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def _cube_obj():
    # Unit cube: 8 shared vertices, 12 triangles, 4 reused texture coords.
    verts = [
        (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
        (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
    ]
    quads = [
        (1, 2, 3, 4), (5, 8, 7, 6), (1, 5, 6, 2),
        (2, 6, 7, 3), (3, 7, 8, 4), (4, 8, 5, 1),
    ]
    lines = [f"v {x} {y} {z}" for x, y, z in verts]
    lines += ["vt 0 0", "vt 1 0", "vt 1 1", "vt 0 1"]
    for a, b, c, d in quads:
        lines.append(f"f {a}/1 {b}/2 {c}/3")
        lines.append(f"f {a}/1 {c}/3 {d}/4")
    return "\n".join(lines) + "\n"


class TestLoadMesh:
    def test_single_triangle(self, tmp_path):
        mesh = load_mesh(_write(tmp_path, "tri.obj", TRIANGLE_OBJ))
        assert mesh.num_faces == 1
        assert len(mesh.vertices) == 3
        np.testing.assert_allclose(mesh.uv[0], [[0, 0], [1, 0], [0, 1]])
        assert mesh.dropped_faces == 0

    def test_degenerate_face_dropped(self, tmp_path):
        mesh = load_mesh(_write(tmp_path, "degen.obj", DEGENERATE_OBJ))
        assert mesh.num_faces == 1
        assert mesh.dropped_faces == 1

    def test_cube_parses_to_12_faces_8_vertices(self, tmp_path):
        mesh = load_mesh(_write(tmp_path, "cube.obj", _cube_obj()))
        assert mesh.num_faces == 12
        assert len(mesh.vertices) == 8
        assert (mesh.face_areas > 0).all()

    def test_quads_fan_triangulated(self, tmp_path):
        obj = """
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
vt 0 0
vt 1 0
vt 1 1
vt 0 1
f 1/1 2/2 3/3 4/4
"""
        mesh = load_mesh(_write(tmp_path, "quad.obj", obj))
        assert mesh.num_faces == 2
        np.testing.assert_array_equal(mesh.faces, [[0, 1, 2], [0, 2, 3]])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_mesh(tmp_path / "nope.obj")

    def test_obj_without_uvs_rejected(self, tmp_path):
        obj = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n"
        with pytest.raises(MeshError, match="texture coordinate"):
            load_mesh(_write(tmp_path, "nouv.obj", obj))

    def test_face_with_too_few_vertices_rejected(self, tmp_path):
        obj = "v 0 0 0\nv 1 0 0\nvt 0 0\nf 1/1 2/1\n"
        with pytest.raises(MeshError, match="fewer than 3"):
            load_mesh(_write(tmp_path, "bad.obj", obj))

    def test_mtl_texture_filename(self, tmp_path):
        _write(tmp_path, "mat.mtl", "newmtl skin\nmap_Kd body.png\n")
        mesh = load_mesh(_write(tmp_path, "tex.obj", "mtllib mat.mtl\n" + TRIANGLE_OBJ))
        assert mesh.texture_file == "body.png"

    def test_save_load_round_trip(self, tmp_path, sphere):
        path = tmp_path / "sphere.obj"
        save_mesh(sphere, path)
        again = load_mesh(path)
        assert again.num_faces == sphere.num_faces
        np.testing.assert_allclose(again.vertices, sphere.vertices, atol=1e-7)
        np.testing.assert_allclose(again.uv, sphere.uv, atol=1e-7)


class TestMeshInvariants:
    def test_face_index_validation(self):
        with pytest.raises(MeshError):
            Mesh(vertices=np.zeros((2, 3)), faces=[[0, 1, 2]], uv=np.zeros((1, 3, 2)))

    def test_uv_range_validation(self):
        with pytest.raises(MeshError):
            Mesh(
                vertices=np.eye(3),
                faces=[[0, 1, 2]],
                uv=np.full((1, 3, 2), 1.5),
            )

    def test_vertex_normals_unit(self, sphere):
        norms = np.linalg.norm(sphere.vertex_normals, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-9)


class TestSampleSurface:
    def test_single_face_always_chosen(self, rng):
        mesh = Mesh(vertices=np.eye(3), faces=[[0, 1, 2]], uv=np.zeros((1, 3, 2)))
        for _ in range(10):
            assert sample_surface(mesh, rng).face_index == 0

    def test_sample_geometry(self, sphere, rng):
        s = sample_surface(sphere, rng)
        assert (s.barycentric >= 0).all()
        assert abs(s.barycentric.sum() - 1.0) < 1e-12
        tri = sphere.vertices[sphere.faces[s.face_index]]
        np.testing.assert_allclose(s.world_point, s.barycentric @ tri)
        assert abs(np.linalg.norm(s.normal) - 1.0) < 1e-6

    def test_area_weighted_frequencies(self):
        # Two triangles with areas 1 and 3 -> frequencies 0.25 / 0.75.
        verts = np.array(
            [[0, 0, 0], [1, 0, 0], [0, 2, 0], [5, 0, 0], [8, 0, 0], [5, 2, 0]], float
        )
        mesh = Mesh(vertices=verts, faces=[[0, 1, 2], [3, 4, 5]], uv=np.zeros((2, 3, 2)))
        rng = np.random.default_rng(7)
        n = 100_000
        picks = np.array([sample_surface(mesh, rng).face_index for _ in range(n)])
        freq = (picks == 0).mean()
        assert abs(freq - 0.25) <= 0.01
        observed = np.array([(picks == 0).sum(), (picks == 1).sum()])
        expected = np.array([0.25, 0.75]) * n
        chi2 = ((observed - expected) ** 2 / expected).sum()
        assert chi2 < 6.63  # 99th percentile of chi^2 with 1 dof

    def test_fixed_seed_reproducible(self, sphere):
        a = sample_surface(sphere, np.random.default_rng(42))
        b = sample_surface(sphere, np.random.default_rng(42))
        assert a.face_index == b.face_index
        np.testing.assert_array_equal(a.barycentric, b.barycentric)

    def test_empty_mesh_raises(self):
        mesh = Mesh(vertices=np.zeros((0, 3)), faces=np.zeros((0, 3)), uv=np.zeros((0, 3, 2)))
        with pytest.raises(MeshError):
            sample_surface(mesh, np.random.default_rng(0))


def _point_mesh(vertices, labels=None):
    return Mesh(
        vertices=np.asarray(vertices, float),
        faces=np.zeros((0, 3)),
        uv=np.zeros((0, 3, 2)),
        anatomy=labels,
    )


class TestTransferAnatomy:
    def test_identity_transfer(self, rng):
        verts = rng.random((40, 3))
        labels = rng.integers(0, 16, size=40)
        labeled = _point_mesh(verts, labels)
        out = transfer_anatomy(labeled, _point_mesh(verts))
        np.testing.assert_array_equal(out.labels, labels)

    def test_small_perturbation_keeps_labels(self):
        # Grid spacing 1; perturb by less than half the minimum gap.
        grid = np.stack(np.meshgrid(*[np.arange(3)] * 3), axis=-1).reshape(-1, 3).astype(float)
        labels = np.arange(len(grid)) % 16
        rng = np.random.default_rng(3)
        target = grid + rng.uniform(-0.2, 0.2, size=grid.shape)
        out = transfer_anatomy(_point_mesh(grid, labels), _point_mesh(target))
        np.testing.assert_array_equal(out.labels, labels)

    def test_matches_brute_force(self, rng):
        src = rng.random((30, 3)) * 4
        labels = rng.integers(0, 16, size=30)
        tgt = rng.random((25, 3)) * 4
        out = transfer_anatomy(_point_mesh(src, labels), _point_mesh(tgt))
        dists = np.linalg.norm(tgt[:, None, :] - src[None, :, :], axis=2)
        np.testing.assert_array_equal(out.labels, labels[np.argmin(dists, axis=1)])

    def test_two_cluster_midpoint(self):
        src = np.array([[0, 0, 0], [10, 0, 0]], float)
        labeled = _point_mesh(src, [3, 9])
        out = transfer_anatomy(labeled, _point_mesh([[5.1, 0, 0]]))
        assert out.labels[0] == 9  # |5.1-10| = 4.9 < 5.1 = |5.1-0|

    def test_exact_tie_takes_lowest_index(self):
        src = np.array([[0, 0, 0], [2, 0, 0]], float)
        labeled = _point_mesh(src, [5, 11])
        out = transfer_anatomy(labeled, _point_mesh([[1.0, 0, 0]]))
        assert out.labels[0] == 5

    def test_unlabeled_source_raises(self):
        with pytest.raises(MeshError):
            transfer_anatomy(_point_mesh(np.zeros((1, 3))), _point_mesh(np.zeros((1, 3))))

    def test_idempotent_on_same_mesh(self, rng):
        verts = rng.random((20, 3))
        labels = rng.integers(0, 16, size=20)
        labeled = _point_mesh(verts, labels)
        once = transfer_anatomy(labeled, labeled)
        relabeled = _point_mesh(verts, once.labels)
        twice = transfer_anatomy(relabeled, relabeled)
        np.testing.assert_array_equal(once.labels, twice.labels)


class TestGroupLabels:
    def test_upper_arm_left_goes_to_arms(self):
        fine = next(i for i, n in ANATOMY_NAMES_16.items() if n == "upper_arm_left")
        out = group_labels(AnatomyLabelMap(labels=[fine]))
        assert out.names[int(out.labels[0])] == "arms"

    def test_head_fixed_point(self):
        out = group_labels(AnatomyLabelMap(labels=[0]))
        assert out.names[int(out.labels[0])] == "head"

    def test_all_16_map_to_7_distinct(self):
        out = group_labels(AnatomyLabelMap(labels=np.arange(16)))
        assert set(out.labels.tolist()) == set(GROUP_NAMES_7)
        assert len(set(out.labels.tolist())) == 7

    def test_grouping_total_and_surjective(self):
        assert set(ANATOMY_GROUPING) == set(range(16))
        assert set(ANATOMY_GROUPING.values()) == set(GROUP_NAMES_7)

    def test_unknown_id_raises(self):
        with pytest.raises(ValueError, match="unknown label"):
            group_labels(AnatomyLabelMap(labels=[99]))

    def test_already_grouped_raises(self):
        grouped = group_labels(AnatomyLabelMap(labels=[0]))
        with pytest.raises(ValueError):
            group_labels(grouped)


class TestLabelTables:
    def test_default_table_round_trip(self, tmp_path):
        path = tmp_path / "labels.json"
        path.write_text(json.dumps(default_label_table()))
        names, grouping = load_label_table(path)
        assert names == ANATOMY_NAMES_16
        assert grouping == ANATOMY_GROUPING

    def test_bad_group_rejected(self, tmp_path):
        path = tmp_path / "labels.json"
        path.write_text(json.dumps([{"id": 0, "name": "head", "group": "tail"}]))
        with pytest.raises(ValueError, match="unknown group"):
            load_label_table(path)


class TestMajorityFaceLabels:
    def test_majority_and_tie_rules(self):
        mesh = Mesh(
            vertices=np.zeros((6, 3)),
            faces=[[0, 1, 2], [3, 4, 5]],
            uv=np.zeros((2, 3, 2)),
        )
        labels = np.array([4, 4, 9, 1, 2, 3])
        out = majority_face_labels(mesh, labels)
        assert out[0] == 4  # two of three agree
        assert out[1] == 1  # all distinct: lowest id wins
