import numpy as np
import pytest

from mfrecon.mcubes import GridGeometry, marching_cubes, marching_cubes_reference
from mfrecon.mesh import Mesh, contains_points, icosphere, load_obj, sample_surface, save_obj, save_ply
from mfrecon.metrics import SurfaceDistance, chamfer, p2s, point_triangle_distance


def sphere_field(resolution, radius=0.8, extent=1.0):
    geom = GridGeometry.from_box([-extent] * 3, [extent] * 3, resolution)
    axes = [np.linspace(-extent, extent, resolution)] * 3
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    values = (np.sqrt(X**2 + Y**2 + Z**2) < radius).astype(np.float64)
    return values, geom


class TestMesh:
    def test_icosphere_watertight(self):
        m = icosphere(2)
        assert m.is_watertight()
        assert m.euler_characteristic() == 2
        np.testing.assert_allclose(np.linalg.norm(m.vertices, axis=1), 1.0, atol=1e-12)

    def test_contains_points_sphere(self):
        m = icosphere(3)
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1.5, 1.5, (2000, 3))
        inside = contains_points(m, pts)
        r = np.linalg.norm(pts, axis=1)
        # faceted sphere lies slightly inside the unit sphere
        assert inside[r < 0.95].all()
        assert not inside[r > 1.01].any()

    def test_sample_surface_on_mesh(self):
        m = icosphere(2)
        pts, faces = sample_surface(m, 500, np.random.default_rng(1))
        d = SurfaceDistance(m).query(pts)
        assert d.max() < 1e-9
        assert faces.min() >= 0 and faces.max() < m.n_faces

    def test_obj_round_trip(self, tmp_path):
        m = icosphere(1)
        colors = np.linspace(0, 1, m.n_vertices * 3).reshape(-1, 3)
        m = Mesh(m.vertices, m.faces, colors)
        path = tmp_path / "m.obj"
        save_obj(m, path)
        loaded = load_obj(path)
        np.testing.assert_allclose(loaded.vertices, m.vertices, atol=1e-7)
        np.testing.assert_array_equal(loaded.faces, m.faces)
        np.testing.assert_allclose(loaded.colors, m.colors, atol=1e-5)

    def test_ply_written(self, tmp_path):
        m = icosphere(1)
        path = tmp_path / "m.ply"
        save_ply(m, path)
        raw = path.read_bytes()
        assert raw.startswith(b"ply\nformat binary_little_endian 1.0")

    def test_face_index_validation(self):
        with pytest.raises(ValueError):
            Mesh(np.zeros((3, 3)), np.array([[0, 1, 5]]))


class TestMarchingCubes:
    def test_analytic_sphere_radial_error(self):
        R = 64
        radius = 0.8
        values, geom = sphere_field(R, radius)
        mesh = marching_cubes(values, 0.5, geom)
        pitch = geom.spacing.max()
        radial = np.abs(np.linalg.norm(mesh.vertices, axis=1) - radius)
        assert radial.max() < 2 * pitch
        assert mesh.is_watertight()

    def test_sphere_chamfer_below_pitch(self):
        R = 64
        values, geom = sphere_field(R, 0.8)
        mesh = marching_cubes(values, 0.5, geom)
        gt = icosphere(4, radius=0.8)
        pitch_cm = geom.spacing.max() * 100
        assert chamfer(mesh, gt, samples=4000, seed=0) < pitch_cm

    def test_constant_field_empty(self):
        geom = GridGeometry.from_box([0, 0, 0], [1, 1, 1], 8)
        assert marching_cubes(np.zeros((8, 8, 8)), 0.5, geom).is_empty()
        assert marching_cubes(np.ones((8, 8, 8)), 0.5, geom).is_empty()

    def test_mirrored_field_mirrors_mesh(self):
        # grid spans x in [-3, 3], so flipping the field mirrors about x = 0
        rng = np.random.default_rng(2)
        values = rng.random((7, 7, 7))
        geom = GridGeometry(np.array([-3, 0, 0.0]), np.ones(3))
        m1 = marching_cubes(values, 0.5, geom)
        m2 = marching_cubes(values[::-1], 0.5, geom)
        got = np.sort(np.round(-m2.vertices[:, 0], 6))
        want = np.sort(np.round(m1.vertices[:, 0], 6))
        np.testing.assert_allclose(got, want, atol=1e-9)

    def test_outward_orientation(self):
        values, geom = sphere_field(32, 0.7)
        mesh = marching_cubes(values, 0.5, geom)
        centers = mesh.vertices[mesh.faces].mean(axis=1)
        normals = mesh.face_normals()
        agree = (normals * centers).sum(axis=1) > 0
        assert agree.mean() > 0.99

    def test_matches_reference_soup(self):
        # production output must equal the per-cube reference on random grids
        for seed in range(4):
            rng = np.random.default_rng(seed)
            values = rng.random((8, 8, 8))
            geom = GridGeometry(np.zeros(3), np.full(3, 0.5))
            mesh = marching_cubes(values, 0.5, geom)
            soup = marching_cubes_reference(values, 0.5, geom)
            tri_prod = np.sort(mesh.vertices[mesh.faces].reshape(-1, 9), axis=0)
            tri_ref = np.sort(soup.reshape(-1, 9), axis=0)
            assert tri_prod.shape == tri_ref.shape
            np.testing.assert_allclose(tri_prod, tri_ref, atol=1e-6)

    def test_threshold_shift_moves_surface(self):
        values, geom = sphere_field(32, 0.7)
        blur = values.copy()
        m_default = marching_cubes(blur, 0.5, geom)
        assert not m_default.is_empty()

    def test_small_grid_rejected(self):
        with pytest.raises(ValueError):
            marching_cubes(np.zeros((1, 4, 4)))


class TestMetrics:
    def test_identical_meshes_zero(self):
        m = icosphere(3)
        assert chamfer(m, m, samples=2000, seed=1) < 1e-6
        assert p2s(m, m, samples=2000, seed=1) < 1e-6

    def test_concentric_spheres_ten_cm(self):
        a = icosphere(4, radius=1.0)
        b = icosphere(4, radius=1.1)
        c = chamfer(a, b, samples=10000, seed=2)
        assert abs(c - 10.0) < 0.3
        d = p2s(b, a, samples=10000, seed=3)
        assert abs(d - 10.0) < 0.3

    def test_chamfer_symmetric(self):
        a = icosphere(2, radius=0.5)
        b = icosphere(2, radius=0.9)
        assert chamfer(a, b, samples=3000, seed=4) == pytest.approx(
            chamfer(b, a, samples=3000, seed=4), rel=0.05)

    def test_p2s_not_symmetric(self):
        # a small sphere tucked against the shell of a big one: directed means differ
        a = icosphere(3, radius=0.1).translated([0.85, 0.0, 0.0])
        big = icosphere(3, radius=1.0)
        forward = p2s(a, big, samples=3000, seed=5)
        backward = p2s(big, a, samples=3000, seed=5)
        assert abs(forward - backward) > 10.0

    def test_point_triangle_regions(self):
        tri = np.array([[[0, 0, 0], [1, 0, 0], [0, 1, 0]]], dtype=np.float64)
        cases = [
            ([0.25, 0.25, 1.0], 1.0),        # interior projection
            ([-1.0, -1.0, 0.0], np.sqrt(2)),  # vertex a
            ([2.0, 0.0, 0.0], 1.0),           # vertex b
            ([0.5, -1.0, 0.0], 1.0),          # edge ab
            ([1.0, 1.0, 0.0], np.sqrt(2) / 2),  # edge bc
        ]
        for point, expected in cases:
            d = point_triangle_distance(np.array([point], dtype=np.float64), tri)
            assert d[0] == pytest.approx(expected, abs=1e-12)

    def test_empty_mesh_rejected(self):
        m = icosphere(1)
        empty = Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        with pytest.raises(ValueError):
            chamfer(m, empty)
