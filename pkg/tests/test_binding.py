import numpy as np
import pytest

from mfrecon.binding import (
    BoundPointSet, PartAdjacency, SampleBatch, bind_points, default_bind_sigma,
    make_voxel_grid, sample_training_points, warp_points,
)
from mfrecon.bodymodel import BodyModel, BodyParams, generate_mini_body, skin
from mfrecon.mesh import Mesh, icosphere


@pytest.fixture(scope="module")
def body():
    return generate_mini_body()


@pytest.fixture(scope="module")
def rest(body):
    return skin(body, BodyParams.zero(body))


def toy_body():
    """Six vertices: an equilateral triangle of part 0 near the origin and a
    far cluster of part 1 (masked); parts 0 and 1 are not adjacent."""
    tri = np.array([[1.0, 0, 0], [-0.5, np.sqrt(3) / 2, 0], [-0.5, -np.sqrt(3) / 2, 0]])
    far = tri + np.array([10.0, 0, 0])
    verts = np.concatenate([tri, far])
    weights = np.zeros((6, 1))
    weights[:, 0] = 1.0
    adjacency = np.eye(3, dtype=bool)
    return BodyModel(
        template_vertices=verts,
        joint_regressor=np.full((1, 6), 1 / 6),
        parents=np.array([-1]),
        skin_weights=weights,
        shape_basis=np.zeros((6, 3, 0)),
        pose_basis=np.zeros((6, 3, 0)),
        part_labels=np.array([0, 0, 0, 1, 1, 2]),
        faces=np.array([[0, 1, 2], [3, 4, 5]]),
        part_names={0: "torso", 1: "limb0_hand", 2: "other"},
        part_adjacency=adjacency,
        masked_parts=frozenset({1}),
    )


class TestBindPoints:
    def test_coincident_vertex_weight_largest(self, body, rest):
        # joint 2 drives limb 1's first segment: an unmasked part
        vi = int(np.argmax(body.skin_weights[:, 2]))
        point = rest.vertices[vi]
        bound = bind_points(point[None], rest, body, sigma=0.05)
        assert bound.valid[0]
        slot = list(bound.nearest[0]).index(vi)
        assert bound.bind_weights[0, slot] == bound.bind_weights[0].max()
        assert bound.bind_weights[0].sum() == pytest.approx(1.0, abs=1e-9)

    def test_equidistant_same_part_thirds(self):
        tb = toy_body()
        posed = skin(tb, BodyParams(np.zeros((1, 3)), np.zeros(3), np.zeros(0)))
        bound = bind_points(np.array([[0.0, 0.0, 0.5]]), posed, tb, sigma=0.3)
        assert bound.valid[0]
        np.testing.assert_allclose(bound.bind_weights[0], 1 / 3, atol=1e-9)
        assert set(bound.nearest[0]) == {0, 1, 2}

    def test_masked_part_invalidates(self):
        tb = toy_body()
        posed = skin(tb, BodyParams(np.zeros((1, 3)), np.zeros(3), np.zeros(0)))
        bound = bind_points(np.array([[10.0, 0.0, 0.2]]), posed, tb, sigma=0.3)
        assert not bound.valid[0]
        np.testing.assert_array_equal(bound.bind_weights[0], 0.0)

    def test_non_adjacent_parts_invalidate(self):
        tb = toy_body()
        # unmask part 1 but keep parts 0/1 non-adjacent: a midpoint still fails
        adj = PartAdjacency(tb.part_adjacency, frozenset())
        posed = skin(tb, BodyParams(np.zeros((1, 3)), np.zeros(3), np.zeros(0)))
        bound = bind_points(np.array([[5.0, 0.0, 0.0]]), posed, tb, adj=adj, sigma=1.0)
        parts = set(tb.part_labels[bound.nearest[0]])
        if len(parts) > 1:
            assert not bound.valid[0]

    def test_weights_decrease_with_distance(self, body, rest):
        rng = np.random.default_rng(0)
        pts = rest.vertices[rng.integers(0, body.n_vertices, 50)] + rng.normal(0, 0.01, (50, 3))
        bound = bind_points(pts, rest, body, sigma=0.05)
        for i in np.flatnonzero(bound.valid):
            d = np.linalg.norm(rest.vertices[bound.nearest[i]] - pts[i], axis=1)
            order = np.argsort(d)
            w_sorted = bound.bind_weights[i][order]
            assert (np.diff(w_sorted) <= 1e-12).all()

    def test_default_sigma_positive(self, body, rest):
        assert default_bind_sigma(body, rest) > 0

    def test_folded_limb_mixes_parts(self, body):
        # fold limb 1 so its hand approaches the torso: midpoints go invalid
        theta = np.zeros((body.n_joints, 3))
        theta[2] = [0.0, 0.0, 2.6]
        posed = skin(body, BodyParams(theta, np.zeros(3), np.zeros(body.n_shape)))
        grid = make_voxel_grid(posed, 12, margin=0.05)
        bound = bind_points(grid.points, posed, body)
        assert bound.valid.any()
        assert (~bound.valid).any()


class TestWarpPoints:
    def test_identity_same_pose(self, body, rest):
        rng = np.random.default_rng(1)
        theta = rng.uniform(-0.4, 0.4, (body.n_joints, 3))
        posed = skin(body, BodyParams(theta, np.zeros(3), np.zeros(body.n_shape)))
        pts = posed.vertices[rng.integers(0, body.n_vertices, 40)] + rng.normal(0, 0.02, (40, 3))
        bound = bind_points(pts, posed, body)
        out = warp_points(bound, body, np.zeros(body.n_shape), theta, theta)
        sel = bound.valid
        assert np.abs(out[sel] - pts[sel]).max() < 1e-9

    def test_rigid_limb_rotation_closed_form(self, body, rest):
        from mfrecon.bodymodel import rodrigues
        # points around limb 1's first-segment plateau (unmasked part, joint 2)
        plateau = np.flatnonzero(body.skin_weights[:, 2] > 1 - 1e-9)
        pts = rest.vertices[plateau] * 1.02
        bound = bind_points(pts, rest, body, sigma=0.05)
        all_rigid = body.skin_weights[bound.nearest, 2].min(axis=1) > 1 - 1e-9
        keep = np.flatnonzero(bound.valid & all_rigid)
        assert len(keep) > 0
        theta = np.zeros((body.n_joints, 3))
        theta[2] = [0.4, -0.3, 0.8]
        out = warp_points(bound, body, np.zeros(body.n_shape), np.zeros((body.n_joints, 3)), theta)
        rest_joints = body.joint_regressor @ body.template_vertices
        R = rodrigues(theta[2])
        expected = (R @ (pts[keep] - rest_joints[2]).T).T + rest_joints[2]
        assert np.abs(out[keep] - expected).max() < 1e-6

    def test_round_trip_same_binding(self, body, rest):
        # inverse composition is exact where the bound vertices share one
        # rigid transform, i.e. all three sit on the same weight plateau
        rng = np.random.default_rng(2)
        pts = rest.vertices + rng.normal(0, 0.005, rest.vertices.shape)
        bound = bind_points(pts, rest, body)
        joint_w = body.skin_weights[bound.nearest]        # (N, 3, J)
        shared = (joint_w.max(axis=2).min(axis=1) > 1 - 1e-9) & \
                 (np.ptp(joint_w.argmax(axis=2), axis=1) == 0)
        sel = bound.valid & shared
        assert sel.sum() > 20
        t1 = np.zeros((body.n_joints, 3))
        t2 = rng.uniform(-0.5, 0.5, (body.n_joints, 3))
        fwd = warp_points(bound, body, np.zeros(body.n_shape), t1, t2)
        back_bound = BoundPointSet(fwd, bound.nearest, bound.bind_weights, bound.valid)
        back = warp_points(back_bound, body, np.zeros(body.n_shape), t2, t1)
        assert np.abs(back[sel] - pts[sel]).max() < 1e-6

    def test_warp_p2s_decreases_with_sigma_on_rigid_limb(self, body, rest):
        # surface samples around limb 1: tighter binding kernels weight the
        # rigidly-moving vertices harder, so the warped points track the
        # skinned surface more closely
        from mfrecon.metrics import p2s
        from mfrecon.mesh import Mesh
        rng = np.random.default_rng(5)
        on_limb = np.flatnonzero(body.skin_weights[:, 2] + body.skin_weights[:, 3] > 0.5)
        pts = rest.vertices[rng.choice(on_limb, 80)]
        theta = np.zeros((body.n_joints, 3))
        theta[2] = [0.5, 0.0, 0.7]
        posed_dst = skin(body, BodyParams(theta, np.zeros(3), np.zeros(body.n_shape)))
        dst_mesh = Mesh(posed_dst.vertices, body.faces)
        results = {}
        for sigma in (0.01, 0.2):
            bound = bind_points(pts, rest, body, sigma=sigma)
            warped = warp_points(bound, body, np.zeros(body.n_shape),
                                 np.zeros((body.n_joints, 3)), theta)
            sel = bound.valid
            moved = Mesh(warped[sel], np.zeros((0, 3), dtype=np.int64))
            from mfrecon.metrics import SurfaceDistance
            results[sigma] = SurfaceDistance(dst_mesh).query(warped[sel]).mean()
        assert results[0.01] < results[0.2]

    def test_invalid_points_pass_through(self, body, rest):
        pts = np.array([[5.0, 5.0, 5.0]])
        bound = BoundPointSet(pts, np.zeros((1, 3), dtype=np.int64),
                              np.zeros((1, 3)), np.array([False]))
        out = warp_points(bound, body, np.zeros(body.n_shape),
                          np.zeros((body.n_joints, 3)), np.ones((body.n_joints, 3)) * 0.3)
        np.testing.assert_array_equal(out, pts)


class TestSampling:
    def test_sphere_volume_fraction(self):
        sphere = icosphere(3)
        batch = sample_training_points(sphere, 0, 10000, rng_seed=4,
                                       box=([-2, -2, -2], [2, 2, 2]))
        frac = batch.occupancy_labels.mean()
        assert frac == pytest.approx(4 * np.pi / 3 / 64, abs=0.01)

    def test_zero_sigma_points_on_surface(self):
        from mfrecon.metrics import SurfaceDistance
        sphere = icosphere(2)
        batch = sample_training_points(sphere, 500, 0, sigma=0.0, rng_seed=5)
        d = SurfaceDistance(sphere).query(batch.points)
        assert d.max() < 1e-6

    def test_fixed_seed_reproducible(self):
        sphere = icosphere(2)
        a = sample_training_points(sphere, 200, 200, sigma=0.01, rng_seed=6)
        b = sample_training_points(sphere, 200, 200, sigma=0.01, rng_seed=6)
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.occupancy_labels, b.occupancy_labels)

    def test_non_watertight_rejected(self):
        sphere = icosphere(1)
        broken = Mesh(sphere.vertices, sphere.faces[:-1])
        with pytest.raises(ValueError, match="watertight"):
            sample_training_points(broken, 10, 10)

    def test_surface_offset_scale(self):
        from mfrecon.metrics import SurfaceDistance
        sphere = icosphere(3)
        sigma = 0.02
        batch = sample_training_points(sphere, 4000, 0, sigma=sigma, rng_seed=7)
        d = SurfaceDistance(sphere).query(batch.points)
        # per-axis gaussian offsets: mean distance to surface ~ sigma-scale
        assert 0.2 * sigma < d.mean() < 2.5 * sigma


class TestVoxelGrid:
    def test_r2_unit_box_corners(self, body):
        verts = np.array([[0, 0, 0], [1, 1, 1.0]])
        posed = skin(body, BodyParams.zero(body))
        posed.vertices = verts  # direct box for the corner check
        batch = make_voxel_grid(posed, 2, margin=0.0)
        expected = np.array([[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1],
                             [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]], dtype=np.float64)
        np.testing.assert_allclose(batch.points, expected, atol=1e-12)

    def test_body_inside_grid(self, body, rest):
        batch = make_voxel_grid(rest, 16, margin=0.1)
        lo = batch.points.min(axis=0)
        hi = batch.points.max(axis=0)
        assert (rest.vertices >= lo).all() and (rest.vertices <= hi).all()

    def test_spacing_and_order(self, body, rest):
        R = 8
        batch = make_voxel_grid(rest, R, margin=0.1)
        geom = batch.grid_geometry
        lo = rest.vertices.min(axis=0)
        hi = rest.vertices.max(axis=0)
        extent = (hi - lo) * 1.2
        np.testing.assert_allclose(geom.spacing, extent / (R - 1), rtol=1e-12)
        # z fastest
        np.testing.assert_allclose(batch.points[1] - batch.points[0],
                                   [0, 0, geom.spacing[2]], atol=1e-12)
        np.testing.assert_allclose(batch.points[R] - batch.points[0],
                                   [0, geom.spacing[1], 0], atol=1e-12)

    def test_resolution_validated(self, rest):
        with pytest.raises(ValueError):
            make_voxel_grid(rest, 1)
