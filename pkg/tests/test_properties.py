"""Property-based checks over randomized inputs (hypothesis drives the
sampling; each property mirrors a module invariant)."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfrecon import autodiff as ad
from mfrecon.autodiff import Tensor
from mfrecon.binding import SampleBatch, bind_points
from mfrecon.bodymodel import BodyParams, generate_mini_body, skin, warp_vertex
from mfrecon.sequence import SelectionWeights, pose_distance

J = 8
BODY = generate_mini_body()
REST = skin(BODY, BodyParams.zero(BODY))

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)


def pose_from(flat):
    theta = np.asarray(flat[: J * 3]).reshape(J, 3)
    trans = np.asarray(flat[J * 3: J * 3 + 3])
    return BodyParams(theta, trans, np.zeros(2))


@settings(max_examples=25, deadline=None)
@given(st.lists(finite, min_size=J * 3 + 3, max_size=J * 3 + 3),
       st.lists(finite, min_size=J * 3 + 3, max_size=J * 3 + 3))
def test_pose_distance_symmetric_nonnegative(flat_a, flat_b):
    w = SelectionWeights(np.ones(J))
    a, b = pose_from(flat_a), pose_from(flat_b)
    d_ab = pose_distance(a, b, w)
    d_ba = pose_distance(b, a, w)
    assert d_ab == pytest.approx(d_ba, rel=1e-9)
    assert d_ab >= 0


@settings(max_examples=15, deadline=None)
@given(st.lists(st.floats(-0.8, 0.8), min_size=BODY.n_joints * 3,
                max_size=BODY.n_joints * 3),
       st.integers(0, BODY.n_vertices - 1))
def test_warp_same_pose_is_identity(flat, vertex):
    theta = np.asarray(flat).reshape(BODY.n_joints, 3)
    x = BODY.template_vertices[vertex] * 1.05
    out = warp_vertex(BODY, np.zeros(BODY.n_shape), theta, theta, x, vertex)
    assert np.abs(out - x).max() < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_softmax_rows_normalized(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((4, 7)).astype(np.float32) * rng.uniform(0.1, 20))
    s = ad.softmax(x, axis=-1)
    assert (s.data >= 0).all()
    np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bind_weights_partition_of_unity(seed):
    rng = np.random.default_rng(seed)
    pts = REST.vertices[rng.integers(0, BODY.n_vertices, 40)] + rng.normal(0, 0.03, (40, 3))
    bound = bind_points(pts, REST, BODY, sigma=0.05)
    if bound.valid.any():
        sums = bound.bind_weights[bound.valid].sum(axis=1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-9)
        assert (bound.bind_weights[bound.valid] > 0).all()
    np.testing.assert_array_equal(bound.bind_weights[~bound.valid], 0.0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_skinning_identity_for_random_beta(seed):
    rng = np.random.default_rng(seed)
    beta = rng.uniform(-2, 2, BODY.n_shape)
    posed = skin(BODY, BodyParams(np.zeros((BODY.n_joints, 3)), np.zeros(3), beta))
    expected = BODY.template_vertices + BODY.shape_basis @ beta
    assert np.abs(posed.vertices - expected).max() < 1e-6


def test_sample_batch_dump_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    batch = SampleBatch(rng.random((25, 3)), (rng.random(25) > 0.5).astype(np.float64), "mixed")
    path = tmp_path / "batch.xsmp"
    batch.dump(path)
    again = SampleBatch.load(path)
    np.testing.assert_allclose(again.points, batch.points, atol=1e-7)
    np.testing.assert_array_equal(again.occupancy_labels, batch.occupancy_labels)
