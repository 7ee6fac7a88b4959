import numpy as np
import pytest

from mfrecon import autodiff as ad
from mfrecon import nn
from mfrecon.autodiff import Tensor


def rng_for(seed=0):
    return np.random.default_rng(seed)


class TestLinear:
    def test_identity_weight_zero_bias(self):
        x = Tensor(rng_for(1).standard_normal((4, 5)).astype(np.float32))
        w = Tensor(np.eye(5, dtype=np.float32))
        b = Tensor(np.zeros(5, dtype=np.float32))
        out = ad.linear(x, w, b)
        np.testing.assert_allclose(out.data, x.data, rtol=0, atol=0)

    def test_gradient_matches_finite_differences(self):
        lin = nn.Linear(4, 3, rng_for(2))
        report = nn.grad_check(lin, [rng_for(3).standard_normal((5, 4))])
        assert report.passed, report.per_tensor

    def test_empty_batch(self):
        lin = nn.Linear(4, 3, rng_for(2))
        out = lin(Tensor(np.zeros((0, 4), dtype=np.float32)))
        assert out.shape == (0, 3)

    def test_shape_mismatch_raises(self):
        lin = nn.Linear(4, 3, rng_for(2))
        with pytest.raises(ValueError):
            lin(Tensor(np.zeros((2, 5), dtype=np.float32)))


class TestAttention:
    def test_single_key_passes_value_through_projection(self):
        mha = nn.MultiHeadAttention(8, 2, rng_for(4))
        q = Tensor(rng_for(5).standard_normal((2, 3, 8)).astype(np.float32))
        kv = Tensor(rng_for(6).standard_normal((2, 1, 8)).astype(np.float32))
        out = mha(q, kv, kv)
        # softmax over one key is 1, so every query row sees the same value
        expected = mha.proj_out(mha.proj_v(kv)).data
        np.testing.assert_allclose(out.data, np.broadcast_to(expected, out.shape), rtol=1e-5, atol=1e-6)
        assert np.allclose(mha.last_weights, 1.0)

    def test_uniform_keys_give_uniform_weights(self):
        mha = nn.MultiHeadAttention(8, 2, rng_for(7))
        q = Tensor(rng_for(8).standard_normal((1, 2, 8)).astype(np.float32))
        k = Tensor(np.ones((1, 5, 8), dtype=np.float32))
        v = Tensor(rng_for(9).standard_normal((1, 5, 8)).astype(np.float32))
        mha(q, k, v)
        np.testing.assert_allclose(mha.last_weights, 0.2, rtol=0, atol=1e-6)

    def test_weight_rows_sum_to_one(self):
        mha = nn.MultiHeadAttention(8, 4, rng_for(10))
        q = Tensor(rng_for(11).standard_normal((3, 4, 8)).astype(np.float32))
        k = Tensor(rng_for(12).standard_normal((3, 6, 8)).astype(np.float32))
        mha(q, k, k)
        sums = mha.last_weights.sum(axis=-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)
        assert (mha.last_weights >= 0).all()

    def test_gradient_matches_finite_differences(self):
        mha = nn.MultiHeadAttention(8, 2, rng_for(13))
        x = rng_for(14).standard_normal((2, 3, 8))
        report = nn.grad_check(mha, [x, x, x])
        assert report.passed, report.per_tensor

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ValueError):
            nn.MultiHeadAttention(9, 2, rng_for(0))


class TestConv:
    def test_conv2d_identity_kernel(self):
        x = Tensor(rng_for(15).standard_normal((1, 2, 6, 6)).astype(np.float32))
        w = np.zeros((2, 2, 1, 1), dtype=np.float32)
        w[0, 0, 0, 0] = 1.0
        w[1, 1, 0, 0] = 1.0
        out = ad.conv2d(x, Tensor(w))
        np.testing.assert_allclose(out.data, x.data, atol=0)

    def test_conv2d_edge_kernel_zero_on_constant(self):
        x = Tensor(np.full((1, 1, 8, 8), 3.0, dtype=np.float32))
        lap = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float32).reshape(1, 1, 3, 3)
        out = ad.conv2d(x, Tensor(lap))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-5)

    def test_conv2d_gradient(self):
        conv = nn.Conv2d(2, 3, 3, rng_for(16), stride=2, padding=1)
        report = nn.grad_check(conv, [rng_for(17).standard_normal((1, 2, 5, 5))])
        assert report.passed, report.per_tensor

    def test_conv3d_identity_kernel(self):
        x = Tensor(rng_for(18).standard_normal((1, 1, 4, 4, 4)).astype(np.float32))
        w = np.ones((1, 1, 1, 1, 1), dtype=np.float32)
        out = ad.conv3d(x, Tensor(w))
        np.testing.assert_allclose(out.data, x.data, atol=0)

    def test_conv3d_gradient(self):
        conv = nn.Conv3d(2, 2, 3, rng_for(19), stride=1, padding=1)
        report = nn.grad_check(conv, [rng_for(20).standard_normal((1, 2, 4, 4, 4))])
        assert report.passed, report.per_tensor

    def test_channel_mismatch_raises(self):
        with pytest.raises(ValueError):
            ad.conv2d(Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32)),
                      Tensor(np.zeros((2, 2, 3, 3), dtype=np.float32)))


class TestAdam:
    def test_zero_grads_leave_params_unchanged(self):
        p = np.array([1.0, 2.0], dtype=np.float32)
        ref = p.copy()
        nn.adam_step([p], [np.zeros(2, dtype=np.float32)], {}, lr=0.1)
        np.testing.assert_allclose(p, ref, atol=0)

    def test_quadratic_convergence(self):
        # run the optimizer as its own oracle on f(x) = (x - 3)^2
        x = Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
        opt = nn.Adam([x], lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            loss = (x - 3.0) * (x - 3.0)
            loss.backward()
            opt.step()
        assert abs(x.data[0] - 3.0) < 1e-3

    def test_identical_runs_identical_trajectories(self):
        def run():
            r = rng_for(21)
            p = Tensor(r.standard_normal(4).astype(np.float32), requires_grad=True)
            opt = nn.Adam([p], lr=0.05)
            trace = []
            for _ in range(20):
                opt.zero_grad()
                loss = ad.sum_(p * p)
                loss.backward()
                opt.step()
                trace.append(p.data.copy())
            return np.stack(trace)

        np.testing.assert_array_equal(run(), run())


class TestSoftmax:
    def test_rows_sum_to_one_and_nonnegative(self):
        for seed in range(5):
            x = Tensor(rng_for(seed).standard_normal((6, 9)).astype(np.float32) * 10)
            s = ad.softmax(x, axis=-1)
            assert (s.data >= 0).all()
            np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_zero_input_chain_gradcheck(self):
        lin = nn.Linear(4, 4, rng_for(22))
        report = nn.grad_check(
            lin, [np.zeros((3, 4))],
            forward=lambda ts: ad.softmax(lin(ts[0]), axis=-1))
        assert report.passed, report.per_tensor


class _WrongGradModule(nn.Module):
    """Negative-control fixture: forward is x*w but backward doubles the input grad."""

    def __init__(self):
        super().__init__()
        self.w = self.param("w", np.array([2.0], dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        out = Tensor(x.data * self.w.data)
        out.requires_grad = True
        out._parents = (x, self.w)
        out._backward = lambda g: (2.0 * g * self.w.data, (g * x.data).sum(keepdims=True))
        return out


class TestGradCheck:
    def test_deliberately_wrong_gradient_fails(self):
        report = nn.grad_check(_WrongGradModule(), [rng_for(23).standard_normal(5)])
        assert not report.passed
        assert report.failures

    def test_mlp_head_passes(self):
        mlp = nn.MLP([6, 8, 4, 1], rng_for(24), activation="leaky_relu", zero_init_last=True)
        report = nn.grad_check(mlp, [rng_for(25).standard_normal((3, 6))])
        assert report.passed, report.per_tensor


class TestOps:
    @pytest.mark.parametrize("seed", range(4))
    def test_elementwise_and_reduction_grads(self, seed):
        x = rng_for(seed + 100).uniform(0.5, 4.0, (3, 4))  # strictly inside log/sqrt domain

        def forward(ts):
            t = ts[0]
            y = ad.exp(ad.log(t) * 0.5) + ad.sqrt(t) * ad.sin(t) - ad.cos(t) / (t + 1.0)
            y = ad.tanh(y) + ad.sigmoid(y) + ad.leaky_relu(y, 0.01)
            return ad.mean(y * y, axis=0)

        report = nn.grad_check(None, [x], forward=forward)
        assert report.passed, report.per_tensor

    def test_concat_stack_take_grads(self):
        r = rng_for(200)
        a, b = r.standard_normal((2, 3)), r.standard_normal((2, 3))
        idx = np.array([0, 1, 1])

        def forward(ts):
            cat = ad.concat([ts[0], ts[1]], axis=1)
            stk = ad.stack([ts[0], ts[1]], axis=0)
            tak = ad.take(ts[0], idx)
            return ad.sum_(cat) + ad.sum_(stk * stk) + ad.sum_(tak)

        report = nn.grad_check(None, [a, b], forward=forward)
        assert report.passed, report.per_tensor

    def test_batched_matmul_grads(self):
        r = rng_for(201)
        a = r.standard_normal((2, 3, 4))
        b = r.standard_normal((2, 4, 5))
        report = nn.grad_check(None, [a, b], forward=lambda ts: ad.matmul(ts[0], ts[1]))
        assert report.passed, report.per_tensor

    def test_layer_norm_grads(self):
        ln = nn.LayerNorm(6)
        report = nn.grad_check(ln, [rng_for(202).standard_normal((4, 6))])
        assert report.passed, report.per_tensor

    def test_forward_deterministic(self):
        mlp = nn.MLP([5, 7, 2], rng_for(26))
        x = Tensor(rng_for(27).standard_normal((4, 5)).astype(np.float32))
        np.testing.assert_array_equal(mlp(x).data, mlp(x).data)

    def test_no_grad_blocks_tape(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with ad.no_grad():
            y = x * 2.0
        assert y._parents == ()
        assert not y.requires_grad


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        mlp = nn.MLP([3, 4, 2], rng_for(28))
        path = tmp_path / "model.ckpt"
        nn.save_checkpoint(path, mlp.state_dict(), {"step": 7, "note": "x"})
        arrays, meta = nn.load_checkpoint(path)
        assert meta["step"] == 7
        fresh = nn.MLP([3, 4, 2], rng_for(999))
        fresh.load_state_dict(arrays)
        x = Tensor(rng_for(29).standard_normal((2, 3)).astype(np.float32))
        np.testing.assert_array_equal(mlp(x).data, fresh(x).data)

    def test_bytes_deterministic(self, tmp_path):
        mlp = nn.MLP([3, 4, 2], rng_for(30))
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        nn.save_checkpoint(p1, mlp.state_dict(), {"step": 1})
        nn.save_checkpoint(p2, mlp.state_dict(), {"step": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_state_dict_mismatch_raises(self, tmp_path):
        mlp = nn.MLP([3, 4, 2], rng_for(31))
        state = mlp.state_dict()
        state.pop(next(iter(state)))
        with pytest.raises(ValueError):
            mlp.load_state_dict(state)
