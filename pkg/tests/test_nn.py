import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recal import tensor as T
from recal.errors import ContractError, DomainError, FormatError, ShapeError
from recal.gradcheck import model_loss_gradients, numeric_grad, within_tolerance
from recal.nn import (
    BatchNormState, LayerSpec, Model, batchnorm_forward, conv2d_forward, convnet, load_model,
    mlp, model_forward, save_model, softmax_rows, xavier_init,
)
from recal.tensor import Tensor


def naive_conv(x, w, b, stride, pad):
    M, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1
    out = np.zeros((M, O, Ho, Wo))
    for m in range(M):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    out[m, o, i, j] = np.sum(xp[m, :, i * stride:i * stride + k, j * stride:j * stride + k] * w[o]) + b[o]
    return out


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)

    def test_large_logit_no_overflow(self):
        p = softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(p))
        assert p[0, 0] == 1.0 and p[0, 1] < 1e-300

    def test_shift_invariance(self):
        r = np.random.default_rng(0).normal(size=(5, 4))
        np.testing.assert_allclose(softmax_rows(Tensor(r + 7.3)).data, softmax_rows(Tensor(r)).data, atol=1e-12)

    def test_non_finite(self):
        with pytest.raises(DomainError):
            softmax_rows(Tensor([[np.inf, 0.0]]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_rows_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        r = rng.uniform(-500, 500, size=(rng.integers(1, 8), rng.integers(1, 8)))
        p = softmax_rows(Tensor(r)).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_gradient(self):
        r = np.random.default_rng(1).uniform(-2, 2, (4, 3))
        w = np.random.default_rng(2).normal(size=(4, 3))
        t = Tensor(r, requires_grad=True)
        T.tsum(softmax_rows(t) * Tensor(w)).backward()
        num = numeric_grad(lambda: float(np.sum(softmax_rows(Tensor(r)).data * w)), r)
        assert within_tolerance(t.grad, num)


class TestConv:
    def test_one_by_one_identity(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 4, 5))
        out = conv2d_forward(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones(self):
        out = conv2d_forward(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]))
        assert out.data.tolist() == [[[[9.0]]]]

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
    def test_matches_direct_loops(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x, w, b = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
        out = conv2d_forward(Tensor(x), Tensor(w), Tensor(b), stride, pad)
        np.testing.assert_allclose(out.data, naive_conv(x, w, b, stride, pad), atol=1e-12)

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            conv2d_forward(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), None)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (2, 1)])
    def test_gradient(self, stride, pad):
        rng = np.random.default_rng(5)
        x, w, b = rng.uniform(-2, 2, (2, 2, 5, 5)), rng.uniform(-2, 2, (3, 2, 3, 3)), rng.uniform(-2, 2, 3)
        proj = rng.normal(size=naive_conv(x, w, b, stride, pad).shape)
        tx, tw, tb = (Tensor(a, requires_grad=True) for a in (x, w, b))
        T.tsum(conv2d_forward(tx, tw, tb, stride, pad) * Tensor(proj)).backward()

        def f():
            return float(np.sum(naive_conv(x, w, b, stride, pad) * proj))

        for t, arr in ((tx, x), (tw, w), (tb, b)):
            assert within_tolerance(t.grad, numeric_grad(f, arr))


class TestBatchNorm:
    def test_standardized_input_passes_through(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(64, 3))
        x = (x - x.mean(0)) / x.std(0)
        # with the default eps=1e-5 the output is scaled by 1/sqrt(1+eps); a
        # negligible eps isolates the normalisation itself
        state = BatchNormState.fresh(3, eps=1e-14)
        np.testing.assert_allclose(batchnorm_forward(Tensor(x), state, True).data, x, atol=1e-6)

    def test_default_eps_scaling(self):
        x = np.random.default_rng(1).normal(size=(32, 4))
        out = batchnorm_forward(Tensor(x), BatchNormState.fresh(4), True).data
        np.testing.assert_allclose(out.var(0), x.var(0) / (x.var(0) + 1e-5), rtol=1e-12)

    def test_train_moments(self):
        x = np.random.default_rng(2).normal(3.0, 5.0, size=(50, 6))
        out = batchnorm_forward(Tensor(x), BatchNormState.fresh(6, eps=1e-14), True).data
        assert np.all(np.abs(out.mean(0)) <= 1e-10)
        np.testing.assert_allclose(out.var(0), 1.0, atol=1e-6)

    def test_beta_shift(self):
        state = BatchNormState.fresh(3)
        state.beta.data[:] = 5.0
        out = batchnorm_forward(Tensor(np.random.default_rng(3).normal(size=(10, 3))), state, True).data
        np.testing.assert_allclose(out.mean(0), 5.0, atol=1e-10)

    def test_eval_uses_initial_stats(self):
        x = np.random.default_rng(4).normal(size=(5, 2))
        out = batchnorm_forward(Tensor(x), BatchNormState.fresh(2), False).data
        np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5))

    def test_running_stats_update(self):
        state = BatchNormState.fresh(2)
        x = np.random.default_rng(5).normal(2.0, 3.0, size=(20, 2))
        batchnorm_forward(Tensor(x), state, True)
        np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(0))
        np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(0, ddof=1))
        assert np.all(state.running_var >= 0)

    def test_eval_does_not_mutate(self):
        state = BatchNormState.fresh(2)
        before = state.running_mean.copy(), state.running_var.copy()
        batchnorm_forward(Tensor(np.ones((4, 2))), state, False)
        np.testing.assert_array_equal(state.running_mean, before[0])
        np.testing.assert_array_equal(state.running_var, before[1])

    def test_single_sample_train(self):
        with pytest.raises(ContractError):
            batchnorm_forward(Tensor(np.ones((1, 2))), BatchNormState.fresh(2), True)

    @pytest.mark.parametrize("shape", [(8, 4), (4, 3, 2, 2)])
    @pytest.mark.parametrize("training", [True, False])
    def test_gradient(self, shape, training):
        rng = np.random.default_rng(6)
        x = rng.uniform(-2, 2, shape)
        proj = rng.normal(size=shape)
        F = shape[1]
        state = BatchNormState.fresh(F)
        state.gamma.data = rng.uniform(0.5, 1.5, F)
        state.beta.data = rng.uniform(-1, 1, F)
        state.running_mean = rng.normal(size=F)
        state.running_var = rng.uniform(0.5, 2, F)
        tx = Tensor(x, requires_grad=True)
        T.tsum(batchnorm_forward(tx, state, training) * Tensor(proj)).backward()

        def f():
            with T.no_grad():
                return float(np.sum(batchnorm_forward(Tensor(x), state, training).data * proj))

        for t, arr in ((tx, x), (state.gamma, state.gamma.data), (state.beta, state.beta.data)):
            assert within_tolerance(t.grad, numeric_grad(f, arr), abs_tol=1e-5, rel_tol=1e-5)


class TestXavier:
    def test_variance(self):
        w = xavier_init((100, 100), np.random.default_rng(0)).data
        assert w.size == 10_000
        assert abs(w.var() - 0.01) <= 0.2 * 0.01

    def test_support(self):
        w = xavier_init((30, 70), np.random.default_rng(1)).data
        assert np.all(np.abs(w) <= np.sqrt(6 / 100))

    def test_conv_fans(self):
        w = xavier_init((8, 4, 3, 3), np.random.default_rng(2)).data
        assert np.all(np.abs(w) <= np.sqrt(6 / ((4 + 8) * 9)))

    def test_deterministic(self):
        a = xavier_init((5, 3), np.random.default_rng(7)).data
        b = xavier_init((5, 3), np.random.default_rng(7)).data
        assert a.tobytes() == b.tobytes()

    def test_needs_two_dims(self):
        with pytest.raises(ShapeError):
            xavier_init((5,), np.random.default_rng(0))


class TestModel:
    def test_identity_linear(self):
        m = Model([LayerSpec.linear(2, 2)], (2,), feature_boundary=0)
        m.layers[0].params["weight"].data = np.eye(2)
        m.eval()
        np.testing.assert_array_equal(model_forward(m, np.array([[3.0, 4.0]])).data, [[3.0, 4.0]])

    def test_eval_deterministic(self):
        m = mlp(3, [5], 4, seed=1)
        x = np.random.default_rng(0).normal(size=(6, 3))
        m.train().forward(x)
        m.eval()
        assert m.forward(x).data.tobytes() == m.forward(x).data.tobytes()

    def test_eval_is_pure(self):
        m = mlp(3, [5], 4, seed=1).eval()
        before = {k: v.copy() for k, v in m.buffers().items()}
        m.forward(np.ones((4, 3)))
        for k, v in m.buffers().items():
            np.testing.assert_array_equal(v, before[k])

    def test_train_mutates_only_running_stats(self):
        m = mlp(3, [5], 4, seed=1).train()
        params = {k: v.data.copy() for k, v in m.parameters().items()}
        bufs = {k: v.copy() for k, v in m.buffers().items()}
        m.forward(np.random.default_rng(0).normal(size=(6, 3)))
        for k, v in m.parameters().items():
            np.testing.assert_array_equal(v.data, params[k])
        assert any(not np.array_equal(v, bufs[k]) for k, v in m.buffers().items())

    def test_linear_relu_gradient(self):
        m = Model([LayerSpec.linear(2, 3), LayerSpec.relu()], (2,), feature_boundary=1, seed=3)
        x = np.random.default_rng(1).uniform(-2, 2, (6, 2))
        for name, (a, n) in model_loss_gradients(m, x).items():
            assert within_tolerance(a, n), name

    @pytest.mark.parametrize("build", [
        lambda: mlp(4, [], 3),
        lambda: mlp(4, [7, 5], 3, head_relu=False),
        lambda: convnet((2, 8, 8), [3], 5),
        lambda: convnet((1, 9, 7), [2, 4], 2, fc=6),
    ])
    def test_output_shape(self, build):
        m = build()
        x = np.random.default_rng(0).normal(size=(5,) + m.input_shape)
        assert m.forward(x).shape == (5, m.K)
        assert m.embedding.data.reshape(5, -1).shape[1] == m.embedding_dim

    def test_chain_validation(self):
        with pytest.raises(ShapeError):
            Model([LayerSpec.linear(2, 3), LayerSpec.linear(4, 2)], (2,), feature_boundary=1)
        with pytest.raises(ShapeError):
            Model([LayerSpec.conv2d(1, 2, 3)], (1, 5, 5), feature_boundary=1)

    def test_single_sample_train_mode(self):
        with pytest.raises(ContractError):
            mlp(2, [3], 2).train().forward(np.ones((1, 2)))
        mlp(2, [3], 2).eval().forward(np.ones((1, 2)))

    def test_head_layout(self):
        kinds = [s.kind for s in mlp(2, [16], 3).specs]
        assert kinds == ["linear", "batchnorm", "relu", "linear", "batchnorm", "relu"]
        assert [s.kind for s in mlp(2, [16], 3, head_relu=False).specs][-1] == "batchnorm"

    def test_end_to_end_gradient(self):
        rng = np.random.default_rng(11)
        m = mlp(3, [4], 3, seed=2)
        for p in m.parameters().values():
            p.data = p.data + rng.uniform(-0.3, 0.3, p.shape)
        x = rng.uniform(-2, 2, (8, 3))
        for name, (a, n) in model_loss_gradients(m.train(), x, lam=1.0).items():
            assert within_tolerance(a, n), name


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        m = convnet((1, 6, 6), [2], 3, fc=4, seed=5)
        m.train().forward(np.random.default_rng(0).normal(size=(4, 1, 6, 6)))
        save_model(m, tmp_path / "m.rclm", extra={"norm": {"mu": 0.5, "sigma": 2.0}})
        m2, extra = load_model(tmp_path / "m.rclm")
        assert extra == {"norm": {"mu": 0.5, "sigma": 2.0}}
        for k, v in m.parameters().items():
            assert v.data.tobytes() == m2.parameters()[k].data.tobytes()
        for k, v in m.buffers().items():
            assert v.tobytes() == m2.buffers()[k].tobytes()
        save_model(m2, tmp_path / "m2.rclm", extra=extra)
        assert (tmp_path / "m.rclm").read_bytes() == (tmp_path / "m2.rclm").read_bytes()
        x = np.random.default_rng(1).normal(size=(3, 1, 6, 6))
        assert m.eval().forward(x).data.tobytes() == m2.forward(x).data.tobytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(FormatError):
            load_model(tmp_path / "bad")

    def test_truncated(self, tmp_path):
        m = mlp(2, [3], 2)
        save_model(m, tmp_path / "m.rclm")
        raw = (tmp_path / "m.rclm").read_bytes()
        (tmp_path / "t.rclm").write_bytes(raw[:-5])
        with pytest.raises(FormatError):
            load_model(tmp_path / "t.rclm")
