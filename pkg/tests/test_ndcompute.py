import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hoigaze import ndcompute as nd
from oracles import check_op_grad, conv1d_loop


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestBackward:
    def test_add_mul_chain(self):
        a = nd.Param("a", np.array(2.0))
        b = nd.Param("b", np.array(3.0))
        loss = a * b + a * a
        loss.backward()
        assert a.grad == pytest.approx(3.0 + 4.0)
        assert b.grad == pytest.approx(2.0)

    def test_shared_node_accumulates(self):
        a = nd.Param("a", np.array([1.0, -2.0]))
        y = nd.tanh(a)
        loss = nd.sum(y * y + y)
        loss.backward()
        t = np.tanh(a.data)
        np.testing.assert_allclose(a.grad, (2 * t + 1) * (1 - t * t))

    def test_grads_accumulate_across_calls(self):
        a = nd.Param("a", np.ones(3))
        nd.sum(a).backward()
        nd.sum(a).backward()
        np.testing.assert_array_equal(a.grad, [2.0, 2.0, 2.0])
        a.zero_grad()
        np.testing.assert_array_equal(a.grad, np.zeros(3))

    def test_constants_build_no_graph(self):
        x = nd.NdArray(np.ones(3))
        y = nd.tanh(x * 2.0)
        assert not y.requires_grad
        assert y._parents == ()

    def test_nonscalar_loss_rejected(self):
        with pytest.raises(ValueError):
            nd.backward(nd.Param("a", np.ones(2)))

    def test_deep_chain_does_not_recurse(self):
        a = nd.Param("a", np.array(1.0))
        y = a
        for _ in range(5000):
            y = y + 0.0
        y.backward()
        assert a.grad == pytest.approx(1.0)

    def test_item(self):
        assert nd.NdArray(np.array([[3.5]])).item() == 3.5
        with pytest.raises(ValueError):
            nd.NdArray(np.ones(2)).item()


class TestOpGradients:
    """Every differentiable op against central finite differences."""

    def test_elementwise(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
        check_op_grad(lambda x, y: nd.tanh(x * y - y + x), [a, b])

    def test_softmax_and_log_softmax(self, rng):
        x = rng.normal(size=(2, 3, 4))
        check_op_grad(lambda p: nd.softmax(p, axis=1), [x])
        check_op_grad(lambda p: nd.log_softmax(p, axis=1), [x])

    def test_reductions_and_shape_ops(self, rng):
        x = rng.normal(size=(2, 3, 4))
        check_op_grad(lambda p: nd.mean(p, axis=(0, 2)), [x])
        check_op_grad(lambda p: nd.sum(nd.transpose(p, (2, 0, 1)), axis=1, keepdims=True), [x])
        check_op_grad(lambda p: nd.reshape(nd.swap_last(p), (4, 6)), [x])
        check_op_grad(lambda p: p[:, 1:, ::2], [x])

    def test_concat(self, rng):
        check_op_grad(lambda a, b: nd.concat([a, b, a], axis=1),
                      [rng.normal(size=(2, 3)), rng.normal(size=(2, 1))])

    def test_where(self, rng):
        mask = rng.random((3, 4)) > 0.5
        check_op_grad(lambda a, b: nd.where(mask, a, b), [rng.normal(size=(3, 4)), rng.normal(size=(1, 4))])

    @pytest.mark.parametrize("sa,sb", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((3, 4), (2, 4, 5)),
                                       ((2, 3, 4), (2, 4, 5)), ((2, 3, 4), (1, 4, 5))])
    def test_matmul(self, rng, sa, sb):
        check_op_grad(nd.matmul, [rng.normal(size=sa), rng.normal(size=sb)])

    @pytest.mark.parametrize("left", [False, True])
    @pytest.mark.parametrize("axis", [0, 2, -1])
    def test_apply_along(self, rng, axis, left):
        x = rng.normal(size=(2, 3, 4))
        n = x.shape[axis]
        check_op_grad(lambda p, m: nd.apply_along(p, m, axis, left=left), [x, rng.normal(size=(n, n))])

    def test_conv1d(self, rng):
        check_op_grad(nd.conv1d, [rng.normal(size=(2, 3, 5)), rng.normal(size=(4, 3, 3)), rng.normal(size=4)])
        check_op_grad(nd.conv1d, [rng.normal(size=(3, 1)), rng.normal(size=(2, 3, 3)), rng.normal(size=2)])

    def test_layer_norm(self, rng):
        check_op_grad(nd.layer_norm, [rng.normal(size=(4, 5)), rng.normal(size=4), rng.normal(size=4)], tol=1e-5)
        check_op_grad(nd.layer_norm, [rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(3, 4)),
                                      rng.normal(size=(3, 4))], tol=1e-5)

    def test_normalize_columns(self, rng):
        x = rng.normal(size=(2, 3, 4))
        fb = np.zeros((2, 3, 4))
        check_op_grad(lambda p: nd.normalize_columns(p, fb)[0], [x])


class TestConv1d:
    def test_matches_loop_oracle(self, rng):
        x = rng.normal(size=(3, 7))
        w = rng.normal(size=(4, 3, 3))
        b = rng.normal(size=4)
        y = nd.conv1d(nd.NdArray(x), nd.NdArray(w), nd.NdArray(b)).data
        np.testing.assert_allclose(y, conv1d_loop(x, w, b), atol=1e-12)

    def test_frozen_values(self):
        # one channel, kernel [1, 2, 3], zero padding at both ends
        x = np.array([[1.0, 2.0, 3.0, 4.0]])
        w = np.array([[[1.0, 2.0, 3.0]]])
        y = nd.conv1d(nd.NdArray(x), nd.NdArray(w), nd.NdArray(np.array([0.5]))).data
        np.testing.assert_allclose(y, [[8.5, 14.5, 20.5, 11.5]])

    def test_batched_equals_per_sample(self, rng):
        x = rng.normal(size=(3, 2, 6))
        w, b = rng.normal(size=(5, 2, 3)), rng.normal(size=5)
        yb = nd.conv1d(nd.NdArray(x), nd.NdArray(w), nd.NdArray(b)).data
        for i in range(3):
            np.testing.assert_allclose(yb[i], conv1d_loop(x[i], w, b), atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(nd.ShapeError, match="channel"):
            nd.conv1d(nd.NdArray(np.ones((2, 5))), nd.NdArray(np.ones((1, 3, 3))), nd.NdArray(np.zeros(1)))


class TestMatmul:
    def test_inner_dim_mismatch(self):
        with pytest.raises(nd.ShapeError):
            nd.matmul(np.ones((2, 3)), np.ones((4, 2)))

    def test_apply_along_matches_einsum(self, rng):
        x, m = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 4))
        np.testing.assert_allclose(nd.apply_along(x, m, 2).data, np.einsum("abs,st->abt", x, m))
        np.testing.assert_allclose(nd.apply_along(x, m, 2, left=True).data, np.einsum("ts,abs->abt", m, x))


class TestLayerNormSoftmax:
    def test_layer_norm_standardises(self, rng):
        x = rng.normal(2.0, 3.0, size=(6, 5))
        y = nd.layer_norm(nd.NdArray(x), nd.NdArray(np.ones(6)), nd.NdArray(np.zeros(6))).data
        np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=0), 1.0, atol=1e-4)

    def test_layer_norm_affine_shape_checked(self):
        with pytest.raises(nd.ShapeError):
            nd.layer_norm(nd.NdArray(np.ones((3, 4))), nd.NdArray(np.ones(4)), nd.NdArray(np.zeros(4)))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
    def test_softmax_is_distribution(self, x):
        p = nd.softmax(nd.NdArray(x), axis=0).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.exp(nd.log_softmax(nd.NdArray(x), axis=0).data), p, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 3), elements=st.floats(-10, 10)), st.floats(-100, 100))
    def test_softmax_shift_invariant(self, x, c):
        a = nd.softmax(nd.NdArray(x), axis=0).data
        b = nd.softmax(nd.NdArray(x + c), axis=0).data
        np.testing.assert_allclose(a, b, atol=1e-9)


class TestDropout:
    def test_eval_mode_is_identity(self, rng):
        x = nd.NdArray(rng.normal(size=(4, 4)))
        assert nd.dropout(x, 0.3, False, None) is x

    def test_statistics(self, rng):
        x = nd.NdArray(np.ones((200, 500)))
        y = nd.dropout(x, 0.3, True, rng).data
        kept = y != 0
        assert abs(kept.mean() - 0.7) < 0.01
        np.testing.assert_allclose(y[kept], 1 / 0.7)
        assert abs(y.mean() - 1.0) < 0.02

    @pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
    def test_bad_rate(self, rate):
        with pytest.raises(nd.ConfigError):
            nd.dropout(nd.NdArray(np.ones(3)), rate, True, np.random.default_rng(0))

    def test_needs_rng_when_training(self):
        with pytest.raises(nd.ConfigError):
            nd.dropout(nd.NdArray(np.ones(3)), 0.3, True, None)


class TestNormalizeColumns:
    def test_fallback_on_zero_column(self):
        x = np.array([[[3.0, 0.0], [4.0, 0.0], [0.0, 0.0]]])
        fb = np.array([[[9.0, 0.0], [9.0, 1.0], [9.0, 0.0]]])
        y, bad = nd.normalize_columns(nd.NdArray(x), fb)
        np.testing.assert_allclose(y.data[0, :, 0], [0.6, 0.8, 0.0])
        np.testing.assert_allclose(y.data[0, :, 1], [0.0, 1.0, 0.0])
        np.testing.assert_array_equal(bad, [[False, True]])


class TestParams:
    def test_duplicate_names_rejected(self):
        ps = nd.ParamSet()
        ps.add("w", np.ones(2))
        with pytest.raises(ValueError):
            ps.add("w", np.ones(2))

    def test_training_precision_round_trip(self):
        ps = nd.ParamSet()
        ps.add("w", np.ones((2, 2)))
        with nd.training_precision(ps, np.float32):
            assert ps["w"].data.dtype == np.float32
            assert nd.NdArray([1.0]).data.dtype == np.float32
        assert ps["w"].data.dtype == np.float64
        assert nd.NdArray([1.0]).data.dtype == np.float64

    def test_checked_mode_rejects_nan(self):
        with nd.checked():
            with pytest.raises(ValueError):
                nd.NdArray([np.nan])
        nd.NdArray([np.nan])

    def test_uniform_init_bounds(self, rng):
        w = nd.uniform_init(rng, (64, 100), fan_in=25)
        assert np.abs(w).max() <= 0.2
        assert np.abs(w).max() > 0.19


class TestOptimisers:
    def test_lr_schedule(self):
        s = nd.OptimState()
        assert s.lr(0) == pytest.approx(0.005)
        assert s.lr(1) == pytest.approx(0.00475)
        assert s.lr(10) == pytest.approx(0.005 * 0.95 ** 10)

    def test_adam_scalar_oracle(self):
        # hand-rolled scalar Adam over three steps with gradients 1, -2, 0.5
        p = nd.Param("p", np.array(1.0))
        state = nd.OptimState(base_lr=0.1, decay=1.0)
        m = v = 0.0
        ref = 1.0
        for step, g in enumerate([1.0, -2.0, 0.5], start=1):
            p.grad = np.array(g)
            nd.adam_step([p], state, epoch=0)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 0.1 * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
            assert float(p.data) == pytest.approx(ref, abs=1e-12)
            if step == 1:
                # bias correction makes the first step exactly lr in size
                assert float(p.data) == pytest.approx(0.9, abs=1e-9)
        # worked by hand: 0.9 -> 0.93661 -> 0.95028
        assert float(p.data) == pytest.approx(0.950279, abs=1e-6)

    def test_adamw_decouples_decay(self):
        p = nd.Param("p", np.array(2.0))
        q = nd.Param("q", np.array(2.0))
        p.grad = q.grad = np.array(0.0)
        nd.adamw_step([p], nd.OptimState(base_lr=0.1, weight_decay=0.05), epoch=0)
        nd.adam_step([q], nd.OptimState(base_lr=0.1, weight_decay=0.05), epoch=0)
        assert float(p.data) == pytest.approx(2.0 * (1 - 0.1 * 0.05))
        assert float(q.data) == 2.0

    def test_adam_minimises_quadratic(self):
        p = nd.Param("p", np.array([3.0, -4.0]))
        state = nd.OptimState(base_lr=0.1, decay=1.0)
        for _ in range(500):
            p.zero_grad()
            nd.sum(p * p).backward()
            nd.adam_step([p], state, 0)
        assert np.abs(p.data).max() < 1e-2
