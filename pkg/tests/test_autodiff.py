import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wcmorph.autodiff import (
    AdamState,
    BatchNorm,
    Tensor,
    adam_step,
    angle,
    backward,
    batch_norm,
    concat,
    conv2d,
    cross_entropy,
    fully_connected,
    gradient_check,
    l2_normalize,
    leaky_relu,
    mse_loss,
    sigmoid,
    upsample_nearest,
)
from wcmorph.errors import DegenerateInputError, DimensionError


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def fd_grad(f, arr, h=1e-6):
    """Brute-force central differences over every coordinate of ``arr``."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


class TestFullyConnected:
    def test_identity(self):
        y = fully_connected(Tensor([1.0, 2.0]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(y.data, [1.0, 2.0])

    def test_hand_dot(self):
        y = fully_connected(Tensor([1.0, 1.0]), Tensor([[2.0, 3.0]]), Tensor([1.0]))
        np.testing.assert_array_equal(y.data, [6.0])

    def test_dimension_error(self):
        with pytest.raises(DimensionError):
            fully_connected(Tensor([1.0, 2.0, 3.0]), Tensor(np.ones((2, 2))))

    def test_gradients(self):
        rng = np.random.default_rng(0)
        x, W, b = param(rng, 5, 4), param(rng, 3, 4), param(rng, 3)
        err = gradient_check(lambda: (fully_connected(x, W, b) * fully_connected(x, W, b)).mean(), [x, W, b])
        assert err < 1e-6


class TestConv2d:
    def test_1x1_identity(self):
        x = np.arange(12.0).reshape(1, 3, 4)
        y = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), stride=1, padding=0)
        np.testing.assert_array_equal(y.data, x)

    def test_hand_convolution(self):
        y = conv2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), Tensor(np.ones((1, 1, 2, 2))))
        np.testing.assert_array_equal(y.data, [[[10.0]]])

    def test_stride2_shape(self):
        y = conv2d(Tensor(np.zeros((1, 32, 32))), Tensor(np.zeros((1, 1, 5, 5))), stride=2, padding=2)
        assert y.shape == (1, 16, 16)

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(np.zeros((1, 1, 5, 5))), padding=0)

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 7, 6))
        k = rng.normal(size=(4, 3, 3, 3))
        y = conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(y)
        for n in range(2):
            for o in range(4):
                for i in range(y.shape[2]):
                    for j in range(y.shape[3]):
                        ref[n, o, i, j] = np.sum(xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * k[o])
        np.testing.assert_allclose(y, ref, rtol=0, atol=1e-12)

    # both input-gradient paths: scatter (o > c or stride 2) and flipped kernel (stride 1, o <= c)
    @pytest.mark.parametrize(
        "c, o, kh, kw, s, p, size",
        [(2, 3, 3, 3, 1, 1, 5), (3, 2, 3, 3, 1, 1, 5), (3, 1, 3, 2, 1, 0, 4), (4, 4, 3, 3, 1, 2, 4), (3, 2, 3, 3, 2, 1, 6)],
    )
    def test_input_and_kernel_gradients(self, c, o, kh, kw, s, p, size):
        rng = np.random.default_rng(c * 100 + o * 10 + p)
        x, k = param(rng, 2, c, size, size), param(rng, o, c, kh, kw)
        w = Tensor(rng.normal(size=conv2d(x, k, s, p).shape))
        assert gradient_check(lambda: (conv2d(x, k, s, p) * w).sum(), [x, k], n_coords=400) < 1e-6

    @settings(max_examples=40, deadline=None)
    @given(h=st.integers(1, 12), p=st.integers(0, 3), kh=st.integers(1, 5), s=st.integers(1, 3))
    def test_output_shape_formula(self, h, p, kh, s):
        if kh > h + 2 * p:
            with pytest.raises(DimensionError):
                conv2d(Tensor(np.zeros((1, h, h))), Tensor(np.zeros((1, 1, kh, kh))), s, p)
            return
        y = conv2d(Tensor(np.zeros((1, h, h))), Tensor(np.zeros((1, 1, kh, kh))), s, p)
        assert y.shape[1] == (h + 2 * p - kh) // s + 1 == y.shape[2]


class TestUpsample:
    def test_factor_one(self):
        x = np.arange(4.0).reshape(1, 2, 2)
        np.testing.assert_array_equal(upsample_nearest(Tensor(x), 1).data, x)

    def test_replication(self):
        y = upsample_nearest(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2)
        expect = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        np.testing.assert_array_equal(y.data[0], expect)

    def test_backward_sums_replicas(self):
        x = Tensor(np.ones((1, 2, 2)), requires_grad=True)
        backward(upsample_nearest(x, 2).sum())
        np.testing.assert_array_equal(x.grad, 4.0)

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            upsample_nearest(Tensor(np.ones((1, 2, 2))), 0)


class TestActivations:
    def test_leaky_relu_values(self):
        assert leaky_relu(Tensor(2.0), 0.02).item() == 2.0
        assert leaky_relu(Tensor(-1.0), 0.02).item() == pytest.approx(-0.02, abs=1e-15)

    @pytest.mark.parametrize("x, expect", [(-3.0, 0.02), (0.0, 0.02), (1.5, 1.0)])
    def test_leaky_relu_subgradient(self, x, expect):
        t = Tensor(x, requires_grad=True)
        backward(leaky_relu(t, 0.02))
        assert t.grad == pytest.approx(expect)

    def test_sigmoid(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5
        assert abs(sigmoid(Tensor(50.0)).item() - 1.0) < 1e-12
        t = Tensor(0.0, requires_grad=True)
        backward(sigmoid(t))
        assert t.grad == pytest.approx(0.25, abs=1e-15)

    def test_sigmoid_extreme_inputs_stay_finite(self):
        y = sigmoid(Tensor([-800.0, 800.0]))
        assert np.all(np.isfinite(y.data))


class TestBatchNorm:
    def test_hand_normalization(self):
        y = batch_norm(Tensor([[-1.0], [1.0]]), Tensor([1.0]), Tensor([0.0]), np.zeros(1), np.ones(1), True)
        np.testing.assert_allclose(y.data[:, 0], [-1.0, 1.0], atol=1e-5)

    def test_already_standardized(self):
        x = np.array([[-1.0, 2.0], [1.0, -2.0]])
        x[:, 1] /= 2.0
        y = batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), True)
        np.testing.assert_allclose(y.data, x, atol=1e-5)

    def test_eval_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 4))
        y = batch_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), np.zeros(4), np.ones(4), False)
        np.testing.assert_allclose(y.data, x / np.sqrt(1 + 1e-5), rtol=1e-15)

    def test_batch_of_one_rejected_in_training(self):
        with pytest.raises(ValueError):
            batch_norm(Tensor([[1.0, 2.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), True)

    def test_running_stats_momentum(self):
        bn = BatchNorm(1)
        bn(Tensor([[1.0], [3.0]]))
        assert bn.running_mean[0] == pytest.approx(0.1 * 2.0)
        assert bn.running_var[0] == pytest.approx(0.9 + 0.1 * 1.0)

    def test_gradients_conv_layout(self):
        rng = np.random.default_rng(3)
        x, g, b = param(rng, 3, 2, 3, 3), param(rng, 2), param(rng, 2)
        w = rng.normal(size=(3, 2, 3, 3))
        err = gradient_check(
            lambda: (batch_norm(x, g, b, np.zeros(2), np.ones(2), True) * Tensor(w)).sum(), [x, g, b]
        )
        assert err < 1e-6


class TestLosses:
    def test_mse(self):
        assert mse_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == 0.0
        assert mse_loss(Tensor([0.0, 0.0]), Tensor([1.0, 1.0])).item() == 1.0
        a = Tensor([0.0], requires_grad=True)
        backward(mse_loss(a, Tensor([2.0])))
        np.testing.assert_array_equal(a.grad, [-4.0])

    def test_mse_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mse_loss(Tensor([1.0]), Tensor([1.0, 2.0]))

    def test_cross_entropy_against_fd(self):
        rng = np.random.default_rng(4)
        z = param(rng, 4, 5)
        labels = np.array([0, 3, 1, 4])
        assert gradient_check(lambda: cross_entropy(z, labels), [z]) < 1e-6


class TestNormalize:
    def test_values(self):
        np.testing.assert_allclose(l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8], rtol=1e-15)
        u = np.array([0.0, 1.0, 0.0])
        np.testing.assert_array_equal(l2_normalize(Tensor(u)).data, u)

    def test_degenerate(self):
        with pytest.raises(DegenerateInputError):
            l2_normalize(Tensor([0.0, 0.0]))

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=20))
    def test_unit_norm(self, values):
        x = np.array(values)
        if np.linalg.norm(x) <= 1e-12:
            return
        y = l2_normalize(Tensor(x)).data
        assert abs(np.linalg.norm(y) - 1.0) <= 1e-12


class TestBackward:
    def test_square(self):
        x = Tensor(3.0, requires_grad=True)
        backward(x * x)
        assert x.grad == 6.0

    def test_mse_chain(self):
        w = Tensor([0.0], requires_grad=True)
        backward(mse_loss(w, Tensor([2.0])))
        assert w.grad[0] == -4.0

    def test_non_scalar(self):
        with pytest.raises(ValueError):
            backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)

    def test_unreachable_grad_zero(self):
        a = Tensor([1.0], requires_grad=True)
        b = Tensor([1.0], requires_grad=True)
        backward((a * a).sum())
        np.testing.assert_array_equal(b.grad, [0.0])

    def test_accumulates_twice(self):
        rng = np.random.default_rng(5)
        x, k = param(rng, 2, 1, 6, 6), param(rng, 2, 1, 3, 3)
        loss = mse_loss(leaky_relu(conv2d(x, k, 1, 1), 0.02), Tensor(np.zeros((2, 2, 6, 6))))
        backward(loss)
        once = k.grad.copy()
        backward(loss)
        np.testing.assert_array_equal(k.grad, 2 * once)

    def test_composite_matches_central_differences(self):
        rng = np.random.default_rng(6)
        x, k = param(rng, 2, 1, 6, 6), param(rng, 3, 1, 3, 3)
        target = Tensor(rng.normal(size=(2, 3, 3, 3)))

        def loss():
            return mse_loss(leaky_relu(conv2d(x, k, 2, 1), 0.02), target)

        k.zero_grad()
        x.zero_grad()
        backward(loss())
        for t in (x, k):
            numeric = fd_grad(lambda: loss().item(), t.data)
            rel = np.abs(t.grad - numeric) / np.maximum(1.0, np.abs(t.grad))
            assert rel.max() < 1e-6

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            Tensor([np.nan])


@pytest.mark.parametrize(
    "name, build",
    [
        ("fully_connected", lambda r: ([param(r, 6), param(r, 4, 6), param(r, 4)], lambda x, W, b: fully_connected(x, W, b))),
        ("conv2d", lambda r: ([param(r, 2, 2, 7, 7), param(r, 3, 2, 5, 5)], lambda x, k: conv2d(x, k, 2, 2))),
        ("upsample", lambda r: ([param(r, 2, 2, 3, 3)], lambda x: upsample_nearest(x, 2))),
        ("leaky_relu", lambda r: ([param(r, 40)], lambda x: leaky_relu(x, 0.02))),
        ("sigmoid", lambda r: ([param(r, 40, scale=3.0)], sigmoid)),
        (
            "batch_norm",
            lambda r: ([param(r, 5, 4), param(r, 4), param(r, 4)], lambda x, g, b: batch_norm(x, g, b, np.zeros(4), np.ones(4), True)),
        ),
        ("l2_normalize", lambda r: ([param(r, 3, 8)], l2_normalize)),
        ("concat", lambda r: ([param(r, 2, 3), param(r, 2, 2)], lambda a, b: concat([a, b], axis=1))),
        (
            "angle",
            lambda r: ([param(r, 4, 6), param(r, 4, 6)], lambda a, b: angle(l2_normalize(a), l2_normalize(b))),
        ),
    ],
)
def test_primitive_gradients(name, build):
    """Analytic gradients against central differences over >= 100 coordinates."""
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    params, fn = build(rng)
    out_shape = fn(*params).shape
    weights = Tensor(rng.normal(size=out_shape))
    n = sum(p.size for p in params)
    err = gradient_check(lambda: (fn(*params) * weights).sum(), params, h=1e-6, n_coords=max(100, n))
    assert err < 1e-6


class TestGradientCheck:
    def test_quadratic_exact(self):
        rng = np.random.default_rng(7)
        w = param(rng, 10)
        A = rng.normal(size=(10, 10))
        Q = Tensor(A @ A.T)

        def loss():
            return (w * fully_connected(w, Q)).sum()

        assert gradient_check(loss, [w], h=1e-5) < 1e-9

    def test_step_out_of_range(self):
        w = Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            gradient_check(lambda: (w * w).sum(), [w], h=1.0)

    def test_non_scalar_loss(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            gradient_check(lambda: w * w, [w])


class TestAdam:
    def test_first_step_hand_computed(self):
        p = {"w": np.array([1.0])}
        state = AdamState(alpha=1e-4, beta1=0.0, beta2=0.9)
        adam_step(p, {"w": np.array([0.5])}, state)
        expected = 1.0 - 1e-4 * 0.5 / (math.sqrt(0.25) + 1e-8)
        assert p["w"][0] == pytest.approx(expected, abs=1e-18)
        assert state.step_count == 1

    def test_zero_gradient_fixed_point(self):
        p = {"w": np.array([1.0, -2.0]), "b": np.zeros((2, 2))}
        before = {k: v.copy() for k, v in p.items()}
        state = AdamState()
        for _ in range(5):
            adam_step(p, {k: np.zeros_like(v) for k, v in p.items()}, state)
        for k in p:
            np.testing.assert_array_equal(p[k], before[k])

    @pytest.mark.parametrize("beta1", [0.0, 0.5, 0.9])
    def test_constant_gradient_steps_do_not_grow(self, beta1):
        p = {"w": np.array([0.0])}
        state = AdamState(alpha=1e-3, beta1=beta1, beta2=0.9)
        adam_step(p, {"w": np.array([0.3])}, state)
        d1 = abs(p["w"][0])
        w1 = p["w"][0]
        adam_step(p, {"w": np.array([0.3])}, state)
        d2 = abs(p["w"][0] - w1)
        assert d2 <= d1 * (1 + 1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())
