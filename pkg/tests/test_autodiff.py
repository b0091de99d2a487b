import math

import numpy as np
import pytest

from styleddg.autodiff import (
    Tensor,
    avg_pool2d,
    concat,
    conv2d,
    conv2d_reference,
    global_avg_pool,
    linear,
    relu,
    restyle,
    safe_sqrt,
    spatial_var,
    softmax_cross_entropy,
)
from styleddg.errors import InputError, ShapeError, StateError
from styleddg.gradcheck import max_rel_error, numeric_grad


def T(a, rg=False):
    return Tensor(np.asarray(a, dtype=float), requires_grad=rg)


class TestConv:
    def test_sum_of_ones(self):
        out = conv2d(T(np.ones((1, 1, 3, 3))), T(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 1, 1, 1)
        assert out.data.item() == 9.0

    def test_identity_kernel(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out = conv2d(T(x), T(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_direct_loop(self, stride, pad):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        got = conv2d(T(x), T(w), T(b), stride=stride, pad=pad).data
        want = conv2d_reference(x, w, b, stride=stride, pad=pad)
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) < 1e-12

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            conv2d(T(np.ones((1, 2, 4, 4))), T(np.ones((1, 3, 3, 3))))

    def test_bad_stride(self):
        with pytest.raises(ShapeError):
            conv2d(T(np.ones((1, 1, 4, 4))), T(np.ones((1, 1, 3, 3))), stride=0)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
    def test_gradients(self, stride, pad):
        rng = np.random.default_rng(0)
        x, w, b = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
        r = rng.standard_normal(conv2d_reference(x, w, b, stride, pad).shape)

        def f(xx, ww, bb):
            return (conv2d(xx, ww, bb, stride, pad) * r).sum()

        xt, wt, bt = T(x, True), T(w, True), T(b, True)
        f(xt, wt, bt).backward()
        for arr, t, which in ((x, xt, 0), (w, wt, 1), (b, bt, 2)):
            def g(v, which=which):
                args = [T(x), T(w), T(b)]
                args[which] = T(v)
                return f(*args).data.item()

            assert max_rel_error(t.grad, numeric_grad(g, arr)) < 1e-6


class TestElementwiseAndPooling:
    def test_relu(self):
        np.testing.assert_array_equal(relu(T([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_avg_pool_constant(self, k):
        out = avg_pool2d(T(np.full((2, 3, 8, 8), 7.0)), k)
        assert out.shape == (2, 3, 8 // k, 8 // k)
        np.testing.assert_array_equal(out.data, 7.0)

    def test_global_avg_pool(self):
        x = np.arange(2 * 3 * 4 * 4, dtype=float).reshape(2, 3, 4, 4)
        np.testing.assert_allclose(global_avg_pool(T(x)).data[..., 0, 0], x.mean(axis=(2, 3)))

    def test_linear_identity(self):
        x = np.random.default_rng(1).standard_normal((4, 5))
        out = linear(T(x), T(np.eye(5)), T(np.zeros(5)))
        np.testing.assert_array_equal(out.data, x)

    def test_linear_shape_error(self):
        with pytest.raises(ShapeError):
            linear(T(np.ones((2, 3))), T(np.ones((4, 5))))

    def test_pool_too_large(self):
        with pytest.raises(ShapeError):
            avg_pool2d(T(np.ones((1, 1, 2, 2))), 3)

    def test_safe_sqrt_zero_has_finite_grad(self):
        x = T([0.0, 4.0], True)
        safe_sqrt(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.25])

    def test_concat_and_getitem_grads(self):
        a, b = T(np.ones((2, 3)), True), T(np.ones((1, 3)), True)
        c = concat([a, b])
        (c[np.array([0, 0, 2])] * 2.0).sum().backward()
        np.testing.assert_array_equal(a.grad, [[4, 4, 4], [0, 0, 0]])
        np.testing.assert_array_equal(b.grad, [[2, 2, 2]])


    def test_getitem_permutation_grad(self):
        a = T(np.arange(6.0).reshape(3, 2), True)
        w = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        (a[np.array([2, 0, 1])] * w).sum().backward()
        np.testing.assert_array_equal(a.grad, w[[1, 2, 0]])


class TestFusedStyleOps:
    def test_spatial_var_value(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 4, 5))
        np.testing.assert_allclose(spatial_var(T(x)).data, x.var(axis=(2, 3)), atol=1e-14)

    def test_spatial_var_grad(self):
        x = np.random.default_rng(1).standard_normal((2, 2, 3, 3))
        w = np.random.default_rng(2).standard_normal((2, 2))
        xt = T(x, True)
        (spatial_var(xt) * w).sum().backward()
        num = numeric_grad(lambda v: float((v.var(axis=(2, 3)) * w).sum()), x)
        assert max_rel_error(xt.grad, num) < 1e-6

    def test_restyle_value(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 4, 4))
        mu, sig = rng.standard_normal((2, 3)), rng.uniform(0.5, 2, (2, 3))
        mt, st = rng.standard_normal(3), rng.uniform(0.5, 2, 3)
        want = (x - mu[..., None, None]) / sig[..., None, None] * st[None, :, None, None] + mt[None, :, None, None]
        np.testing.assert_allclose(restyle(T(x), mu, sig, mt, st).data, want, atol=1e-13)

    @pytest.mark.parametrize("target_rank", [1, 2])
    def test_restyle_grads(self, target_rank):
        rng = np.random.default_rng(target_rank)
        tshape = (3,) if target_rank == 1 else (2, 3)
        args = [
            rng.standard_normal((2, 3, 3, 3)),
            rng.standard_normal((2, 3)),
            rng.uniform(0.5, 2, (2, 3)),
            rng.standard_normal(tshape),
            rng.uniform(0.5, 2, tshape),
        ]
        w = rng.standard_normal((2, 3, 3, 3))
        ts = [T(a, True) for a in args]
        (restyle(*ts) * w).sum().backward()
        for k in range(5):
            def f(v, k=k):
                vals = list(args)
                vals[k] = v
                return float((restyle(*[T(a) for a in vals]).data * w).sum())

            assert max_rel_error(ts[k].grad, numeric_grad(f, args[k])) < 1e-6

    def test_restyle_shape_error(self):
        with pytest.raises(ShapeError):
            restyle(T(np.ones((2, 3, 2, 2))), np.zeros(3), np.ones(3), np.zeros(3), np.ones(3))


def _xent_oracle(logits, labels):
    total = 0.0
    for row, lab in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[lab]
    return total / len(labels)


class TestCrossEntropy:
    def test_uniform(self):
        loss = softmax_cross_entropy(T(np.zeros((3, 4))), np.array([0, 1, 3]))
        assert abs(loss.data.item() - math.log(4)) < 1e-12
        assert abs(loss.data.item() - 1.386294) < 1e-6

    def test_saturated(self):
        logits = np.zeros((2, 3))
        labels = np.array([2, 0])
        logits[[0, 1], labels] = 1000.0
        assert softmax_cross_entropy(T(logits), labels).data.item() < 1e-12

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(7)
        logits = rng.standard_normal((3, 5))
        labels = np.array([4, 0, 2])
        got = softmax_cross_entropy(T(logits), labels).data.item()
        assert abs(got - _xent_oracle(logits.tolist(), labels.tolist())) < 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(8)
        logits = rng.standard_normal((3, 5))
        labels = np.array([1, 1, 3])
        t = T(logits, True)
        softmax_cross_entropy(t, labels).backward()
        num = numeric_grad(lambda v: _xent_oracle(v.tolist(), labels.tolist()), logits)
        assert max_rel_error(t.grad, num) < 1e-6

    @pytest.mark.parametrize("labels", [[0, 5], [-1, 0]])
    def test_bad_labels(self, labels):
        with pytest.raises(InputError):
            softmax_cross_entropy(T(np.zeros((2, 5))), np.array(labels))


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = T(np.random.default_rng(0).standard_normal((2, 3, 4, 4)), True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_half_square_grad_is_x(self):
        v = np.random.default_rng(1).standard_normal((2, 3))
        x = T(v, True)
        (x.square().sum() * 0.5).backward()
        np.testing.assert_array_equal(x.grad, v)

    def test_backward_without_graph(self):
        with pytest.raises(StateError):
            T(1.0, True).backward()

    def test_backward_needs_scalar(self):
        x = T(np.ones(3), True)
        with pytest.raises(StateError):
            (x * 2.0).backward()

    def test_shared_subexpression_visited_once(self):
        x = T([3.0], True)
        y = x * x
        (y + y).sum().backward()
        np.testing.assert_array_equal(x.grad, [12.0])

    def test_broadcast_reduction(self):
        a = T(np.ones((2, 3)), True)
        b = T(np.ones((1, 3)), True)
        ((a * b) / b).sum().backward()
        np.testing.assert_allclose(b.grad, np.zeros((1, 3)), atol=1e-15)
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        x, w = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))

        def run():
            xt, wt = T(x, True), T(w, True)
            out = relu(conv2d(xt, wt, pad=1))
            avg_pool2d(out, 2).square().sum().backward()
            return out.data, xt.grad, wt.grad

        for a, b in zip(run(), run()):
            assert np.array_equal(a, b)
