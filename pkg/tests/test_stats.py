import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from styleddg.autodiff import Tensor
from styleddg.errors import ConfigError
from styleddg.model import CNN, ModelSpec, spec_from_channels
from styleddg.stats import (
    StyleVector,
    check_lemma1_bounds,
    device_style_vector,
    instance_stats,
    second_order_stats,
    style_vector_size,
)


def loop_instance_stats(x):
    B, C, H, W = x.shape
    mu = np.zeros((B, C))
    sig = np.zeros((B, C))
    for b in range(B):
        for c in range(C):
            s = 0.0
            for h in range(H):
                for w in range(W):
                    s += x[b, c, h, w]
            m = s / (H * W)
            v = 0.0
            for h in range(H):
                for w in range(W):
                    v += (x[b, c, h, w] - m) ** 2
            mu[b, c] = m
            sig[b, c] = math.sqrt(v / (H * W))
    return mu, sig


def loop_batch_var(s):
    B, C = s.shape
    out = np.zeros(C)
    for c in range(C):
        m = sum(s[b, c] for b in range(B)) / B
        out[c] = sum((s[b, c] - m) ** 2 for b in range(B)) / B
    return out


class TestInstanceStats:
    def test_constant_map(self):
        s = instance_stats(Tensor(np.full((1, 1, 3, 3), 5.0)), eps_var=0.0)
        assert s.mu.data.item() == 5.0
        assert s.sigma.data.item() == 0.0

    def test_hand_example(self):
        s = instance_stats(Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)), eps_var=0.0)
        assert s.mu.data.item() == 2.5
        assert abs(s.sigma.data.item() - math.sqrt(1.25)) < 1e-15

    def test_matches_loop_oracle(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
        s = instance_stats(Tensor(x), eps_var=0.0)
        mu, sig = loop_instance_stats(x)
        assert np.max(np.abs(s.mu.data - mu)) < 1e-12
        assert np.max(np.abs(s.sigma.data - sig)) < 1e-12

    def test_guard(self):
        s = instance_stats(Tensor(np.full((1, 1, 2, 2), 3.0)))
        assert abs(s.sigma.data.item() - math.sqrt(1e-5)) < 1e-15

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 5), st.integers(0, 10_000))
    def test_sigma_nonnegative(self, B, C, H, seed):
        x = np.random.default_rng(seed).standard_normal((B, C, H, H)) * 3
        assert (instance_stats(Tensor(x), 0.0).sigma.data >= 0).all()


class TestSecondOrder:
    def test_singleton_batch(self):
        x = np.random.default_rng(1).standard_normal((1, 4, 3, 3))
        vm, vs = second_order_stats(instance_stats(Tensor(x), 0.0))
        np.testing.assert_array_equal(vm.data, 0.0)
        np.testing.assert_array_equal(vs.data, 0.0)

    def test_population_divisor(self):
        x = np.zeros((2, 1, 1, 1))
        x[0] = 1.0
        x[1] = 3.0
        vm, _ = second_order_stats(instance_stats(Tensor(x), 0.0))
        assert vm.data.item() == 1.0

    def test_matches_loop_oracle(self):
        x = np.random.default_rng(2).standard_normal((5, 3, 4, 4))
        s = instance_stats(Tensor(x), 0.0)
        vm, vs = second_order_stats(s)
        mu, sig = loop_instance_stats(x)
        assert np.max(np.abs(vm.data - loop_batch_var(mu))) < 1e-12
        assert np.max(np.abs(vs.data - loop_batch_var(sig))) < 1e-12


class TestStyleVector:
    def test_size_for_resnet_channels(self):
        assert style_vector_size([64, 128, 256]) == 1792
        model = CNN(spec_from_channels([64, 128, 256], input_dims=(3, 8, 8)))
        x = np.random.default_rng(0).standard_normal((2, 3, 8, 8))
        sv = device_style_vector(model, model.init_params(0), x)
        assert sv.size == 1792
        assert sv.flat().size == 1792

    def test_identical_instances_zero_variance(self):
        model = CNN()
        x = np.repeat(np.random.default_rng(3).standard_normal((1, 3, 16, 16)), 4, axis=0)
        sv = device_style_vector(model, model.init_params(1), x)
        for ls in sv.layers:
            np.testing.assert_array_equal(ls.var_mu, 0.0)
            np.testing.assert_array_equal(ls.var_sigma, 0.0)

    def test_matches_loop_oracle(self):
        spec = spec_from_channels([3, 4], input_dims=(2, 6, 6), num_classes=3)
        model = CNN(spec)
        theta = model.init_params(4)
        x = np.random.default_rng(4).standard_normal((3, 2, 6, 6))
        _, _, acts = model.forward(theta, x, capture=True, requires_grad=False)
        sv = device_style_vector(model, theta, x)
        for ls, ell in zip(sv.layers, spec.hooks):
            mu, sig = loop_instance_stats(acts[ell].data)
            assert np.max(np.abs(ls.mu_bar - mu.mean(axis=0))) < 1e-12
            assert np.max(np.abs(ls.sigma_bar - sig.mean(axis=0))) < 1e-12
            assert np.max(np.abs(ls.var_mu - loop_batch_var(mu))) < 1e-12
            assert np.max(np.abs(ls.var_sigma - loop_batch_var(sig))) < 1e-12

    def test_is_detached(self):
        model = CNN()
        sv = device_style_vector(model, model.init_params(0), np.ones((2, 3, 16, 16)))
        assert all(isinstance(ls.mu_bar, np.ndarray) for ls in sv.layers)

    def test_bad_hook(self):
        model = CNN()
        with pytest.raises(ConfigError):
            device_style_vector(model, model.init_params(0), np.ones((2, 3, 16, 16)), layers=[4])

    def test_bytes_roundtrip(self):
        model = CNN()
        sv = device_style_vector(model, model.init_params(0), np.random.default_rng(0).standard_normal((4, 3, 16, 16)))
        buf = sv.to_bytes()
        assert len(buf) == 8 * (1 + 3) + 8 * sv.size
        assert np.frombuffer(buf[:32], "<i8").tolist() == [3, 8, 16, 32]
        back = StyleVector.from_bytes(buf)
        assert np.array_equal(back.flat(), sv.flat())


class TestStyleBounds:
    def test_random_batches_pass(self):
        model = CNN()
        rng = np.random.default_rng(0)
        for seed in range(5):
            theta = model.init_params(seed)
            x = rng.standard_normal((4, 3, 16, 16)) * rng.uniform(0.1, 5)
            _, _, acts = model.forward(theta, x, capture=True, requires_grad=False)
            U = [np.abs(acts[ell].data).max() for ell in model.spec.hooks]
            report = check_lemma1_bounds(device_style_vector(model, theta, x), U)
            assert all(r.passed for r in report)

    def test_zero_activations(self):
        sv = StyleVector.from_activations([np.zeros((2, 3, 4, 4))])
        (r,) = check_lemma1_bounds(sv, [0.0])
        assert r.passed and r.mu_bar_max == 0.0 and r.sigma_bar_max == 0.0

    def test_single_spike(self):
        h = np.zeros((1, 1, 4, 4))
        h[0, 0, 0, 0] = 10.0
        sv = StyleVector.from_activations([h])
        (r,) = check_lemma1_bounds(sv, [10.0])
        assert r.passed
        # direct recomputation: mean 10/16, std sqrt(100/16 - (10/16)^2)
        assert abs(r.mu_margin - (10.0 - 10.0 / 16)) < 1e-12
        assert abs(r.sigma_margin - (math.sqrt(2) * 10.0 - math.sqrt(100 / 16 - (10 / 16) ** 2))) < 1e-12

    def test_violation_detected(self):
        sv = StyleVector.from_activations([np.full((1, 1, 2, 2), 3.0)])
        (r,) = check_lemma1_bounds(sv, [1.0])
        assert not r.passed
