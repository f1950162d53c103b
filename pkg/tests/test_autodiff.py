import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from flowkl import autodiff as ad
from flowkl.autodiff import Dual, Dual2, divergence, field_derivatives, grad_divergence, jacobian
from flowkl.errors import NumericError
from flowkl.mlp import mlp_init
from flowkl.paths import LinearField, Schedule, perturbed_field


def square_field(x, t):
    """(x1^2, x1 x2): Jacobian [[2 x1, 0], [x2, x1]], divergence 3 x1, grad div (3, 0)."""
    return ad.stack([x[..., 0] * x[..., 0], x[..., 0] * x[..., 1]], axis=-1)


def rich_field(x, t):
    """Exercises every elementary function, division and a constant matmul."""
    w = np.array([[0.3, -0.7], [1.1, 0.4]])
    y = x @ w.T
    a = ad.sin(y[..., 0]) * ad.exp(0.3 * y[..., 1]) + ad.sqrt(1.5 + ad.cos(x[..., 1]))
    b = ad.tanh(y[..., 1] * t) / (2.0 + x[..., 0] * x[..., 0]) - x[..., 1] ** 2
    return ad.stack([a, b], axis=-1)


def zero_field(x, t):
    return x * 0.0


FIELDS = {
    "square": square_field,
    "rich": rich_field,
    "a1": LinearField(Schedule.from_id("a1")),
    "a3-perturbed": perturbed_field(Schedule.from_id("a3"), 0.15),
}


def _probes(n=100, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 2)), rng.uniform(0, 1, n)


class TestDualArithmetic:
    def test_exp_sin_chain(self):
        xs = np.random.default_rng(3).uniform(-3, 3, 50)
        out = ad.exp(ad.sin(Dual(xs, np.ones((1, 50)))))
        assert np.max(np.abs(out.tan[0] - np.cos(xs) * np.exp(np.sin(xs)))) <= 1e-12

    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_product_and_quotient_rules(self, a, b):
        x = Dual(np.array(a), np.array([1.0]))
        y = Dual(np.array(b), np.array([0.0]))
        assert (x * y).tan[0] == pytest.approx(b)
        z = x / (2.5 + x * x)
        assert z.tan[0] == pytest.approx((2.5 - a * a) / (2.5 + a * a) ** 2, rel=1e-12, abs=1e-14)

    def test_dual2_square_second_coefficient(self):
        e = np.array([[0.6, -0.8]])
        x = Dual2(np.array([1.0, 2.0]), e, np.zeros_like(e))
        out = x[..., 0] * x[..., 0] + x[..., 1] * x[..., 1]
        # second directional derivative of |x|^2 is 2 |e|^2
        assert out.d2[0] == pytest.approx(2.0)
        assert out.d1[0] == pytest.approx(2 * (0.6 * 1.0 - 0.8 * 2.0))

    @pytest.mark.parametrize("fn,d1,d2", [
        (ad.exp, np.exp, np.exp),
        (ad.sin, np.cos, lambda v: -np.sin(v)),
        (ad.cos, lambda v: -np.sin(v), lambda v: -np.cos(v)),
        (ad.tanh, lambda v: 1 - np.tanh(v) ** 2, lambda v: -2 * np.tanh(v) * (1 - np.tanh(v) ** 2)),
        (ad.sqrt, lambda v: 0.5 / np.sqrt(v), lambda v: -0.25 * v ** -1.5),
    ])
    def test_elementary_second_order(self, fn, d1, d2):
        v = np.linspace(0.2, 2.0, 7)
        out = fn(Dual2(v, np.ones((1, 7)), np.zeros((1, 7))))
        assert np.allclose(out.d1[0], d1(v), rtol=1e-13)
        assert np.allclose(out.d2[0], d2(v), rtol=1e-12)

    @pytest.mark.parametrize("name", list(FIELDS))
    def test_zero_tangent_matches_plain(self, name):
        f = FIELDS[name]
        x, _ = _probes(10)
        plain = np.asarray(f(x, 0.4))
        d1 = f(Dual(x, np.zeros((2,) + x.shape)), 0.4)
        d2 = f(Dual2(x, np.zeros((3,) + x.shape), np.zeros((3,) + x.shape)), 0.4)
        assert np.array_equal(ad.value(d1), plain)
        assert np.array_equal(ad.value(d2), plain)


class TestQueries:
    def test_linear_reference_values(self):
        a3, a1 = LinearField(Schedule.from_id("a3")), LinearField(Schedule.from_id("a1"))
        x = np.array([0.7, -1.2])
        assert np.allclose(jacobian(a3, x, 0.5), 0.0)
        assert np.allclose(jacobian(a1, x, 0.5), np.eye(2), atol=1e-15)
        assert divergence(a1, x, 0.25) == pytest.approx(2 * np.sin(np.pi / 4))
        assert np.allclose(grad_divergence(a1, x, 0.3), 0.0)

    def test_square_field_reference(self):
        x = np.array([3.0, 2.0])
        assert np.array_equal(jacobian(square_field, x, 0.0), [[6.0, 0.0], [2.0, 3.0]])
        assert divergence(square_field, x, 0.0) == 9.0
        xs, _ = _probes(20)
        assert np.allclose(grad_divergence(square_field, xs, 0.0), [3.0, 0.0], atol=1e-14)

    def test_zero_field(self):
        x = np.ones(2)
        assert divergence(zero_field, x, 0.5) == 0.0
        assert np.all(grad_divergence(zero_field, x, 0.5) == 0.0)

    @pytest.mark.parametrize("name", list(FIELDS))
    def test_jacobian_vs_finite_differences(self, name):
        f = FIELDS[name]
        xs, ts = _probes()
        for x, t in zip(xs, ts):
            fd = oracles.fd_jacobian(f, x, t)
            assert oracles.rel_err(jacobian(f, x, t), fd, floor=1.0) <= 1e-6

    @pytest.mark.parametrize("name", list(FIELDS))
    def test_divergence_is_trace(self, name):
        f = FIELDS[name]
        xs, ts = _probes(20)
        for x, t in zip(xs, ts):
            assert abs(divergence(f, x, t) - np.trace(jacobian(f, x, t))) <= 1e-12

    @pytest.mark.parametrize("name", ["square", "rich"])
    def test_grad_divergence_vs_finite_differences(self, name):
        f = FIELDS[name]
        xs, ts = _probes(50)
        for x, t in zip(xs, ts):
            fd = oracles.fd_gradient(lambda y: float(divergence(f, y, t)), x)
            assert oracles.rel_err(grad_divergence(f, x, t), fd, floor=1.0) <= 1e-6

    def test_batched_matches_pointwise(self):
        xs, _ = _probes(15)
        val, jac, gd = field_derivatives(rich_field, xs, 0.6)
        for k in range(0, 15, 4):
            assert np.allclose(jac[k], jacobian(rich_field, xs[k], 0.6), rtol=1e-13)
            assert np.allclose(gd[k], grad_divergence(rich_field, xs[k], 0.6), rtol=1e-13)
        assert np.array_equal(val, rich_field(xs, 0.6))

    def test_dimension_generic(self):
        def f3(x, t):
            return ad.stack([x[..., 0] * x[..., 1], x[..., 1] * x[..., 2], x[..., 2] * x[..., 0] * x[..., 0]], axis=-1)

        x = np.array([0.5, -1.0, 2.0])
        _, jac, gd = field_derivatives(f3, x, 0.0)
        assert np.allclose(jac, oracles.fd_jacobian(f3, x, 0.0), atol=1e-8)
        # div = x2 + x3 + x1^2, so grad div = (2 x1, 1, 1)
        assert np.allclose(gd, [1.0, 1.0, 1.0])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_reports_coordinates(self):
        def bad(x, t):
            return ad.sqrt(x)

        with pytest.raises(NumericError) as info:
            jacobian(bad, np.array([1.0, 0.0]), 0.0)
        assert info.value.index


class TestNeuralField:
    def setup_method(self):
        self.m = mlp_init((3, 16, 16, 2), seed=4)

    def test_jacobian_vs_finite_differences(self):
        xs, ts = _probes()
        for x, t in zip(xs, ts):
            fd = oracles.fd_jacobian(self.m, x, t)
            assert oracles.rel_err(jacobian(self.m, x, t), fd, floor=1e-3) <= 1e-4

    def test_grad_divergence_vs_finite_differences(self):
        xs, ts = _probes(100, seed=9)
        for x, t in zip(xs, ts):
            fd = oracles.fd_gradient(lambda y: float(divergence(self.m, y, t)), x)
            assert oracles.rel_err(grad_divergence(self.m, x, t), fd, floor=1e-3) <= 1e-4

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_fused_pass_matches_generic_jets(self, seed):
        m = mlp_init((3, 8, 8, 8, 2), seed=seed)
        xs, _ = _probes(8, seed)
        generic = field_derivatives(m, xs, 0.37)
        fused = m.derivatives(xs, 0.37)
        for a, b in zip(generic, fused):
            assert np.allclose(a, b, rtol=1e-12, atol=1e-14)
