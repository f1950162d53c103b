import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from flowkl.errors import ArgumentError, DomainError
from flowkl.ode import trapezoid
from flowkl.paths import (GaussianPathState, LinearField, Schedule, TimeGrid, analytic_score,
                          closed_form_identity_curves, gaussian_kl, gaussian_logpdf, load_schedule_csv,
                          pair_flow_error_sq, pair_score_gap, path_state, perturbed_field, sample_pt,
                          schedule_eval, sigma_p)

A1, A2, A3 = (Schedule.from_id(k) for k in ("a1", "a2", "a3"))


class TestSchedules:
    def test_reference_values(self):
        assert schedule_eval(A3, 0.5) == 0.0
        assert schedule_eval(A1, 0.5) == pytest.approx(1.0, abs=1e-15)
        assert schedule_eval(A2, 0.0) == pytest.approx(0.2, abs=1e-15)

    def test_domain(self):
        for s in (A1, A2, A3):
            with pytest.raises(DomainError):
                schedule_eval(s, 1.5)
            with pytest.raises(DomainError):
                sigma_p(s, -0.1)

    def test_unknown_id(self):
        with pytest.raises(ArgumentError):
            Schedule.from_id("a9")

    @pytest.mark.parametrize("key", ["a1", "a2", "a3"])
    def test_antiderivative_matches_quadrature(self, key):
        s = Schedule.from_id(key)
        assert s.rate_integral(0.0) == 0.0
        for t in np.linspace(0, 1, 11):
            ref = oracles.simpson(oracles.A[key], 0.0, float(t), 2000) if t > 0 else 0.0
            assert abs(float(s.rate_integral(t)) - ref) <= 1e-10

    def test_sigma_reference_values(self):
        for s in (A1, A2, A3):
            assert sigma_p(s, 0.0) == 1.0
        assert sigma_p(A3, 1.0) == pytest.approx(1.0, abs=1e-15)
        assert sigma_p(A1, 1.0) == pytest.approx(math.exp(2 / math.pi), rel=1e-14)
        assert sigma_p(A1, 1.0) == pytest.approx(1.890081, abs=1e-6)
        assert sigma_p(A1, 1.0) == pytest.approx(oracles.sigma_numeric("a1", 1.0), rel=1e-10)

    @pytest.mark.parametrize("key", ["a1", "a2", "a3"])
    def test_log_sigma_derivative_is_rate(self, key):
        s = Schedule.from_id(key)
        ts = TimeGrid.uniform().points[1:-1]
        h = 1e-5
        fd = (np.log(sigma_p(s, ts + h)) - np.log(sigma_p(s, ts - h))) / (2 * h)
        assert np.max(np.abs(fd - schedule_eval(s, ts))) <= 1e-6

    def test_custom_schedule_simpson(self):
        s = Schedule.custom(lambda t: math.exp(t))
        assert s.rate_integral(0.0) == 0.0
        assert s.rate_integral(1.0) == pytest.approx(math.e - 1, abs=1e-10)

    def test_tabulated_integral_exact(self):
        s = Schedule.tabulated([0.0, 0.5, 1.0], [0.0, 1.0, 0.0])
        assert s.rate_integral(0.0) == 0.0
        assert s.rate_integral(0.25) == pytest.approx(0.0625, abs=1e-15)
        assert s.rate_integral(1.0) == pytest.approx(0.5, abs=1e-15)
        assert schedule_eval(s, 0.75) == pytest.approx(0.5)

    def test_tabulated_validation(self):
        with pytest.raises(ArgumentError):
            Schedule.tabulated([0.0, 0.5], [1.0, 2.0])
        with pytest.raises(ArgumentError):
            Schedule.tabulated([0.0, 0.0, 1.0], [1.0, 2.0, 3.0])

    def test_csv_schedule(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("t,a\n0,1\n1,1\n")
        s = load_schedule_csv(p)
        assert sigma_p(s, 1.0) == pytest.approx(math.e)

    def test_shifted(self):
        s = A3.shifted(0.1)
        assert sigma_p(s, 0.7) == pytest.approx(sigma_p(A3, 0.7) * math.exp(0.07), rel=1e-14)


class TestGaussian:
    def test_kl_reference_values(self):
        assert gaussian_kl(1.3, 1.3, 2) == 0.0
        kl = gaussian_kl(math.exp(2 / math.pi), 1.0, 2)
        assert kl == pytest.approx(1.2991673, abs=1e-7)
        assert abs(kl - 1.29908) <= 1e-3
        assert gaussian_kl(1.0, math.exp(0.2), 2) == pytest.approx(2 * (0.2 + math.exp(-0.4) / 2 - 0.5), rel=1e-14)
        assert gaussian_kl(1.0, math.exp(0.2), 2) == pytest.approx(0.07032, abs=1e-5)

    def test_kl_domain(self):
        with pytest.raises(DomainError):
            gaussian_kl(0.0, 1.0)
        with pytest.raises(DomainError):
            gaussian_kl(1.0, -1.0)

    @given(st.floats(0.1, 5), st.floats(0.1, 5), st.integers(1, 4))
    def test_kl_matches_general_formula(self, sp, sq, d):
        assert gaussian_kl(sp, sq, d) == pytest.approx(oracles.iso_gaussian_kl(sp, sq, d), rel=1e-9, abs=1e-12)
        assert gaussian_kl(sp, sq, d) >= 0.0

    def test_logpdf_matches_oracle(self):
        x = np.random.default_rng(1).normal(size=(20, 3))
        assert np.allclose(gaussian_logpdf(x, 1.7, [0.1, -0.2, 0.3]), oracles.gaussian_logpdf(x, 1.7, [0.1, -0.2, 0.3]))

    def test_score_reference_values(self):
        assert np.all(analytic_score(GaussianPathState(0.0, 1.0), np.zeros(2)) == 0.0)
        assert np.allclose(analytic_score(GaussianPathState(0.0, 2.0), [4.0, 0.0]), [-1.0, 0.0])
        st_ = path_state(A1, 1.0)
        assert np.allclose(analytic_score(st_, [1.0, 1.0]), [-0.27992, -0.27992], atol=1e-5)

    def test_score_is_logpdf_gradient(self):
        state = path_state(A2, 0.6)
        for x in np.random.default_rng(2).normal(size=(10, 2)):
            fd = oracles.fd_gradient(lambda y: gaussian_logpdf(y, state.sigma), x)
            assert np.max(np.abs(fd - analytic_score(state, x))) <= 1e-7

    def test_state_validation(self):
        with pytest.raises(DomainError):
            GaussianPathState(0.0, 0.0)


class TestSampling:
    def test_standard_normal_at_zero(self):
        x = sample_pt(A3, 0.0, 20000, 7)
        n = x.shape[0]
        var = x.var(axis=0, ddof=1)
        # stderr of a normal sample variance is sigma^2 sqrt(2 / (n - 1))
        assert np.all(np.abs(var - 1.0) <= 5 * math.sqrt(2 / (n - 1)))

    def test_variance_at_one(self):
        x = sample_pt(A1, 1.0, 100000, 3)
        s2 = math.exp(4 / math.pi)
        assert s2 == pytest.approx(3.57241, abs=1e-5)
        se = s2 * math.sqrt(2 / (x.shape[0] - 1))
        assert np.all(np.abs(x.var(axis=0, ddof=1) - s2) <= 5 * se)
        assert np.all(np.abs(x.mean(axis=0)) <= 5 * math.sqrt(s2 / x.shape[0]))

    def test_deterministic(self):
        a = sample_pt(A2, 0.3, 1000, 11)
        b = sample_pt(A2, 0.3, 1000, 11)
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, sample_pt(A2, 0.3, 1000, 12))

    def test_common_random_numbers_across_time(self):
        a = sample_pt(A2, 0.3, 100, 5)
        b = sample_pt(A2, 0.9, 100, 5)
        assert np.allclose(a / sigma_p(A2, 0.3), b / sigma_p(A2, 0.9))


class TestFields:
    def test_perturbed_zero_is_identity(self):
        f, g = LinearField(A3), perturbed_field(A3, 0.0)
        x = np.random.default_rng(0).normal(size=(5, 2))
        for t in (0.0, 0.3, 1.0):
            assert np.array_equal(f(x, t), g(x, t))

    def test_perturbed_scale(self):
        f = perturbed_field(A3, 0.1)
        assert f.scale(0.8) == pytest.approx(sigma_p(A3, 0.8) * math.exp(0.08), rel=1e-14)

    def test_perturbed_reference_values(self):
        s_q = A3.shifted(0.1)
        assert pair_flow_error_sq(A3, s_q, 1.0) == pytest.approx(0.02, rel=1e-12)
        sp, sq = 1.0, math.exp(0.1)
        assert pair_score_gap(A3, s_q, 1.0) == pytest.approx(2 * sp ** 2 * (1 / sp ** 2 - 1 / sq ** 2) ** 2)
        assert pair_score_gap(A3, s_q, 1.0) == pytest.approx(0.06572, abs=1e-5)


class TestIdentityCurves:
    def test_start_is_zero(self):
        kl, g = closed_form_identity_curves(A1, A3, TimeGrid.uniform())
        assert kl[0] == 0.0 and g[0] == 0.0

    def test_terminal(self):
        kl, _ = closed_form_identity_curves(A1, A3, TimeGrid.uniform())
        assert kl[-1] == pytest.approx(oracles.iso_gaussian_kl(math.exp(2 / math.pi), 1.0, 2), rel=1e-12)
        assert abs(kl[-1] - 1.29908) <= 1e-3

    @pytest.mark.parametrize("pair", [("a1", "a3"), ("a1", "a2"), ("a2", "a3"), ("a3", "a1")])
    def test_identity_every_grid_point(self, pair):
        s_p, s_q = (Schedule.from_id(k) for k in pair)
        grid = TimeGrid.uniform(201)
        kl, g = closed_form_identity_curves(s_p, s_q, grid)
        for k in range(1, grid.count):
            sub = TimeGrid(grid.points[: k + 1] / grid.points[k])
            cum = trapezoid(g[: k + 1], sub) * grid.points[k]
            assert abs(kl[k] - cum) <= 1e-4

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-0.3, 0.3))
    def test_identity_for_perturbations(self, beta):
        grid = TimeGrid.uniform(201)
        kl, g = closed_form_identity_curves(A3, A3.shifted(beta), grid)
        assert abs(kl[-1] - trapezoid(g, grid)) <= 1e-4


class TestTimeGrid:
    def test_uniform(self):
        g = TimeGrid.uniform()
        assert g.count == 201 and len(g) == 201
        assert g.points[0] == 0.0 and g.points[-1] == 1.0

    def test_rejects_bad(self):
        with pytest.raises(ArgumentError):
            TimeGrid(np.array([0.0, 0.3, 1.0]))
        with pytest.raises(ArgumentError):
            TimeGrid(np.array([0.1, 1.0]))
        with pytest.raises(ArgumentError):
            TimeGrid.uniform(1)
