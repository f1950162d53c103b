import math

import numpy as np
import pytest

from flowkl import autodiff as ad
from flowkl.errors import DomainError, NumericError
from flowkl.estimators import (McConfig, RegularityProfile, bound_check, bound_constants, cauchy_schwarz_ok,
                               closed_form_bound, flow_error, identity_curves, identity_integrand,
                               kl_bound_from_constants, kl_mc, score_gap, tv_from_kl)
from flowkl.ode import IvpConfig, trapezoid
from flowkl.paths import (LinearField, Schedule, TimeGrid, gaussian_kl, pair_integrand, perturbed_field, sigma_p)

A1, A3 = Schedule.from_id("a1"), Schedule.from_id("a3")
FAST = McConfig(n=5000, grid=TimeGrid.uniform(11), ode=IvpConfig(100))


def within(est, se, ref, k=3.0):
    return abs(est - ref) <= k * se


class RotatedField:
    """``a(t) x + c J x`` with ``J`` a quarter turn; it preserves isotropic Gaussians."""

    def __init__(self, s, c):
        self.base, self.c = LinearField(s), c

    def __call__(self, x, t):
        return self.base(x, t) + self.c * ad.stack([-x[..., 1], x[..., 0]], axis=-1)


class TestKl:
    def test_reference_pair(self):
        est, se = kl_mc(A1, LinearField(A3), 1.0, McConfig(n=50000))
        assert within(est, se, gaussian_kl(sigma_p(A1, 1.0), 1.0))
        assert within(est, se, 1.29908)

    def test_same_field_is_zero(self):
        est, se = kl_mc(A1, LinearField(A1), 0.7, FAST)
        assert abs(est) <= max(3 * se, 1e-8)

    def test_time_zero_exact(self):
        assert kl_mc(A1, LinearField(A3), 0.0, FAST) == (0.0, 0.0)

    def test_domain(self):
        with pytest.raises(DomainError):
            kl_mc(A1, LinearField(A3), 1.5, FAST)

    def test_numeric_error_propagates(self):
        def bad(x, t):
            return ad.sqrt(x - 100.0)

        with np.errstate(invalid="ignore"), pytest.raises(NumericError) as info:
            kl_mc(A1, bad, 0.5, FAST)
        assert "0.5" in str(info.value)


class TestIntegrand:
    @pytest.mark.parametrize("t", [0.3, 0.6, 1.0])
    def test_closed_form_pair(self, t):
        est, se = identity_integrand(A1, LinearField(A3), t, McConfig(n=20000))
        assert within(est, se, pair_integrand(A1, A3, t))

    def test_same_field_is_zero(self):
        est, se = identity_integrand(A3, LinearField(A3), 0.8, FAST)
        assert abs(est) <= max(3 * se, 1e-8)

    def test_rotation_is_orthogonal(self):
        est, se = identity_integrand(A3, RotatedField(A3, 0.7), 1.0, FAST)
        assert abs(est) <= max(3 * se, 1e-6)


class TestCurves:
    def test_analytic_pair_tracks(self):
        rep = identity_curves(A1, LinearField(A3), FAST)
        assert rep.tracking_ok
        assert rep.cum_integral[0] == 0.0 and rep.kl_hat[0] == 0.0
        assert np.all(rep.kl_se >= 0) and np.all(rep.cum_se >= 0)

    def test_same_field_flat(self):
        rep = identity_curves(A1, LinearField(A1), FAST)
        assert np.max(np.abs(rep.kl_hat)) <= 1e-8 and np.max(np.abs(rep.cum_integral)) <= 1e-8

    def test_common_random_numbers_bitwise(self):
        a = identity_curves(A1, LinearField(A3), FAST)
        b = identity_curves(A1, LinearField(A3), FAST)
        for name in ("kl_hat", "kl_se", "g_hat", "cum_integral", "cum_se", "gap_t"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    def test_independent_draws_change_estimates(self):
        indep = McConfig(n=5000, grid=TimeGrid.uniform(11), ode=IvpConfig(100), common_random_numbers=False)
        a = identity_curves(A1, LinearField(A3), FAST)
        b = identity_curves(A1, LinearField(A3), indep)
        assert not np.array_equal(a.kl_hat, b.kl_hat)
        # correlated propagation is the linear upper bound of the quadrature sum
        assert a.cum_se[-1] >= np.sqrt(np.sum((0.05 * a.g_se[1:]) ** 2))


class TestFlowErrorAndGap:
    def test_same_field(self):
        fe = flow_error(A3, LinearField(A3), FAST)
        assert fe.total == 0.0 and np.all(fe.per_point == 0.0)
        big_s, gap_t, _ = score_gap(A3, LinearField(A3), FAST)
        assert abs(big_s) <= 1e-10

    def test_perturbed_flow_error(self):
        cfg = McConfig(n=50000, grid=TimeGrid.uniform(21), ode=IvpConfig(100))
        fe = flow_error(A3, perturbed_field(A3, 0.1), cfg)
        assert within(fe.per_point_sq[-1], fe.per_point_sq_se[-1], 0.02)
        assert fe.per_point[-1] == pytest.approx(math.sqrt(0.02), rel=0.05)
        ts = cfg.grid.points
        ref = math.sqrt(trapezoid(0.01 * 2 * sigma_p(A3, ts) ** 2, cfg.grid))
        assert within(fe.total, fe.total_se, ref)

    def test_flow_error_not_short_circuited_at_zero(self):
        fe = flow_error(A3, perturbed_field(A3, 0.1), FAST)
        assert fe.per_point_sq[0] > 0.0

    def test_perturbed_gap(self):
        cfg = McConfig(n=50000, grid=TimeGrid.uniform(3), ode=IvpConfig(100))
        rep = identity_curves(A3, perturbed_field(A3, 0.1), cfg)
        assert rep.gap_t[0] == 0.0
        assert within(rep.gap_t[-1], rep.gap_se[-1], 0.06572, k=3.0) or abs(rep.gap_t[-1] - 0.06572) <= 1e-5


class TestBound:
    def test_zero_perturbation(self):
        rep = bound_check(A3, LinearField(A3), FAST)
        assert rep.satisfied
        assert abs(rep.kl_terminal) <= 1e-8 and rep.bound_rhs == 0.0

    @pytest.mark.parametrize("beta", [0.05, 0.2])
    def test_perturbed_satisfied(self, beta):
        rep = bound_check(A3, perturbed_field(A3, beta), FAST)
        assert rep.satisfied and cauchy_schwarz_ok(rep)

    def test_closed_form_sweep(self):
        grid = TimeGrid.uniform(201)
        for beta in np.arange(0.0, 0.2001, 0.025):
            cf = closed_form_bound(A3, A3.shifted(beta), grid)
            assert cf.satisfied
        assert closed_form_bound(A3, A3, grid).bound_rhs == 0.0


class TestConstants:
    def test_zero_profile(self):
        assert bound_constants(RegularityProfile.constant(), TimeGrid.uniform()) == (0.0, 0.0)

    def test_unit_profile(self):
        # growth exponent is int(L + K + B_p M) = 3
        a1, a2 = bound_constants(RegularityProfile.constant(1, 1, 1, 1, 1, 1), TimeGrid.uniform())
        assert a1 == pytest.approx(4 * math.e ** 3, rel=1e-12)
        assert a2 == pytest.approx(math.e ** 3, rel=1e-12)

    def test_exponent_two_profile(self):
        a1, a2 = bound_constants(RegularityProfile.constant(1, 0, 1, 1, 1, 1), TimeGrid.uniform())
        assert a1 == pytest.approx(4 * math.e ** 2, rel=1e-12)
        assert a2 == pytest.approx(math.e ** 2, rel=1e-12)

    @pytest.mark.parametrize("name", ["L", "K", "B_p", "M", "H", "U_p"])
    def test_monotone_in_each_function(self, name):
        grid = TimeGrid.uniform(101)
        base = dict(L=0.5, K=0.3, B_p=0.7, M=0.2, H=0.4, U_p=0.6)
        lo = bound_constants(RegularityProfile.constant(**base), grid)
        prof = RegularityProfile.constant(**base)
        bump = lambda t: base[name] + np.exp(-((np.asarray(t) - 0.5) / 0.1) ** 2)
        hi = bound_constants(RegularityProfile(**{**{k: getattr(prof, k) for k in base}, name: bump}), grid)
        assert hi[0] >= lo[0] and hi[1] >= lo[1]
        assert hi != lo

    def test_negative_profile_rejected(self):
        with pytest.raises(DomainError):
            bound_constants(RegularityProfile.constant(L=-1.0), TimeGrid.uniform())

    def test_bound_from_constants(self):
        assert kl_bound_from_constants(2.0, 3.0, 0.1) == pytest.approx(0.23)


class TestPinsker:
    def test_reference_values(self):
        assert tv_from_kl(0.0) == 0.0
        assert tv_from_kl(2.0) == 1.0
        assert tv_from_kl(1.29908) == pytest.approx(0.80595, abs=1e-5)

    def test_negative(self):
        with pytest.raises(DomainError):
            tv_from_kl(-0.1)
