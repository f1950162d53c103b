"""Isotropic Gaussian probability paths driven by linear velocity fields.

A scalar rate schedule ``a(t)`` defines the field ``u(x, t) = a(t) x``. Started
from ``N(0, I)`` it transports mass along ``p_t = N(0, sigma_p(t)^2 I)`` with
``sigma_p(t) = exp(int_0^t a)``, so KL divergences, scores and every moment
used by the estimators are available in closed form.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng
from .errors import ArgumentError, DomainError

DEFAULT_DIM = 2
DEFAULT_GRID = 201
_T_SLACK = 1e-12


class ScheduleId(str, enum.Enum):
    A1 = "a1"
    A2 = "a2"
    A3 = "a3"
    CUSTOM = "custom"


def _check_time(t):
    arr = np.asarray(t, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < -_T_SLACK) or np.any(arr > 1.0 + _T_SLACK):
        raise DomainError(f"time outside [0, 1]: {t!r}")


def adaptive_simpson(f: Callable[[float], float], a: float, b: float, tol: float = 1e-10, max_depth: int = 50) -> float:
    """Adaptive Simpson quadrature with absolute tolerance ``tol``."""

    def simpson(fa, fm, fb, lo, hi):
        return (hi - lo) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(lo, hi, fa, fm, fb, whole, eps, depth):
        mid = 0.5 * (lo + hi)
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, lo, mid)
        right = simpson(fm, frm, fb, mid, hi)
        delta = left + right - whole
        if depth <= 0 or abs(delta) <= 15.0 * eps:
            return left + right + delta / 15.0
        return (recurse(lo, mid, fa, flm, fm, left, eps / 2.0, depth - 1)
                + recurse(mid, hi, fm, frm, fb, right, eps / 2.0, depth - 1))

    if a == b:
        return 0.0
    fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
    return recurse(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, max_depth)


@dataclass(frozen=True)
class Schedule:
    """A named rate function ``a(t)`` on ``[0, 1]`` with its antiderivative.

    ``rate_integral(0) == 0``. Both callables accept scalars or arrays.
    """

    id: ScheduleId
    rate: Callable = field(repr=False)
    rate_integral: Callable = field(repr=False)
    name: str = ""

    def __call__(self, t):
        return schedule_eval(self, t)

    @property
    def label(self) -> str:
        return self.name or self.id.value

    def shifted(self, beta: float) -> "Schedule":
        """Schedule ``a(t) + beta``; its path scale is ``sigma_p(t) * exp(beta t)``."""
        rate, integral = self.rate, self.rate_integral
        return Schedule(
            ScheduleId.CUSTOM,
            lambda t: rate(t) + beta,
            lambda t: integral(t) + beta * np.asarray(t, dtype=float),
            name=f"{self.label}{beta:+g}",
        )

    @classmethod
    def from_id(cls, key: "str | ScheduleId") -> "Schedule":
        try:
            sid = ScheduleId(str(getattr(key, "value", key)).lower())
        except ValueError:
            raise ArgumentError(f"unknown schedule id {key!r}") from None
        if sid is ScheduleId.CUSTOM:
            raise ArgumentError("custom schedules need a rate function or a CSV table")
        return _BUILTIN[sid]

    @classmethod
    def custom(cls, rate: Callable[[float], float], name: str = "custom", tol: float = 1e-10) -> "Schedule":
        """Schedule from an arbitrary rate; the antiderivative is computed by adaptive Simpson."""

        def integral(t):
            arr = np.asarray(t, dtype=float)
            out = np.vectorize(lambda s: adaptive_simpson(lambda u: float(rate(u)), 0.0, float(s), tol))(arr)
            return out if out.ndim else float(out)

        return cls(ScheduleId.CUSTOM, rate, integral, name=name)

    @classmethod
    def zero(cls) -> "Schedule":
        return cls(
            ScheduleId.CUSTOM,
            lambda t: 0.0 * np.asarray(t, dtype=float),
            lambda t: 0.0 * np.asarray(t, dtype=float),
            name="zero",
        )

    @classmethod
    def tabulated(cls, ts, rates, name: str = "tabulated") -> "Schedule":
        """Piecewise-linear schedule through ``(t, a(t))`` pairs covering ``[0, 1]``.

        The antiderivative of the interpolant is exact (cumulative trapezoid
        plus the partial segment).
        """
        ts = np.asarray(ts, dtype=float)
        rates = np.asarray(rates, dtype=float)
        if ts.ndim != 1 or ts.shape != rates.shape or ts.size < 2:
            raise ArgumentError("tabulated schedule needs matching 1-D arrays of length >= 2")
        if np.any(np.diff(ts) <= 0):
            raise ArgumentError("tabulated times must be strictly increasing")
        if ts[0] > 0.0 or ts[-1] < 1.0:
            raise ArgumentError("tabulated times must cover [0, 1]")
        knots = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(ts) * (rates[1:] + rates[:-1]))])

        def rate(t):
            return np.interp(t, ts, rates)

        def from_first_knot(arr):
            k = np.clip(np.searchsorted(ts, arr, side="right") - 1, 0, ts.size - 2)
            return knots[k] + 0.5 * (arr - ts[k]) * (rates[k] + np.interp(arr, ts, rates))

        offset = float(from_first_knot(np.asarray(0.0)))

        def integral(t):
            out = from_first_knot(np.asarray(t, dtype=float)) - offset
            return out if np.ndim(out) else float(out)

        return cls(ScheduleId.CUSTOM, rate, integral, name=name)


def load_schedule_csv(path, name: str | None = None) -> Schedule:
    """Read a tabulated schedule: two columns ``t, a``, optional header row."""
    ts, rates = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                t, a = float(row[0]), float(row[1])
            except ValueError:
                if not ts:
                    continue
                raise ArgumentError(f"bad schedule row {row!r}") from None
            ts.append(t)
            rates.append(a)
    return Schedule.tabulated(ts, rates, name=name or str(path))


def _arr(t):
    return np.asarray(t, dtype=float)


_BUILTIN = {
    ScheduleId.A1: Schedule(
        ScheduleId.A1,
        lambda t: np.sin(np.pi * _arr(t)),
        lambda t: (1.0 - np.cos(np.pi * _arr(t))) / np.pi,
    ),
    ScheduleId.A2: Schedule(
        ScheduleId.A2,
        lambda t: 0.3 * np.sin(2.0 * np.pi * _arr(t)) + 0.2,
        lambda t: 0.3 * (1.0 - np.cos(2.0 * np.pi * _arr(t))) / (2.0 * np.pi) + 0.2 * _arr(t),
    ),
    ScheduleId.A3: Schedule(
        ScheduleId.A3,
        lambda t: _arr(t) - 0.5,
        lambda t: 0.5 * _arr(t) ** 2 - 0.5 * _arr(t),
    ),
}


def schedule_eval(s: Schedule, t):
    """``a(t)``; raises :class:`DomainError` outside ``[0, 1]``."""
    _check_time(t)
    out = s.rate(t)
    return float(out) if np.ndim(out) == 0 else np.asarray(out, dtype=float)


def sigma_p(s: Schedule, t):
    """Path scale ``exp(int_0^t a)``."""
    _check_time(t)
    out = np.exp(s.rate_integral(t))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class GaussianPathState:
    t: float
    sigma: float
    dim: int = DEFAULT_DIM

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"path scale must be positive, got {self.sigma}")
        if self.dim < 1:
            raise ArgumentError("dimension must be positive")


def path_state(s: Schedule, t: float, dim: int = DEFAULT_DIM) -> GaussianPathState:
    return GaussianPathState(float(t), sigma_p(s, t), dim)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of ``[0, 1]``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise ArgumentError("a time grid needs at least two points")
        if pts[0] != 0.0 or pts[-1] != 1.0:
            raise ArgumentError("a time grid must start at 0 and end at 1")
        steps = np.diff(pts)
        if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
            raise ArgumentError("time grid must be strictly increasing and uniform")
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, count: int = DEFAULT_GRID) -> "TimeGrid":
        if count < 2:
            raise ArgumentError("a time grid needs at least two points")
        return cls(np.linspace(0.0, 1.0, count))

    @property
    def count(self) -> int:
        return self.points.size

    def __len__(self):
        return self.count

    def __iter__(self):
        return iter(self.points.tolist())


def gaussian_kl(sigma_p_: float, sigma_q: float, d: int = DEFAULT_DIM) -> float:
    """KL(N(0, sp^2 I) || N(0, sq^2 I)) in dimension ``d``."""
    sp, sq = np.asarray(sigma_p_, dtype=float), np.asarray(sigma_q, dtype=float)
    if np.any(sp <= 0) or np.any(sq <= 0):
        raise DomainError("Gaussian scales must be positive")
    out = d * (np.log(sq / sp) + sp ** 2 / (2.0 * sq ** 2) - 0.5)
    return float(out) if out.ndim == 0 else out


def gaussian_logpdf(x, sigma=1.0, mean=None) -> np.ndarray:
    """Log-density of ``N(mean, sigma^2 I)`` at rows of ``x``."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    r = x if mean is None else x - np.asarray(mean, dtype=float)
    return -0.5 * d * math.log(2.0 * math.pi) - d * np.log(sigma) - np.sum(r * r, axis=-1) / (2.0 * sigma ** 2)


def analytic_score(state: GaussianPathState, x) -> np.ndarray:
    """``grad log p_t(x) = -x / sigma^2``."""
    return -np.asarray(x, dtype=float) / state.sigma ** 2


def sample_pt(s: Schedule, t: float, n: int, rng_seed: int, d: int = DEFAULT_DIM, tag="z") -> np.ndarray:
    """``n`` draws from ``p_t`` as ``sigma_p(t) * z``.

    ``z`` depends only on ``(rng_seed, tag)``, so calls at different times with
    the same tag share common random numbers.
    """
    if n < 1:
        raise ArgumentError("need at least one sample")
    tags = tag if isinstance(tag, tuple) else (tag,)
    return sigma_p(s, t) * rng.shard_normals(rng_seed, ("sample_pt",) + tags, n, d)


class LinearField:
    """``v(x, t) = a(t) x`` for a schedule ``a``."""

    def __init__(self, schedule: Schedule):
        self.schedule = schedule

    def __call__(self, x, t):
        return x * schedule_eval(self.schedule, t)

    def derivatives(self, x, t):
        a = schedule_eval(self.schedule, t)
        d = x.shape[-1]
        return a * x, np.broadcast_to(a * np.eye(d), x.shape + (d,)), np.zeros(x.shape)

    def rate(self, t):
        return schedule_eval(self.schedule, t)

    def scale(self, t):
        return sigma_p(self.schedule, t)

    def __repr__(self):
        return f"LinearField({self.schedule.label})"


def perturbed_field(s: Schedule, beta: float) -> LinearField:
    """``v(x, t) = (a(t) + beta) x``; its path scale is ``sigma_p(t) e^(beta t)``."""
    return LinearField(s.shifted(beta) if beta != 0 else s)


# -- closed-form moments for pairs of linear fields --------------------------


def pair_integrand(s_p: Schedule, s_q: Schedule, t, d: int = DEFAULT_DIM):
    """``E_p[(u - v)^T (s_p - s_q)]`` for linear fields."""
    sp, sq = sigma_p(s_p, t), sigma_p(s_q, t)
    da = schedule_eval(s_p, t) - schedule_eval(s_q, t)
    return da * (1.0 / sq ** 2 - 1.0 / sp ** 2) * d * sp ** 2


def pair_flow_error_sq(s_p: Schedule, s_q: Schedule, t, d: int = DEFAULT_DIM):
    """``E_p ||u - v||^2`` for linear fields."""
    da = schedule_eval(s_p, t) - schedule_eval(s_q, t)
    return da ** 2 * d * sigma_p(s_p, t) ** 2


def pair_score_gap(s_p: Schedule, s_q: Schedule, t, d: int = DEFAULT_DIM):
    """``E_p ||s_p - s_q||^2`` for linear fields."""
    sp, sq = sigma_p(s_p, t), sigma_p(s_q, t)
    return d * sp ** 2 * (1.0 / sp ** 2 - 1.0 / sq ** 2) ** 2


def closed_form_identity_curves(s_p: Schedule, s_q: Schedule, grid: TimeGrid, d: int = DEFAULT_DIM):
    """Both sides of the KL evolution identity in closed form on ``grid``.

    Returns ``(kl, g)``: ``kl[k] = KL(p_tk || q_tk)`` and ``g[k]`` the identity
    integrand, whose running trapezoid must reproduce ``kl``.
    """
    ts = grid.points
    kl = gaussian_kl(sigma_p(s_p, ts), sigma_p(s_q, ts), d)
    g = pair_integrand(s_p, s_q, ts, d)
    return np.asarray(kl, dtype=float), np.asarray(g, dtype=float)
