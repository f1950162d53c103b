"""Monte Carlo and quadrature estimators for the KL identity and the KL bound.

For a reference path ``p_t`` driven by a linear schedule and any velocity
field ``v`` (whose path ``q_t`` starts from the same ``N(0, I)``) this module
estimates, on a time grid:

* ``KL(p_t || q_t)`` by averaging ``log p_t - log q_t`` over ``x ~ p_t``;
* the identity integrand ``E[(u - v)^T (grad log p_t - grad log q_t)]`` and its
  running trapezoid, which must track the KL curve;
* the flow error ``eps`` and score gap ``S`` whose product ``eps * sqrt(S)``
  bounds the terminal KL.

Samples at time ``t`` are ``sigma_p(t) z``. With common random numbers the
same ``z`` is reused at every grid time and by every estimator that queries
the same key. Standard errors of grid integrals are propagated with the
trapezoid weights: in quadrature for independent draws, linearly (the
perfectly correlated bound) under common random numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ArgumentError, DomainError, NumericError
from .ode import (IvpConfig, backward_logdensity, backward_score, cumulative_trapezoid, trapezoid,
                  trapezoid_weights)
from .paths import (DEFAULT_DIM, Schedule, TimeGrid, gaussian_kl, gaussian_logpdf, pair_flow_error_sq,
                    pair_integrand, pair_score_gap, sample_pt, schedule_eval, sigma_p)
from .rng import mean_and_stderr

TRACKING_FRACTION = 0.02
N_SIGMA = 3.0


@dataclass(frozen=True)
class McConfig:
    n: int = 5000
    seed: int = 0
    grid: TimeGrid = field(default_factory=TimeGrid.uniform)
    ode: IvpConfig = IvpConfig()
    common_random_numbers: bool = True
    dim: int = DEFAULT_DIM

    def __post_init__(self):
        if self.n < 2:
            raise ArgumentError("standard errors need n >= 2")


@dataclass
class EstimatorReport:
    t: np.ndarray
    kl_hat: Optional[np.ndarray] = None
    kl_se: Optional[np.ndarray] = None
    g_hat: Optional[np.ndarray] = None
    g_se: Optional[np.ndarray] = None
    cum_integral: Optional[np.ndarray] = None
    cum_se: Optional[np.ndarray] = None
    eps_t: Optional[np.ndarray] = None
    eps_sq_se: Optional[np.ndarray] = None
    gap_t: Optional[np.ndarray] = None
    gap_se: Optional[np.ndarray] = None
    eps_total: float = float("nan")
    eps_total_se: float = float("nan")
    score_gap_total: float = float("nan")
    score_gap_total_se: float = float("nan")
    kl_terminal: float = float("nan")
    kl_terminal_se: float = float("nan")
    bound_rhs: float = float("nan")
    bound_rhs_se: float = float("nan")
    satisfied: Optional[bool] = None
    tracking: Optional[np.ndarray] = None

    @property
    def tracking_ok(self) -> bool:
        return bool(self.tracking is not None and np.all(self.tracking))

    @property
    def combined_se(self) -> np.ndarray:
        return np.sqrt(self.kl_se ** 2 + self.cum_se ** 2)


def _samples(s_p: Schedule, t: float, k, purpose: str, cfg: McConfig) -> np.ndarray:
    tag = ("crn",) if cfg.common_random_numbers else (purpose, k)
    return sample_pt(s_p, t, cfg.n, cfg.seed, cfg.dim, tag=tag)


def _check_t(t):
    if not (0.0 <= t <= 1.0):
        raise DomainError(f"time {t} outside [0, 1]")


def _reraise(exc: NumericError, t):
    raise NumericError(f"{exc} (query time {t}, sample batch)", step=exc.step, index=exc.index) from None


def kl_mc(s_p: Schedule, q_field: Callable, t: float, cfg: McConfig = McConfig()):
    """``(estimate, stderr)`` of ``KL(p_t || q_t)``; exact zeros at ``t = 0``."""
    _check_t(t)
    if t == 0.0:
        return 0.0, 0.0
    x = _samples(s_p, t, "terminal", "kl", cfg)
    try:
        log_q = backward_logdensity(q_field, x, t, cfg.ode).log_q
    except NumericError as exc:
        _reraise(exc, t)
    return mean_and_stderr(gaussian_logpdf(x, sigma_p(s_p, t)) - log_q)


def _score_point(s_p: Schedule, q_field: Callable, t: float, k, cfg: McConfig):
    """Per-sample log-ratio, identity integrand and squared score gap at time ``t``."""
    x = _samples(s_p, t, k, "score", cfg)
    try:
        res = backward_score(q_field, x, t, cfg.ode)
    except NumericError as exc:
        _reraise(exc, t)
    sp = sigma_p(s_p, t)
    score_p = -x / sp ** 2
    u = schedule_eval(s_p, t) * x
    v = np.asarray(q_field(x, t), dtype=float)
    ds = score_p - res.score
    log_ratio = gaussian_logpdf(x, sp) - res.log_q
    integrand = np.sum((u - v) * ds, axis=-1)
    gap = np.sum(ds * ds, axis=-1)
    return log_ratio, integrand, gap


def identity_integrand(s_p: Schedule, q_field: Callable, t: float, cfg: McConfig = McConfig()):
    """``(estimate, stderr)`` of ``E_p[(u - v)^T (s_p - s_q)]`` at ``t``."""
    _check_t(t)
    if t == 0.0:
        return 0.0, 0.0
    _, g, _ = _score_point(s_p, q_field, t, "terminal", cfg)
    return mean_and_stderr(g)


def _propagate(weights: np.ndarray, se: np.ndarray, correlated: bool) -> float:
    if correlated:
        return float(np.sum(np.abs(weights) * se))
    return float(math.sqrt(np.sum((weights * se) ** 2)))


def _cumulative_se(grid: TimeGrid, se: np.ndarray, correlated: bool) -> np.ndarray:
    out = np.zeros(grid.count)
    h = np.diff(grid.points)
    for k in range(1, grid.count):
        w = np.zeros(k + 1)
        w[:-1] += 0.5 * h[:k]
        w[1:] += 0.5 * h[:k]
        out[k] = _propagate(w, se[:k + 1], correlated)
    return out


def _score_sweep(s_p: Schedule, q_field: Callable, cfg: McConfig) -> EstimatorReport:
    grid = cfg.grid
    m = grid.count
    cols = {name: np.zeros(m) for name in ("kl", "kl_se", "g", "g_se", "gap", "gap_se")}
    for k, t in enumerate(grid.points):
        if t == 0.0:
            continue
        log_ratio, g, gap = _score_point(s_p, q_field, float(t), k, cfg)
        cols["kl"][k], cols["kl_se"][k] = mean_and_stderr(log_ratio)
        cols["g"][k], cols["g_se"][k] = mean_and_stderr(g)
        cols["gap"][k], cols["gap_se"][k] = mean_and_stderr(gap)
    corr = cfg.common_random_numbers
    cum = cumulative_trapezoid(cols["g"], grid)
    cum_se = _cumulative_se(grid, cols["g_se"], corr)
    w = trapezoid_weights(grid)
    rep = EstimatorReport(
        t=grid.points.copy(),
        kl_hat=cols["kl"], kl_se=cols["kl_se"],
        g_hat=cols["g"], g_se=cols["g_se"],
        cum_integral=cum, cum_se=cum_se,
        gap_t=cols["gap"], gap_se=cols["gap_se"],
        score_gap_total=trapezoid(cols["gap"], grid),
        score_gap_total_se=_propagate(w, cols["gap_se"], corr),
        kl_terminal=float(cols["kl"][-1]), kl_terminal_se=float(cols["kl_se"][-1]),
    )
    rep.tracking = tracking_flags(rep)
    return rep


def tracking_flags(rep: EstimatorReport) -> np.ndarray:
    """Per-point ``|kl_hat - cum_integral| <= max(3 * combined se, 0.02 * max kl_hat)``."""
    floor = TRACKING_FRACTION * float(np.max(np.abs(rep.kl_hat)))
    tol = np.maximum(N_SIGMA * rep.combined_se, floor)
    return np.abs(rep.kl_hat - rep.cum_integral) <= tol


def identity_curves(s_p: Schedule, q_field: Callable, cfg: McConfig = McConfig()) -> EstimatorReport:
    """KL curve and running integral of the identity integrand over ``cfg.grid``.

    One backward score solve per grid time yields both columns from the same samples.
    """
    return _score_sweep(s_p, q_field, cfg)


@dataclass
class FlowError:
    total: float
    per_point: np.ndarray
    total_se: float
    per_point_sq: np.ndarray
    per_point_sq_se: np.ndarray

    def __iter__(self):
        return iter((self.total, self.per_point))


def flow_error(s: Schedule, q_field: Callable, cfg: McConfig = McConfig()) -> FlowError:
    """``eps_t = sqrt(E ||u - v||^2)`` per grid time (fresh draws each time) and
    ``eps = sqrt(trapezoid of eps_t^2)``."""
    grid = cfg.grid
    sq = np.zeros(grid.count)
    sq_se = np.zeros(grid.count)
    for k, t in enumerate(grid.points):
        x = sample_pt(s, float(t), cfg.n, cfg.seed, cfg.dim, tag=("flow-error", k))
        r = schedule_eval(s, float(t)) * x - np.asarray(q_field(x, float(t)), dtype=float)
        sq[k], sq_se[k] = mean_and_stderr(np.sum(r * r, axis=-1))
    total_sq = trapezoid(sq, grid)
    total_sq_se = _propagate(trapezoid_weights(grid), sq_se, correlated=False)
    total = math.sqrt(max(total_sq, 0.0))
    total_se = total_sq_se / (2.0 * total) if total > 0 else math.sqrt(total_sq_se)
    return FlowError(total, np.sqrt(np.maximum(sq, 0.0)), total_se, sq, sq_se)


def score_gap(s: Schedule, q_field: Callable, cfg: McConfig = McConfig()):
    """``(S, per-point gap_t, S stderr)`` with ``S = trapezoid of E ||s_p - s_q||^2``."""
    rep = _score_sweep(s, q_field, cfg)
    return rep.score_gap_total, rep.gap_t, rep.score_gap_total_se


def _rhs_se(eps, eps_se, gap, gap_se) -> float:
    root = math.sqrt(max(gap, 0.0))
    a = root * eps_se
    b = eps * gap_se / (2.0 * root) if root > 0 else 0.0
    return math.hypot(a, b)


def bound_check(s: Schedule, q_field: Callable, cfg: McConfig = McConfig()) -> EstimatorReport:
    """Terminal KL against ``eps * sqrt(S)``.

    ``satisfied`` is ``kl_terminal <= bound_rhs + 3 * sqrt(kl_se^2 + rhs_se^2)``.
    The report also carries the identity columns from the same solves.
    """
    rep = _score_sweep(s, q_field, cfg)
    fe = flow_error(s, q_field, cfg)
    rep.eps_t = fe.per_point
    rep.eps_sq_se = fe.per_point_sq_se
    rep.eps_total, rep.eps_total_se = fe.total, fe.total_se
    rep.bound_rhs = rep.eps_total * math.sqrt(max(rep.score_gap_total, 0.0))
    rep.bound_rhs_se = _rhs_se(rep.eps_total, rep.eps_total_se, rep.score_gap_total, rep.score_gap_total_se)
    slack = N_SIGMA * math.hypot(rep.kl_terminal_se, rep.bound_rhs_se)
    rep.satisfied = bool(rep.kl_terminal <= rep.bound_rhs + slack)
    return rep


def cauchy_schwarz_ok(rep: EstimatorReport) -> bool:
    """``|int g| <= eps * sqrt(S) + 3 * stderr``, the step between identity and bound."""
    slack = N_SIGMA * math.hypot(float(rep.cum_se[-1]), rep.bound_rhs_se)
    return bool(abs(float(rep.cum_integral[-1])) <= rep.bound_rhs + slack)


# -- closed forms for pairs of linear fields ---------------------------------------


@dataclass(frozen=True)
class ClosedFormBound:
    kl_terminal: float
    eps_total: float
    score_gap_total: float
    bound_rhs: float
    eps_t: np.ndarray
    gap_t: np.ndarray

    @property
    def satisfied(self) -> bool:
        return self.kl_terminal <= self.bound_rhs + 1e-8


def closed_form_bound(s_p: Schedule, s_q: Schedule, grid: TimeGrid, d: int = DEFAULT_DIM) -> ClosedFormBound:
    """Exact terminal KL and the grid-trapezoid ``eps`` and ``S`` for two linear fields."""
    ts = grid.points
    eps_sq = np.asarray(pair_flow_error_sq(s_p, s_q, ts, d), dtype=float)
    gap = np.asarray(pair_score_gap(s_p, s_q, ts, d), dtype=float)
    kl = gaussian_kl(sigma_p(s_p, 1.0), sigma_p(s_q, 1.0), d)
    eps = math.sqrt(trapezoid(eps_sq, grid))
    big_s = trapezoid(gap, grid)
    return ClosedFormBound(kl, eps, big_s, eps * math.sqrt(big_s), np.sqrt(eps_sq), gap)


# -- regularity constants and Pinsker ------------------------------------------------


@dataclass(frozen=True)
class RegularityProfile:
    """Bounds ``L, K, B_p, M, H, U_p`` as functions of time (nonnegative on [0, 1])."""

    L: Callable
    K: Callable
    B_p: Callable
    M: Callable
    H: Callable
    U_p: Callable

    @classmethod
    def constant(cls, L=0.0, K=0.0, B_p=0.0, M=0.0, H=0.0, U_p=0.0) -> "RegularityProfile":
        def c(v):
            return lambda t: np.full(np.shape(t), float(v))

        return cls(c(L), c(K), c(B_p), c(M), c(H), c(U_p))

    def on(self, grid: TimeGrid) -> dict:
        ts = grid.points
        vals = {k: np.broadcast_to(np.asarray(getattr(self, k)(ts), dtype=float), ts.shape)
                for k in ("L", "K", "B_p", "M", "H", "U_p")}
        for k, v in vals.items():
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise DomainError(f"regularity function {k} must be finite and nonnegative")
        return vals


def bound_constants(r: RegularityProfile, grid: TimeGrid):
    """``(A1, A2)`` by trapezoidal quadrature:

    ``A1 = exp(int L + K + B_p M) * int (2 L B_p + 2 H)`` and
    ``A2 = exp(int L + K + B_p M) * sqrt(int U_p^2)``.
    """
    v = r.on(grid)
    growth = math.exp(trapezoid(v["L"] + v["K"] + v["B_p"] * v["M"], grid))
    a1 = growth * trapezoid(2.0 * v["L"] * v["B_p"] + 2.0 * v["H"], grid)
    a2 = growth * math.sqrt(trapezoid(v["U_p"] ** 2, grid))
    return a1, a2


def kl_bound_from_constants(a1: float, a2: float, eps: float) -> float:
    return a1 * eps + a2 * eps ** 2


def tv_from_kl(kl: float) -> float:
    """Total-variation bound ``sqrt(KL / 2)``."""
    if kl < 0 or math.isnan(kl):
        raise DomainError(f"KL must be nonnegative, got {kl}")
    return math.sqrt(kl / 2.0)
