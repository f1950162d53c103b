"""Fixed-step RK4 solves, log-density and score queries, trapezoidal quadrature.

All solves are vectorized over a batch of points ``x`` with shape ``(n, d)``
(a single point of shape ``(d,)`` also works). Augmented quantities share the
RK4 stages of the trajectory so they see identical discretization.

Sign conventions: the trajectory through the query ``(x, t)`` is ``x_s`` with
``x_t = x``. The log-density increment returned as ``ell`` satisfies
``log q_t(x) = log p_0(x_0) + ell`` and equals ``-int_0^t div v(x_s, s) ds``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import Dual, _basis, derivatives
from .errors import ArgumentError, DomainError, NumericError
from .paths import TimeGrid, gaussian_logpdf

DEFAULT_STEPS = 200


@dataclass(frozen=True)
class IvpConfig:
    """``steps`` is the RK4 step count per unit time; a solve over ``[s, t]`` uses
    ``ceil(steps * |t - s|)`` uniform steps (at least one)."""

    steps: int = DEFAULT_STEPS
    direction: Optional[str] = None

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ArgumentError("steps must be >= 1")
        if self.direction not in (None, "forward", "backward"):
            raise ArgumentError(f"direction must be 'forward' or 'backward', got {self.direction!r}")

    def steps_for(self, t_from: float, t_to: float) -> int:
        span = abs(t_to - t_from)
        return max(1, int(math.ceil(self.steps * span - 1e-9)))


@dataclass
class LogDensityResult:
    log_q: np.ndarray
    x0: np.ndarray
    ell: np.ndarray


@dataclass
class ScoreResult:
    log_q: np.ndarray
    score: np.ndarray
    x0: np.ndarray = None
    sensitivity: np.ndarray = None


def _check_times(*ts):
    for t in ts:
        if not (0.0 <= t <= 1.0):
            raise DomainError(f"time {t} outside [0, 1]")


def _check_direction(cfg: IvpConfig, t_from, t_to):
    if cfg.direction is None or t_from == t_to:
        return
    fwd = t_to > t_from
    if fwd != (cfg.direction == "forward"):
        raise ArgumentError(f"{cfg.direction} solve requested over [{t_from}, {t_to}]")


def _rk4(rhs: Callable, state: tuple, t_from: float, t_to: float, steps: int) -> tuple:
    h = (t_to - t_from) / steps
    for k in range(steps):
        s = t_from + k * h
        k1 = rhs(state, s)
        k2 = rhs(tuple(y + 0.5 * h * dy for y, dy in zip(state, k1)), s + 0.5 * h)
        k3 = rhs(tuple(y + 0.5 * h * dy for y, dy in zip(state, k2)), s + 0.5 * h)
        s_next = t_to if k == steps - 1 else t_from + (k + 1) * h
        k4 = rhs(tuple(y + h * dy for y, dy in zip(state, k3)), s_next)
        state = tuple(
            y + (h / 6.0) * (a + 2.0 * b + 2.0 * c + e) for y, a, b, c, e in zip(state, k1, k2, k3, k4)
        )
        for y in state:
            if not np.all(np.isfinite(y)):
                raise NumericError(f"non-finite state after RK4 step {k}", step=k)
    return state


def _clamp(s: float) -> float:
    # stage times may overshoot [0, 1] by rounding only
    return min(1.0, max(0.0, s))


def rk4_solve(f: Callable, x, t_from: float, t_to: float, cfg: IvpConfig = IvpConfig()) -> np.ndarray:
    """Integrate ``dx/ds = f(x, s)`` from ``t_from`` to ``t_to`` (either direction)."""
    _check_times(t_from, t_to)
    _check_direction(cfg, t_from, t_to)
    x = np.array(x, dtype=float)
    if t_from == t_to:
        return x

    def rhs(state, s):
        return (np.asarray(f(state[0], _clamp(s)), dtype=float),)

    (out,) = _rk4(rhs, (x,), t_from, t_to, cfg.steps_for(t_from, t_to))
    return out


def _value_and_divergence(f, x, s):
    out = f(Dual(x, _basis(x)), s)
    if not isinstance(out, Dual):
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape), np.zeros(x.shape[:-1])
    div = out.tan[0, ..., 0]
    for j in range(1, x.shape[-1]):
        div = div + out.tan[j, ..., j]
    return out.val, div


def backward_logdensity(
    f: Callable,
    x,
    t: float,
    cfg: IvpConfig = IvpConfig(),
    *,
    t_base: float = 0.0,
    base_logpdf: Callable = gaussian_logpdf,
    chunk: int = 16384,
) -> LogDensityResult:
    """``log q_t(x)`` for the density transported by ``f`` from a base at ``t_base``.

    The base defaults to ``N(0, I)`` at time 0. A later ``t_base`` with a custom
    ``base_logpdf`` answers queries for paths whose density is known in closed
    form at ``t_base`` (e.g. right after a jump). ``x0`` is the trajectory
    endpoint at ``t_base``.
    """
    _check_times(t, t_base)
    if t < t_base:
        raise DomainError(f"query time {t} precedes base time {t_base}")
    x = np.array(x, dtype=float)
    if t == t_base:
        return LogDensityResult(np.asarray(base_logpdf(x)), x, np.zeros(x.shape[:-1]))

    d = x.shape[-1]
    steps = cfg.steps_for(t, t_base)

    def block(xb):
        def rhs(state, s):
            (y,) = state
            v, div = _value_and_divergence(f, y[..., :d], _clamp(s))
            # d ell / ds = div v: integrating from t down to t_base leaves ell = -int div
            return (np.concatenate([v, div[..., None]], axis=-1),)

        y0 = np.concatenate([xb, np.zeros(xb.shape[:-1] + (1,))], axis=-1)
        (y,) = _rk4(rhs, (y0,), t, t_base, steps)
        return y[..., :d], y[..., d]

    x0, ell = _chunked(block, x, chunk)
    return LogDensityResult(base_logpdf(x0) + ell, x0, ell)


def _chunked(fn, x, chunk: int, *args):
    """Apply ``fn`` to row blocks of a batch; row results are independent of the block size."""
    if x.ndim == 1 or x.shape[0] <= chunk:
        return fn(x, *args)
    parts = [fn(x[i:i + chunk], *args) for i in range(0, x.shape[0], chunk)]
    return tuple(np.concatenate(p, axis=0) for p in zip(*parts))


def _jt_vec(jac, vec):
    # (J^T v)_i = sum_j J_ji v_j; explicit loops beat batched tiny matmuls
    d = vec.shape[-1]
    out = jac[..., 0, :] * vec[..., 0:1]
    for j in range(1, d):
        out += jac[..., j, :] * vec[..., j:j + 1]
    return out


def _score_block(x, f, t, steps):
    n, d = x.shape
    # component-major state, one contiguous row per scalar:
    # x (d) | J (d*d, row-major) | ell | G (d)
    width = d + d * d + 1 + d
    ij, il, ig = d, d + d * d, d + d * d + 1

    def rhs(state, s):
        (y,) = state
        v, jac_f, gdiv = derivatives(f, y[:d].T, _clamp(s))
        out = np.empty_like(y)
        out[:d] = v.T
        for a in range(d):
            for b in range(d):
                acc = out[ij + a * d + b]
                np.multiply(jac_f[:, a, 0], y[ij + b], out=acc)
                for c in range(1, d):
                    acc += jac_f[:, a, c] * y[ij + c * d + b]
        # divergence is the trace of the same Jacobian
        tr = out[il]
        tr[:] = jac_f[:, 0, 0]
        for a in range(1, d):
            tr += jac_f[:, a, a]
        # ds runs backwards: G ends at +int J^T grad(div f), ell at -int div f
        for i in range(d):
            acc = out[ig + i]
            np.multiply(y[ij + i], gdiv[:, 0], out=acc)
            for j in range(1, d):
                acc += y[ij + j * d + i] * gdiv[:, j]
            np.negative(acc, out=acc)
        return (out,)

    y = np.zeros((width, n))
    y[:d] = x.T
    for a in range(d):
        y[ij + a * d + a] = 1.0
    (y,) = _rk4(rhs, (y,), t, 0.0, steps)
    x0 = np.ascontiguousarray(y[:d].T)
    j0 = np.ascontiguousarray(y[ij:il].T).reshape(n, d, d)
    score = -_jt_vec(j0, x0) - y[ig:].T
    return gaussian_logpdf(x0) + y[il], score, x0, j0


def backward_score(f: Callable, x, t: float, cfg: IvpConfig = IvpConfig(), chunk: int = 16384) -> ScoreResult:
    """Log-density and score ``grad_x log q_t(x)`` via trajectory sensitivities.

    Alongside the backward trajectory this integrates ``J(s) = dx_s/dx``
    (``dJ/ds = grad f(x_s, s) J``), the divergence integral and
    ``G = int_0^t J(s)^T grad(div f)(x_s, s) ds`` in one combined state, so all
    of them share the RK4 stages; then ``score = -J(0)^T x_0 - G``.
    """
    _check_times(t)
    x = np.array(x, dtype=float)
    d = x.shape[-1]
    if t == 0.0:
        eye = np.broadcast_to(np.eye(d), x.shape[:-1] + (d, d)).copy()
        return ScoreResult(gaussian_logpdf(x), -x, x, eye)
    flat = x.reshape(-1, d)
    log_q, score, x0, j0 = _chunked(_score_block, flat, chunk, f, t, cfg.steps_for(t, 0.0))
    lead = x.shape[:-1]
    return ScoreResult(log_q.reshape(lead), score.reshape(x.shape), x0.reshape(x.shape), j0.reshape(lead + (d, d)))


def _transport_block(x, f, t, steps):
    d = x.shape[-1]

    def back(state, s):
        return (np.asarray(f(state[0], _clamp(s)), dtype=float),)

    (x0,) = _rk4(back, (x,), t, 0.0, steps)

    def fwd(state, s):
        (y,) = state
        xs, sc = y[..., :d], y[..., d:]
        v, jac_f, gdiv = derivatives(f, xs, _clamp(s))
        return (np.concatenate([v, -_jt_vec(jac_f, sc) - gdiv], axis=-1),)

    (y,) = _rk4(fwd, (np.concatenate([x0, -x0], axis=-1),), 0.0, t, steps)
    return (y[..., d:],)


def score_transport_oracle(f: Callable, x, t: float, cfg: IvpConfig = IvpConfig(), chunk: int = 16384) -> np.ndarray:
    """Score by transporting ``s = grad log q`` forward along characteristics.

    Solves back to ``x_0``, then integrates ``Ds/Ds = -(grad f)^T s - grad(div f)``
    from ``s(0) = -x_0`` up to ``t`` with the same step count.
    """
    _check_times(t)
    x = np.array(x, dtype=float)
    if t == 0.0:
        return -x
    (score,) = _chunked(_transport_block, x, chunk, f, t, cfg.steps_for(t, 0.0))
    return score


def trapezoid(values, grid: TimeGrid) -> float:
    """Trapezoidal rule over the grid."""
    v = np.asarray(values, dtype=float)
    if v.shape != (grid.count,):
        raise ArgumentError(f"expected {grid.count} values, got shape {v.shape}")
    h = np.diff(grid.points)
    return float(np.sum(0.5 * h * (v[1:] + v[:-1])))


def cumulative_trapezoid(values, grid: TimeGrid) -> np.ndarray:
    """Running trapezoid ``int_0^{t_k}`` for every grid point (first entry 0)."""
    v = np.asarray(values, dtype=float)
    if v.shape != (grid.count,):
        raise ArgumentError(f"expected {grid.count} values, got shape {v.shape}")
    h = np.diff(grid.points)
    return np.concatenate([[0.0], np.cumsum(0.5 * h * (v[1:] + v[:-1]))])


def trapezoid_weights(grid: TimeGrid) -> np.ndarray:
    """Weights ``w`` with ``trapezoid(v) == w @ v``; used for error propagation."""
    h = np.diff(grid.points)
    w = np.zeros(grid.count)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w
