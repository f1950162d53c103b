"""A path pair with tiny flow-matching loss and arbitrarily large terminal KL.

The reference path is ``p_t = N(0, I)`` with ``u = 0``. The estimated path is
the tilted Gaussian ``q_t = N(-a(t) b, I)`` driven by the x-constant field
``v(x, t) = -delta a(t) b``, where ``a`` vanishes up to ``tau`` and grows as
``eta exp(delta (t - tau))`` afterwards. The jump of ``a`` at ``tau`` makes
``q`` a weak solution only; it is where the KL that the loss cannot see enters.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import ArgumentError, VerificationError
from .ode import IvpConfig, backward_logdensity
from .paths import gaussian_logpdf

CONDITIONING_FLOOR = 1e-12
REL_TOL = 1e-10
QUAD_TOL = 1e-6
LOGDENSITY_TOL = 1e-4


class ConditioningWarning(RuntimeWarning):
    """``eta`` is ill-conditioned because ``tau`` is too close to 1."""


@dataclass(frozen=True)
class CounterexampleSpec:
    M: float
    eps: float
    b: tuple = (1.0, 0.0)
    tau: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "b", tuple(float(c) for c in np.ravel(self.b)))
        if not (math.isfinite(self.M) and math.isfinite(self.eps)):
            raise ArgumentError("M and eps must be finite")
        if not (self.M > self.eps > 0):
            raise ArgumentError(f"need M > eps > 0, got M={self.M}, eps={self.eps}")
        if not (0.0 < self.tau < 1.0):
            raise ArgumentError(f"tau must lie in (0, 1), got {self.tau}")
        if len(self.b) == 0 or not np.all(np.isfinite(self.b)) or float(np.dot(self.b, self.b)) == 0.0:
            raise ArgumentError("b must be a finite nonzero vector")

    @property
    def dim(self) -> int:
        return len(self.b)

    @property
    def b_norm_sq(self) -> float:
        return math.fsum(c * c for c in self.b)


class TiltField:
    """``v(x, t) = -delta a(t) b``, constant in ``x``.

    ``right_limit`` evaluates ``a`` at ``tau`` by its limit from above, which
    is the field seen by solves confined to ``[tau, 1]``.
    """

    def __init__(self, inst: "CounterexampleInstance", right_limit: bool = False):
        self.inst = inst
        self.right_limit = right_limit
        self._b = np.array(inst.spec.b)

    def drift(self, t) -> np.ndarray:
        return -self.inst.delta * self.inst.a(t, self.right_limit) * self._b

    def __call__(self, x, t):
        # x * 0 keeps jet inputs jets, with zero derivatives
        return x * 0.0 + self.drift(t)

    def derivatives(self, x, t):
        d = x.shape[-1]
        v = np.broadcast_to(self.drift(t), x.shape).copy()
        return v, np.zeros(x.shape + (d,)), np.zeros(x.shape)


@dataclass(frozen=True)
class CounterexampleInstance:
    spec: CounterexampleSpec
    delta: float
    J: float
    eta: float
    warnings: tuple = ()

    def a(self, t, right_limit: bool = False):
        """Piecewise exponential ``a(t)``; zero up to and including ``tau``
        unless ``right_limit`` asks for the value just after the jump."""
        t = np.asarray(t, dtype=float)
        tau = self.spec.tau
        upper = t >= tau if right_limit else t > tau
        out = np.where(upper, self.eta * np.exp(self.delta * (t - tau)), 0.0)
        return float(out) if out.ndim == 0 else out

    @property
    def v_field(self) -> TiltField:
        return TiltField(self)

    def q_mean(self, t: float) -> np.ndarray:
        return -self.a(t) * np.array(self.spec.b)

    def q_logpdf(self, x, t: float) -> np.ndarray:
        """Closed-form ``log q_t(x)`` for the tilted Gaussian ``N(-a(t) b, I)``."""
        return gaussian_logpdf(x, 1.0, self.q_mean(t))


def build_counterexample(spec: CounterexampleSpec) -> CounterexampleInstance:
    """Solve for ``delta``, ``J = int a^2`` and ``eta`` so that the loss is ``eps`` and the KL integral is ``M``."""
    delta = spec.eps / spec.M
    J = spec.eps / (delta ** 2 * spec.b_norm_sq)
    denom = math.expm1(2.0 * delta * (1.0 - spec.tau))
    notes = []
    if denom < CONDITIONING_FLOOR:
        msg = f"exp(2 delta (1 - tau)) - 1 = {denom:.3g} is below {CONDITIONING_FLOOR}; eta is ill-conditioned"
        warnings.warn(msg, ConditioningWarning, stacklevel=2)
        notes.append(msg)
    eta = math.sqrt(2.0 * delta * J / denom)
    return CounterexampleInstance(spec, delta, J, eta, tuple(notes))


def counterexample_fm_loss(inst: CounterexampleInstance, n: int = 256, points: int = 4001, seed: int = 0):
    """``(closed_form, estimate, stderr)`` of ``int_0^1 E_p ||u - v||^2 dt``.

    The estimate evaluates the field on ``n`` draws from ``N(0, I)`` on a fine
    grid over ``[tau, 1]`` (``a`` vanishes before ``tau``) and integrates by
    trapezoid. The integrand does not depend on ``x``, so the stderr is the
    spread across draws, zero up to rounding.
    """
    spec = inst.spec
    closed = inst.delta ** 2 * spec.b_norm_sq * inst.J
    x = rng.shard_normals(seed, ("counterexample", "fm-loss"), n, spec.dim)
    field_ = TiltField(inst, right_limit=True)
    ts = np.linspace(spec.tau, 1.0, points)
    means = np.empty(points)
    spreads = np.empty(points)
    for k, t in enumerate(ts):
        r = np.asarray(field_(x, t))  # u = 0
        sq = np.sum(r * r, axis=-1)
        means[k] = sq.mean()
        spreads[k] = sq.std(ddof=1) / math.sqrt(n)
    h = np.diff(ts)
    w = np.zeros(points)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return closed, float(w @ means), float(w @ spreads)


def counterexample_kl(inst: CounterexampleInstance):
    """``(kl_direct, kl_path_integral)``.

    ``kl_direct`` is the Gaussian mean-shift KL of ``q_1 = N(-a(1) b, I)``;
    ``kl_path_integral = delta J ||b||^2`` omits the jump at ``tau`` and
    equals ``M`` by construction.
    """
    nb = inst.spec.b_norm_sq
    return 0.5 * inst.a(1.0) ** 2 * nb, inst.delta * inst.J * nb


@dataclass
class CounterexampleReport:
    spec: CounterexampleSpec
    instance: CounterexampleInstance
    fm_loss: float
    fm_loss_quadrature: float
    fm_loss_stderr: float
    kl_direct: float
    kl_path_integral: float
    kl_mc: float
    kl_mc_stderr: float
    kl_transport_only: float
    kl_transport_only_stderr: float
    logdensity_max_err: float
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def verify_counterexample(spec: CounterexampleSpec, n: int = 50000, seed: int = 0,
                          ode: IvpConfig = IvpConfig(), strict: bool = True) -> CounterexampleReport:
    """Check every closed-form claim and cross-check ``kl_direct`` through the ODE path.

    ``log q_1`` comes from :func:`backward_logdensity` with the instance's
    field, solved from 1 back to ``tau`` onto the post-jump base
    ``N(-eta b, I)``; the solve never crosses the jump. For transparency the
    report also carries the KL of the pure transport from ``N(0, I)`` at time
    0, which ignores the jump and is far smaller.

    With ``strict`` a failed check raises :class:`VerificationError` naming it.
    """
    inst = build_counterexample(spec)
    fm, fm_quad, fm_se = counterexample_fm_loss(inst, seed=seed)
    kl_direct, kl_path = counterexample_kl(inst)
    v = inst.v_field
    upper = TiltField(inst, right_limit=True)
    b = np.array(spec.b)
    x = rng.shard_normals(seed, ("counterexample", "kl"), n, spec.dim)  # p_1 = N(0, I)
    log_p = gaussian_logpdf(x)

    post_jump = inst.eta * -b
    res = backward_logdensity(upper, x, 1.0, ode, t_base=spec.tau, base_logpdf=lambda y: gaussian_logpdf(y, 1.0, post_jump))
    kl_mc, kl_se = rng.mean_and_stderr(log_p - res.log_q)
    ld_err = float(np.max(np.abs(res.log_q - inst.q_logpdf(x, 1.0))))

    transport = backward_logdensity(v, x, 1.0, ode)
    kl_tr, kl_tr_se = rng.mean_and_stderr(log_p - transport.log_q)

    checks = {
        "fm_loss": abs(fm - spec.eps) <= REL_TOL * spec.eps,
        "fm_loss_quadrature": abs(fm_quad - fm) <= QUAD_TOL * fm,
        "kl_path_integral": abs(kl_path - spec.M) <= REL_TOL * spec.M,
        "kl_direct_exceeds_M": kl_direct >= spec.M,
        "kl_mc": abs(kl_mc - kl_direct) <= 3.0 * kl_se,
        "logdensity": ld_err <= LOGDENSITY_TOL,
    }
    report = CounterexampleReport(spec, inst, fm, fm_quad, fm_se, kl_direct, kl_path, kl_mc, kl_se,
                                  kl_tr, kl_tr_se, ld_err, checks)
    if strict:
        for name, ok in checks.items():
            if not ok:
                raise VerificationError(f"counterexample check failed: {name}", quantity=name)
    return report
