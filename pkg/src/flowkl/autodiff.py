"""Forward-mode derivatives of velocity fields.

:class:`Dual` carries a value and first directional derivatives; :class:`Dual2`
additionally carries second directional derivatives (a dual-over-dual number
truncated to the diagonal). Both are vectorized: ``val`` has the shape of the
underlying array and the derivative slots have one extra *leading* axis, one
entry per probe direction, so a whole batch of points and several directions
are pushed through a field in a single evaluation.

A velocity field is any callable ``f(x, t)`` mapping an array of shape
``(..., d)`` to the same shape, written only with arithmetic, ``@`` against
constant matrices, ``x[..., i]`` indexing, :func:`stack`, :func:`concatenate`
and the elementary functions defined here (exp, sin, cos, tanh, sqrt).
Such a field accepts plain arrays, :class:`Dual` and :class:`Dual2` inputs.
"""

from __future__ import annotations

from typing import Callable, Protocol

import numpy as np

from .errors import NumericError


class VelocityField(Protocol):
    def __call__(self, x, t): ...


def _is_jet(u) -> bool:
    return isinstance(u, (Dual, Dual2))


def _lead(key):
    if not isinstance(key, tuple):
        key = (key,)
    return (slice(None),) + key


class Dual:
    """Value plus first derivatives along ``p`` directions (leading axis of ``tan``)."""

    __slots__ = ("val", "tan")
    __array_ufunc__ = None

    def __init__(self, val, tan):
        self.val = np.asarray(val, dtype=float)
        self.tan = np.asarray(tan, dtype=float)

    @property
    def shape(self):
        return self.val.shape

    @property
    def ndirs(self) -> int:
        return self.tan.shape[0]

    def _lift(self, other) -> "Dual":
        if isinstance(other, Dual):
            return other
        if isinstance(other, Dual2):
            raise TypeError("cannot mix Dual and Dual2")
        v = np.asarray(other, dtype=float)
        return Dual(v, np.zeros((self.ndirs,) + np.broadcast_shapes(v.shape, ())))

    def __add__(self, other):
        if _is_jet(other):
            o = self._lift(other)
            return Dual(self.val + o.val, self.tan + o.tan)
        return Dual(self.val + other, self.tan + np.zeros_like(np.asarray(other, dtype=float)))

    __radd__ = __add__

    def __sub__(self, other):
        if _is_jet(other):
            o = self._lift(other)
            return Dual(self.val - o.val, self.tan - o.tan)
        return Dual(self.val - other, self.tan + np.zeros_like(np.asarray(other, dtype=float)))

    def __rsub__(self, other):
        return Dual(other - self.val, -self.tan + np.zeros_like(np.asarray(other, dtype=float)))

    def __neg__(self):
        return Dual(-self.val, -self.tan)

    def __mul__(self, other):
        if _is_jet(other):
            o = self._lift(other)
            return Dual(self.val * o.val, self.tan * o.val + self.val * o.tan)
        other = np.asarray(other, dtype=float)
        return Dual(self.val * other, self.tan * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_jet(other):
            o = self._lift(other)
            # divide values directly so the value slot matches plain evaluation bitwise
            q = self.val / o.val
            return Dual(q, (self.tan - q * o.tan) / o.val)
        other = np.asarray(other, dtype=float)
        return Dual(self.val / other, self.tan / other)

    def __rtruediv__(self, other):
        q = np.asarray(other, dtype=float) / self.val
        return Dual(q, -q * self.tan / self.val)

    def __pow__(self, k):
        if not isinstance(k, (int, np.integer)):
            raise TypeError("only integer powers are supported")
        if k == 2:
            return self * self
        return self._chain(self.val ** k, k * self.val ** (k - 1))

    def __matmul__(self, w):
        w = np.asarray(w, dtype=float)
        return Dual(self.val @ w, self.tan @ w)

    def __getitem__(self, key):
        return Dual(self.val[key], self.tan[_lead(key)])

    def _chain(self, g0, g1) -> "Dual":
        return Dual(g0, g1 * self.tan)

    def __repr__(self):
        return f"Dual(val={self.val!r}, tan={self.tan!r})"


class Dual2:
    """Value, first and second derivatives along ``p`` directions.

    ``d1[j]`` and ``d2[j]`` are the first and second derivatives of
    ``s -> f(x + s e_j)`` at ``s = 0``.
    """

    __slots__ = ("val", "d1", "d2")
    __array_ufunc__ = None

    def __init__(self, val, d1, d2):
        self.val = np.asarray(val, dtype=float)
        self.d1 = np.asarray(d1, dtype=float)
        self.d2 = np.asarray(d2, dtype=float)

    @property
    def shape(self):
        return self.val.shape

    @property
    def ndirs(self) -> int:
        return self.d1.shape[0]

    def _lift(self, other) -> "Dual2":
        if isinstance(other, Dual2):
            return other
        if isinstance(other, Dual):
            raise TypeError("cannot mix Dual and Dual2")
        v = np.asarray(other, dtype=float)
        z = np.zeros((self.ndirs,) + v.shape)
        return Dual2(v, z, z)

    def __add__(self, other):
        if _is_jet(other):
            o = self._lift(other)
            return Dual2(self.val + o.val, self.d1 + o.d1, self.d2 + o.d2)
        z = np.zeros_like(np.asarray(other, dtype=float))
        return Dual2(self.val + other, self.d1 + z, self.d2 + z)

    __radd__ = __add__

    def __sub__(self, other):
        if _is_jet(other):
            o = self._lift(other)
            return Dual2(self.val - o.val, self.d1 - o.d1, self.d2 - o.d2)
        z = np.zeros_like(np.asarray(other, dtype=float))
        return Dual2(self.val - other, self.d1 + z, self.d2 + z)

    def __rsub__(self, other):
        z = np.zeros_like(np.asarray(other, dtype=float))
        return Dual2(other - self.val, -self.d1 + z, -self.d2 + z)

    def __neg__(self):
        return Dual2(-self.val, -self.d1, -self.d2)

    def __mul__(self, other):
        if _is_jet(other):
            o = self._lift(other)
            return Dual2(
                self.val * o.val,
                self.d1 * o.val + self.val * o.d1,
                self.d2 * o.val + 2.0 * self.d1 * o.d1 + self.val * o.d2,
            )
        other = np.asarray(other, dtype=float)
        return Dual2(self.val * other, self.d1 * other, self.d2 * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if _is_jet(other):
            o = self._lift(other)
            q = self.val / o.val
            q1 = (self.d1 - q * o.d1) / o.val
            q2 = (self.d2 - 2.0 * q1 * o.d1 - q * o.d2) / o.val
            return Dual2(q, q1, q2)
        other = np.asarray(other, dtype=float)
        return Dual2(self.val / other, self.d1 / other, self.d2 / other)

    def __rtruediv__(self, other):
        q = np.asarray(other, dtype=float) / self.val
        q1 = -q * self.d1 / self.val
        q2 = (-2.0 * q1 * self.d1 - q * self.d2) / self.val
        return Dual2(q, q1, q2)

    def __pow__(self, k):
        if not isinstance(k, (int, np.integer)):
            raise TypeError("only integer powers are supported")
        if k == 2:
            return self * self
        v = self.val
        return self._chain(v ** k, k * v ** (k - 1), k * (k - 1) * v ** (k - 2))

    def __matmul__(self, w):
        w = np.asarray(w, dtype=float)
        return Dual2(self.val @ w, self.d1 @ w, self.d2 @ w)

    def __getitem__(self, key):
        lk = _lead(key)
        return Dual2(self.val[key], self.d1[lk], self.d2[lk])

    def _chain(self, g0, g1, g2) -> "Dual2":
        return Dual2(g0, g1 * self.d1, g2 * self.d1 * self.d1 + g1 * self.d2)

    def __repr__(self):
        return f"Dual2(val={self.val!r}, d1={self.d1!r}, d2={self.d2!r})"


# -- elementary functions ---------------------------------------------------


def _unary(u, f0, f1, f2):
    # f1, f2 take (argument, f0(argument)) so shared work is not repeated
    if isinstance(u, Dual2):
        g0 = f0(u.val)
        return u._chain(g0, f1(u.val, g0), f2(u.val, g0))
    if isinstance(u, Dual):
        g0 = f0(u.val)
        return u._chain(g0, f1(u.val, g0))
    return f0(u)


def exp(u):
    return _unary(u, np.exp, lambda v, g: g, lambda v, g: g)


def sin(u):
    return _unary(u, np.sin, lambda v, g: np.cos(v), lambda v, g: -g)


def cos(u):
    return _unary(u, np.cos, lambda v, g: -np.sin(v), lambda v, g: -g)


def tanh(u):
    return _unary(u, np.tanh, lambda v, g: 1.0 - g * g, lambda v, g: -2.0 * g * (1.0 - g * g))


def sqrt(u):
    return _unary(u, np.sqrt, lambda v, g: 0.5 / g, lambda v, g: -0.25 / (g * g * g))


def _kind(parts):
    for p in parts:
        if isinstance(p, Dual2):
            return Dual2
        if isinstance(p, Dual):
            return Dual
    return None


def _promote(parts):
    kind = _kind(parts)
    if kind is None:
        return None, [np.asarray(p, dtype=float) for p in parts]
    ref = next(p for p in parts if isinstance(p, kind))
    return kind, [ref._lift(p) if not isinstance(p, kind) else p for p in parts]


def _jet_axis(axis, ndim):
    axis = axis if axis >= 0 else axis + ndim
    return axis + 1


def stack(parts, axis=-1):
    kind, parts = _promote(list(parts))
    if kind is None:
        return np.stack(parts, axis=axis)
    ndim = parts[0].val.ndim + 1
    ja = _jet_axis(axis, ndim)
    if kind is Dual:
        return Dual(np.stack([p.val for p in parts], axis=axis), np.stack([p.tan for p in parts], axis=ja))
    return Dual2(
        np.stack([p.val for p in parts], axis=axis),
        np.stack([p.d1 for p in parts], axis=ja),
        np.stack([p.d2 for p in parts], axis=ja),
    )


def concatenate(parts, axis=-1):
    parts = list(parts)
    kind = _kind(parts)
    if kind is None:
        return np.concatenate([np.asarray(p, dtype=float) for p in parts], axis=axis)
    ref = next(p for p in parts if isinstance(p, kind))
    ndirs = ref.ndirs
    ndim = ref.val.ndim
    ja = _jet_axis(axis, ndim)
    vals, firsts, seconds = [], [], []
    for p in parts:
        if isinstance(p, kind):
            vals.append(p.val)
            firsts.append(p.tan if kind is Dual else p.d1)
            if kind is Dual2:
                seconds.append(p.d2)
        else:
            v = np.asarray(p, dtype=float)
            vals.append(v)
            z = np.zeros((ndirs,) + v.shape)
            firsts.append(z)
            seconds.append(z)
    if kind is Dual:
        return Dual(np.concatenate(vals, axis=axis), np.concatenate(firsts, axis=ja))
    return Dual2(
        np.concatenate(vals, axis=axis),
        np.concatenate(firsts, axis=ja),
        np.concatenate(seconds, axis=ja),
    )


def value(u):
    """Plain value of a (possibly dual) quantity."""
    return u.val if _is_jet(u) else np.asarray(u, dtype=float)


# -- derivative queries -----------------------------------------------------


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[:5].tolist()
        raise NumericError(f"non-finite {name} at coordinates {bad}", index=bad)


def _basis(x: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    return np.broadcast_to(np.eye(d).reshape((d,) + (1,) * (x.ndim - 1) + (d,)), (d,) + x.shape)


def jacobian(f: Callable, x, t) -> np.ndarray:
    """Jacobian ``J[..., i, j] = d f_i / d x_j`` from one multi-direction dual pass."""
    x = np.asarray(x, dtype=float)
    out = f(Dual(x, _basis(x)), t)
    if not _is_jet(out):
        out = Dual(out, np.zeros((x.shape[-1],) + np.shape(out)))
    jac = np.moveaxis(out.tan, 0, -1)
    _check_finite("jacobian", jac)
    return jac


def divergence(f: Callable, x, t) -> np.ndarray:
    """Trace of the Jacobian, i.e. the sum of ``d f_j / d x_j`` over the ``d`` probe directions."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    out = f(Dual(x, _basis(x)), t)
    if not _is_jet(out):
        return np.zeros(x.shape[:-1])
    div = out.tan[0, ..., 0]
    for j in range(1, d):
        div = div + out.tan[j, ..., j]
    _check_finite("divergence", div)
    return div


def _pair_directions(d: int):
    dirs = [np.eye(d)[i] for i in range(d)]
    pairs = {}
    for i in range(d):
        for j in range(i + 1, d):
            pairs[(i, j)] = len(dirs)
            dirs.append(np.eye(d)[i] + np.eye(d)[j])
    return np.array(dirs), pairs


def field_derivatives(f: Callable, x, t):
    """Value, Jacobian and gradient of divergence from one :class:`Dual2` pass.

    Probes the ``d`` coordinate directions plus ``e_i + e_j`` for ``i < j``;
    mixed second derivatives follow by polarization,
    ``d_i d_j f = (D2[e_i+e_j] - D2[e_i] - D2[e_j]) / 2``.
    Returns ``(value, jac, grad_div)`` with shapes ``(..., d)``, ``(..., d, d)``
    and ``(..., d)``.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    dirs, pairs = _pair_directions(d)
    probe = np.broadcast_to(dirs.reshape((len(dirs),) + (1,) * (x.ndim - 1) + (d,)), (len(dirs),) + x.shape)
    out = f(Dual2(x, probe, np.zeros_like(probe)), t)
    if not _is_jet(out):
        val = np.broadcast_to(np.asarray(out, dtype=float), x.shape)
        return val, np.zeros(x.shape + (d,)), np.zeros(x.shape)
    jac = np.moveaxis(out.d1[:d], 0, -1)
    gdiv = np.zeros(x.shape)
    for m in range(d):
        acc = out.d2[m, ..., m]
        for k in range(d):
            if k == m:
                continue
            i, j = min(m, k), max(m, k)
            mixed = 0.5 * (out.d2[pairs[(i, j)], ..., k] - out.d2[m, ..., k] - out.d2[k, ..., k])
            acc = acc + mixed
        gdiv[..., m] = acc
    _check_finite("jacobian", jac)
    _check_finite("divergence gradient", gdiv)
    return out.val, jac, gdiv


def derivatives(f: Callable, x, t):
    """``(value, jac, grad_div)`` for ODE right-hand sides.

    Fields exposing a ``derivatives(x, t)`` method with closed forms (linear
    fields, x-constant fields) answer directly; every other field goes through
    :func:`field_derivatives`.
    """
    own = getattr(f, "derivatives", None)
    if own is not None:
        return own(np.asarray(x, dtype=float), t)
    return field_derivatives(f, x, t)


def grad_divergence(f: Callable, x, t) -> np.ndarray:
    """Gradient of ``div f`` with respect to ``x``."""
    return field_derivatives(f, x, t)[2]
