"""Small tanh MLP velocity field ``v_theta(x, t)`` with hand-written backprop.

The input is ``(x, t)`` concatenated (time is a raw extra coordinate); hidden
layers are affine + tanh, the output layer is affine. The forward pass is
written against the autodiff primitives so Dual/Dual2 probes go straight
through it; training gradients use an explicit reverse pass.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import rng
from .errors import ArgumentError, FormatError, NumericError

DEFAULT_WIDTHS = (3, 64, 64, 64, 2)
CHECKPOINT_FORMAT = "flowkl-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class MlpVelocity:
    widths: tuple
    weights: list  # weights[l] has shape (fan_out, fan_in)
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2:
            raise ArgumentError("an MLP needs at least an input and an output width")
        if self.widths[0] != self.widths[-1] + 1:
            raise ArgumentError(f"input width must be d+1 for output width d, got {self.widths}")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[l + 1], self.widths[l]) or b.shape != (self.widths[l + 1],):
                raise ArgumentError(f"layer {l} has shape {w.shape}/{b.shape}, widths say {self.widths}")
        if len(self.weights) != len(self.widths) - 1:
            raise ArgumentError("number of layers does not match widths")

    @property
    def dim(self) -> int:
        return self.widths[-1]

    @property
    def n_params(self) -> int:
        return sum((a + 1) * b for a, b in zip(self.widths[:-1], self.widths[1:]))

    def __call__(self, x, t):
        return mlp_forward(self, x, t)

    def derivatives(self, x, t):
        return mlp_derivatives(self, x, t)

    def get_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ArgumentError(f"expected {self.n_params} parameters, got {flat.shape}")
        pos = 0
        for l in range(len(self.weights)):
            w = self.weights[l]
            self.weights[l] = flat[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            nb = self.biases[l].size
            self.biases[l] = flat[pos:pos + nb].copy()
            pos += nb

    def copy(self) -> "MlpVelocity":
        return MlpVelocity(self.widths, [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)


def mlp_init(widths: Sequence[int] = DEFAULT_WIDTHS, seed: int = 0, zero: bool = False) -> MlpVelocity:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or widths[0] != widths[-1] + 1:
        raise ArgumentError(f"widths must run from d+1 to d, got {widths}")
    gen = rng.stream(seed, "mlp_init")
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        w = np.zeros((fan_out, fan_in)) if zero else gen.uniform(-bound, bound, size=(fan_out, fan_in))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpVelocity(widths, weights, biases)


def _time_column(x, t):
    shape = ad.value(x).shape[:-1]
    return np.broadcast_to(np.asarray(t, dtype=float), shape)[..., None]


def mlp_forward(m: MlpVelocity, x, t):
    """Evaluate ``v_theta(x, t)``; ``x`` may be an array, Dual or Dual2."""
    _check_params(m)
    h = ad.concatenate([x, _time_column(x, t)], axis=-1)
    last = len(m.weights) - 1
    for l, (w, b) in enumerate(zip(m.weights, m.biases)):
        h = h @ w.T + b
        if l < last:
            h = ad.tanh(h)
    return h


def _check_params(m: MlpVelocity) -> None:
    for l, (w, b) in enumerate(zip(m.weights, m.biases)):
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise NumericError(f"non-finite parameters in layer {l}", index=l)


class _Scratch(threading.local):
    """Per-thread reusable work arrays; fresh multi-megabyte allocations per
    call are dominated by page faults."""

    def __init__(self):
        self._bufs = {}

    def get(self, key, shape):
        buf = self._bufs.get(key)
        if buf is None or buf.shape != shape:
            buf = self._bufs[key] = np.empty(shape)
        return buf


_SCRATCH = _Scratch()


def mlp_derivatives(m: MlpVelocity, x, t):
    """``(value, jac, grad_div)`` of the network in x, propagated layer by layer.

    Carries the value, the ``d`` first partials and the ``d(d+1)/2`` distinct
    second partials of every unit in one stacked array, so each layer costs a
    single matmul. The first layer's partials are the constant weight columns.
    """
    _check_params(m)
    x = np.asarray(x, dtype=float)
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1])
    n, d = x2.shape
    pairs = [(i, j) for i in range(d) for j in range(i, d)]
    pidx = {}
    for k, (i, j) in enumerate(pairs):
        pidx[(i, j)] = pidx[(j, i)] = k
    w0, b0 = m.weights[0], m.biases[0]
    z = x2 @ w0[:, :d].T + (np.asarray(t, dtype=float) * w0[:, d] + b0)
    last = len(m.weights) - 1
    if last == 0:
        jac = np.broadcast_to(w0[:, :d], (n, d, d))
        return z.reshape(x.shape), jac.reshape(lead + (d, d)).copy(), np.zeros(x.shape)
    nch = 1 + d + len(pairs)
    # layout: axis 0 indexes [value | first partials | second partials]
    width = z.shape[1]
    h = _SCRATCH.get(("h", 0), (nch, n, width))
    g0 = np.tanh(z, out=h[0])
    g1 = _SCRATCH.get("g1", (n, width))
    np.multiply(g0, g0, out=g1)
    np.subtract(1.0, g1, out=g1)
    for i in range(d):
        np.multiply(g1, w0[:, i], out=h[1 + i])
    g2 = _SCRATCH.get("g2", (n, width))
    np.multiply(g0, g1, out=g2)
    g2 *= -2.0
    for k, (i, j) in enumerate(pairs):
        np.multiply(g2, w0[:, i] * w0[:, j], out=h[1 + d + k])
    tmp = _SCRATCH.get("tmp", (n, width))
    for l in range(1, last + 1):
        w, b = m.weights[l], m.biases[l]
        z = _SCRATCH.get(("z", l), (nch * n, w.shape[0]))
        np.matmul(h.reshape(nch * n, -1), w.T, out=z)
        z = z.reshape(nch, n, w.shape[0])
        z[0] += b
        if l == last:
            h = z
            break
        h = _SCRATCH.get(("h", l), z.shape)
        g0 = np.tanh(z[0], out=h[0])
        np.multiply(g0, g0, out=g1)
        np.subtract(1.0, g1, out=g1)
        np.multiply(g0, g1, out=g2)
        g2 *= -2.0
        np.multiply(g1, z[1:], out=h[1:])
        for k, (i, j) in enumerate(pairs):
            np.multiply(z[1 + i], z[1 + j], out=tmp)
            tmp *= g2
            h[1 + d + k] += tmp
    val = h[0].copy()
    jac = np.moveaxis(h[1:1 + d], 0, -1).copy()  # jac[n, a, i] = d v_a / d x_i
    gdiv = np.zeros((n, d))
    for i in range(d):
        for a in range(d):
            gdiv[:, i] += h[1 + d + pidx[(i, a)], :, a]
    if not (np.all(np.isfinite(val)) and np.all(np.isfinite(jac)) and np.all(np.isfinite(gdiv))):
        raise NumericError("non-finite network derivatives")
    return val.reshape(x.shape), jac.reshape(lead + (d, d)), gdiv.reshape(x.shape)


def _forward_cache(m: MlpVelocity, x, t):
    h = np.concatenate([np.asarray(x, dtype=float), _time_column(x, t)], axis=-1)
    acts = [h]
    last = len(m.weights) - 1
    for l, (w, b) in enumerate(zip(m.weights, m.biases)):
        h = h @ w.T + b
        if l < last:
            h = np.tanh(h)
        acts.append(h)
    return acts


def mlp_loss_grad(m: MlpVelocity, x, t, target):
    """Mean over the batch of ``||v_theta(x_i, t_i) - target_i||^2`` and its parameter gradient.

    Returns ``(loss, grad)`` with ``grad`` flattened in :meth:`MlpVelocity.get_params` order.
    """
    x = np.asarray(x, dtype=float)
    target = np.asarray(target, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ArgumentError("batch must be a nonempty (n, d) array")
    if target.shape != x.shape:
        raise ArgumentError(f"target shape {target.shape} does not match batch {x.shape}")
    n = x.shape[0]
    acts = _forward_cache(m, x, t)
    resid = acts[-1] - target
    loss = float(np.sum(resid * resid) / n)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    delta = (2.0 / n) * resid
    grads_w = [None] * len(m.weights)
    grads_b = [None] * len(m.weights)
    for l in range(len(m.weights) - 1, -1, -1):
        grads_w[l] = delta.T @ acts[l]
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ m.weights[l]) * (1.0 - acts[l] ** 2)
    grad = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in zip(grads_w, grads_b)])
    return loss, grad


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    params: np.ndarray
    widths: tuple
    step: int
    val_mse: float
    schedule_id: str
    rng_seed: int
    activation: str = "tanh"
    meta: dict = field(default_factory=dict)

    def to_model(self) -> MlpVelocity:
        m = mlp_init(self.widths, zero=True)
        m.set_params(self.params)
        return m


def checkpoint_from_model(m: MlpVelocity, *, step: int, val_mse: float, schedule_id: str, rng_seed: int, meta=None) -> Checkpoint:
    if not val_mse >= 0:
        raise ArgumentError(f"val_mse must be nonnegative, got {val_mse}")
    return Checkpoint(m.get_params(), m.widths, int(step), float(val_mse), str(schedule_id), int(rng_seed), m.activation, dict(meta or {}))


def checkpoint_save(ckpt: Checkpoint) -> bytes:
    """Versioned JSON; floats use ``repr`` so they round-trip exactly."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "widths": list(ckpt.widths),
        "activation": ckpt.activation,
        "step": ckpt.step,
        "val_mse": float(ckpt.val_mse),
        "schedule_id": ckpt.schedule_id,
        "rng_seed": ckpt.rng_seed,
        "meta": ckpt.meta,
        "params": [float(p) for p in ckpt.params],
    }
    return (json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n").encode("utf-8")


def checkpoint_load(data: bytes) -> Checkpoint:
    try:
        payload = json.loads(data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError("not a flowkl checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {payload.get('version')!r}")
    try:
        widths = tuple(int(w) for w in payload["widths"])
        params = np.array(payload["params"], dtype=float)
        ckpt = Checkpoint(
            params=params,
            widths=widths,
            step=int(payload["step"]),
            val_mse=float(payload["val_mse"]),
            schedule_id=str(payload["schedule_id"]),
            rng_seed=int(payload["rng_seed"]),
            activation=str(payload["activation"]),
            meta=dict(payload.get("meta", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed checkpoint field: {exc}") from None
    expected = sum((a + 1) * b for a, b in zip(widths[:-1], widths[1:]))
    if params.shape != (expected,):
        raise FormatError(f"checkpoint has {params.size} parameters, widths need {expected}")
    if ckpt.val_mse < 0:
        raise FormatError("negative val_mse in checkpoint")
    if ckpt.activation != "tanh":
        raise FormatError(f"unsupported activation {ckpt.activation!r}")
    return ckpt
