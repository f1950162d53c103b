"""Flow-matching training loops and the checkpoint ladder.

Two objectives share one Adam loop:

* direct regression of ``v_theta(x, t)`` onto a known linear target
  ``a(t) x`` with ``t ~ U[0, 1]`` and ``x ~ p_t``;
* the affine conditional objective, regressing onto
  ``mu'_t x_1 + sigma'_t x_0`` at ``x_t = mu_t x_1 + sigma_t x_0`` for data
  points ``x_1`` and ``x_0 ~ N(0, I)``, with ``t`` uniform on a clipped window.

Validation error is measured on a probe set fixed at the start of the run so
that ladder crossings are comparable across steps.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng
from .errors import ArgumentError, NumericError, TrainingError
from .mlp import Checkpoint, MlpVelocity, checkpoint_from_model, checkpoint_load, checkpoint_save, mlp_loss_grad
from .paths import Schedule, TimeGrid, schedule_eval, sigma_p

log = logging.getLogger(__name__)

DEFAULT_LADDER = (0.5, 0.2, 0.1, 0.05, 0.02, 0.01)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    max_steps: int = 20000
    lr_peak: float = 1e-3
    warmup_steps: int = 500
    final_lr_fraction: float = 0.01
    seed: int = 0
    val_n: int = 2048
    val_times: int = 21
    val_every: int = 100
    ladder: tuple = DEFAULT_LADDER
    stop_when_ladder_complete: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        ladder = tuple(float(v) for v in self.ladder)
        object.__setattr__(self, "ladder", ladder)
        if not ladder:
            raise ArgumentError("ladder must have at least one threshold")
        if any(v <= 0 for v in ladder) or any(b >= a for a, b in zip(ladder, ladder[1:])):
            raise ArgumentError(f"ladder must be strictly decreasing and positive, got {ladder}")
        if self.batch_size < 1 or self.max_steps < 0 or self.val_every < 1:
            raise ArgumentError("batch_size, val_every must be positive and max_steps nonnegative")
        if self.val_n < 1 or self.val_times < 2:
            raise ArgumentError("validation needs val_n >= 1 and val_times >= 2")
        if not self.lr_peak > 0:
            raise ArgumentError("lr_peak must be positive")


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak`` then cosine decay to ``lr_peak * final_lr_fraction``."""
    lo = cfg.lr_peak * cfg.final_lr_fraction
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr_peak * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.max_steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return lo + 0.5 * (cfg.lr_peak - lo) * (1.0 + math.cos(math.pi * progress))


class Adam:
    def __init__(self, n: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- affine conditional paths -------------------------------------------------


@dataclass(frozen=True)
class AffineSchedule:
    """``x_t = mu_t x_1 + sigma_t x_0`` with ``mu_0 = sigma_1 = 0`` and ``mu_1 = sigma_0 = 1``."""

    mu: Callable
    sigma: Callable
    dmu: Callable
    dsigma: Callable
    name: str = "affine"

    def __post_init__(self):
        ends = (self.mu(0.0), self.sigma(1.0), self.mu(1.0), self.sigma(0.0))
        if not np.allclose(ends, (0.0, 0.0, 1.0, 1.0), atol=1e-12, rtol=0):
            raise ArgumentError(f"affine schedule violates boundary conditions: {ends}")
        probe = np.linspace(0.0, 1.0, 65)[1:-1]
        if np.any(np.asarray(self.dmu(probe)) <= 0) or np.any(np.asarray(self.dsigma(probe)) >= 0):
            raise ArgumentError("need mu' > 0 and sigma' < 0 on (0, 1)")

    @classmethod
    def linear(cls) -> "AffineSchedule":
        return cls(
            mu=lambda t: np.asarray(t, dtype=float),
            sigma=lambda t: 1.0 - np.asarray(t, dtype=float),
            dmu=lambda t: np.ones_like(np.asarray(t, dtype=float)),
            dsigma=lambda t: -np.ones_like(np.asarray(t, dtype=float)),
            name="linear",
        )

    @classmethod
    def cosine(cls) -> "AffineSchedule":
        h = 0.5 * np.pi
        return cls(
            mu=lambda t: np.sin(h * np.asarray(t, dtype=float)),
            sigma=lambda t: np.cos(h * np.asarray(t, dtype=float)),
            dmu=lambda t: h * np.cos(h * np.asarray(t, dtype=float)),
            dsigma=lambda t: -h * np.sin(h * np.asarray(t, dtype=float)),
            name="cosine",
        )


@dataclass(frozen=True)
class ClipWindow:
    t0: float = 0.001
    T: float = 0.999

    def __post_init__(self):
        if not (0.0 <= self.t0 < self.T <= 1.0):
            raise ArgumentError(f"need 0 <= t0 < T <= 1, got ({self.t0}, {self.T})")


def cfm_target(aff: AffineSchedule, x1, x0, t):
    """Interpolated point and conditional velocity ``(x_t, mu'_t x_1 + sigma'_t x_0)``."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ArgumentError(f"time outside [0, 1]: {t}")
    x1 = np.asarray(x1, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    col = t_arr[..., None] if t_arr.ndim else t_arr
    xt = aff.mu(col) * x1 + aff.sigma(col) * x0
    target = aff.dmu(col) * x1 + aff.dsigma(col) * x0
    return xt, target


# -- validation ----------------------------------------------------------------


def validation_mse(model, s: Schedule, grid: TimeGrid, n: int, seed: int, d: Optional[int] = None) -> float:
    """Mean over grid times of the MC estimate of ``E_{x ~ p_t} ||v(x, t) - a(t) x||^2``.

    ``model`` is a :class:`Checkpoint` or any velocity field. The same normal
    draws are reused at every grid time.
    """
    field_ = model.to_model() if isinstance(model, Checkpoint) else model
    if d is None:
        d = getattr(field_, "dim", 2)
    z = rng.shard_normals(seed, ("validation",), n, d)
    per_t = []
    for t in grid.points:
        x = sigma_p(s, t) * z
        r = np.asarray(field_(x, t), dtype=float) - schedule_eval(s, t) * x
        per_t.append(np.mean(np.sum(r * r, axis=-1)))
    return float(math.fsum(per_t) / len(per_t))


# -- generic loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    ladder: list
    log: list = field(default_factory=list)
    final_val_mse: float = float("nan")
    steps_run: int = 0
    config: Optional[TrainConfig] = None
    schedule_id: str = ""
    widths: tuple = ()

    def __iter__(self):
        return iter(self.ladder)

    def __len__(self):
        return len(self.ladder)


def _train(net: MlpVelocity, batch_fn, val_fn, cfg: TrainConfig, schedule_id: str, objective: str) -> TrainResult:
    opt = Adam(net.n_params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    params = net.get_params()
    pending = list(cfg.ladder)
    ladder: list[Checkpoint] = []
    rows = []
    window: list[float] = []
    meta = {"objective": objective}

    def evaluate(step):
        val = float(val_fn(net))
        if not math.isfinite(val):
            raise TrainingError(f"non-finite validation error at step {step}", step=step)
        crossed = [thr for thr in pending if val <= thr]
        if crossed:
            for thr in crossed:
                pending.remove(thr)
            if not ladder or val < ladder[-1].val_mse:
                ladder.append(checkpoint_from_model(
                    net, step=step, val_mse=val, schedule_id=schedule_id, rng_seed=cfg.seed,
                    meta={**meta, "threshold": min(crossed)},
                ))
        return val

    step = 0
    val = evaluate(0)
    rows.append((0, float("nan"), val, 0.0))
    while step < cfg.max_steps and not (cfg.stop_when_ladder_complete and not pending):
        x, t, target = batch_fn(step)
        try:
            loss, grad = mlp_loss_grad(net, x, t, target)
        except NumericError:
            raise TrainingError(f"training loss became non-finite at step {step}", step=step) from None
        lr = learning_rate(step, cfg)
        params = opt.step(params, grad, lr)
        if not np.all(np.isfinite(params)):
            raise TrainingError(f"parameters became non-finite at step {step}", step=step)
        net.set_params(params)
        window.append(loss)
        step += 1
        if step % cfg.val_every == 0 or step == cfg.max_steps:
            val = evaluate(step)
            rows.append((step, math.fsum(window) / len(window), val, lr))
            window = []
            log.debug("step %d loss %.5g val %.5g lr %.3g", step, rows[-1][1], val, lr)
    if window:
        val = evaluate(step)
        rows.append((step, math.fsum(window) / len(window), val, learning_rate(step - 1, cfg)))
    if not ladder or val < ladder[-1].val_mse:
        ladder.append(checkpoint_from_model(
            net, step=step, val_mse=val, schedule_id=schedule_id, rng_seed=cfg.seed, meta={**meta, "final": True},
        ))
    best = ladder[-1].val_mse
    if best > cfg.ladder[0]:
        raise TrainingError(
            f"validation error {best:.4g} never reached the first ladder level {cfg.ladder[0]}", step=step
        )
    return TrainResult(ladder, rows, val, step, cfg, schedule_id, net.widths)


def _check_net(net: MlpVelocity, d: int):
    if net.widths[0] != d + 1 or net.widths[-1] != d:
        raise ArgumentError(f"network widths {net.widths} do not fit dimension {d}")


def train_direct_fm(s: Schedule, net: MlpVelocity, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Regress ``net`` onto ``a(t) x`` with ``t ~ U[0, 1]``, ``x ~ p_t``; trains ``net`` in place."""
    d = net.dim
    _check_net(net, d)
    grid = TimeGrid.uniform(cfg.val_times)
    val_seed = rng.seed_sequence(cfg.seed, "validation-set").generate_state(1)[0]

    def batch(step):
        gen = rng.stream(cfg.seed, "train-batch", step)
        t = gen.uniform(0.0, 1.0, cfg.batch_size)
        z = gen.standard_normal((cfg.batch_size, d))
        x = sigma_p(s, t)[:, None] * z
        return x, t, schedule_eval(s, t)[:, None] * x

    return _train(net, batch, lambda m: validation_mse(m, s, grid, cfg.val_n, int(val_seed), d), cfg, s.label, "direct")


def train_affine_cfm(data, aff: AffineSchedule, clip: ClipWindow, net: MlpVelocity, cfg: TrainConfig) -> TrainResult:
    """Minimize the empirical conditional flow-matching loss on ``data``.

    Each step samples data indices uniformly, ``t ~ U[t0, T]`` and
    ``x_0 ~ N(0, I)``. The validation error is the same loss on a probe set of
    ``val_n * val_times`` draws fixed at the start of the run.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ArgumentError("data must be a nonempty (n, d) array")
    d = data.shape[1]
    _check_net(net, d)

    def draw(gen, size):
        idx = gen.integers(0, data.shape[0], size)
        t = gen.uniform(clip.t0, clip.T, size)
        x0 = gen.standard_normal((size, d))
        xt, target = cfm_target(aff, data[idx], x0, t)
        return xt, t, target

    vx, vt, vtarget = draw(rng.stream(cfg.seed, "cfm-validation"), cfg.val_n * cfg.val_times)

    def val_fn(m):
        r = np.asarray(m(vx, vt)) - vtarget
        return np.mean(np.sum(r * r, axis=-1))

    return _train(net, lambda step: draw(rng.stream(cfg.seed, "cfm-batch", step), cfg.batch_size),
                  val_fn, cfg, f"cfm-{aff.name}", "affine-cfm")


# -- run directories -------------------------------------------------------------


def _atomic_write(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_run_dir(result: TrainResult, out_dir: str, extra: Optional[dict] = None) -> list:
    """Write ``manifest.json``, ``ckpt_<step>.json`` and ``train_log.csv``; returns checkpoint paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    entries = []
    for ck in result.ladder:
        name = f"ckpt_{ck.step}.json"
        _atomic_write(os.path.join(out_dir, name), checkpoint_save(ck))
        paths.append(os.path.join(out_dir, name))
        entries.append({"file": name, "step": ck.step, "val_mse": ck.val_mse})
    manifest = {
        "schedule_id": result.schedule_id,
        "architecture": {"widths": list(result.widths), "activation": "tanh", "time_input": "raw"},
        "config": asdict(result.config) if result.config else {},
        "seed": result.config.seed if result.config else None,
        "steps_run": result.steps_run,
        "final_val_mse": result.final_val_mse,
        "checkpoints": entries,
    }
    if extra:
        manifest.update(extra)
    _atomic_write(os.path.join(out_dir, "manifest.json"),
                  (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "train_loss", "val_mse", "lr"])
    for step, loss, val, lr in result.log:
        w.writerow([step, "" if math.isnan(loss) else f"{loss:.17g}", f"{val:.17g}", f"{lr:.17g}"])
    _atomic_write(os.path.join(out_dir, "train_log.csv"), buf.getvalue().encode())
    return paths


def load_run_dir(out_dir: str) -> list:
    """Checkpoints listed in a run directory's manifest, in ladder order."""
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    out = []
    for entry in manifest["checkpoints"]:
        with open(os.path.join(out_dir, entry["file"]), "rb") as fh:
            out.append(checkpoint_load(fh.read()))
    return out
