"""``flowkl`` command line: identity and bound experiments, training, counterexample.

Every command writes deterministic CSV/JSON artifacts plus the effective
configuration into ``--out``. The exit status is 0 only if every
satisfied/tracking flag of the run is true, 1 if some flag is false, 2 for
usage errors and 3 when a computation fails.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from typing import Optional

import numpy as np

from . import plot
from .counterexample import CounterexampleSpec, verify_counterexample
from .errors import ArgumentError, FlowKLError
from .estimators import McConfig, bound_check, closed_form_bound, identity_curves
from .mlp import mlp_init
from .ode import IvpConfig, cumulative_trapezoid
from .paths import LinearField, Schedule, TimeGrid, closed_form_identity_curves, perturbed_field
from .train import DEFAULT_LADDER, TrainConfig, load_run_dir, train_direct_fm, write_run_dir

log = logging.getLogger("flowkl")

EXIT_OK, EXIT_FLAGS, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2, 3
CLOSED_FORM_TOL = 1e-4
AGREEMENT_FLOOR = 1e-6  # absolute slack for deterministic ODE bias when the stderr vanishes
SEED_ENV = "FLOWKL_SEED"

COMMON = {"seed": 0, "n": 50000, "grid": 201, "ode_steps": 200}
# learned fields cost far more per solve than linear ones
LEARNED = {"n": 4000, "grid": 21, "ode_steps": 50}
DEFAULTS = {
    ("verify-identity", "analytic"): {**COMMON, "schedule_p": "a1", "schedule_q": "a3"},
    ("verify-identity", "learned"): {**COMMON, **LEARNED, "schedule": "a2", "ladder": "0.05", "max_steps": 20000},
    ("verify-bound", "synthetic"): {**COMMON, "schedule": "a3", "betas": "0:0.2:0.025"},
    ("verify-bound", "checkpoints"): {**COMMON, **LEARNED, "schedule": "a1",
                                      "ladder": ",".join(str(v) for v in DEFAULT_LADDER), "max_steps": 20000},
    ("train", None): {"seed": 0, "schedule": "a2", "ladder": ",".join(str(v) for v in DEFAULT_LADDER),
                      "max_steps": 20000},
    ("counterexample", None): {"seed": 0, "n": 50000, "ode_steps": 200, "M": 1.0, "eps": 0.01, "tau": 0.5,
                               "b": "1,0"},
}
MODES = {"verify-identity": ("analytic", "learned"), "verify-bound": ("synthetic", "checkpoints")}
TYPES = {"seed": int, "n": int, "grid": int, "ode_steps": int, "max_steps": int, "M": float, "eps": float,
         "tau": float, "schedule": str, "schedule_p": str, "schedule_q": str, "ladder": str, "betas": str,
         "b": str, "run_dir": str, "train": bool}


class UsageError(Exception):
    pass


# -- formatting and files --------------------------------------------------------


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue().encode("utf-8")


def atomic_write(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def json_bytes(obj) -> bytes:
    return (json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n").encode("utf-8")


def write_chart(path: str, csv_data: bytes, series, **kw) -> None:
    digest = hashlib.sha256(csv_data).hexdigest()
    atomic_write(path, plot.line_chart(series, checksum=digest, **kw).encode("utf-8"))


# -- configuration ---------------------------------------------------------------


def read_config_file(path: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment, dashes in keys become underscores."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (p.strip() for p in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _coerce(key: str, value):
    kind = TYPES.get(key)
    if kind is None:
        raise UsageError(f"unknown config key {key!r}")
    if kind is bool:
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key} expects a boolean, got {value!r}")
    try:
        return kind(value)
    except ValueError:
        raise UsageError(f"{key} expects {kind.__name__}, got {value!r}") from None


def effective_config(command: str, mode: Optional[str], cli: dict, file_cfg: dict, env=os.environ) -> dict:
    """Defaults, then the config file, then explicit flags; ``FLOWKL_SEED`` stands in for an unset seed."""
    cfg = dict(DEFAULTS[(command, mode)])
    if mode in ("learned", "checkpoints"):
        cfg.setdefault("run_dir", None)
        cfg.setdefault("train", False)
    if "seed" not in file_cfg and cli.get("seed") is None and env.get(SEED_ENV):
        cfg["seed"] = _coerce("seed", env[SEED_ENV])
    for key, value in file_cfg.items():
        cfg[key] = _coerce(key, value)
    for key, value in cli.items():
        if value is not None and key in TYPES:
            cfg[key] = _coerce(key, value)
    for key in ("n", "grid", "ode_steps"):
        if key in cfg and cfg[key] < (2 if key != "ode_steps" else 1):
            raise UsageError(f"{key} is too small: {cfg[key]}")
    return cfg


def config_bytes(command: str, mode: Optional[str], cfg: dict) -> bytes:
    lines = [f"command = {command}"]
    if mode:
        lines.append(f"mode = {mode}")
    lines += [f"{k} = {fmt(v)}" for k, v in sorted(cfg.items()) if v is not None]
    return ("\n".join(lines) + "\n").encode("utf-8")


def parse_floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def parse_range(text: str) -> list:
    """``start:stop:step`` inclusive of ``stop``, or a comma list."""
    if ":" not in text:
        return list(parse_floats(text))
    try:
        start, stop, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"expected start:stop:step, got {text!r}") from None
    if step <= 0 or stop < start:
        raise UsageError(f"empty range {text!r}")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + k * step, 12) for k in range(count)]


def _schedule(key: str) -> Schedule:
    try:
        return Schedule.from_id(key)
    except (KeyError, ValueError, FlowKLError):
        raise UsageError(f"unknown schedule {key!r}") from None


def _mc(cfg: dict) -> McConfig:
    return McConfig(n=cfg["n"], seed=cfg["seed"], grid=TimeGrid.uniform(cfg["grid"]), ode=IvpConfig(cfg["ode_steps"]))


# -- commands --------------------------------------------------------------------


IDENTITY_HEADER = ["t", "kl_hat", "kl_se", "g_hat", "g_se", "cum_integral", "cum_se", "tracking"]


def _identity_rows(rep):
    return [list(r) for r in zip(rep.t, rep.kl_hat, rep.kl_se, rep.g_hat, rep.g_se, rep.cum_integral, rep.cum_se,
                                 rep.tracking)]


def _obtain_ladder(cfg: dict, out: str) -> list:
    run_dir = cfg.get("run_dir")
    if run_dir and os.path.exists(os.path.join(run_dir, "manifest.json")):
        ladder = load_run_dir(run_dir)
        if not ladder:
            raise UsageError(f"run directory {run_dir} has no checkpoints")
        return ladder
    if run_dir and not cfg.get("train"):
        raise UsageError(f"run directory {run_dir} has no checkpoints; pass --train to create them")
    target = run_dir or os.path.join(out, "run")
    result = _train(cfg)
    write_run_dir(result, target)
    return list(result.ladder)


def _train(cfg: dict):
    tc = TrainConfig(seed=cfg["seed"], max_steps=cfg["max_steps"], ladder=parse_floats(cfg["ladder"]))
    s = _schedule(cfg["schedule"])
    log.info("training on %s with ladder %s", s.label, tc.ladder)
    return train_direct_fm(s, mlp_init(seed=cfg["seed"]), tc)


def run_verify_identity(mode: str, cfg: dict, out: str) -> tuple[bool, dict]:
    mc = _mc(cfg)
    if mode == "analytic":
        s_p, s_q = _schedule(cfg["schedule_p"]), _schedule(cfg["schedule_q"])
        rep = identity_curves(s_p, LinearField(s_q), mc)
        kl_cf, g_cf = closed_form_identity_curves(s_p, s_q, mc.grid)
        cum_cf = cumulative_trapezoid(g_cf, mc.grid)
        gap = float(np.max(np.abs(kl_cf - cum_cf)))
        header = IDENTITY_HEADER + ["kl_closed", "g_closed", "cum_closed"]
        rows = [r + [a, b, c] for r, a, b, c in zip(_identity_rows(rep), kl_cf, g_cf, cum_cf)]
        summary = {"closed_form_max_gap": gap, "closed_form_ok": gap <= CLOSED_FORM_TOL,
                   "kl_terminal_closed": float(kl_cf[-1])}
        ok = rep.tracking_ok and gap <= CLOSED_FORM_TOL
        series = [plot.Series("KL closed form", rep.t, kl_cf), plot.Series("KL Monte Carlo", rep.t, rep.kl_hat),
                  plot.Series("integral of g (MC)", rep.t, rep.cum_integral, dashed=True)]
    else:
        ladder = _obtain_ladder(cfg, out)
        ck = ladder[-1]
        s = _schedule(cfg["schedule"])
        rep = identity_curves(s, ck.to_model(), mc)
        header, rows = IDENTITY_HEADER, _identity_rows(rep)
        summary = {"checkpoint_step": ck.step, "val_mse": ck.val_mse,
                   "val_mse_ok": ck.val_mse <= parse_floats(cfg["ladder"])[-1]}
        ok = rep.tracking_ok and summary["val_mse_ok"]
        series = [plot.Series("KL (MC)", rep.t, rep.kl_hat),
                  plot.Series("integral of g (MC)", rep.t, rep.cum_integral, dashed=True)]
    summary.update({"tracking_ok": rep.tracking_ok, "kl_terminal": rep.kl_terminal,
                    "kl_terminal_se": rep.kl_terminal_se, "all_ok": ok})
    data = csv_bytes(header, rows)
    atomic_write(os.path.join(out, "identity.csv"), data)
    write_chart(os.path.join(out, "identity.svg"), data, series, title="KL identity", xlabel="t", ylabel="KL")
    return ok, summary


BOUND_HEADER = ["label", "eps_total", "score_gap_total", "bound_rhs", "kl_terminal", "satisfied"]


def run_verify_bound(mode: str, cfg: dict, out: str) -> tuple[bool, dict]:
    mc = _mc(cfg)
    s = _schedule(cfg["schedule"])
    rows = []
    if mode == "synthetic":
        header = BOUND_HEADER + ["eps_total_mc", "eps_total_se", "score_gap_total_mc", "score_gap_total_se",
                                 "kl_terminal_mc", "kl_terminal_se", "bound_rhs_mc", "bound_rhs_se",
                                 "mc_satisfied", "mc_agrees"]
        for beta in parse_range(cfg["betas"]):
            s_q = s.shifted(beta) if beta != 0 else s
            cf = closed_form_bound(s, s_q, mc.grid)
            log.info("beta %g", beta)
            rep = bound_check(s, perturbed_field(s, beta), mc)

            def close(est, se, ref):
                return abs(est - ref) <= 3.0 * se + AGREEMENT_FLOOR

            agrees = (close(rep.kl_terminal, rep.kl_terminal_se, cf.kl_terminal)
                      and close(rep.eps_total, rep.eps_total_se, cf.eps_total)
                      and close(rep.score_gap_total, rep.score_gap_total_se, cf.score_gap_total))
            rows.append([f"beta={beta:g}", cf.eps_total, cf.score_gap_total, cf.bound_rhs, cf.kl_terminal,
                         cf.satisfied, rep.eps_total, rep.eps_total_se, rep.score_gap_total,
                         rep.score_gap_total_se, rep.kl_terminal, rep.kl_terminal_se, rep.bound_rhs,
                         rep.bound_rhs_se, rep.satisfied, agrees])
        ok = all(r[5] and r[14] and r[15] for r in rows)
        x_label, log_axes = "beta", False
        xs = [float(r[0].split("=")[1]) for r in rows]
    else:
        header = BOUND_HEADER + ["eps_total_se", "score_gap_total_se", "bound_rhs_se", "kl_terminal_se",
                                 "step", "val_mse"]
        for ck in _obtain_ladder(cfg, out):
            log.info("checkpoint step %d (val %.4g)", ck.step, ck.val_mse)
            rep = bound_check(s, ck.to_model(), mc)
            rows.append([f"ckpt_{ck.step}", rep.eps_total, rep.score_gap_total, rep.bound_rhs, rep.kl_terminal,
                         rep.satisfied, rep.eps_total_se, rep.score_gap_total_se, rep.bound_rhs_se,
                         rep.kl_terminal_se, ck.step, ck.val_mse])
        rows.sort(key=lambda r: (r[1], r[0]))
        ok = all(r[5] for r in rows)
        x_label, log_axes = "eps_theta", True
        xs = [r[1] for r in rows]
    data = csv_bytes(header, rows)
    atomic_write(os.path.join(out, "bound.csv"), data)
    series = [plot.Series("KL(p1 || q1)", xs, [r[4] for r in rows]),
              plot.Series("eps * sqrt(S)", xs, [r[3] for r in rows], dashed=True)]
    write_chart(os.path.join(out, "bound.svg"), data, series, title="KL bound", xlabel=x_label, ylabel="value",
                log_x=log_axes, log_y=log_axes)
    return ok, {"rows": len(rows), "all_ok": ok}


def run_train(cfg: dict, out: str) -> tuple[bool, dict]:
    result = _train(cfg)
    write_run_dir(result, out)
    reached = [ck.val_mse for ck in result.ladder]
    return True, {"checkpoints": len(result.ladder), "final_val_mse": result.final_val_mse, "val_mse": reached,
                  "steps_run": result.steps_run}


def run_counterexample(cfg: dict, out: str) -> tuple[bool, dict]:
    try:
        spec = CounterexampleSpec(M=cfg["M"], eps=cfg["eps"], b=parse_floats(cfg["b"]), tau=cfg["tau"])
    except ArgumentError as exc:
        raise UsageError(str(exc)) from None
    rep = verify_counterexample(spec, n=cfg["n"], seed=cfg["seed"], ode=IvpConfig(cfg["ode_steps"]), strict=False)
    inst = rep.instance
    payload = {
        "spec": {"M": spec.M, "eps": spec.eps, "b": list(spec.b), "tau": spec.tau},
        "instance": {"delta": inst.delta, "J": inst.J, "eta": inst.eta, "a_at_1": inst.a(1.0),
                     "warnings": list(inst.warnings)},
        "fm_loss": rep.fm_loss, "fm_loss_quadrature": rep.fm_loss_quadrature, "fm_loss_stderr": rep.fm_loss_stderr,
        "kl_direct": rep.kl_direct, "kl_path_integral": rep.kl_path_integral,
        "kl_mc": rep.kl_mc, "kl_mc_stderr": rep.kl_mc_stderr,
        "kl_transport_only": rep.kl_transport_only, "kl_transport_only_stderr": rep.kl_transport_only_stderr,
        "logdensity_max_err": rep.logdensity_max_err,
        "checks": rep.checks, "passed": rep.passed,
    }
    atomic_write(os.path.join(out, "counterexample.json"), json_bytes(payload))
    return rep.passed, {"all_ok": rep.passed}


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowkl", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, mc=True):
        sp.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--config", help="key=value file; flags override it")
        sp.add_argument("--seed", type=int, help=f"root seed (fallback: ${SEED_ENV}, then 0)")
        if mc:
            sp.add_argument("--n", type=int, help="samples per grid point")
            sp.add_argument("--grid", type=int, help="grid points on [0, 1]")
            sp.add_argument("--ode-steps", dest="ode_steps", type=int, help="RK4 steps per unit time")

    def learned(sp):
        sp.add_argument("--run-dir", dest="run_dir", help="directory with a trained checkpoint ladder")
        sp.add_argument("--train", action="store_const", const=True, help="train into --run-dir if it is empty")
        sp.add_argument("--ladder", help="comma-separated validation thresholds")
        sp.add_argument("--max-steps", dest="max_steps", type=int)

    sp = sub.add_parser("verify-identity", help="KL curve against the running identity integral")
    sp.add_argument("--mode", choices=MODES["verify-identity"], help="default: analytic")
    sp.add_argument("--schedule-p", dest="schedule_p")
    sp.add_argument("--schedule-q", dest="schedule_q")
    sp.add_argument("--schedule")
    common(sp)
    learned(sp)

    sp = sub.add_parser("verify-bound", help="terminal KL against eps * sqrt(S)")
    sp.add_argument("--mode", choices=MODES["verify-bound"], help="default: synthetic")
    sp.add_argument("--schedule")
    sp.add_argument("--betas", help="start:stop:step or a comma list")
    common(sp)
    learned(sp)

    sp = sub.add_parser("train", help="train a checkpoint ladder")
    sp.add_argument("--schedule")
    sp.add_argument("--ladder")
    sp.add_argument("--max-steps", dest="max_steps", type=int)
    common(sp, mc=False)

    sp = sub.add_parser("counterexample", help="weak-solution counterexample report")
    sp.add_argument("--M", dest="M", type=float)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--b", help="direction, comma-separated")
    sp.add_argument("--n", type=int)
    sp.add_argument("--ode-steps", dest="ode_steps", type=int)
    common(sp, mc=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    mode = getattr(args, "mode", None)
    cli = {k: v for k, v in vars(args).items() if k not in ("command", "mode", "out", "config", "verbose")}
    try:
        file_cfg = read_config_file(args.config) if args.config else {}
        file_cfg.pop("command", None)
        file_mode = file_cfg.pop("mode", None)
        if file_mode is not None and file_mode not in MODES.get(args.command, ()):
            raise UsageError(f"mode {file_mode!r} does not apply to {args.command}")
        if args.command in MODES:
            mode = mode or file_mode or MODES[args.command][0]
        cfg = effective_config(args.command, mode, cli, file_cfg)
        os.makedirs(args.out, exist_ok=True)
        atomic_write(os.path.join(args.out, "effective_config.txt"), config_bytes(args.command, mode, cfg))
        if args.command == "verify-identity":
            ok, summary = run_verify_identity(mode, cfg, args.out)
        elif args.command == "verify-bound":
            ok, summary = run_verify_bound(mode, cfg, args.out)
        elif args.command == "train":
            ok, summary = run_train(cfg, args.out)
        else:
            ok, summary = run_counterexample(cfg, args.out)
    except (UsageError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"flowkl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FlowKLError as exc:
        print(f"flowkl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    atomic_write(os.path.join(args.out, "summary.json"), json_bytes(summary))
    print(json.dumps(_plain(summary), sort_keys=True))
    return EXIT_OK if ok else EXIT_FLAGS


if __name__ == "__main__":
    sys.exit(main())
