"""``capolicy`` command-line entry point.

Exit codes follow sysexits: 64 bad config or usage, 65 malformed trace,
66 missing weights, 74 I/O failure. ``train`` exits 2 on a non-finite loss.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, ppo
from .baseline import BaselineGains
from .config import ConfigError, dump_toml, load_train_config, read_toml, train_config_to_dict
from .execution import Policy, WeightsMissing
from .nn import WeightsFormatError
from .scenarios import (
    BaselineController,
    PolicyController,
    Scenario,
    load_scenario,
    resolve_scenario,
    sweep,
    trace_filename,
    write_summary,
    write_trace,
)

EX_OK, EX_FAIL, EX_NONFINITE = 0, 1, 2
EX_CONFIG, EX_DATAERR, EX_NOINPUT, EX_IOERR = 64, 65, 66, 74
OUT_ENV = "CAPOLICY_OUT"

log = logging.getLogger("capolicy")


class MalformedTrace(ValueError):
    pass


def _out_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUT_ENV) or "capolicy_out")


def _parse_offsets(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise ConfigError(f"bad offset list {text!r}") from e
    if not vals:
        raise ConfigError("empty offset list")
    return vals


def _parse_grid(text: str) -> list[float]:
    """Either a comma list or ``start:stop:num`` (log spaced, inclusive)."""
    try:
        if ":" in text:
            a, b, n = text.split(":")
            return [float(v) for v in np.geomspace(float(a), float(b), int(n))]
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise ConfigError(f"bad grid {text!r}") from e


# -- subcommands -------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_train_config(args.config) if args.config else ppo.TrainConfig().validate()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps is not None:
        cfg.total_steps = args.steps
        cfg.validate()
    out = _out_dir(args.out)

    def progress(update, total, mean_reward, stats):
        log.info("update %d/%d  mean episode reward %.3f", update, total, mean_reward)

    try:
        result = ppo.train(cfg, progress=progress)
    except ppo.NonFiniteLoss as e:
        print(f"error: {e}", file=sys.stderr)
        try:
            print(f"diagnostics: {ppo.dump_diagnostics(out, e)}", file=sys.stderr)
        except OSError:
            pass
        return EX_NONFINITE
    paths = ppo.save_training(out, result, cfg)
    conv = ppo.convergence(result.episode_rewards)
    print(f"weights: {paths['weights']}")
    print(f"learning curve: {paths['curve']}")
    print(f"episodes {len(result.episode_rewards)}  first-window mean {conv.first_mean:.3f}  "
          f"final-window mean {conv.final_mean:.3f}  gain {conv.gain_fraction:.3f}  "
          f"plateau change {conv.plateau_change:.4f}  converged {conv.converged}")
    if args.require_convergence and not conv.converged:
        return EX_FAIL
    return EX_OK


def _load_controller(args):
    if args.baseline:
        return BaselineController(BaselineGains.load(args.baseline))
    if not args.weights:
        raise WeightsMissing("--weights is required unless --baseline is given")
    return PolicyController(Policy.load(args.weights))


def _apply_overrides(scenario: Scenario, args) -> Scenario:
    if getattr(args, "no_additional_policy", False):
        scenario = scenario.with_(additional_policy=False)
    if getattr(args, "noise_off", False):
        scenario = scenario.with_(sensor_sigma=0.0)
    if getattr(args, "grasp_scale", None) is not None:
        scenario = scenario.with_grasp(scale=args.grasp_scale)
    return scenario


def cmd_eval(args) -> int:
    scenario = _apply_overrides(resolve_scenario(args.scenario), args)
    controller = _load_controller(args)
    offsets = _parse_offsets(args.offset_deg) if args.offset_deg else [scenario.initial_offset_deg]
    seeds = range(args.seed0, args.seed0 + args.seeds)
    result = sweep(scenario, controller, offsets, seeds, jobs=args.jobs)
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if not args.no_traces:
        for tr in result.traces:
            write_trace(out / trace_filename(tr), tr)
    summary = write_summary(out / f"summary_{scenario.name}.csv", result)
    counts: dict[str, int] = {}
    for tr in result.traces:
        counts[tr.outcome] = counts.get(tr.outcome, 0) + 1
    errs = [tr.final_angle_err_deg for tr in result.traces]
    print(f"{scenario.name} / {controller.label}: " + ", ".join(f"{k} {v}" for k, v in sorted(counts.items()))
          + f"  success rate {result.success_rate:.3f}  max final |err| {max(errs):.3f} deg")
    print(f"summary: {summary}")
    return EX_OK if result.success_rate == 1.0 else EX_FAIL


DEFAULT_GRID = "0.005:0.5:25"
# drawer acceptance bar: Success and final angle error below this
TUNE_FINAL_ERR_DEG = 5.0


def tune_baseline(scenario: Scenario, grid: list[float], offsets, seeds, theta_cap_deg: float = 90.0):
    """Pick the gain with the smallest tracking error among fully successful ones.

    A gain qualifies when every episode reaches Success and ends within
    TUNE_FINAL_ERR_DEG of the admissible direction. The error is |angle error|
    averaged over every tick of every episode, so a gain that settles faster
    scores better than one that only ends closer.
    """
    rows = []
    best = None
    for k in grid:
        gains = BaselineGains(k, theta_cap_deg)
        res = sweep(scenario, BaselineController(gains), offsets, seeds)
        err = float(np.mean([np.abs(t.column("angle_err_deg")).mean() for t in res.traces]))
        settle = float(np.mean([t.settle_tick() for t in res.traces]))
        ok = res.success_rate == 1.0 and all(t.final_angle_err_deg < TUNE_FINAL_ERR_DEG for t in res.traces)
        rows.append({"k_f": k, "success_rate": res.success_rate, "qualified": ok,
                     "mean_abs_err_deg": err, "mean_settle_tick": settle})
        if ok and (best is None or err < best[1]):
            best = (gains, err)
    return (best[0] if best else None), rows


def cmd_baseline_tune(args) -> int:
    grid = _parse_grid(args.grid)
    if not grid or any(not k > 0 for k in grid):
        raise ConfigError("grid must contain positive gains")
    scenario = resolve_scenario(args.scenario)
    offsets = _parse_offsets(args.offset_deg) if args.offset_deg else [-30.0, 30.0]
    best, rows = tune_baseline(scenario, grid, offsets, range(args.seeds), args.theta_cap_deg)
    for r in rows:
        print(f"k_f {r['k_f']:.5g}  success {r['success_rate']:.2f}  mean |err| {r['mean_abs_err_deg']:.3f} deg  "
              f"mean settle tick {r['mean_settle_tick']:.1f}  {'ok' if r['qualified'] else 'rejected'}")
    if best is None:
        print(f"no gain in the grid succeeds on every episode with final error < {TUNE_FINAL_ERR_DEG} deg",
              file=sys.stderr)
        return EX_FAIL
    out = Path(args.out) if args.out else _out_dir(None) / "baseline_gains.toml"
    out.parent.mkdir(parents=True, exist_ok=True)
    best.save(out)
    print(f"chosen k_f {best.k_f:.5g}; gains: {out}")
    return EX_OK


def cmd_sweep(args) -> int:
    """Policy and (optionally) baseline across several scenarios."""
    names = args.scenarios.split(",")
    scenarios = [_apply_overrides(resolve_scenario(n), args) for n in names]
    controllers = [PolicyController(Policy.load(args.weights))]
    if args.baseline:
        controllers.append(BaselineController(BaselineGains.load(args.baseline)))
    out = _out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    all_ok = True
    for sc in scenarios:
        offsets = _parse_offsets(args.offset_deg) if args.offset_deg else [sc.initial_offset_deg]
        for ctrl in controllers:
            res = sweep(sc, ctrl, offsets, range(args.seeds), jobs=args.jobs)
            tag = "policy" if ctrl.label == "policy" else "baseline"
            write_summary(out / f"summary_{sc.name}_{tag}.csv", res)
            print(f"{sc.name:8s} {ctrl.label:18s} success rate {res.success_rate:.3f}")
            if ctrl.label == "policy":
                all_ok &= res.success_rate == 1.0
    return EX_OK if all_ok else EX_FAIL


PLOT_SERIES = ("angle_err_deg", "force_norm", "fingertip_pos")


def read_trace(path: str | Path) -> list[dict]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            needed = {"tick", "angle_err_deg", "force_norm", "pos_x"}
            if reader.fieldnames is None or not needed <= set(reader.fieldnames):
                raise MalformedTrace(f"{path}: missing trace columns")
            rows = []
            for i, row in enumerate(reader):
                try:
                    rows.append({k: (v if k == "outcome" else float(v)) for k, v in row.items() if k is not None})
                except (TypeError, ValueError) as e:
                    raise MalformedTrace(f"{path}: row {i + 1}: {e}") from e
    except UnicodeDecodeError as e:
        raise MalformedTrace(f"{path}: not a text CSV") from e
    return rows


def cmd_export_plots(args) -> int:
    traces = [(Path(p), read_trace(p)) for p in args.trace]
    out = Path(args.out) if args.out else _out_dir(None) / "plot_series.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    multi = len(traces) > 1
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "tick", "value"])
        for path, rows in traces:
            origin = np.array([rows[0]["pos_x"], rows[0]["pos_y"], rows[0]["pos_z"]]) if rows else np.zeros(3)
            for series in PLOT_SERIES:
                key = f"{path.stem}:{series}" if multi else series
                for r in rows:
                    if series == "fingertip_pos":
                        v = float(np.linalg.norm(np.array([r["pos_x"], r["pos_y"], r["pos_z"]]) - origin))
                    else:
                        v = r[series]
                    w.writerow([key, int(r["tick"]), repr(float(v))])
    print(f"plot series: {out}")
    return EX_OK


def cmd_validate_config(args) -> int:
    data = read_toml(args.config)
    if args.kind == "auto":
        kind = "train" if "train" in data else "scenario"
    else:
        kind = args.kind
    if kind == "train":
        from .config import train_config_from_dict

        print(dump_toml(train_config_to_dict(train_config_from_dict(data))), end="")
    else:
        print(dump_toml(load_scenario(args.config).to_dict()), end="")
    return EX_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capolicy",
                                description="Constraint-aware motion policy: train, evaluate, compare.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the policy with PPO")
    t.add_argument("--config", help="training config (TOML); defaults are used when omitted")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="override total_steps")
    t.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./capolicy_out)")
    t.add_argument("--require-convergence", action="store_true",
                   help="exit 1 when the learning curve does not meet the convergence criterion")
    t.set_defaults(func=cmd_train)

    def add_exec_flags(sp):
        sp.add_argument("--offset-deg",
                        help="comma-separated initial offsets in degrees (write --offset-deg=-30,30 for negatives)")
        sp.add_argument("--seeds", type=int, default=20)
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--out")
        sp.add_argument("--no-additional-policy", action="store_true",
                        help="disable the torque-threshold rotation rule on rigid-orientation grasps")
        sp.add_argument("--noise-off", action="store_true", help="disable force sensor noise")
        sp.add_argument("--grasp-scale", type=float, help="override the grasp force scale")

    e = sub.add_parser("eval", help="run a scenario sweep with one controller")
    e.add_argument("--weights")
    e.add_argument("--baseline", metavar="GAINS", help="use the baseline controller with this gains file")
    e.add_argument("--scenario", required=True, help="built-in name or scenario TOML path")
    e.add_argument("--seed0", type=int, default=0)
    e.add_argument("--no-traces", action="store_true", help="write only the summary CSV")
    add_exec_flags(e)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("baseline-tune", help="grid-search the baseline gain on one scenario")
    b.add_argument("--scenario", default="drawer")
    b.add_argument("--grid", default=DEFAULT_GRID, help="comma list or start:stop:num (log spaced)")
    b.add_argument("--theta-cap-deg", type=float, default=90.0)
    b.add_argument("--offset-deg", help="comma-separated offsets in degrees (default -30,30)")
    b.add_argument("--seeds", type=int, default=5)
    b.add_argument("--out", help="gains file path")
    b.set_defaults(func=cmd_baseline_tune)

    s = sub.add_parser("sweep", help="policy (and baseline) over several scenarios")
    s.add_argument("--weights", required=True)
    s.add_argument("--baseline", metavar="GAINS")
    s.add_argument("--scenarios", default="drawer,plate,pole,door,handle")
    add_exec_flags(s)
    s.set_defaults(func=cmd_sweep)

    x = sub.add_parser("export-plots", help="long-format CSV of plot series from trace files")
    x.add_argument("--trace", nargs="+", required=True)
    x.add_argument("--out", help="output CSV path")
    x.set_defaults(func=cmd_export_plots)

    v = sub.add_parser("validate-config", help="parse a config and print it fully resolved")
    v.add_argument("config")
    v.add_argument("--kind", choices=("auto", "train", "scenario"), default="auto")
    v.set_defaults(func=cmd_validate_config)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EX_CONFIG if e.code not in (0, None) else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_CONFIG
    except (WeightsMissing, WeightsFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_NOINPUT
    except MalformedTrace as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_DATAERR
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_DATAERR if args.command == "export-plots" else EX_IOERR
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_IOERR


if __name__ == "__main__":
    sys.exit(main())
