"""Command-line entry point: ``cidra realise | simulate | bench | sensitivity``.

Every successful run writes a JSON manifest holding the command, the
resolved configuration, SHA-256 hashes of the input files, the tool version,
the wall time and the output paths. Exit codes: 0 success, 2 invalid input
(arguments, parameter or config files, cycle files), 3 numerical failure of
a realisation, 4 simulation query outside the model grid.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import re
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .cellparams import ParameterError, example_cell_path, load_params
from .harness import MIN_REPS, BenchError, bench_svd, report, sensitivity_sweep
from .modelio import ModelFormatError, load_grid, save_grid
from .realisation import SVD_STRATEGIES, ConfigError, RealisationConfig, SetpointError, realise_grid
from .simulate import MOTOR_EFFICIENCY, CycleError, DriveCycle, OutOfHullError, example_cycle_path, run_drive_cycle

log = logging.getLogger("cidra")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_HULL = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument types


def _reps(text: str) -> int:
    n = int(text)
    if n < MIN_REPS:
        raise argparse.ArgumentTypeError(f"at least {MIN_REPS} repetitions are required, got {n}")
    return n


def _positive_int(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {n}")
    return n


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def parse_pack(text: str) -> tuple[int, int]:
    """``"96s47p"`` -> ``(96, 47)``."""
    m = re.fullmatch(r"\s*(\d+)\s*[sS]\s*(\d+)\s*[pP]\s*", text)
    if not m or int(m.group(1)) < 1 or int(m.group(2)) < 1:
        raise argparse.ArgumentTypeError(f"pack topology must look like 96s47p, got {text!r}")
    return int(m.group(1)), int(m.group(2))


# ---------------------------------------------------------------------------
# shared pieces


def sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path: Path, command: str, config: dict, inputs: dict, outputs: list, wall_time: float, **extra) -> Path:
    manifest = {
        "command": command,
        "tool": "cidra",
        "tool_version": __version__,
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": sha256(v)} for k, v in sorted(inputs.items())},
        "outputs": [str(p) for p in outputs],
        "wall_time_s": wall_time,
        **extra,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def resolve_threads(arg: int | None) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("CIDRA_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"CIDRA_THREADS must be a positive integer, got {env!r}") from None
        if n < 1:
            raise UsageError(f"CIDRA_THREADS must be a positive integer, got {env!r}")
        return n
    return os.cpu_count() or 1


def _config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: not valid JSON ({exc})") from None
    if isinstance(data, dict) and isinstance(data.get("config"), dict):
        data = data["config"]  # a grid.json or manifest
    if not isinstance(data, dict):
        raise UsageError(f"{p}: expected a JSON object of configuration fields")
    return data


def build_config(args) -> RealisationConfig:
    """Flags over the config file over the defaults."""
    fields = _config_file(args.config) if args.config else {}
    flag_map = {
        "order": args.order,
        "hankel_rows": args.hankel_rows or args.hankel,
        "hankel_cols": args.hankel_cols or args.hankel,
        "tf_sample_hours": args.tlen_hours,
        "electrolyte_points": args.electrolyte_points,
        "electrode_points": args.electrode_points,
        "svd_strategy": args.svd,
        "outputs": args.outputs,
        "soc_grid": getattr(args, "socs", None),
        "temp_grid": getattr(args, "temps", None),
        "seed": args.seed,
    }
    period = args.system_period
    if period is None and args.sample_rate is not None:
        period = 1.0 / args.sample_rate  # F_s and T_s move together unless both are given
    flag_map["sample_rate"], flag_map["system_period"] = args.sample_rate, period
    fields.update({k: v for k, v in flag_map.items() if v is not None})
    try:
        return RealisationConfig.from_dict(fields)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=_positive_int, help="BLAS threads (default: CIDRA_THREADS, else all logical cores)")
    p.add_argument("--seed", type=int, default=None, help="seed for every random start (default 0)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_config(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("realisation configuration (flags > --config file > defaults)")
    g.add_argument("--params", type=Path, help="cell parameter file (default: bundled example cell)")
    g.add_argument("--config", type=Path, help="JSON file of configuration fields")
    g.add_argument("--order", type=_positive_int, help="model order M")
    g.add_argument("--hankel", type=_positive_int, help="Hankel block rows and columns")
    g.add_argument("--hankel-rows", type=_positive_int, help="Hankel block rows H_n")
    g.add_argument("--hankel-cols", type=_positive_int, help="Hankel columns H_m")
    g.add_argument("--tlen-hours", type=float, help="transfer-function sampling length T_len (h)")
    g.add_argument("--sample-rate", type=float, help="sampling frequency F_s (Hz)")
    g.add_argument("--system-period", type=float, help="model period T_s (s); defaults to 1/F_s with --sample-rate")
    g.add_argument("--electrolyte-points", type=_positive_int, help="electrolyte output locations S_e")
    g.add_argument("--electrode-points", type=_positive_int, help="electrode output locations S_s per electrode")
    g.add_argument("--svd", choices=SVD_STRATEGIES, help="truncated SVD strategy")
    g.add_argument("--outputs", type=_names, help="comma-separated output kinds (ce,phie,cse,phis,j)")


def _params_path(args) -> Path:
    return Path(args.params) if args.params else example_cell_path()


# ---------------------------------------------------------------------------
# commands


def cmd_realise(args) -> int:
    t0 = time.perf_counter()
    config = build_config(args)
    ppath = _params_path(args)
    params = load_params(ppath)
    out = Path(args.out)

    def progress(soc, temp, model):
        log.info("soc=%g T=%g K: %.2f s, markov error %.2e", soc, temp, model.wall_time, model.markov_error)

    grid = realise_grid(params, config, progress)
    written = save_grid(grid, out)
    inputs = {"params": ppath}
    if args.config:
        inputs["config"] = args.config
    manifest = write_manifest(out / "manifest.json", "realise", config.to_dict(), inputs, written, time.perf_counter() - t0)
    worst = max(m.markov_error for m in grid.models.values())
    print(f"realised {len(grid)} models (order {grid.order}, {len(grid.labels)} outputs) into {out}; worst markov error {worst:.2e}")
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    model_dir = Path(args.models)
    if not model_dir.is_dir():
        raise UsageError(f"model directory not found: {model_dir}")
    try:
        grid = load_grid(model_dir)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise UsageError(f"{model_dir}: malformed model grid index ({exc!r})") from None
    if args.params:
        params = load_params(args.params)
    elif grid.params is not None:
        params = grid.params
    else:
        params = load_params(example_cell_path())
    cpath = Path(args.cycle) if args.cycle else example_cycle_path()
    cycle = DriveCycle.from_csv(cpath, pack=args.pack, motor_efficiency=args.motor_efficiency)
    trace = run_drive_cycle(grid, cycle, args.soc_init, args.temp, params)
    out = Path(args.out)
    trace.to_csv(out)
    inputs = {"cycle": cpath, "grid_index": model_dir / "grid.json"}
    if args.params:
        inputs["params"] = args.params
    config = {
        "soc_init": args.soc_init,
        "temperature_K": args.temp,
        "pack": list(args.pack),
        "motor_efficiency": args.motor_efficiency,
        "cycle_mode": cycle.mode,
        "grid": grid.config.to_dict(),
    }
    manifest = write_manifest(
        out.with_name(out.name + ".manifest.json"), "simulate", config, inputs, [out], time.perf_counter() - t0,
        steps=len(trace), flagged_steps=trace.flagged_steps,
    )
    print(
        f"{len(trace)} steps, V in [{trace.voltage.min():.4f}, {trace.voltage.max():.4f}] V, "
        f"final soc {trace.final_soc:.4f}, flagged steps {trace.flagged_steps}"
    )
    print(f"trace: {out}\nmanifest: {manifest}")
    return EXIT_OK


def _emit_report(rep, args, command: str, config: dict, inputs: dict, t0: float) -> int:
    out = Path(args.out)
    report(rep, args.format, out)
    sys.stdout.write(report(rep, "text"))
    manifest = write_manifest(out.with_name(out.name + ".manifest.json"), command, config, inputs, [out], time.perf_counter() - t0, machine=rep.machine)
    print(f"report: {out}\nmanifest: {manifest}")
    return EXIT_OK


def cmd_bench(args) -> int:
    t0 = time.perf_counter()
    ppath = _params_path(args)
    params = load_params(ppath)
    seed = args.seed or 0

    def progress(c):
        log.info("%s: median %.4f s", c.case, c.median)

    rep = bench_svd(args.sizes, args.strategies, args.order, args.reps, seed, params, progress)
    config = {"sizes": list(args.sizes), "strategies": list(args.strategies), "order": args.order, "reps": args.reps, "seed": seed}
    return _emit_report(rep, args, "bench", config, {"params": ppath}, t0)


def cmd_sensitivity(args) -> int:
    t0 = time.perf_counter()
    base = build_config(args)
    ppath = _params_path(args)
    params = load_params(ppath)

    def progress(c):
        log.info("%s: median %.4f s%s", c.case, c.median, f" ({c.error})" if c.error else "")

    rep = sensitivity_sweep(base, params, args.soc, args.reps, progress=progress)
    inputs = {"params": ppath}
    if args.config:
        inputs["config"] = args.config
    config = {"base": base.to_dict(), "soc": args.soc, "reps": args.reps}
    return _emit_report(rep, args, "sensitivity", config, inputs, t0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cidra", description="Discrete realisation and drive-cycle simulation of lithium-ion cell models.")
    ap.add_argument("--version", action="version", version=f"cidra {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("realise", help="realise a model grid and write model files", description="Realise one model per (soc, temperature) setpoint.")
    _add_config(p)
    p.add_argument("--socs", type=_floats, help="comma-separated SOC grid (default 1,0.75,0.5,0.25,0)")
    p.add_argument("--temps", type=_floats, help="comma-separated temperatures in K (default 298.15)")
    p.add_argument("--out", type=Path, required=True, help="output directory for the model grid")
    _add_common(p)
    p.set_defaults(func=cmd_realise)

    p = sub.add_parser("simulate", help="run a drive cycle through a model grid", description="Simulate a drive cycle and write the per-step trace CSV.")
    p.add_argument("--models", type=Path, required=True, help="model grid directory written by 'realise'")
    p.add_argument("--cycle", type=Path, help="drive-cycle CSV (default: bundled 1800 s synthetic cycle)")
    p.add_argument("--soc-init", type=float, default=0.75, help="initial state of charge (default 0.75)")
    p.add_argument("--temp", type=float, help="temperature in K (required when the grid spans several)")
    p.add_argument("--params", type=Path, help="cell parameter file (default: the copy stored with the grid)")
    p.add_argument("--pack", type=parse_pack, default=(96, 47), help="pack topology for power cycles (default 96s47p)")
    p.add_argument("--motor-efficiency", type=float, default=MOTOR_EFFICIENCY, help=f"drivetrain efficiency (default {MOTOR_EFFICIENCY})")
    p.add_argument("--out", type=Path, required=True, help="trace CSV path")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="time SVD strategies across Hankel sizes", description="Time truncated SVD strategies on realised Hankel matrices.")
    p.add_argument("--sizes", type=_ints, default=(500, 1000, 2000), help="comma-separated Hankel sizes (default 500,1000,2000)")
    p.add_argument("--strategies", type=_names, default=("iterative", "dense"), help="comma-separated SVD strategies")
    p.add_argument("--order", type=_positive_int, default=8, help="number of singular triplets (default 8)")
    p.add_argument("--reps", type=_reps, default=MIN_REPS, help=f"timed repetitions, at least {MIN_REPS}")
    p.add_argument("--params", type=Path, help="cell parameter file (default: bundled example cell)")
    p.add_argument("--format", choices=("csv", "text"), default="csv")
    p.add_argument("--out", type=Path, required=True, help="report path")
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sensitivity", help="time realisation with each variable at its bounds", description="Sensitivity sweep of the realisation time over the seven initialisation variables.")
    _add_config(p)
    p.add_argument("--soc", type=float, default=0.75, help="setpoint SOC (default 0.75)")
    p.add_argument("--reps", type=_reps, default=MIN_REPS, help=f"timed repetitions, at least {MIN_REPS}")
    p.add_argument("--format", choices=("csv", "text"), default="csv")
    p.add_argument("--out", type=Path, required=True, help="report path")
    _add_common(p)
    p.set_defaults(func=cmd_sensitivity)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    for s in getattr(args, "strategies", ()) or ():
        if s not in SVD_STRATEGIES:
            print(f"error: unknown SVD strategy {s!r}; choose from {', '.join(SVD_STRATEGIES)}", file=sys.stderr)
            return EXIT_INPUT
    try:
        # benchmarks pin themselves to one thread
        threads = 1 if args.command in ("bench", "sensitivity") else resolve_threads(args.threads)
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (UsageError, ConfigError, ParameterError, CycleError, ModelFormatError, BenchError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SetpointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OutOfHullError as exc:
        print(f"out of model grid: {exc}", file=sys.stderr)
        return EXIT_HULL


if __name__ == "__main__":
    sys.exit(main())
