"""Timing harness: SVD strategies across Hankel sizes and the realisation sensitivity sweep.

Every case runs one warm-up repetition (timed and recorded, excluded from the
statistics, and used for the peak-memory estimate under :mod:`tracemalloc`)
followed by ``reps`` timed repetitions on a monotonic clock. Cases run
sequentially with BLAS limited to one thread and, where the platform allows,
the process pinned to one logical core.
"""

from __future__ import annotations

import contextlib
import csv
import io
import math
import os
import platform
import time
import tracemalloc
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from .cellparams import CellParams, example_cell, setpoint
from .realisation import (
    RealisationConfig,
    bilinear_grid,
    build_hankel,
    impulse_response,
    quasi_static_setpoint,
    realise_setpoint,
    truncated_svd,
)
from .tfgen import TfRequest, assemble_simo

MIN_REPS = 6
CSV_COLUMNS = ("case", "variable", "bound", "reps", "min_s", "median_s", "mean_s", "peak_mem_bytes")


@dataclass(frozen=True)
class SweepVariable:
    """One sensitivity variable with its default and lower/upper values."""

    name: str
    fields: tuple[str, ...]
    default: float
    lower: float
    upper: float
    integer: bool = True


# name, config fields, default, lower, upper
TABLE2 = (
    SweepVariable("S_e", ("electrolyte_points",), 6, 4, 8),
    SweepVariable("S_s", ("electrode_points",), 4, 2, 6),
    SweepVariable("H_m", ("hankel_cols",), 2500, 1500, 3500),
    SweepVariable("H_n", ("hankel_rows",), 2500, 1500, 3500),
    SweepVariable("T_len", ("tf_sample_hours",), 4.5, 1.0, 8.0, integer=False),
    SweepVariable("F_s", ("sample_rate", "system_period"), 4.0, 2.0, 6.0, integer=False),
    SweepVariable("M", ("order",), 8, 4, 12),
)
_MIN_VALUE = {"S_e": 2, "S_s": 1, "H_m": 1, "H_n": 1, "M": 1}


class BenchError(ValueError):
    pass


@dataclass
class CaseResult:
    case: str
    variable: str
    bound: str
    deltas: dict = field(default_factory=dict)
    times: list[float] = field(default_factory=list)
    warmup: float = float("nan")
    peak_mem: int | None = None
    error: str | None = None

    @property
    def reps(self) -> int:
        return len(self.times)

    def _stat(self, fn) -> float:
        return float(fn(self.times)) if self.times else float("nan")

    @property
    def min(self) -> float:
        return self._stat(np.min)

    @property
    def max(self) -> float:
        return self._stat(np.max)

    @property
    def median(self) -> float:
        return self._stat(np.median)

    @property
    def mean(self) -> float:
        return self._stat(np.mean)


@dataclass
class BenchReport:
    kind: str  # "svd" or "sensitivity"
    cases: list[CaseResult]
    machine: str

    def case(self, name: str) -> CaseResult:
        for c in self.cases:
            if c.case == name:
                return c
        raise KeyError(name)

    @property
    def baseline(self) -> CaseResult | None:
        return next((c for c in self.cases if c.bound == "baseline"), None)

    def percent_delta(self, c: CaseResult) -> float:
        """Median change against the baseline case, in percent (NaN without one)."""
        b = self.baseline
        if b is None or not b.times or not c.times:
            return float("nan")
        return 100.0 * (c.median - b.median) / b.median

    def sensitivity(self) -> dict[str, float]:
        """Largest |percent delta| over the bound cases of each variable."""
        deltas: dict[str, list[float]] = {}
        for c in self.cases:
            if c.bound in ("lower", "upper"):
                d = abs(self.percent_delta(c))
                deltas.setdefault(c.variable, [])
                if not math.isnan(d):
                    deltas[c.variable].append(d)
        return {v: max(d) if d else float("nan") for v, d in deltas.items()}

    def ranking(self) -> list[str]:
        """Variables from most to least time-sensitive."""
        sens = self.sensitivity()
        return sorted(sens, key=lambda v: (-sens[v] if not math.isnan(sens[v]) else math.inf, v))


def machine_descriptor() -> str:
    cpu = platform.processor() or platform.machine()
    return (
        f"{platform.system()} {platform.release()} {platform.machine()}; cpu={cpu}; "
        f"logical_cores={os.cpu_count()}; python={platform.python_version()}; "
        f"numpy={np.__version__}; scipy={scipy.__version__}"
    )


@contextlib.contextmanager
def pinned():
    """One BLAS thread and, on Linux, one logical core for the duration."""
    old = None
    if hasattr(os, "sched_getaffinity"):
        try:
            old = os.sched_getaffinity(0)
            os.sched_setaffinity(0, {min(old)})
        except OSError:
            old = None
    try:
        with threadpool_limits(limits=1):
            yield
    finally:
        if old is not None:
            with contextlib.suppress(OSError):
                os.sched_setaffinity(0, old)


def _warmup(fn: Callable[[], object]) -> tuple[float, int]:
    """One untimed-for-statistics call: ``(seconds, peak traced bytes)``."""
    tracing = tracemalloc.is_tracing()
    if not tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    t0 = time.perf_counter()
    fn()
    warm = time.perf_counter() - t0
    peak = tracemalloc.get_traced_memory()[1]
    if not tracing:
        tracemalloc.stop()
    return warm, int(peak)


def _timed(fn: Callable[[], object]) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def measure(fn: Callable[[], object], reps: int = MIN_REPS) -> tuple[float, list[float], int]:
    """``(warm-up seconds, timed repetitions, peak traced bytes of the warm-up)``."""
    if reps < MIN_REPS:
        raise BenchError(f"at least {MIN_REPS} repetitions are required, got {reps}")
    warm, peak = _warmup(fn)
    return warm, [_timed(fn) for _ in range(reps)], peak


def _run_case(res: CaseResult, fn, reps: int) -> CaseResult:
    try:
        res.warmup, res.times, res.peak_mem = measure(fn, reps)
    except BenchError:
        raise
    except Exception as exc:  # recorded, the sweep goes on
        res.error = f"{type(exc).__name__}: {exc}"
    return res


# ---------------------------------------------------------------------------
# SVD strategies


def bench_markov(n: int, params: CellParams | None = None, soc: float = 0.75, T_s: float = 0.25) -> np.ndarray:
    """At least ``n`` normalised Markov parameters of the negative-electrode surface concentration."""
    params = params or example_cell()
    N = 2 * ((n + 2) // 2) + 2
    sp = quasi_static_setpoint(setpoint(params, soc), 0.5 * 2.0 / T_s * math.tan(math.pi / N))
    req = TfRequest(sp, electrode_locations=(0.0,), electrolyte_locations=(0.0,), outputs=("cse",))
    g = impulse_response(assemble_simo(req, bilinear_grid(T_s, N)), N)[:1]
    return g / np.max(np.abs(g[0, 1:]))


def bench_svd(
    sizes,
    strategies=("iterative", "dense"),
    order: int = 8,
    reps: int = MIN_REPS,
    seed: int = 0,
    params: CellParams | None = None,
    progress=None,
) -> BenchReport:
    """Time :func:`truncated_svd` on square single-output Hankel matrices.

    The Hankel of size ``n`` is ``n x n``, built from the Markov sequence of a
    realised impulse response (one output, so each block is a scalar).
    """
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise BenchError("no Hankel sizes given")
    if min(sizes) < order:
        raise BenchError(f"Hankel sizes must be >= the order {order}, got {min(sizes)}")
    if reps < MIN_REPS:
        raise BenchError(f"at least {MIN_REPS} repetitions are required, got {reps}")
    g = bench_markov(2 * max(sizes) + 1, params)
    cases = []
    with pinned():
        for n in sizes:
            H, _ = build_hankel(g, n, n)
            for st in strategies:
                res = CaseResult(f"{st}@{n}", st, str(n), {"size": n, "strategy": st, "order": order})
                cases.append(_run_case(res, lambda H=H, st=st: truncated_svd(H, order, st, seed), reps))
                if progress is not None:
                    progress(res)
    return BenchReport("svd", cases, machine_descriptor())


# ---------------------------------------------------------------------------
# sensitivity sweep


def sweep_value(var: SweepVariable, base: RealisationConfig, which: str) -> float:
    """Bound value of ``var`` relative to ``base``.

    The bounds keep their ratio to the default, so a base at the defaults gets
    the tabulated values exactly.
    """
    cur = getattr(base, var.fields[0])
    target = var.lower if which == "lower" else var.upper
    if cur == var.default:
        return target
    v = cur * target / var.default
    if var.integer:
        return max(_MIN_VALUE.get(var.name, 1), int(round(v)))
    return float(f"{v:.6g}")


def apply_variable(base: RealisationConfig, var: SweepVariable, value: float) -> RealisationConfig:
    if var.name == "F_s":
        # rate and period move together; the subsampling factor is kept
        q = base.subsample
        return base.replace(sample_rate=float(value), system_period=q / float(value))
    return base.replace(**{var.fields[0]: value})


def sweep_cases(base: RealisationConfig, variables=TABLE2) -> list[tuple[str, str, str, dict, object]]:
    """``(case, variable, bound, deltas, config)`` for the baseline then every bound.

    ``config`` is the :class:`ValueError` raised for a bound the
    configuration rejects.
    """
    out = [("baseline", "baseline", "baseline", {}, base)]
    for var in variables:
        for which in ("lower", "upper"):
            value = sweep_value(var, base, which)
            try:
                cfg = apply_variable(base, var, value)
                deltas = {f: getattr(cfg, f) for f in var.fields}
            except ValueError as exc:
                cfg, deltas = exc, {var.fields[0]: value}
            out.append((f"{var.name}_{which}", var.name, which, deltas, cfg))
    return out


def sensitivity_sweep(
    base: RealisationConfig | None = None,
    params: CellParams | None = None,
    soc: float = 0.75,
    reps: int = MIN_REPS,
    variables=TABLE2,
    progress=None,
) -> BenchReport:
    """Time :func:`realise_setpoint` with each variable at its bounds, the rest at ``base``.

    Every case gets one warm-up call, then the timed repetitions run
    round-robin over the cases.
    """
    base = base or RealisationConfig()
    base.validate()
    if reps < MIN_REPS:
        raise BenchError(f"at least {MIN_REPS} repetitions are required, got {reps}")
    params = params or example_cell()
    cases, live = [], []
    with pinned():
        for name, var, bound, deltas, cfg in sweep_cases(base, variables):
            res = CaseResult(name, var, bound, deltas)
            cases.append(res)
            if isinstance(cfg, Exception):
                res.error = f"{type(cfg).__name__}: {cfg}"
                continue
            fn = lambda cfg=cfg: realise_setpoint(params, cfg, soc)  # noqa: E731
            try:
                res.warmup, res.peak_mem = _warmup(fn)
                live.append((res, fn))
            except Exception as exc:
                res.error = f"{type(exc).__name__}: {exc}"
        # repetitions go round-robin so slow spells on the machine hit every case alike
        for _ in range(reps):
            for res, fn in live:
                if res.error is None:
                    try:
                        res.times.append(_timed(fn))
                    except Exception as exc:
                        res.error = f"{type(exc).__name__}: {exc}"
                        res.times = []
    if progress is not None:
        for res in cases:
            progress(res)
    return BenchReport("sensitivity", cases, machine_descriptor())


# ---------------------------------------------------------------------------
# reporting


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


def to_csv(rep: BenchReport) -> str:
    buf = io.StringIO()
    buf.write(f"# machine: {rep.machine}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in rep.cases:
        mem = "" if c.peak_mem is None else str(c.peak_mem)
        w.writerow([c.case, c.variable, c.bound, c.reps, _fmt(c.min), _fmt(c.median), _fmt(c.mean), mem])
    return buf.getvalue()


def to_text(rep: BenchReport) -> str:
    lines = [f"{rep.kind} report", f"machine: {rep.machine}", ""]
    head = f"{'case':<16}{'reps':>5}{'warmup_s':>11}{'min_s':>11}{'median_s':>11}{'mean_s':>11}{'delta_%':>9}{'peak_MiB':>10}"
    lines.append(head)
    for c in rep.cases:
        mem = "-" if c.peak_mem is None else f"{c.peak_mem / 2**20:.1f}"
        d = rep.percent_delta(c)
        lines.append(
            f"{c.case:<16}{c.reps:>5}{c.warmup:>11.4f}{c.min:>11.4f}{c.median:>11.4f}{c.mean:>11.4f}"
            f"{'-' if math.isnan(d) else f'{d:+.1f}':>9}{mem:>10}"
            + (f"  FAILED {c.error}" if c.error else "")
        )
    if rep.kind == "sensitivity":
        lines += ["", "ranking (most to least sensitive): " + ", ".join(rep.ranking())]
    return "\n".join(lines) + "\n"


def report(rep: BenchReport, fmt: str = "csv", path=None) -> str:
    """Render ``rep`` as ``csv`` or ``text``; also write it when ``path`` is given."""
    if fmt == "csv":
        text = to_csv(rep)
    elif fmt == "text":
        text = to_text(rep)
    else:
        raise ValueError(f"unknown report format {fmt!r}; use csv or text")
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
