"""Regenerate the bundled 1800 s synthetic drive cycle.

Four speed phases with WLTP-like lengths and peak speeds are filled with
seeded micro-trips, turned into pack power by a point-mass vehicle model and
converted to cell current at a nominal cell voltage. The result is only
WLTP-like; it is not the regulatory trace.

    python scripts/make_synthetic_cycle.py            # current_a CSV (bundled)
    python scripts/make_synthetic_cycle.py --power p.csv
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from cidra.simulate import MOTOR_EFFICIENCY, PACK_96S47P, DriveCycle, power_to_current

OUT = Path(__file__).resolve().parents[1] / "src" / "cidra" / "data" / "synthetic_cycle.csv"

PHASES = ((589, 56.5), (433, 76.6), (455, 97.4), (323, 131.3))  # (s, km/h)
REST_S = 20
MASS_KG = 1931.0
ROAD_LOAD = (180.0, 1.0, 0.42)  # N, N/(m/s), N/(m/s)^2; representative, not measured
NOMINAL_V = 3.7


def phase_speed(duration: int, v_peak: float, rng: np.random.Generator) -> np.ndarray:
    """Speed (m/s) at 1 s resolution, starting and ending at rest."""
    v = []
    while len(v) < duration:
        left = duration - len(v)
        idle = int(rng.integers(4, 16))
        target = v_peak * rng.uniform(0.45, 1.0)
        acc, dec = rng.uniform(0.6, 1.4), rng.uniform(0.7, 1.3)
        t_acc, t_dec = int(np.ceil(target / acc)), int(np.ceil(target / dec))
        if left < idle + t_acc + t_dec + 5:
            v += [0.0] * left
            break
        cruise = int(min(rng.integers(10, 90), left - idle - t_acc - t_dec))
        ramp_up = np.linspace(0, target, t_acc + 1)[1:]
        wobble = target * (1 + 0.06 * np.sin(np.arange(cruise) / rng.uniform(4, 12)))
        ramp_dn = np.linspace(target, 0, t_dec + 1)[1:]
        v += [0.0] * idle + list(ramp_up) + list(wobble) + list(ramp_dn)
    return np.clip(np.array(v[:duration]), 0.0, None)


def pack_power(v: np.ndarray) -> np.ndarray:
    a = np.gradient(v)
    f0, f1, f2 = ROAD_LOAD
    moving = v > 0.05
    force = MASS_KG * a + moving * (f0 + f1 * v + f2 * v * v)
    return force * v


def build(seed: int = 2024):
    rng = np.random.default_rng(seed)
    speed = np.concatenate([np.zeros(REST_S)] + [phase_speed(d, vp / 3.6, rng) for d, vp in PHASES])
    speed = speed[: 1800 - 0]
    speed = np.append(speed, 0.0)  # closes the record at t = 1800 s
    t = np.arange(speed.size, dtype=float)
    return t, pack_power(speed)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=2024)
    ap.add_argument("--out", type=Path, default=OUT)
    ap.add_argument("--power", type=Path, help="also write the pack-power variant here")
    args = ap.parse_args(argv)
    t, p = build(args.seed)
    i = power_to_current(p, PACK_96S47P, NOMINAL_V, MOTOR_EFFICIENCY)
    DriveCycle(t, current=np.round(i, 6)).to_csv(args.out)
    print(f"wrote {args.out}: {t.size} rows, mean {i.mean():.3f} A, peak {i.max():.2f} A, min {i.min():.2f} A")
    if args.power:
        DriveCycle(t, power=np.round(p, 3)).to_csv(args.power)
        print(f"wrote {args.power}")


if __name__ == "__main__":
    main()
