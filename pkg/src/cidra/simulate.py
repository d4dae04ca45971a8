"""Drive-cycle simulation with realised models.

One state vector is propagated through the whole cycle. Every node model of
a :class:`~cidra.realisation.ModelGrid` is first brought to a common
canonical modal form (modes sorted by eigenvalue, unit input gain per mode),
so that interpolating ``A``, ``C``, ``D`` and ``res0`` between nodes acts on
compatible state coordinates. Linear outputs are debiased; absolute
concentrations and the cell voltage are reconstructed per step.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .cellparams import CellParams, exchange_current, stoichiometry
from .realisation import ModelGrid, StateSpaceModel
from .tfgen import OutputLabel

MOTOR_EFFICIENCY = 0.827
PACK_96S47P = (96, 47)

FLAG_VOLTAGE = 1  # terminal voltage outside the configured limits
FLAG_SOLID_CLAMP = 2  # a surface concentration left [0, c_max]
FLAG_ELECTROLYTE_CLAMP = 4  # an electrolyte concentration dropped to <= 0


class CycleError(ValueError):
    pass


class OutOfHullError(ValueError):
    pass


# ---------------------------------------------------------------------------
# drive cycles


@dataclass
class DriveCycle:
    """Current (A, discharge positive) or pack power (W) against time (s)."""

    time: np.ndarray
    current: np.ndarray | None = None
    power: np.ndarray | None = None
    pack: tuple[int, int] = PACK_96S47P
    motor_efficiency: float = MOTOR_EFFICIENCY

    def __post_init__(self):
        self.time = np.asarray(self.time, dtype=float)
        if (self.current is None) == (self.power is None):
            raise CycleError("give exactly one of current or power")
        vals = np.asarray(self.current if self.current is not None else self.power, dtype=float)
        if self.current is not None:
            self.current = vals
        else:
            self.power = vals
        if self.time.ndim != 1 or vals.shape != self.time.shape or self.time.size < 2:
            raise CycleError("time and values must be 1-D arrays of equal length >= 2")
        if not (np.all(np.isfinite(self.time)) and np.all(np.isfinite(vals))):
            raise CycleError("cycle contains non-finite values")
        if np.any(np.diff(self.time) <= 0):
            k = int(np.argmax(np.diff(self.time) <= 0))
            raise CycleError(f"time is not strictly increasing at index {k + 1}")
        _check_pack(self.pack)
        if not 0 < self.motor_efficiency <= 1:
            raise CycleError("motor efficiency must lie in (0, 1]")

    @property
    def mode(self) -> str:
        return "current" if self.current is not None else "power"

    @property
    def values(self) -> np.ndarray:
        return self.current if self.current is not None else self.power

    @property
    def duration(self) -> float:
        return float(self.time[-1] - self.time[0])

    def resample(self, T_s: float) -> "DriveCycle":
        """Linear interpolation onto ``t_0 + k T_s`` for ``k = 0..n-1``.

        ``n = floor(duration / T_s)``: each sample holds over one period, so an
        1800 s record at 0.25 s gives 7200 steps.
        """
        n = int(math.floor(self.duration / T_s + 1e-9))
        if n < 1:
            raise CycleError(f"cycle shorter than one period of {T_s} s")
        t = self.time[0] + T_s * np.arange(n)
        v = np.interp(t, self.time, self.values)
        vals = {"current": None, "power": None, self.mode: v}
        return dataclasses.replace(self, time=t, **vals)

    def is_uniform(self, T_s: float) -> bool:
        return bool(np.allclose(np.diff(self.time), T_s, rtol=0, atol=1e-9 * T_s))

    @classmethod
    def from_csv(cls, path, **kw) -> "DriveCycle":
        """Read ``time_s`` plus exactly one of ``current_a`` / ``power_w``."""
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"cycle file not found: {path}")
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise CycleError(f"{path}: empty file") from None
            rows, lines = [], []
            for r in reader:
                if r and any(c.strip() for c in r):
                    rows.append(r)
                    lines.append(reader.line_num)
        if "time_s" not in header:
            raise CycleError(f"{path}: missing time_s column")
        value_cols = [c for c in ("current_a", "power_w") if c in header]
        if len(value_cols) != 1:
            raise CycleError(f"{path}: need exactly one of current_a / power_w, found {value_cols or 'neither'}")
        ti, vi = header.index("time_s"), header.index(value_cols[0])
        try:
            data = np.array([[float(r[ti]), float(r[vi])] for r in rows])
        except (ValueError, IndexError) as exc:
            raise CycleError(f"{path}: malformed row ({exc})") from None
        if data.shape[0] < 2:
            raise CycleError(f"{path}: need at least two rows")
        bad = np.flatnonzero(np.diff(data[:, 0]) <= 0)
        if bad.size:
            raise CycleError(f"{path}: time is not strictly increasing at line {lines[bad[0] + 1]}")
        key = "current" if value_cols[0] == "current_a" else "power"
        return cls(time=data[:, 0], **{key: data[:, 1]}, **kw)

    def to_csv(self, path) -> None:
        col = "current_a" if self.mode == "current" else "power_w"
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_s", col])
            for t, v in zip(self.time, self.values):
                w.writerow([repr(float(t)), repr(float(v))])


def example_cycle_path() -> Path:
    return Path(str(resources.files("cidra") / "data" / "synthetic_cycle.csv"))


def _check_pack(pack) -> None:
    if len(pack) != 2 or any(int(n) != n or n < 1 for n in pack):
        raise CycleError(f"pack topology must be two integers >= 1, got {pack!r}")


def power_to_current(power, pack=PACK_96S47P, voltage=4.0, motor_efficiency=MOTOR_EFFICIENCY):
    """Cell current (A) from pack power (W).

    Traction power (> 0) is divided by the motor efficiency, regenerated
    power (< 0) multiplied by it, then shared over ``N_s * N_p`` cells at the
    given cell voltage.
    """
    _check_pack(pack)
    voltage = np.asarray(voltage, dtype=float)
    if np.any(voltage <= 0):
        raise ValueError("cell voltage must be positive to convert power")
    power = np.asarray(power, dtype=float)
    cell = power / (pack[0] * pack[1])
    cell = np.where(power > 0, cell / motor_efficiency, cell * motor_efficiency)
    out = cell / voltage
    return out[()] if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# linear core


@dataclass
class SimState:
    x: np.ndarray
    y_int: np.ndarray

    @classmethod
    def zeros(cls, M: int, p: int) -> "SimState":
        return cls(np.zeros(M), np.zeros(p))


def step(model, state: SimState, u: float) -> tuple[SimState, np.ndarray]:
    """One period: ``y = C x + D u + y_int``; then advance ``x`` and the integrators."""
    y = model.C @ state.x + model.D * u + state.y_int
    nxt = SimState(model.A @ state.x + model.B * u, state.y_int + model.res0 * (model.T_s * u))
    return nxt, y


def simulate_linear(model, u) -> np.ndarray:
    """Debiased outputs (n, p) of a fixed model driven by ``u`` from rest."""
    u = np.asarray(u, dtype=float)
    state = SimState.zeros(model.A.shape[0], model.C.shape[0])
    out = np.empty((u.size, model.C.shape[0]))
    for k, uk in enumerate(u):
        state, out[k] = step(model, state, uk)
    return out


# ---------------------------------------------------------------------------
# blending


def modal_form(model: StateSpaceModel) -> StateSpaceModel:
    """Similar model with block-diagonal A in eigenvalue order and unit input gains.

    Real modes become 1x1 blocks with ``B = 1``; complex pairs become
    ``[[a, -b], [b, a]]`` blocks with ``B = (1, 0)``. Modes are ordered by
    decreasing real part so that equal positions across a grid hold
    corresponding modes.
    """
    A = model.A
    M = A.shape[0]
    lam, V = np.linalg.eig(A)
    if np.linalg.cond(V) > 1e12:
        raise np.linalg.LinAlgError("A is too close to defective for a modal form")
    order = np.lexsort((-np.abs(lam.imag), -lam.real))
    cols, blocks, used = [], [], set()
    for i in order:
        if i in used:
            continue
        if abs(lam[i].imag) <= 1e-12 * max(abs(lam[i]), 1e-300):
            cols.append(V[:, i].real[:, None])
            blocks.append(np.array([[lam[i].real]]))
            used.add(i)
        else:
            if lam[i].imag < 0:
                continue
            j = min((k for k in order if k not in used and k != i), key=lambda k: abs(lam[k] - np.conj(lam[i])))
            used.update((i, j))
            a, b = lam[i].real, lam[i].imag
            cols.append(np.column_stack([V[:, i].real, -V[:, i].imag]))
            blocks.append(np.array([[a, -b], [b, a]]))
    T = np.hstack(cols)
    Ti = np.linalg.inv(T)
    Ab = np.zeros((M, M))
    Bc = Ti @ model.B
    S = np.eye(M)
    k = 0
    for blk in blocks:
        n = blk.shape[0]
        Ab[k : k + n, k : k + n] = blk
        bb = Bc[k : k + n]
        if n == 1 and abs(bb[0]) > 0:
            S[k, k] = bb[0]
        elif n == 2 and np.hypot(*bb) > 0:
            # commuting rotation-scaling that maps (1, 0) onto bb
            S[k : k + 2, k : k + 2] = np.array([[bb[0], -bb[1]], [bb[1], bb[0]]])
        k += n
    T = T @ S
    Ti = np.linalg.solve(S, Ti)
    return model.replace(A=Ab, B=Ti @ model.B, C=model.C @ T)


@dataclass
class Blend:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    res0: np.ndarray
    T_s: float


class OutputBlender:
    """Bilinear interpolation of canonical node models over (soc, temperature)."""

    def __init__(self, grid: ModelGrid):
        self.grid = grid
        self.socs = grid.socs
        self.temps = grid.temps
        self.T_s = grid.T_s
        canon = {k: modal_form(m) for k, m in grid.models.items()}
        shape = (self.socs.size, self.temps.size)
        M, p = grid.order, len(grid.labels)
        self._A = np.empty(shape + (M, M))
        self._B = np.empty(shape + (M,))
        self._C = np.empty(shape + (p, M))
        self._D = np.empty(shape + (p,))
        self._r = np.empty(shape + (p,))
        for i, s in enumerate(self.socs):
            for j, t in enumerate(self.temps):
                key = (float(s), float(t))
                if key not in canon:
                    raise ValueError(f"grid is not rectangular: no model at soc={s:g}, T={t:g}")
                m = canon[key]
                self._A[i, j], self._B[i, j], self._C[i, j] = m.A, m.B, m.C
                self._D[i, j], self._r[i, j] = m.D, m.res0

    @staticmethod
    def _weights(nodes: np.ndarray, v: float, name: str, tol: float = 1e-12):
        if nodes.size == 1:
            if abs(v - nodes[0]) > tol * max(1.0, abs(v)):
                raise OutOfHullError(f"{name}={v:g} differs from the single grid value {nodes[0]:g}")
            return [(0, 1.0)]
        lo, hi = nodes[0], nodes[-1]
        if v < lo - tol * max(1.0, abs(lo)) or v > hi + tol * max(1.0, abs(hi)):
            raise OutOfHullError(f"{name}={v:g} outside the grid range [{lo:g}, {hi:g}]")
        v = min(max(v, lo), hi)
        i = int(np.clip(np.searchsorted(nodes, v, side="right") - 1, 0, nodes.size - 2))
        w = (v - nodes[i]) / (nodes[i + 1] - nodes[i])
        if w == 0.0:
            return [(i, 1.0)]
        if w == 1.0:
            return [(i + 1, 1.0)]
        return [(i, 1.0 - w), (i + 1, w)]

    def __call__(self, soc: float, temp: float) -> Blend:
        ws = self._weights(self.socs, soc, "soc")
        wt = self._weights(self.temps, temp, "temperature")
        pairs = [(i, j, a * b) for i, a in ws for j, b in wt]
        if len(pairs) == 1:
            i, j, _ = pairs[0]
            return Blend(self._A[i, j], self._B[i, j], self._C[i, j], self._D[i, j], self._r[i, j], self.T_s)

        def mix(arr):
            return sum(w * arr[i, j] for i, j, w in pairs)

        return Blend(mix(self._A), mix(self._B), mix(self._C), mix(self._D), mix(self._r), self.T_s)


def blend(grid: ModelGrid, soc: float, temp: float) -> Blend:
    """Blended model at one (soc, temperature); see :class:`OutputBlender`."""
    b = getattr(grid, "_blender", None)
    if b is None:
        b = OutputBlender(grid)
        grid._blender = b
    return b(soc, temp)


# ---------------------------------------------------------------------------
# voltage


def overpotential(i, j0, temp, params: CellParams):
    """Invert ``i = 2 j0 sinh(F eta / 2RT)`` for eta (V); ``i``, ``j0`` in A m^-2."""
    k = 2.0 * params.gas_constant * temp / params.faraday
    return k * np.arcsinh(np.asarray(i) / (2.0 * np.asarray(j0)))


def reaction_current(eta, j0, temp, params: CellParams):
    """Symmetric Butler-Volmer current density (A m^-2)."""
    return 2.0 * np.asarray(j0) * np.sinh(params.faraday * np.asarray(eta) / (2.0 * params.gas_constant * temp))


def bulk_residue(params: CellParams, which: str) -> float:
    """Uniform surface-concentration drift per coulomb (mol m^-3 / (A s))."""
    d = params.electrode(which)
    g = -3.0 / (d.particle_radius * d.surface_area_density * params.faraday * d.thickness * params.plate_area)
    return g if which == "neg" else -g


def open_circuit_voltage(params: CellParams, soc):
    xn = stoichiometry(params.neg, soc, positive=False)
    xp = stoichiometry(params.pos, soc, positive=True)
    return params.ocp_pos(xp) - params.ocp_neg(xn)


@dataclass
class OutputMap:
    """Row indices of the outputs that voltage reconstruction needs."""

    labels: list[OutputLabel]
    cse: dict[str, list[int]]
    cse_collector: dict[str, int]
    j_collector: dict[str, int]
    ce: list[int]
    ce_0: int
    ce_L: int
    phie_L: int
    phie: list[int]
    phie_partner: list[int]  # ce row at each phie location (x=0 row if absent)

    @classmethod
    def from_labels(cls, labels: list[OutputLabel], params: CellParams) -> "OutputMap":
        L = params.total_thickness

        def find(kind, domain, loc):
            for i, lab in enumerate(labels):
                if lab.kind == kind and lab.domain == domain and math.isclose(lab.location, loc, rel_tol=1e-9, abs_tol=1e-15):
                    return i
            where = f"x={loc:g} m" if domain == "cell" else f"{domain} z={loc:g}"
            raise KeyError(f"voltage reconstruction needs a {kind} output at {where}")

        ce = [i for i, lab in enumerate(labels) if lab.kind == "ce"]
        phie = [i for i, lab in enumerate(labels) if lab.kind == "phie"]
        ce_0 = find("ce", "cell", 0.0)
        by_loc = {labels[i].location: i for i in ce}
        partner = [by_loc.get(labels[i].location, ce_0) for i in phie]
        return cls(
            labels=labels,
            cse={w: [i for i, lab in enumerate(labels) if lab.kind == "cse" and lab.domain == w] for w in ("neg", "pos")},
            cse_collector={w: find("cse", w, 0.0) for w in ("neg", "pos")},
            j_collector={w: find("j", w, 0.0) for w in ("neg", "pos")},
            ce=ce,
            ce_0=ce_0,
            ce_L=find("ce", "cell", L),
            phie_L=find("phie", "cell", L),
            phie=phie,
            phie_partner=partner,
        )


@dataclass
class VoltageResult:
    voltage: float
    flags: int
    absolute: np.ndarray  # outputs with setpoint values restored, label order
    eta: dict[str, float] = field(default_factory=dict)


def reconstruct_voltage(y, params: CellParams, soc: float, temp: float, u: float, omap: OutputMap, charge: float = 0.0) -> VoltageResult:
    """Terminal voltage from debiased outputs.

    Surface stoichiometry is ``x(soc) + (y_cse - g_bulk q) / c_max``: coulomb
    counting already carries the uniform drift ``g_bulk q`` (``q`` the charge
    passed in A s), so it is taken out of the linear output. The electrolyte
    potential adds the concentration log term to the linear part.
    """
    y = np.asarray(y, dtype=float)
    absolute = y.copy()
    flags = 0
    R, F = params.gas_constant, params.faraday
    x_surf = {}
    for w in ("neg", "pos"):
        d = params.electrode(w)
        x0 = stoichiometry(d, soc, positive=(w == "pos"))
        rows = omap.cse[w]
        x = x0 + (y[rows] - bulk_residue(params, w) * charge) / d.max_concentration
        if np.any((x < 0) | (x > 1)):
            flags |= FLAG_SOLID_CLAMP
            x = np.clip(x, 0.0, 1.0)
        absolute[rows] = x * d.max_concentration
        x_surf[w] = x[rows.index(omap.cse_collector[w])]
    ce0 = params.electrolyte_concentration
    ce = ce0 + y[omap.ce]
    if np.any(ce <= 0):
        flags |= FLAG_ELECTROLYTE_CLAMP
        ce = np.maximum(ce, 1e-6 * ce0)
    absolute[omap.ce] = ce
    log_k = 2.0 * R * temp * (1.0 - params.transference) / F
    absolute[omap.phie] = y[omap.phie] + log_k * np.log(absolute[omap.phie_partner] / absolute[omap.ce_0])

    eta, film = {}, {}
    for w in ("neg", "pos"):
        d = params.electrode(w)
        xs = min(max(x_surf[w], 1e-9), 1 - 1e-9)
        c_e = absolute[omap.ce_0] if w == "neg" else absolute[omap.ce_L]
        j0 = exchange_current(d.reaction_rate, xs * d.max_concentration, d.max_concentration, c_e)
        i_surf = F * y[omap.j_collector[w]]
        eta[w] = float(overpotential(i_surf, j0, temp, params))
        film[w] = d.film_resistance * i_surf
    phie_drop = absolute[omap.phie_L]
    V = (
        params.ocp_pos(x_surf["pos"]) + eta["pos"] + film["pos"] + phie_drop
        - params.ocp_neg(x_surf["neg"]) - eta["neg"] - film["neg"]
    )
    V = float(V)
    lo, hi = params.voltage_limits
    if not lo <= V <= hi:
        flags |= FLAG_VOLTAGE
    return VoltageResult(V, flags, absolute, eta)


# ---------------------------------------------------------------------------
# drive cycle


@dataclass
class SimulationTrace:
    time: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    soc: np.ndarray
    flags: np.ndarray
    states: np.ndarray  # (n, M)
    outputs: np.ndarray  # (n, p) debiased linear outputs
    absolute: np.ndarray  # (n, p) outputs with setpoint values restored
    labels: list[OutputLabel]
    T_s: float
    capacity_ah: float

    def __len__(self) -> int:
        return self.time.size

    @property
    def flagged_steps(self) -> int:
        return int(np.count_nonzero(self.flags))

    @property
    def final_soc(self) -> float:
        """SOC after the last step's charge has been removed."""
        return float(self.soc[-1] - self.current[-1] * self.T_s / (3600.0 * self.capacity_ah))

    def energy_wh(self) -> float:
        """Discharged energy as a per-step sum of u V T_s."""
        return float(np.sum(self.current * self.voltage) * self.T_s / 3600.0)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time_s", "current_a", "voltage_v", "soc", "flags"] + [lab.name for lab in self.labels])
            for k in range(len(self)):
                row = [repr(float(self.time[k])), repr(float(self.current[k])), repr(float(self.voltage[k])), repr(float(self.soc[k])), str(int(self.flags[k]))]
                w.writerow(row + [repr(float(v)) for v in self.outputs[k]])


def run_drive_cycle(grid: ModelGrid, cycle: DriveCycle, soc_init: float, temp: float | None = None, params: CellParams | None = None) -> SimulationTrace:
    """Simulate ``cycle`` from rest at ``soc_init`` with output blending.

    A cycle already on a uniform ``T_s`` grid is used row for row; any other
    is resampled with :meth:`DriveCycle.resample`. Power cycles are converted
    with the previous step's voltage (the open-circuit voltage on the first
    step).
    """
    params = params or grid.params
    if params is None:
        raise ValueError("cell parameters are required (grid carries none)")
    temps = grid.temps
    if temp is None:
        if temps.size != 1:
            raise ValueError("grid spans several temperatures; pass temp")
        temp = float(temps[0])
    T_s = grid.T_s
    if not cycle.is_uniform(T_s) or cycle.time.size < 2:
        cycle = cycle.resample(T_s)
    n = cycle.time.size
    blender = OutputBlender(grid)
    blender(soc_init, temp)  # raises early when outside the hull
    omap = OutputMap.from_labels(grid.labels, params)
    Q = params.capacity
    M, p = grid.order, len(grid.labels)

    x = np.zeros(M)
    y_int = np.zeros(p)
    soc, charge = float(soc_init), 0.0
    v_prev = float(open_circuit_voltage(params, soc))
    tr = dict(
        current=np.empty(n), voltage=np.empty(n), soc=np.empty(n), flags=np.zeros(n, dtype=np.int64),
        states=np.empty((n, M)), outputs=np.empty((n, p)), absolute=np.empty((n, p)),
    )
    for k in range(n):
        if cycle.mode == "current":
            u = float(cycle.current[k])
        else:
            u = float(power_to_current(cycle.power[k], cycle.pack, v_prev, cycle.motor_efficiency))
        bl = blender(soc, temp)
        y = bl.C @ x + bl.D * u + y_int
        res = reconstruct_voltage(y, params, soc, temp, u, omap, charge)
        tr["current"][k], tr["voltage"][k], tr["soc"][k], tr["flags"][k] = u, res.voltage, soc, res.flags
        tr["states"][k], tr["outputs"][k], tr["absolute"][k] = x, y, res.absolute
        x = bl.A @ x + bl.B * u
        y_int = y_int + bl.res0 * (T_s * u)
        charge += u * T_s
        soc = soc - u * T_s / (3600.0 * Q)
        v_prev = res.voltage
    return SimulationTrace(time=cycle.time.copy(), labels=list(grid.labels), T_s=T_s, capacity_ah=Q, **tr)
