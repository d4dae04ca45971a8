"""Cell parameterisation: per-domain geometry, transport, kinetics and OCP curves.

Parameter files are INI-style text read with :mod:`configparser`. Sections
``[cell]``, ``[neg]``, ``[sep]``, ``[pos]``, ``[ocp_neg]`` and ``[ocp_pos]``
are required. All values are SI. OCP tables are a ``points`` key whose value
is a block of indented ``stoichiometry potential`` lines::

    [ocp_neg]
    order = 3
    points =
        0.000  1.2345
        0.005  1.1002
        ...

The file must declare ``schema = 1`` in ``[cell]``. The README lists every key.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline, make_interp_spline

SCHEMA_VERSION = 1
FARADAY = 96485.33212
GAS_CONSTANT = 8.314462618


class ParameterError(ValueError):
    """A parameter file or value failed validation. ``field`` names the culprit."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _positive(name: str, value: float) -> None:
    if not np.isfinite(value) or value <= 0:
        raise ParameterError(name, f"must be strictly positive, got {value!r}")


@dataclass(frozen=True)
class OcpCurve:
    """Tabulated open-circuit potential U(stoichiometry) with spline interpolation."""

    stoich: np.ndarray
    potential: np.ndarray
    order: int = 3
    _spline: object = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        x = np.asarray(self.stoich, dtype=float)
        u = np.asarray(self.potential, dtype=float)
        if x.ndim != 1 or x.shape != u.shape:
            raise ParameterError("points", "stoichiometry and potential columns differ in length")
        if x.size < 4:
            raise ParameterError("points", f"need at least 4 points, got {x.size}")
        if np.any(np.diff(x) <= 0):
            raise ParameterError("points", "stoichiometry grid must be strictly increasing")
        if x[0] < 0 or x[-1] > 1:
            raise ParameterError("points", "stoichiometry must lie in [0, 1]")
        if not np.all(np.isfinite(u)):
            raise ParameterError("points", "non-finite potential")
        if self.order not in (1, 3):
            raise ParameterError("order", f"interpolation order must be 1 or 3, got {self.order}")
        object.__setattr__(self, "stoich", x)
        object.__setattr__(self, "potential", u)
        if self.order == 3:
            spline = CubicSpline(x, u)
        else:
            spline = make_interp_spline(x, u, k=1)
        object.__setattr__(self, "_spline", spline)

    def __call__(self, x):
        return self._spline(x)

    def derivative(self, x):
        """dU/d(stoichiometry) in V."""
        return self._spline.derivative()(x)

    def __eq__(self, other):
        if not isinstance(other, OcpCurve):
            return NotImplemented
        return (
            self.order == other.order
            and np.array_equal(self.stoich, other.stoich)
            and np.array_equal(self.potential, other.potential)
        )

    __hash__ = None


@dataclass(frozen=True)
class DomainParams:
    """One region of the cell. Separator leaves the solid-phase fields as ``None``.

    ``stoich_window`` is ``(low, high)`` with ``low < high``. The negative
    electrode maps SOC 0 -> low, SOC 1 -> high; the positive electrode is
    mirrored (SOC 0 -> high, SOC 1 -> low).
    """

    name: str
    thickness: float
    porosity: float
    bruggeman: float = 1.5
    solid_conductivity: float | None = None
    particle_radius: float | None = None
    solid_diffusivity: float | None = None
    surface_area_density: float | None = None
    max_concentration: float | None = None
    reaction_rate: float | None = None
    stoich_window: tuple[float, float] | None = None
    film_resistance: float = 0.0
    filler_fraction: float = 0.0

    @property
    def is_electrode(self) -> bool:
        return self.solid_conductivity is not None

    def validate(self) -> None:
        _positive(f"{self.name}.thickness", self.thickness)
        if not 0 < self.porosity < 1:
            raise ParameterError(f"{self.name}.porosity", f"must lie in (0, 1), got {self.porosity!r}")
        _positive(f"{self.name}.bruggeman", self.bruggeman)
        if not self.is_electrode:
            return
        for key in (
            "solid_conductivity",
            "particle_radius",
            "solid_diffusivity",
            "surface_area_density",
            "max_concentration",
            "reaction_rate",
        ):
            value = getattr(self, key)
            if value is None:
                raise ParameterError(f"{self.name}.{key}", "missing")
            _positive(f"{self.name}.{key}", value)
        if self.stoich_window is None:
            raise ParameterError(f"{self.name}.stoich_window", "missing")
        lo, hi = self.stoich_window
        if not 0 <= lo < hi <= 1:
            raise ParameterError(f"{self.name}.stoich_window", f"need 0 <= low < high <= 1, got {self.stoich_window}")
        if self.film_resistance < 0:
            raise ParameterError(f"{self.name}.film_resistance", "must be non-negative")
        if not 0 <= self.filler_fraction < 1 - self.porosity:
            raise ParameterError(f"{self.name}.filler_fraction", "must lie in [0, 1 - porosity)")


@dataclass(frozen=True)
class CellParams:
    neg: DomainParams
    sep: DomainParams
    pos: DomainParams
    electrolyte_diffusivity: float
    electrolyte_conductivity: float
    transference: float
    electrolyte_concentration: float
    plate_area: float
    temperature: float
    ocp_neg: OcpCurve
    ocp_pos: OcpCurve
    faraday: float = FARADAY
    gas_constant: float = GAS_CONSTANT
    voltage_limits: tuple[float, float] = (2.5, 4.2)
    capacity_ah: float | None = None
    description: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for dom, electrode in ((self.neg, True), (self.sep, False), (self.pos, True)):
            dom.validate()
            if dom.is_electrode != electrode:
                raise ParameterError(dom.name, "solid-phase fields only allowed for electrodes")
        _positive("electrolyte_diffusivity", self.electrolyte_diffusivity)
        _positive("electrolyte_conductivity", self.electrolyte_conductivity)
        if not 0 < self.transference < 1:
            raise ParameterError("transference", f"must lie in (0, 1), got {self.transference!r}")
        _positive("electrolyte_concentration", self.electrolyte_concentration)
        _positive("plate_area", self.plate_area)
        _positive("temperature", self.temperature)
        _positive("faraday", self.faraday)
        _positive("gas_constant", self.gas_constant)
        vmin, vmax = self.voltage_limits
        if not vmin < vmax:
            raise ParameterError("voltage_limits", "need voltage_min < voltage_max")
        if self.capacity_ah is not None:
            _positive("capacity_ah", self.capacity_ah)

    @property
    def total_thickness(self) -> float:
        return self.neg.thickness + self.sep.thickness + self.pos.thickness

    @property
    def boundaries(self) -> tuple[float, float, float]:
        """x-coordinates of the neg/sep interface, sep/pos interface and positive collector."""
        l_n = self.neg.thickness
        l_ns = l_n + self.sep.thickness
        return l_n, l_ns, l_ns + self.pos.thickness

    def electrode(self, which: str) -> DomainParams:
        if which not in ("neg", "pos"):
            raise ValueError(f"unknown electrode {which!r}")
        return getattr(self, which)

    def ocp_crossover(self, which: str) -> float:
        """Rate (rad/s) below which the bulk OCP term outweighs ``r_tot``."""
        e = self.electrode(which)
        return 3.0 * abs(e.dudc) / (self.params.faraday * e.domain.particle_radius * e.r_tot)

    def without_ocp_integrator(self, *which: str) -> "Setpoint":
        """Copy with the bulk OCP term removed from the named electrodes."""
        changes = {w: dataclasses.replace(self.electrode(w), ocp_integrator=False) for w in which}
        return dataclasses.replace(self, **changes)

    def ocp(self, which: str) -> OcpCurve:
        return self.ocp_neg if which == "neg" else self.ocp_pos

    @property
    def capacity(self) -> float:
        """Usable capacity in Ah. Defaults to the negative-electrode stoichiometry window."""
        if self.capacity_ah is not None:
            return self.capacity_ah
        d = self.neg
        solid_fraction = 1 - d.porosity - d.filler_fraction
        lo, hi = d.stoich_window
        moles = solid_fraction * d.thickness * self.plate_area * d.max_concentration * (hi - lo)
        return moles * self.faraday / 3600.0

    def replace(self, **changes) -> "CellParams":
        return dataclasses.replace(self, **changes)


def effective_transport(domain: DomainParams, kappa_e: float) -> tuple[float, float]:
    """Effective solid and electrolyte conductivities of a region.

    ``kappa_eff = eps**b * kappa_e`` and ``sigma_eff = sigma * (1 - eps - eps_filler)``.
    The separator has no solid phase and returns ``sigma_eff = 0``.
    """
    kappa_eff = domain.porosity**domain.bruggeman * kappa_e
    if not domain.is_electrode:
        return 0.0, kappa_eff
    sigma_eff = domain.solid_conductivity * (1.0 - domain.porosity - domain.filler_fraction)
    return sigma_eff, kappa_eff


def effective_diffusivity(domain: DomainParams, d_e: float) -> float:
    return domain.porosity**domain.bruggeman * d_e


def exchange_current(reaction_rate: float, c_s: float, c_s_max: float, c_e: float):
    """Exchange current density in A/m^2: m * c_s^1/2 (c_s,max - c_s)^1/2 c_e^1/2."""
    return reaction_rate * np.sqrt(c_s) * np.sqrt(c_s_max - c_s) * np.sqrt(c_e)


@dataclass(frozen=True)
class ElectrodeSetpoint:
    """Linearisation point of one electrode.

    ``r_ct = R T / (F j0)`` in Ohm m^2 is the small-signal charge-transfer
    resistance of the symmetric kinetics ``i = 2 j0 sinh(F eta / 2RT)`` per unit
    particle surface, so ``r_tot = r_film + r_ct`` multiplies the surface
    current density ``F j`` (``j`` in mol m^-2 s^-1).

    With ``ocp_integrator=False`` the transfer functions drop the bulk
    particle term of the OCP from the interface impedance. The realisation
    does this when the term only acts on time scales far beyond its record.
    """

    name: str
    stoich: float
    c_s0: float
    j0: float
    dudc: float
    r_ct: float
    r_tot: float
    sigma_eff: float
    kappa_eff: float
    domain: DomainParams
    ocp_integrator: bool = True


@dataclass(frozen=True)
class Setpoint:
    params: CellParams
    soc: float
    temperature: float
    neg: ElectrodeSetpoint
    pos: ElectrodeSetpoint
    kappa_eff_sep: float

    def electrode(self, which: str) -> ElectrodeSetpoint:
        if which not in ("neg", "pos"):
            raise ValueError(f"unknown electrode {which!r}")
        return getattr(self, which)

    def ocp_crossover(self, which: str) -> float:
        """Rate (rad/s) below which the bulk OCP term outweighs ``r_tot``."""
        e = self.electrode(which)
        return 3.0 * abs(e.dudc) / (self.params.faraday * e.domain.particle_radius * e.r_tot)

    def without_ocp_integrator(self, *which: str) -> "Setpoint":
        """Copy with the bulk OCP term removed from the named electrodes."""
        changes = {w: dataclasses.replace(self.electrode(w), ocp_integrator=False) for w in which}
        return dataclasses.replace(self, **changes)


def stoichiometry(domain: DomainParams, soc, positive: bool):
    lo, hi = domain.stoich_window
    if positive:
        return hi - soc * (hi - lo)
    return lo + soc * (hi - lo)


def setpoint(params: CellParams, soc: float, temp: float | None = None) -> Setpoint:
    """Linearise the cell at a state of charge and temperature (K)."""
    if not 0.0 <= soc <= 1.0:
        raise ParameterError("soc", f"must lie in [0, 1], got {soc!r}")
    temp = params.temperature if temp is None else temp
    _positive("temperature", temp)

    def electrode(which: str) -> ElectrodeSetpoint:
        d = params.electrode(which)
        x = float(stoichiometry(d, soc, positive=(which == "pos")))
        c_s0 = d.max_concentration * x
        j0 = float(exchange_current(d.reaction_rate, c_s0, d.max_concentration, params.electrolyte_concentration))
        if j0 <= 0:
            raise ParameterError(f"{which}.stoich_window", f"exchange current vanishes at stoichiometry {x}")
        dudc = float(params.ocp(which).derivative(x)) / d.max_concentration
        r_ct = params.gas_constant * temp / (params.faraday * j0)
        sigma_eff, kappa_eff = effective_transport(d, params.electrolyte_conductivity)
        return ElectrodeSetpoint(
            name=which,
            stoich=x,
            c_s0=c_s0,
            j0=j0,
            dudc=dudc,
            r_ct=r_ct,
            r_tot=d.film_resistance + r_ct,
            sigma_eff=sigma_eff,
            kappa_eff=kappa_eff,
            domain=d,
        )

    _, kappa_sep = effective_transport(params.sep, params.electrolyte_conductivity)
    return Setpoint(params, float(soc), float(temp), electrode("neg"), electrode("pos"), kappa_sep)


# ---------------------------------------------------------------------------
# file I/O

_CELL_KEYS = {
    "electrolyte_diffusivity": "electrolyte_diffusivity",
    "electrolyte_conductivity": "electrolyte_conductivity",
    "transference": "transference",
    "electrolyte_concentration": "electrolyte_concentration",
    "plate_area": "plate_area",
    "temperature": "temperature",
}
_ELECTRODE_KEYS = (
    "solid_conductivity",
    "particle_radius",
    "solid_diffusivity",
    "surface_area_density",
    "max_concentration",
    "reaction_rate",
)


def _float(section: configparser.SectionProxy, key: str, default=None) -> float:
    name = f"{section.name}.{key}"
    if key not in section:
        if default is not None:
            return default
        raise ParameterError(name, "missing")
    try:
        return float(section[key])
    except ValueError:
        raise ParameterError(name, f"not a number: {section[key]!r}") from None


def _parse_domain(section: configparser.SectionProxy, electrode: bool) -> DomainParams:
    kw = dict(
        name=section.name,
        thickness=_float(section, "thickness"),
        porosity=_float(section, "porosity"),
        bruggeman=_float(section, "bruggeman", 1.5),
    )
    if electrode:
        for key in _ELECTRODE_KEYS:
            kw[key] = _float(section, key)
        kw["stoich_window"] = (_float(section, "stoich_min"), _float(section, "stoich_max"))
        kw["film_resistance"] = _float(section, "film_resistance", 0.0)
        kw["filler_fraction"] = _float(section, "filler_fraction", 0.0)
    dom = DomainParams(**kw)
    dom.validate()
    return dom


def _parse_ocp(section: configparser.SectionProxy) -> OcpCurve:
    if "points" not in section:
        raise ParameterError(f"{section.name}.points", "missing")
    rows = []
    for lineno, line in enumerate(section["points"].strip().splitlines(), 1):
        parts = line.split()
        if len(parts) != 2:
            raise ParameterError(f"{section.name}.points", f"row {lineno} must have two columns: {line!r}")
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ParameterError(f"{section.name}.points", f"row {lineno} not numeric: {line!r}") from None
    if not rows:
        raise ParameterError(f"{section.name}.points", "empty table")
    table = np.array(rows)
    order = int(_float(section, "order", 3.0))
    try:
        return OcpCurve(table[:, 0], table[:, 1], order)
    except ParameterError as exc:
        raise ParameterError(f"{section.name}.{exc.field}", str(exc).split(": ", 1)[1]) from None


def parse_params(text: str) -> CellParams:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ParameterError("file", f"malformed parameter file: {exc}") from None
    for sec in ("cell", "neg", "sep", "pos", "ocp_neg", "ocp_pos"):
        if sec not in cp:
            raise ParameterError(sec, "missing section")
    cell = cp["cell"]
    schema = int(_float(cell, "schema"))
    if schema != SCHEMA_VERSION:
        raise ParameterError("cell.schema", f"unsupported schema {schema}, expected {SCHEMA_VERSION}")
    kw = {attr: _float(cell, key) for key, attr in _CELL_KEYS.items()}
    kw["faraday"] = _float(cell, "faraday", FARADAY)
    kw["gas_constant"] = _float(cell, "gas_constant", GAS_CONSTANT)
    kw["voltage_limits"] = (_float(cell, "voltage_min", 2.5), _float(cell, "voltage_max", 4.2))
    if "capacity_ah" in cell:
        kw["capacity_ah"] = _float(cell, "capacity_ah")
    kw["description"] = cell.get("description", "")
    params = CellParams(
        neg=_parse_domain(cp["neg"], True),
        sep=_parse_domain(cp["sep"], False),
        pos=_parse_domain(cp["pos"], True),
        ocp_neg=_parse_ocp(cp["ocp_neg"]),
        ocp_pos=_parse_ocp(cp["ocp_pos"]),
        **kw,
    )
    if "total_thickness" in cell:
        declared = _float(cell, "total_thickness")
        if not np.isclose(declared, params.total_thickness, rtol=1e-9, atol=0):
            raise ParameterError(
                "cell.total_thickness",
                f"declared {declared!r} but layers sum to {params.total_thickness!r}",
            )
    return params


def load_params(path) -> CellParams:
    path = Path(path)
    if not path.is_file():
        raise ParameterError("path", f"parameter file not found: {path}")
    return parse_params(path.read_text(encoding="utf-8"))


def dump_params(params: CellParams) -> str:
    """Serialise to the parameter-file format. Floats use ``repr`` so a reload is exact."""
    r = repr
    lines = []
    if params.description:
        lines.append(f"# {params.description}")
    lines += [
        "[cell]",
        f"schema = {SCHEMA_VERSION}",
    ]
    if params.description:
        lines.append(f"description = {params.description}")
    for key, attr in _CELL_KEYS.items():
        lines.append(f"{key} = {r(float(getattr(params, attr)))}")
    lines += [
        f"faraday = {r(float(params.faraday))}",
        f"gas_constant = {r(float(params.gas_constant))}",
        f"voltage_min = {r(float(params.voltage_limits[0]))}",
        f"voltage_max = {r(float(params.voltage_limits[1]))}",
        f"total_thickness = {r(float(params.total_thickness))}",
    ]
    if params.capacity_ah is not None:
        lines.append(f"capacity_ah = {r(float(params.capacity_ah))}")
    for dom in (params.neg, params.sep, params.pos):
        lines += ["", f"[{dom.name}]"]
        lines += [
            f"thickness = {r(float(dom.thickness))}",
            f"porosity = {r(float(dom.porosity))}",
            f"bruggeman = {r(float(dom.bruggeman))}",
        ]
        if dom.is_electrode:
            for key in _ELECTRODE_KEYS:
                lines.append(f"{key} = {r(float(getattr(dom, key)))}")
            lines += [
                f"stoich_min = {r(float(dom.stoich_window[0]))}",
                f"stoich_max = {r(float(dom.stoich_window[1]))}",
                f"film_resistance = {r(float(dom.film_resistance))}",
                f"filler_fraction = {r(float(dom.filler_fraction))}",
            ]
    for name, curve in (("ocp_neg", params.ocp_neg), ("ocp_pos", params.ocp_pos)):
        lines += ["", f"[{name}]", f"order = {curve.order}", "points ="]
        lines += [f"    {r(float(x))}  {r(float(u))}" for x, u in zip(curve.stoich, curve.potential)]
    return "\n".join(lines) + "\n"


def save_params(params: CellParams, path) -> None:
    Path(path).write_text(dump_params(params), encoding="utf-8")


def example_cell_path() -> Path:
    return Path(str(resources.files("cidra") / "data" / "example_cell.ini"))


def example_cell() -> CellParams:
    """Bundled REPRESENTATIVE parameter set (not a validated dataset)."""
    return load_params(example_cell_path())
