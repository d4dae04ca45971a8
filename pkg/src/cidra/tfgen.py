"""Continuous-frequency transfer functions of the linearised pseudo-2D cell model.

Every electrode transfer function uses a dimensionless coordinate ``z`` that is
0 at the electrode's current collector and 1 at its separator interface. The
positive-electrode expressions are the negative-electrode ones with the
positive-electrode parameters and an overall sign flip (reaction flux reverses
during discharge). Electrolyte quantities use the absolute cell coordinate
``x`` in metres, 0 at the negative collector.

Applied current is positive on discharge. All transfer functions are per
ampere of applied cell current. Arguments broadcast numpy-style, so a grid of
locations against a grid of frequencies is ``f(z[:, None], s[None, :], ...)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .cellparams import CellParams, Setpoint, effective_diffusivity

log = logging.getLogger(__name__)

ELECTROLYTE_KINDS = ("ce", "phie")
ELECTRODE_KINDS = ("cse", "phis", "j")
KINDS = ("ce", "phie", "cse", "phis", "j")

_SERIES_SWITCH = 1e-3


class EigenSolveError(RuntimeError):
    pass


class ResidueError(RuntimeError):
    pass


def beta(s, R_s, D_s):
    """Particle diffusion parameter R_s sqrt(s / D_s), principal branch."""
    return R_s * np.sqrt(np.asarray(s, dtype=complex) / D_s)


def jw_kernel(b):
    """Surface-concentration kernel tanh(b) / (tanh(b) - b).

    Below |b| = 1e-3 the direct form cancels catastrophically
    (tanh(b) - b ~ -b^3/3), so the Laurent series is used instead.
    """
    b = np.asarray(b, dtype=complex)
    out = np.empty_like(b)
    small = np.abs(b) < _SERIES_SWITCH
    b2 = b[small] ** 2
    out[small] = -3.0 / b2 - 0.2 + b2 / 175.0 - 2.0 * b2 * b2 / 7875.0
    big = b[~small]
    t = np.tanh(big)
    out[~small] = t / (t - big)
    return out[()] if out.ndim == 0 else out


_REG_SWITCH = 0.5
# Taylor coefficients of jw(b) + 3/b^2 in powers of b^2
_REG_SERIES = (
    -0.2,
    0.0057142857142857142857,
    -0.00025396825396825396825,
    0.000012203669346526489384,
    -5.9876631305202733774e-7,
    2.9565127070796005036e-8,
    -1.4628107998789604765e-9,
    7.2425068532420108275e-11,
)


def jw_regular(b):
    """``jw_kernel(b) + 3 / b^2``: the kernel without its bulk 1/s pole."""
    b = np.asarray(b, dtype=complex)
    out = np.empty_like(b)
    small = np.abs(b) < _REG_SWITCH
    out[small] = np.polynomial.polynomial.polyval(b[small] ** 2, _REG_SERIES)
    big = b[~small]
    t = np.tanh(big)
    out[~small] = t / (t - big) + 3.0 / big**2
    return out[()] if out.ndim == 0 else out


def _sign(which: str) -> float:
    return 1.0 if which == "neg" else -1.0


def interface_impedance(s, sp: Setpoint, which: str):
    """Small-signal solid/electrolyte impedance per unit particle area (Ohm m^2)."""
    e = sp.electrode(which)
    d = e.domain
    F = sp.params.faraday
    b = beta(s, d.particle_radius, d.solid_diffusivity)
    kern = jw_kernel(b) if e.ocp_integrator else jw_regular(b)
    return e.r_tot + e.dudc * d.particle_radius / (F * d.solid_diffusivity) * kern


def nu(s, sp: Setpoint, which: str):
    """Dimensionless reaction-distribution parameter of one electrode."""
    e = sp.electrode(which)
    d = e.domain
    num = d.surface_area_density * (1.0 / e.sigma_eff + 1.0 / e.kappa_eff)
    return d.thickness * np.sqrt(num / interface_impedance(s, sp, which))


def _pieces(s, sp: Setpoint, which: str):
    e = sp.electrode(which)
    return nu(s, sp, which), e.sigma_eff, e.kappa_eff, e.domain


def tf_flux(z, s, sp: Setpoint, which: str):
    """Pore-wall molar flux J(z, s) / I_app in mol m^-2 s^-1 A^-1."""
    v, sig, kap, d = _pieces(s, sp, which)
    p = sp.params
    denom = d.surface_area_density * p.faraday * d.thickness * p.plate_area * (kap + sig)
    shape = v * (sig * np.cosh(v * z) + kap * np.cosh(v * (z - 1))) / np.sinh(v)
    return _sign(which) * shape / denom


def tf_cse(z, s, sp: Setpoint, which: str):
    """Debiased particle-surface concentration C_se(z, s) / I_app in mol m^-3 A^-1."""
    d = sp.electrode(which).domain
    kern = jw_kernel(beta(s, d.particle_radius, d.solid_diffusivity))
    return d.particle_radius / d.solid_diffusivity * kern * tf_flux(z, s, sp, which)


def tf_phis(z, s, sp: Setpoint, which: str):
    """Solid potential relative to the electrode's current collector, V A^-1."""
    v, sig, kap, d = _pieces(s, sp, which)
    A = sp.params.plate_area
    # cosh(v) - cosh(v(z-1)) and 1 - cosh(vz) written without cancellation
    t1 = kap * 2.0 * np.sinh(v * z / 2) * np.sinh(v * (2 - z) / 2)
    t2 = sig * (z * v * np.sinh(v) - 2.0 * np.sinh(v * z / 2) ** 2)
    out = -d.thickness * (t1 + t2) / (A * sig * (kap + sig) * v * np.sinh(v))
    return _sign(which) * out


def tf_phise(z, s, sp: Setpoint, which: str):
    """Solid-electrolyte potential difference phi_s - phi_e (debiased), V A^-1."""
    F = sp.params.faraday
    return F * interface_impedance(s, sp, which) * tf_flux(z, s, sp, which)


def _phie_neg(z, s, sp: Setpoint):
    v, sig, kap, d = _pieces(s, sp, "neg")
    A = sp.params.plate_area
    sh_half = np.sinh(v * z / 2)
    num = 2.0 * sig * sh_half**2 - 2.0 * kap * sh_half * np.sinh(v * (2 - z) / 2) + kap * v * z * np.sinh(v)
    return -d.thickness * num / (A * kap * (kap + sig) * v * np.sinh(v))


def _phie_pos(zp, s, sp: Setpoint):
    v, sig, kap, d = _pieces(s, sp, "pos")
    A = sp.params.plate_area
    num = (
        sig * 2.0 * np.sinh(v * (1 + zp) / 2) * np.sinh(v * (1 - zp) / 2)
        - kap * 2.0 * np.sinh(v * (1 - zp) / 2) ** 2
        + kap * v * (1 - zp) * np.sinh(v)
    )
    return -d.thickness * num / (A * kap * (kap + sig) * v * np.sinh(v))


def tf_phie(x, s, sp: Setpoint):
    """Linear part of the electrolyte potential, relative to x = 0, V A^-1.

    The concentration-dependent log term is applied at simulation time.
    """
    p = sp.params
    l_n, l_ns, l_t = p.boundaries
    x = np.asarray(x, dtype=float)
    s = np.asarray(s, dtype=complex)
    x_b, s_b = np.broadcast_arrays(x, s)
    out = np.empty(x_b.shape, dtype=complex)

    neg = x_b <= l_n
    sep = (x_b > l_n) & (x_b <= l_ns)
    pos = x_b > l_ns
    if np.any(neg):
        out[neg] = _phie_neg(x_b[neg] / l_n, s_b[neg], sp)
    if np.any(sep | pos):
        at_sep = _phie_neg(1.0, s_b[sep | pos], sp)
        across = np.minimum(x_b[sep | pos], l_ns) - l_n
        out[sep | pos] = at_sep - across / (p.plate_area * sp.kappa_eff_sep)
    if np.any(pos):
        zp = (l_t - x_b[pos]) / p.pos.thickness
        out[pos] += _phie_pos(zp, s_b[pos], sp)
    return out[()] if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# electrolyte eigenproblem


def _electrolyte_props(params: CellParams):
    doms = (params.neg, params.sep, params.pos)
    eps = np.array([d.porosity for d in doms])
    deff = np.array([effective_diffusivity(d, params.electrolyte_diffusivity) for d in doms])
    return eps, deff


def interface_matrix(params: CellParams, lam):
    """Normalised 5x5 interface-matching matrices for eigenvalue candidates ``lam``.

    Unknowns are ``(k1, k3, k4, k5, k6)`` of the piecewise eigenfunction
    ``k1 cos(w_n x)`` / ``k3 cos(w_s x) + k4 sin(w_s x)`` /
    ``k5 cos(w_p x) + k6 sin(w_p x)``, with ``w_k = sqrt(lam eps_k / D_k)``.
    Rows: value and flux continuity at both internal interfaces, zero flux at
    the positive collector. Flux rows are divided by ``sqrt(lam)`` and the
    largest ``sqrt(eps D)`` so every entry is O(1).
    """
    lam = np.asarray(lam, dtype=float)
    eps, deff = _electrolyte_props(params)
    l_n, l_ns, l_t = params.boundaries
    q = np.sqrt(eps * deff)
    q = q / q.max()
    w = np.sqrt(lam[..., None] * eps / deff)
    wn, ws, wp = w[..., 0], w[..., 1], w[..., 2]
    qn, qs, qp = q
    M = np.zeros(lam.shape + (5, 5))
    cn1, sn1 = np.cos(wn * l_n), np.sin(wn * l_n)
    cs1, ss1 = np.cos(ws * l_n), np.sin(ws * l_n)
    cs2, ss2 = np.cos(ws * l_ns), np.sin(ws * l_ns)
    cp2, sp2 = np.cos(wp * l_ns), np.sin(wp * l_ns)
    cp3, sp3 = np.cos(wp * l_t), np.sin(wp * l_t)
    M[..., 0, 0], M[..., 0, 1], M[..., 0, 2] = cn1, -cs1, -ss1
    M[..., 1, 0], M[..., 1, 1], M[..., 1, 2] = -qn * sn1, qs * ss1, -qs * cs1
    M[..., 2, 1], M[..., 2, 2], M[..., 2, 3], M[..., 2, 4] = cs2, ss2, -cp2, -sp2
    M[..., 3, 1], M[..., 3, 2], M[..., 3, 3], M[..., 3, 4] = -qs * ss2, qs * cs2, qp * sp2, -qp * cp2
    M[..., 4, 3], M[..., 4, 4] = -sp3, cp3
    return M


def interface_determinant(params: CellParams, lam):
    return np.linalg.det(interface_matrix(params, lam))


def _segment_sq_integral(c, d, w, a, b):
    """Integral over [a, b] of (c cos(wx) + d sin(wx))^2, w > 0."""
    s2b, s2a = np.sin(2 * w * b), np.sin(2 * w * a)
    c2b, c2a = np.cos(2 * w * b), np.cos(2 * w * a)
    half = (b - a) / 2
    cos_sq = half + (s2b - s2a) / (4 * w)
    sin_sq = half - (s2b - s2a) / (4 * w)
    sin_cos = -(c2b - c2a) / (4 * w)
    return c * c * cos_sq + d * d * sin_sq + 2 * c * d * sin_cos


@dataclass(frozen=True)
class EigenSet:
    """Electrolyte eigenmodes, orthonormal under the porosity-weighted inner product."""

    eigenvalues: np.ndarray  # (N,) 1/s
    coefficients: np.ndarray  # (N, 5): k1, k3, k4, k5, k6
    wavenumbers: np.ndarray  # (N, 3): w_n, w_s, w_p in 1/m
    boundaries: tuple[float, float, float]
    porosity: np.ndarray = field(repr=False)
    diffusivity: np.ndarray = field(repr=False)

    def __len__(self):
        return self.eigenvalues.size

    @property
    def lhat_n(self):
        return self.wavenumbers[:, 0] * self.boundaries[0]

    @property
    def lhat_p(self):
        return self.wavenumbers[:, 2] * (self.boundaries[2] - self.boundaries[1])

    @property
    def lhat_ns(self):
        return self.wavenumbers[:, 2] * self.boundaries[1]

    @property
    def lhat_t(self):
        return self.wavenumbers[:, 2] * self.boundaries[2]

    def truncate(self, n: int) -> "EigenSet":
        return EigenSet(
            self.eigenvalues[:n],
            self.coefficients[:n],
            self.wavenumbers[:n],
            self.boundaries,
            self.porosity,
            self.diffusivity,
        )

    def psi(self, x):
        """Eigenfunctions at ``x``; shape (N, len(x))."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        l_n, l_ns, _ = self.boundaries
        k = self.coefficients
        w = self.wavenumbers
        xx = x[None, :]
        neg = k[:, 0:1] * np.cos(w[:, 0:1] * xx)
        sep = k[:, 1:2] * np.cos(w[:, 1:2] * xx) + k[:, 2:3] * np.sin(w[:, 1:2] * xx)
        pos = k[:, 3:4] * np.cos(w[:, 2:3] * xx) + k[:, 4:5] * np.sin(w[:, 2:3] * xx)
        return np.where(xx <= l_n, neg, np.where(xx <= l_ns, sep, pos))

    def porosity_at(self, x):
        x = np.asarray(x, dtype=float)
        l_n, l_ns, _ = self.boundaries
        return np.where(x <= l_n, self.porosity[0], np.where(x <= l_ns, self.porosity[1], self.porosity[2]))


def _mode_coefficients(params: CellParams, lam: float) -> tuple[np.ndarray, np.ndarray]:
    eps, deff = _electrolyte_props(params)
    l_n, l_ns, l_t = params.boundaries
    M = interface_matrix(params, np.array(lam))
    k_rest = np.linalg.solve(M[:4, 1:], -M[:4, 0])
    k = np.concatenate([[1.0], k_rest])
    w = np.sqrt(lam * eps / deff)
    norm = (
        eps[0] * _segment_sq_integral(k[0], 0.0, w[0], 0.0, l_n)
        + eps[1] * _segment_sq_integral(k[1], k[2], w[1], l_n, l_ns)
        + eps[2] * _segment_sq_integral(k[3], k[4], w[2], l_ns, l_t)
    )
    return k / np.sqrt(norm), w


def electrolyte_eigenvalues(
    params: CellParams,
    n_lambda: int,
    points_per_decade: int = 1024,
    decades: int = 6,
    max_extensions: int = 4,
) -> EigenSet:
    """First ``n_lambda`` non-zero eigenmodes of the electrolyte diffusion operator.

    Sign changes of :func:`interface_determinant` on a geometric grid bracket
    each root, which is then refined with Brent's method.
    """
    if n_lambda < 1:
        raise ValueError("n_lambda must be >= 1")
    eps, deff = _electrolyte_props(params)
    l_t = params.total_thickness
    lo = deff.min() / (eps.max() * l_t**2) * 1e-2
    roots: list[float] = []
    start = lo
    for _ in range(max_extensions + 1):
        grid = start * np.logspace(0, decades, decades * points_per_decade + 1)
        det = interface_determinant(params, grid)
        idx = np.nonzero(np.signbit(det[:-1]) != np.signbit(det[1:]))[0]
        for i in idx:
            a, b = grid[i], grid[i + 1]
            if det[i] == 0.0:
                roots.append(a)
                continue
            roots.append(
                brentq(lambda v: float(interface_determinant(params, v)), a, b, xtol=1e-300, rtol=1e-15, maxiter=200)
            )
            if len(roots) >= n_lambda:
                break
        if len(roots) >= n_lambda:
            break
        start = grid[-1]
    else:
        raise EigenSolveError(
            f"found {len(roots)} of {n_lambda} electrolyte eigenvalues scanning "
            f"[{lo:.3e}, {start:.3e}] 1/s; increase the scan range"
        )
    lams = np.array(sorted(set(roots))[:n_lambda])
    if lams.size < n_lambda or np.any(np.diff(lams) <= 0):
        raise EigenSolveError("eigenvalue bracketing produced duplicate roots; refine the scan grid")
    coeffs, waves = zip(*(_mode_coefficients(params, lam) for lam in lams))
    coeffs = np.array(coeffs)
    # fix the sign so psi(0) > 0
    coeffs *= np.where(coeffs[:, :1] < 0, -1.0, 1.0)
    return EigenSet(lams, coeffs, np.array(waves), params.boundaries, eps, deff)


def _modal_projection(s, sp: Setpoint, which: str, lhat, amplitude):
    """Porosity-weighted projection of the electrolyte source onto each mode.

    Returns (N, len(s)). ``amplitude`` is the eigenfunction value at the
    electrode's current collector; inside the electrode each mode is
    ``amplitude * cos(lhat z)``.
    """
    v, sig, kap, _ = _pieces(s, sp, which)
    p = sp.params
    v = v[None, :]
    lh = lhat[:, None]
    num = lh * np.sin(lh) * v * (sig * np.cosh(v) + kap) / np.sinh(v) + v * v * (sig * np.cos(lh) + kap)
    den = p.faraday * p.plate_area * (kap + sig) * (lh * lh + v * v)
    return _sign(which) * (1 - p.transference) * amplitude[:, None] * num / den


def tf_ce(x, s, sp: Setpoint, eig: EigenSet):
    """Debiased electrolyte concentration C_e(x, s) / I_app in mol m^-3 A^-1.

    Returns shape (len(x), len(s)).
    """
    s = np.atleast_1d(np.asarray(s, dtype=complex))
    l_t = sp.params.total_thickness
    at_ends = eig.psi(np.array([0.0, l_t]))
    src = _modal_projection(s, sp, "neg", eig.lhat_n, at_ends[:, 0]) + _modal_projection(
        s, sp, "pos", eig.lhat_p, at_ends[:, 1]
    )
    modal = src / (s[None, :] + eig.eigenvalues[:, None])
    return eig.psi(x).T @ modal


# ---------------------------------------------------------------------------
# SIMO assembly


@dataclass(frozen=True)
class OutputLabel:
    kind: str
    domain: str  # "neg" / "pos" for electrode outputs, "cell" for electrolyte
    location: float  # z in [0, 1] for electrodes, x in metres for electrolyte

    @property
    def name(self) -> str:
        if self.domain == "cell":
            return f"{self.kind}_x{self.location * 1e6:.3f}um"
        return f"{self.kind}_{self.domain}_z{self.location:.4f}"

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "domain": self.domain, "location": self.location}

    @classmethod
    def from_dict(cls, d: dict) -> "OutputLabel":
        return cls(d["kind"], d["domain"], float(d["location"]))


@dataclass(frozen=True)
class TfRequest:
    setpoint: Setpoint
    electrode_locations: tuple[float, ...] = (0.0, 1 / 3, 2 / 3, 1.0)
    electrolyte_locations: tuple[float, ...] | None = None
    outputs: tuple[str, ...] = KINDS
    n_lambda: int = 10
    eig: EigenSet | None = None

    def __post_init__(self):
        outs = tuple(self.outputs)
        if not outs:
            raise ValueError("at least one output kind must be requested")
        bad = [o for o in outs if o not in KINDS]
        if bad:
            raise ValueError(f"unknown output kinds {bad}; choose from {KINDS}")
        object.__setattr__(self, "outputs", tuple(k for k in KINDS if k in outs))
        z = tuple(float(v) for v in self.electrode_locations)
        if any(not 0 <= v <= 1 for v in z) or list(z) != sorted(z):
            raise ValueError("electrode locations must be sorted and within [0, 1]")
        l_t = self.setpoint.params.total_thickness
        if self.electrolyte_locations is None:
            x = tuple(np.linspace(0.0, l_t, 6))
        else:
            x = tuple(float(v) for v in self.electrolyte_locations)
        if any(not 0 <= v <= l_t * (1 + 1e-12) for v in x) or list(x) != sorted(x):
            raise ValueError("electrolyte locations must be sorted and within the cell")
        object.__setattr__(self, "electrode_locations", z)
        object.__setattr__(self, "electrolyte_locations", x)

    @property
    def labels(self) -> list[OutputLabel]:
        out = []
        for kind in self.outputs:
            if kind in ELECTROLYTE_KINDS:
                out += [OutputLabel(kind, "cell", x) for x in self.electrolyte_locations]
            else:
                for which in ("neg", "pos"):
                    out += [OutputLabel(kind, which, z) for z in self.electrode_locations]
        return out

    def eigenset(self) -> EigenSet | None:
        if "ce" not in self.outputs:
            return None
        if self.eig is not None:
            return self.eig if len(self.eig) == self.n_lambda else self.eig.truncate(self.n_lambda)
        return electrolyte_eigenvalues(self.setpoint.params, self.n_lambda)


def evaluate(req: TfRequest, s, eig: EigenSet | None = None) -> np.ndarray:
    """Raw (uncorrected) SIMO response, shape (rows, len(s))."""
    s = np.atleast_1d(np.asarray(s, dtype=complex))
    sp = req.setpoint
    if eig is None:
        eig = req.eigenset()
    zs = np.array(req.electrode_locations)[:, None]
    xs = np.array(req.electrolyte_locations)
    blocks = []
    for kind in req.outputs:
        if kind == "ce":
            blocks.append(tf_ce(xs, s, sp, eig))
        elif kind == "phie":
            blocks.append(tf_phie(xs[:, None], s[None, :], sp))
        else:
            fn = {"cse": tf_cse, "phis": tf_phis, "j": tf_flux}[kind]
            for which in ("neg", "pos"):
                blocks.append(np.broadcast_to(fn(zs, s[None, :], sp, which), (zs.shape[0], s.size)))
    return np.vstack(blocks)


def extract_integrator_residue(
    evaluator,
    rows="G",
    s0: float = 1e-3,
    levels: int = 8,
    rtol: float = 1e-6,
    shrink: float = 1e-3,
    s_floor: float = 1e-40,
):
    """Residue of a 1/s pole by Richardson extrapolation of s G(s) along s0 / 2^k.

    ``evaluator`` maps a 1-D array of s to values whose last axis is s.
    The window moves down by ``shrink`` per row until two consecutive windows
    each converge (extrapolants agree within ``rtol``) and agree with each
    other, which rejects plateaus that sit above a slow pole. Gives up at
    ``s_floor``. Returns ``(res0, corrected)`` where
    ``corrected(s) = G(s) - res0 / s`` and ``corrected(0)`` is the
    extrapolated finite limit. Residues below 1e-9 of the sampled
    ``|s G(s)|`` are reported as exactly zero.
    """
    steps = 0.5 ** np.arange(levels)
    probe = np.asarray(evaluator(np.array([s0], dtype=complex)))
    shape = probe.shape[:-1]
    res0 = np.zeros(shape)
    dc = np.zeros(shape)
    pending = np.ones(shape, dtype=bool)
    prev = np.full(shape, np.nan)
    prev_dc = np.zeros(shape)
    top = s0
    while np.any(pending):
        if top < s_floor:
            raise ResidueError(f"integrator residue did not converge for {_row_names(rows, pending)}")
        s_seq = top * steps
        g = np.asarray(evaluator(s_seq.astype(complex)))
        f = (g * s_seq).real
        est, err = _richardson(f)
        scale = np.max(np.abs(f), axis=-1)
        tol = rtol * np.where(scale == 0, 1.0, scale)
        est = np.where(np.abs(est) <= 1e-9 * scale, 0.0, est)
        converged = err <= tol
        g_star = (g - np.asarray(est)[..., None] / s_seq).real
        dc_est, _ = _richardson(g_star)
        # a slow pole above this window can mimic a converged limit, so the
        # estimate must also survive a move to a much lower window; the
        # upper window of the agreeing pair is the better conditioned one
        ok = pending & converged & (np.abs(est - prev) <= tol)
        res0 = np.where(ok, prev, res0)
        dc = np.where(ok, prev_dc, dc)
        pending = pending & ~ok
        prev = np.where(converged, est, np.nan)
        prev_dc = dc_est
        top *= shrink
    if res0.ndim == 0:
        res0, dc = float(res0), float(dc)

    def corrected(s):
        s = np.asarray(s, dtype=complex)
        zero = s == 0
        safe = np.where(zero, 1.0, s)
        val = np.asarray(evaluator(safe))
        out = val - np.asarray(res0)[..., None] / safe if np.ndim(res0) else val - res0 / safe
        if np.any(zero):
            d = np.asarray(dc)[..., None] if np.ndim(dc) else dc
            out = np.where(zero, d, out)
        return out

    return res0, corrected


def _row_names(rows, mask):
    if isinstance(rows, str):
        return [rows]
    return [r for r, m in zip(rows, np.atleast_1d(mask)) if m]


def _richardson(f):
    """Extrapolate f(h) -> h=0 for samples at h0 / 2^k along the last axis.

    Returns (estimate, error estimate) for the extrapolant whose changes to
    both neighbours in the sequence of increasing order are smallest.
    """
    f = np.asarray(f, dtype=float)
    n = f.shape[-1]
    table = [f[..., k] for k in range(n)]
    diag = [table[0]]
    prev_col = table
    for m in range(1, n):
        col = [
            prev_col[k] + (prev_col[k] - prev_col[k - 1]) / (2.0**m - 1.0) for k in range(1, len(prev_col))
        ]
        diag.append(col[-1])
        prev_col = col
    diag = np.stack(diag, axis=-1)
    changes = np.abs(np.diff(diag, axis=-1))
    # an estimate counts only if both neighbouring diagonal steps agree with it
    paired = np.maximum(changes[..., :-1], changes[..., 1:])
    best = np.argmin(paired, axis=-1)
    est = np.take_along_axis(diag, (best + 1)[..., None], axis=-1)[..., 0]
    err = np.take_along_axis(paired, best[..., None], axis=-1)[..., 0]
    return est, err


@dataclass
class FrequencyResponse:
    s: np.ndarray  # (n,) complex rad/s
    G: np.ndarray  # (p, n) complex, residue-corrected
    res0: np.ndarray  # (p,) integrator gains per A s
    labels: list[OutputLabel]

    @property
    def n_outputs(self) -> int:
        return self.G.shape[0]


def _conjugate_symmetric(s: np.ndarray) -> bool:
    n = s.size
    if n < 2:
        return False
    f = np.arange(1, n)
    a, b = s[n - f], np.conj(s[f])
    both_inf = ~np.isfinite(a) & ~np.isfinite(b)
    close = np.isclose(a, b, rtol=1e-12, atol=0)
    return bool(np.all(both_inf | close))


def assemble_simo(req: TfRequest, s_grid, s0: float | None = None) -> FrequencyResponse:
    """Sample every requested output on ``s_grid`` with integrator residues removed.

    ``s_grid`` may contain ``0`` (filled with the corrected DC limit) and
    ``inf`` (the bilinear map's Nyquist point, filled with the real part of
    the corrected response at the largest finite |s|).
    """
    s = np.asarray(s_grid, dtype=complex)
    eig = req.eigenset()
    labels = req.labels
    names = [lab.name for lab in labels]
    finite = np.isfinite(s) & (s != 0)
    if s0 is None:
        s0 = 1e-2 * np.min(np.abs(s[finite])) if np.any(finite) else 1e-6

    def raw(sv):
        return evaluate(req, sv, eig)

    res0, corrected = extract_integrator_residue(raw, names, s0=s0)

    G = np.empty((len(labels), s.size), dtype=complex)
    if _conjugate_symmetric(s):
        n = s.size
        upper = np.nonzero(finite & (s.imag >= 0))[0]
        G[:, upper] = corrected(s[upper])
        lower = np.nonzero(finite & (s.imag < 0))[0]
        G[:, lower] = np.conj(G[:, n - lower])
    else:
        G[:, finite] = corrected(s[finite])
    zero = np.nonzero(s == 0)[0]
    if zero.size:
        G[:, zero] = corrected(np.zeros(zero.size))
    nyq = np.nonzero(~np.isfinite(s))[0]
    if nyq.size:
        if not np.any(finite):
            raise ValueError("grid has no finite frequency to stand in for s = inf")
        idx = np.nonzero(finite)[0]
        top = idx[np.argmax(np.abs(s[idx]))]
        G[:, nyq] = G[:, top : top + 1].real
    if not np.all(np.isfinite(G)):
        bad = sorted({names[i] for i in np.nonzero(~np.isfinite(G).all(axis=1))[0]})
        raise FloatingPointError(f"non-finite response for {bad}")
    return FrequencyResponse(s, G, np.asarray(res0, dtype=float), labels)
