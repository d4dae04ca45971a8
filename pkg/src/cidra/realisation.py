"""Frequency response -> discrete state-space model.

Pipeline per setpoint: sample the transfer functions on a bilinear-mapped
frequency grid, inverse-FFT to Markov parameters, optionally subsample to the
system period, stack a block Hankel matrix, take its leading singular
triplets, extract ``(A, B, C, D)`` with the Ho-Kalman construction and
reflect any unstable poles into the unit disk. Integrator residues travel
with the model and are applied as explicit accumulators by the simulator.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numpy.lib.stride_tricks import sliding_window_view
from scipy.sparse.linalg import ArpackNoConvergence, svds

from .cellparams import CellParams, setpoint
from .lanczos import LanczosNotConverged, gkl_svd
from .tfgen import KINDS, EigenSet, OutputLabel, TfRequest, assemble_simo, electrolyte_eigenvalues

log = logging.getLogger(__name__)

SVD_STRATEGIES = ("iterative", "dense", "arpack", "propack")
RADIUS_CAP = 1.0 - 1e-12
SCHUR_RADIUS_CAP = 1.0 - 1e-9


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class RealisationError(RuntimeError):
    pass


class OrderDeficiencyError(RealisationError):
    pass


class HermitianError(RealisationError):
    pass


class SetpointError(RealisationError):
    def __init__(self, soc: float, temp: float, cause: Exception):
        super().__init__(f"setpoint soc={soc:g}, T={temp:g} K failed: {cause}")
        self.soc, self.temp, self.cause = soc, temp, cause


@dataclass(frozen=True)
class RealisationConfig:
    """Realisation knobs. Defaults reproduce the reference configuration."""

    hankel_rows: int = 2500
    hankel_cols: int = 2500
    tf_sample_hours: float = 4.5
    sample_rate: float = 4.0  # Hz, frequency-response sampling
    system_period: float = 0.25  # s, period of the realised model
    order: int = 8
    n_lambda: int = 10
    electrolyte_points: int = 6
    electrode_points: int = 4
    outputs: tuple[str, ...] = KINDS
    svd_strategy: str = "iterative"
    soc_grid: tuple[float, ...] = (1.0, 0.75, 0.5, 0.25, 0.0)
    temp_grid: tuple[float, ...] = (298.15,)
    normalise_rows: bool = True
    ocp_cutoff: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "soc_grid", tuple(float(v) for v in self.soc_grid))
        object.__setattr__(self, "temp_grid", tuple(float(v) for v in self.temp_grid))
        self.validate()

    def validate(self) -> None:
        for name in ("hankel_rows", "hankel_cols", "order", "n_lambda", "electrolyte_points", "electrode_points"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ConfigError(name, "must be a positive integer")
        if not self.ocp_cutoff >= 0:
            raise ConfigError("ocp_cutoff", "must be non-negative")
        for name in ("tf_sample_hours", "sample_rate", "system_period"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be positive")
        if min(self.hankel_rows, self.hankel_cols) < self.order:
            raise ConfigError("order", f"M = {self.order} exceeds the Hankel block dimensions")
        if not self.outputs:
            raise ConfigError("outputs", "at least one output kind must be requested")
        bad = [o for o in self.outputs if o not in KINDS]
        if bad:
            raise ConfigError("outputs", f"unknown kinds {bad}")
        if self.svd_strategy not in SVD_STRATEGIES:
            raise ConfigError("svd_strategy", f"choose from {SVD_STRATEGIES}")
        if not self.soc_grid or any(not 0 <= v <= 1 for v in self.soc_grid):
            raise ConfigError("soc_grid", "needs at least one value in [0, 1]")
        if len(set(self.soc_grid)) != len(self.soc_grid):
            raise ConfigError("soc_grid", "duplicate values")
        if not self.temp_grid or any(v <= 0 for v in self.temp_grid):
            raise ConfigError("temp_grid", "needs at least one positive temperature")
        if len(set(self.temp_grid)) != len(self.temp_grid):
            raise ConfigError("temp_grid", "duplicate values")
        ratio = self.sample_rate * self.system_period
        q = round(ratio)
        if q < 1 or abs(ratio - q) > 1e-9 * max(ratio, 1.0):
            raise ConfigError(
                "system_period",
                f"sample_rate * system_period = {ratio:g} is not a positive integer; "
                "the interpolating (conventional) realisation path is not supported",
            )
        usable = math.ceil(self.n_samples / q)
        need = self.hankel_rows + self.hankel_cols + 1
        if usable < need:
            raise ConfigError(
                "tf_sample_hours",
                f"{usable} Markov samples after subsampling but the Hankel pair needs {need}",
            )

    @property
    def n_samples(self) -> int:
        """Frequency samples N: T_len * 3600 * F_s rounded up to even."""
        n = math.ceil(round(self.tf_sample_hours * 3600 * self.sample_rate, 9))
        return n + (n % 2)

    @property
    def record_rate(self) -> float:
        """Lowest nonzero grid frequency |s_1| in rad/s."""
        return 2.0 * self.sample_rate * math.tan(math.pi / self.n_samples)

    @property
    def subsample(self) -> int:
        return round(self.sample_rate * self.system_period)

    @property
    def electrode_locations(self) -> tuple[float, ...]:
        return tuple(np.linspace(0.0, 1.0, self.electrode_points)) if self.electrode_points > 1 else (0.0,)

    def electrolyte_locations(self, params: CellParams) -> tuple[float, ...]:
        if self.electrolyte_points == 1:
            return (0.0,)
        return tuple(np.linspace(0.0, params.total_thickness, self.electrolyte_points))

    def replace(self, **changes) -> "RealisationConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("outputs", "soc_grid", "temp_grid"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RealisationConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown configuration key")
        return cls(**d)


@dataclass
class StateSpaceModel:
    """Discrete model ``x+ = A x + B u``, ``y = C x + D u`` plus integrators.

    ``res0`` holds per-output integrator gains (output units per A s); the
    simulator accumulates ``res0 * T_s * u`` on top of ``y``.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    res0: np.ndarray
    T_s: float
    labels: list[OutputLabel] = field(default_factory=list)
    soc: float = float("nan")
    temp: float = float("nan")
    wall_time: float = float("nan")
    markov_error: float = float("nan")
    singular_values: np.ndarray | None = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float).reshape(-1)
        self.C = np.asarray(self.C, dtype=float)
        self.D = np.asarray(self.D, dtype=float).reshape(-1)
        self.res0 = np.asarray(self.res0, dtype=float).reshape(-1)
        M, p = self.A.shape[0], self.C.shape[0]
        if self.A.shape != (M, M) or self.B.shape != (M,) or self.C.shape != (p, M):
            raise ValueError("inconsistent state-space dimensions")
        if self.D.shape != (p,) or self.res0.shape != (p,):
            raise ValueError("D and res0 need one entry per output")
        if self.labels and len(self.labels) != p:
            raise ValueError("one label per output row required")

    @property
    def order(self) -> int:
        return self.A.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.C.shape[0]

    @property
    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A)))) if self.order else 0.0

    def markov(self, n: int) -> np.ndarray:
        """First ``n`` Markov parameters ``D, CB, CAB, ...`` as (p, n)."""
        out = np.empty((self.n_outputs, n))
        if n:
            out[:, 0] = self.D
        x = self.B.copy()
        for t in range(1, n):
            out[:, t] = self.C @ x
            x = self.A @ x
        return out

    def replace(self, **changes) -> "StateSpaceModel":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# pipeline stages


def bilinear_grid(T_s: float, N: int) -> np.ndarray:
    """Continuous frequencies of the N-point DFT bins under the bilinear map.

    ``s_f = (2/T_s) j tan(pi f / N)``. The map's pole at ``f = N/2`` is
    returned as ``inf`` for :func:`~cidra.tfgen.assemble_simo` to fill.
    The lower half is the exact conjugate mirror of the upper half.
    """
    if N < 2 or N % 2:
        raise ValueError(f"N must be even and >= 2, got {N}")
    half = N // 2
    f = np.arange(half)
    upper = 2.0 / T_s * 1j * np.tan(np.pi * f / N)
    upper[0] = 0.0
    s = np.empty(N, dtype=complex)
    s[:half] = upper
    s[half] = complex(np.inf, 0.0)
    s[half + 1 :] = np.conj(upper[1:][::-1])
    return s


def impulse_response(fr, N: int | None = None, tol: float = 1e-9) -> np.ndarray:
    """Markov parameters ``G_t`` (rows, N) by inverse FFT of a Hermitian spectrum."""
    G = np.atleast_2d(np.asarray(getattr(fr, "G", fr)))
    if N is None:
        N = G.shape[1]
    if G.shape[1] != N:
        raise ValueError(f"response has {G.shape[1]} samples, expected {N}")
    peak = np.max(np.abs(G))
    f = np.arange(1, N)
    skew = np.max(np.abs(G[:, N - f] - np.conj(G[:, f]))) if N > 1 else 0.0
    if skew > tol * max(peak, 1e-300):
        raise HermitianError(f"spectrum is not conjugate symmetric (mismatch {skew:.3e} vs peak {peak:.3e})")
    g = np.fft.ifft(G, axis=1)
    imag = np.max(np.abs(g.imag))
    real_peak = np.max(np.abs(g.real))
    if imag > tol * max(real_peak, 1e-300):
        raise HermitianError(f"impulse response has imaginary part {imag:.3e} vs {real_peak:.3e}")
    return np.ascontiguousarray(g.real)


def subsample_markov(g: np.ndarray, q: int, d_inf: np.ndarray | None = None) -> np.ndarray:
    """Markov parameters at period ``q`` times the sampling period.

    Each coarse sample stands for ``q`` fine ones, so ``G'_t = q G_{qt}``
    for ``t >= 1``. The fine ``G_0`` is a half-sample of the response on top
    of the feedthrough ``d_inf``, so only its dynamic part is scaled.
    """
    if q == 1:
        return g
    g = np.atleast_2d(g)
    d_inf = np.zeros(g.shape[0]) if d_inf is None else np.asarray(d_inf)
    out = q * g[:, ::q]
    out[:, 0] = d_inf + q * (g[:, 0] - d_inf)
    return out


def build_hankel(G: np.ndarray, H_n: int, H_m: int) -> tuple[np.ndarray, np.ndarray]:
    """Block Hankel pair from Markov parameters ``G`` (p, L).

    ``H[i*p:(i+1)*p, j] = G[:, i + j + 1]`` and ``H_shift`` is the same with
    ``i + j + 2``. Both are views into one (H_n p) x (H_m + 1) array.
    """
    G = np.atleast_2d(np.asarray(G, dtype=float))
    p, L = G.shape
    need = H_n + H_m + 1
    if L < need:
        raise ValueError(f"need at least {need} Markov parameters for a {H_n}x{H_m} Hankel pair, got {L}")
    win = sliding_window_view(G[:, 1:need], H_m + 1, axis=1)  # (p, H_n, H_m+1)
    big = np.ascontiguousarray(win.transpose(1, 0, 2)).reshape(H_n * p, H_m + 1)
    return big[:, :H_m], big[:, 1:]


def truncated_svd(H: np.ndarray, M: int, strategy: str = "iterative", seed: int = 0):
    """Leading ``M`` singular triplets ``(U, s, V)`` with ``H ~ U diag(s) V^T``."""
    m, n = H.shape
    if not 1 <= M <= min(m, n):
        raise ValueError(f"need 1 <= M <= {min(m, n)}, got {M}")
    if strategy == "iterative":
        try:
            return gkl_svd(H, M, seed=seed)
        except LanczosNotConverged as exc:
            log.warning("iterative SVD did not converge (%s); falling back to dense", exc)
            strategy = "dense"
    if strategy == "dense":
        U, s, Vt = scipy.linalg.svd(H, full_matrices=False, lapack_driver="gesdd", check_finite=False)
        return U[:, :M], s[:M], Vt[:M].T
    if strategy in ("arpack", "propack"):
        if M < min(m, n):
            try:
                return _library_svds(H, M, strategy, seed)
            except (np.linalg.LinAlgError, ArpackNoConvergence) as exc:
                log.warning("%s SVD did not converge (%s); falling back to dense", strategy, exc)
        return truncated_svd(H, M, "dense", seed)
    raise ValueError(f"unknown SVD strategy {strategy!r}; choose from {SVD_STRATEGIES}")


def _library_svds(H, M, strategy, seed):
    m, n = H.shape
    v0 = np.random.default_rng(seed).standard_normal(min(m, n))
    kw = dict(v0=v0) if strategy == "arpack" else dict(maxiter=min(m, n))
    U, s, Vt = svds(H, k=M, solver=strategy, random_state=seed, **kw)
    order = np.argsort(s)[::-1]
    return U[:, order], s[order], Vt[order].T


def ho_kalman(U, s, V, H_shift, G0, M: int, T_s: float = 1.0) -> StateSpaceModel:
    """Balanced Ho-Kalman realisation from a truncated SVD of the Hankel matrix."""
    s = np.asarray(s, dtype=float)
    if s.size < M:
        raise ValueError(f"only {s.size} singular values for order {M}")
    if s[0] <= 0 or s[M - 1] < 1e-14 * s[0]:
        raise OrderDeficiencyError(
            f"sigma_{M} / sigma_1 = {s[M - 1] / s[0] if s[0] > 0 else 0:.2e} < 1e-14; "
            f"the data do not support order {M}, choose a smaller order"
        )
    U, V, s = U[:, :M], V[:, :M], s[:M]
    G0 = np.atleast_1d(np.asarray(G0, dtype=float))
    p = G0.size
    sq = np.sqrt(s)
    A = (U.T @ (H_shift @ V)) / np.outer(sq, sq)
    B = sq * V[0, :]
    C = U[:p, :] * sq
    return StateSpaceModel(A, B, C, G0.copy(), np.zeros(p), T_s)


def _clamp_radius(lam: np.ndarray, cap: float) -> np.ndarray:
    mag = np.abs(lam)
    return np.where(mag > cap, lam * (cap / np.where(mag > 0, mag, 1.0)), lam)


def stabilise(model: StateSpaceModel, cap: float = RADIUS_CAP) -> StateSpaceModel:
    """Reflect poles outside the unit circle to ``1 / conj(lambda)``.

    The reflection keeps each pole's phase, so oscillating (negative real or
    complex) poles stay oscillating. Magnitudes are then capped at ``cap``.
    ``A`` is rebuilt from the original eigenvectors and stays real because
    conjugate pairs are treated identically. Ill-conditioned eigenvectors fall
    back to scaling unstable blocks of the real Schur form to ``1 - 1e-9``.
    """
    A = model.A
    if A.size == 0:
        return model
    lam, W = np.linalg.eig(A)
    if np.max(np.abs(lam)) <= cap:
        return model
    if np.linalg.cond(W) > 1e10:
        return model.replace(A=_schur_stabilise(A))
    new = np.where(np.abs(lam) > 1.0, 1.0 / np.conj(lam), lam)
    new = _clamp_radius(new, cap)
    rebuilt = W @ np.diag(new) @ np.linalg.inv(W)
    if np.max(np.abs(rebuilt.imag)) > 1e-8 * max(np.max(np.abs(rebuilt.real)), 1e-300):
        return model.replace(A=_schur_stabilise(A))
    A_new = rebuilt.real
    # rounding in the rebuild can leave the radius a few ulps above the cap
    for _ in range(8):
        rho = np.max(np.abs(np.linalg.eigvals(A_new)))
        if rho <= cap:
            break
        A_new = A_new * (cap / rho) * (1 - 4 * np.finfo(float).eps)
    return model.replace(A=A_new)


def _schur_stabilise(A: np.ndarray, cap: float = SCHUR_RADIUS_CAP) -> np.ndarray:
    T, Z = scipy.linalg.schur(A, output="real")
    n = T.shape[0]
    i = 0
    while i < n:
        size = 2 if i + 1 < n and T[i + 1, i] != 0.0 else 1
        blk = T[i : i + size, i : i + size]
        r = np.max(np.abs(np.linalg.eigvals(blk)))
        if r > cap:
            T[i : i + size, i : i + size] = blk * (cap / r)
        i += size
    log.info("eigenvectors ill-conditioned; stabilised via real Schur form")
    return Z @ T @ Z.T


def markov_error(model: StateSpaceModel, G: np.ndarray, steps: int) -> float:
    """Relative squared error of ``C A^(t-1) B`` against ``G_t`` for t = 1..steps."""
    est = model.markov(steps + 1)[:, 1:]
    ref = np.atleast_2d(G)[:, 1 : steps + 1]
    den = np.sum(ref * ref)
    return float(np.sum((est - ref) ** 2) / den) if den > 0 else 0.0


def quasi_static_setpoint(sp, cutoff: float):
    """Drop the bulk OCP term of electrodes whose crossover lies below ``cutoff``.

    That term sets a family of real poles just inside ``-s_c`` with
    ``s_c = sp.ocp_crossover(which)``. On a flat OCP they are far slower than
    the sampled record and the periodic DFT would fold their enormous DC gain
    into every Markov parameter. Without the term, their combined effect on
    the record's time scale is a pure integrator whose residue is picked up
    by the usual extraction.
    """
    slow = [w for w in ("neg", "pos") if sp.ocp_crossover(w) < cutoff]
    return sp.without_ocp_integrator(*slow) if slow else sp


def realise_setpoint(
    params: CellParams,
    config: RealisationConfig,
    soc: float,
    temp: float | None = None,
    eig: EigenSet | None = None,
) -> StateSpaceModel:
    """Run the full pipeline at one (soc, temperature) setpoint."""
    t0 = time.perf_counter()
    sp = quasi_static_setpoint(setpoint(params, soc, temp), config.ocp_cutoff * config.record_rate)
    req = TfRequest(
        sp,
        electrode_locations=config.electrode_locations,
        electrolyte_locations=config.electrolyte_locations(params),
        outputs=config.outputs,
        n_lambda=config.n_lambda,
        eig=eig,
    )
    N = config.n_samples
    q = config.subsample
    s = bilinear_grid(1.0 / config.sample_rate, N)
    fr = assemble_simo(req, s)
    g = impulse_response(fr, N)
    g = subsample_markov(g, q, fr.G[:, N // 2].real)

    H_n, H_m, M = config.hankel_rows, config.hankel_cols, config.order
    window = g[:, 1 : H_n + H_m + 1]
    scale = np.max(np.abs(window), axis=1) if config.normalise_rows else np.ones(g.shape[0])
    scale = np.where(scale > 0, scale, 1.0)
    gn = g / scale[:, None]

    H, H_shift = build_hankel(gn, H_n, H_m)
    U, sv, V = truncated_svd(H, M, config.svd_strategy, config.seed)
    model = ho_kalman(U, sv, V, H_shift, gn[:, 0], M, config.system_period)
    err = markov_error(model, gn, min(200, H_n))
    model = stabilise(model)
    model = model.replace(
        C=model.C * scale[:, None],
        D=g[:, 0].copy(),
        res0=fr.res0.copy(),
        labels=list(fr.labels),
        soc=float(soc),
        temp=float(sp.temperature),
        markov_error=err,
        singular_values=sv.copy(),
    )
    model.wall_time = time.perf_counter() - t0
    log.info("realised soc=%.3f T=%.2f K in %.2f s (markov error %.2e)", soc, sp.temperature, model.wall_time, err)
    return model


@dataclass
class ModelGrid:
    """Models over a (soc, temperature) grid sharing order, outputs and period."""

    models: dict[tuple[float, float], StateSpaceModel]
    config: RealisationConfig
    wall_time: float = float("nan")
    params: CellParams | None = None

    def __post_init__(self):
        if not self.models:
            raise ValueError("empty model grid")
        first = next(iter(self.models.values()))
        names = [lab.name for lab in first.labels]
        for key, m in self.models.items():
            if m.order != first.order or m.T_s != first.T_s or [lab.name for lab in m.labels] != names:
                raise ValueError(f"model at {key} is inconsistent with the rest of the grid")

    @property
    def socs(self) -> np.ndarray:
        return np.array(sorted({k[0] for k in self.models}))

    @property
    def temps(self) -> np.ndarray:
        return np.array(sorted({k[1] for k in self.models}))

    @property
    def labels(self) -> list[OutputLabel]:
        return next(iter(self.models.values())).labels

    @property
    def T_s(self) -> float:
        return next(iter(self.models.values())).T_s

    @property
    def order(self) -> int:
        return next(iter(self.models.values())).order

    def __getitem__(self, key) -> StateSpaceModel:
        return self.models[(float(key[0]), float(key[1]))]

    def __len__(self) -> int:
        return len(self.models)

    @property
    def setpoint_times(self) -> dict[tuple[float, float], float]:
        return {k: m.wall_time for k, m in self.models.items()}


def realise_grid(params: CellParams, config: RealisationConfig, progress=None) -> ModelGrid:
    """Realise every (soc, temp) setpoint of ``config``; stops at the first failure."""
    t0 = time.perf_counter()
    eig = electrolyte_eigenvalues(params, config.n_lambda) if "ce" in config.outputs else None
    models = {}
    for temp in config.temp_grid:
        for soc in config.soc_grid:
            try:
                models[(soc, temp)] = realise_setpoint(params, config, soc, temp, eig)
            except Exception as exc:
                raise SetpointError(soc, temp, exc) from exc
            if progress is not None:
                progress(soc, temp, models[(soc, temp)])
    return ModelGrid(models, config, time.perf_counter() - t0, params)
