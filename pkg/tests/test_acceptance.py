"""Acceptance criteria 1-9, one test each, at the stated tolerances.

A PASS/FAIL line per criterion is printed in the terminal summary (see
``conftest.py``); measured values are attached to each line.
"""

import time

import numpy as np
import pytest
import scipy.linalg
from scipy.optimize import linear_sum_assignment

from cidra import tfgen
from cidra.cellparams import effective_diffusivity, setpoint
from cidra.harness import bench_markov
from cidra.realisation import (
    RADIUS_CAP,
    RealisationConfig,
    StateSpaceModel,
    bilinear_grid,
    build_hankel,
    ho_kalman,
    impulse_response,
    realise_grid,
    stabilise,
    truncated_svd,
)
from cidra.simulate import DriveCycle, OutputMap, example_cycle_path, open_circuit_voltage, run_drive_cycle
from oracles import discrete_response, oracle_markov, random_system

GL_X, GL_W = np.polynomial.legendre.leggauss(64)


def note(request, text):
    request.node.user_properties.append(("detail", text))


@pytest.fixture(scope="module")
def oracle():
    A, B, C, D = random_system(5, 8, seed=2024)
    return A, B, C, D, oracle_markov(A, B, C, D, 1024)


def test_criterion_1_ho_kalman_oracle(oracle, request):
    A, B, C, D, G = oracle
    t0 = time.perf_counter()
    H, H_shift = build_hankel(G, 60, 60)
    U, s, V = truncated_svd(H, 5, "dense")
    m = ho_kalman(U, s, V, H_shift, G[:, 0], 5)
    got = m.markov(101)[:, 1:]
    elapsed = time.perf_counter() - t0
    err = np.linalg.norm(got - G[:, 1:101]) / np.linalg.norm(G[:, 1:101])
    note(request, f"rel L2 {err:.2e} (<= 1e-8), {elapsed:.3f} s (< 1 s)")
    assert err <= 1e-8
    assert elapsed < 1.0


def test_criterion_2_bilinear_ifft_round_trip(oracle, request):
    A, B, C, D, G = oracle
    N, T_s = 4096, 0.25
    s = bilinear_grid(T_s, N)
    z = np.empty(N, dtype=complex)
    finite = np.isfinite(s)
    z[finite] = (1 + s[finite] * T_s / 2) / (1 - s[finite] * T_s / 2)
    z[~finite] = -1.0
    g = impulse_response(discrete_response(A, B, C, D, z), N)
    ref = oracle_markov(A, B, C, D, N // 4)
    err = np.linalg.norm(g[:, : N // 4] - ref) / np.linalg.norm(ref)
    note(request, f"rel error {err:.2e} over t < N/4 (<= 1e-8)")
    assert err <= 1e-8


@pytest.mark.parametrize("which", ["neg", "pos"])
def test_criterion_3_charge_conservation(params, grid64, which, request):
    sp = setpoint(params, 0.5)
    d = params.electrode(which)
    target = 1.0 / (d.surface_area_density * params.faraday * d.thickness * params.plate_area)
    z = 0.5 * GL_X + 0.5
    worst = 0.0
    for s in grid64:
        total = 0.5 * np.sum(GL_W * tfgen.tf_flux(z, s, sp, which))
        # the positive electrode carries the opposite sign for a discharge current
        worst = max(worst, abs(abs(total) - target) / target, abs(total.imag) / target)
    note(request, f"{which}: worst relative deviation {worst:.2e} over 64 frequencies (<= 1e-8)")
    assert worst <= 1e-8


def test_criterion_4_eigenproblem(params, request):
    import dataclasses

    doms = {k: dataclasses.replace(getattr(params, k), porosity=0.3, bruggeman=1.5) for k in ("neg", "sep", "pos")}
    cell = params.replace(**doms)
    eig = tfgen.electrolyte_eigenvalues(cell, 8)
    D = effective_diffusivity(cell.neg, cell.electrolyte_diffusivity)
    ref = (np.arange(1, 9) * np.pi / cell.total_thickness) ** 2 * D / 0.3
    rel = np.max(np.abs(eig.eigenvalues - ref) / ref)
    resid = np.max(np.abs(tfgen.interface_determinant(params, tfgen.electrolyte_eigenvalues(params, 10).eigenvalues)))
    note(request, f"uniform cell max rel {rel:.2e} (<= 1e-8); bundled cell residual {resid:.2e} (< 1e-9)")
    assert rel <= 1e-8
    assert resid < 1e-9


def test_criterion_5_stabilisation(request):
    rng = np.random.default_rng(5)
    worst_rho, worst_phase = 0.0, 0.0
    for _ in range(100):
        n = int(rng.integers(2, 9))
        A = rng.standard_normal((n, n))
        A *= rng.uniform(1.0 + 1e-6, 2.0 - 1e-6) / np.max(np.abs(np.linalg.eigvals(A)))
        model = StateSpaceModel(A, np.ones(n), np.ones((1, n)), [0.0], [0.0], 1.0)
        out = stabilise(model).A
        assert np.isrealobj(out)
        before, after = np.linalg.eigvals(A), np.linalg.eigvals(out)
        worst_rho = max(worst_rho, np.max(np.abs(after)))
        u, v = before / np.abs(before), after / np.abs(after)
        rows, cols = linear_sum_assignment(np.abs(u[:, None] - v[None, :]))
        worst_phase = max(worst_phase, np.max(np.abs(np.angle(v[cols] / u[rows]))))
    note(request, f"max radius {worst_rho:.15f} (<= 1 - 1e-12), max phase change {worst_phase:.1e} rad")
    assert worst_rho <= RADIUS_CAP
    assert worst_phase < 1e-8


def test_criterion_6_truncated_svd(request):
    g = bench_markov(801)
    H, _ = build_hankel(g, 400, 400)
    dense = scipy.linalg.svdvals(H)[:8]
    _, s, _ = truncated_svd(H, 8, "iterative")
    rel = np.max(np.abs(s - dense) / dense)
    note(request, f"max relative difference {rel:.2e} (<= 1e-9)")
    assert rel <= 1e-9


def test_criterion_7_desk_pipeline(params, request):
    t0 = time.perf_counter()
    cfg = RealisationConfig(hankel_rows=400, hankel_cols=400, tf_sample_hours=1.0, sample_rate=4.0, system_period=0.25, order=6)
    grid = realise_grid(params, cfg)
    cycle = DriveCycle.from_csv(example_cycle_path())
    tr = run_drive_cycle(grid, cycle, 0.75)
    elapsed = time.perf_counter() - t0
    lo, hi = params.voltage_limits
    # rest steps before any current has flowed: zero state, exact open-circuit voltage
    first = int(np.flatnonzero(tr.current != 0)[0])
    rest_ok = first > 0 and all(tr.voltage[k] == open_circuit_voltage(params, tr.soc[k]) for k in range(first))
    worst = max(m.markov_error for m in grid.models.values())
    note(
        request,
        f"{len(grid)} models, {len(tr)} steps, V in [{tr.voltage.min():.4f}, {tr.voltage.max():.4f}] V, "
        f"flags {tr.flagged_steps}, {first} rest steps at OCV, markov error {worst:.2e}, {elapsed:.1f} s",
    )
    assert len(grid) == 5 and len(tr) == 7200
    assert lo <= tr.voltage.min() and tr.voltage.max() <= hi
    assert tr.flagged_steps == 0
    assert rest_ok
    assert worst <= 0.05
    assert elapsed < 120
    omap = OutputMap.from_labels(tr.labels, params)
    for w in ("neg", "pos"):
        c = tr.absolute[:, omap.cse[w]]
        assert np.all((c >= 0) & (c <= params.electrode(w).max_concentration))


def test_criterion_8_sensitivity_ranking(default_sweep, request):
    rep = default_sweep.report
    rank = rep.ranking()
    sens = rep.sensitivity()
    note(request, "ranking " + ", ".join(f"{v} {sens[v]:.0f}%" for v in rank))
    assert all(c.error is None for c in rep.cases)
    assert set(rank[:2]) == {"H_m", "H_n"}
    assert "T_len" in rank[-2:]


# quantities that need an external continuum solver, lab data or specific
# hardware, each with the property tests standing in for it
EXCLUDED = {
    "terminal-voltage RMSE against a full-order continuum solver": [
        "test_simulate.py::test_rest_voltage_is_open_circuit",
        "test_acceptance.py::test_criterion_7_desk_pipeline",
    ],
    "terminal-voltage RMSE against experimental cell data": [
        "test_simulate.py::test_small_discharge_voltage_falls_monotonically",
    ],
    "surface-concentration RMSD against a full-order continuum solver": [
        "test_acceptance.py::test_criterion_3_charge_conservation",
        "test_realisation.py::test_desk_self_reconstruction",
    ],
    "absolute formation times and their percentage deltas": [
        "test_acceptance.py::test_criterion_8_sensitivity_ranking",
        "test_harness.py::test_bench_iterative_median_grows_with_size",
        "test_harness.py::test_bench_dense_grows_and_iterative_wins",
    ],
}


def test_criterion_9_documented_exclusions(request):
    import pathlib

    here = pathlib.Path(__file__).parent
    missing = []
    for item, subs in EXCLUDED.items():
        for ref in subs:
            fname, test = ref.split("::")
            if f"def {test}(" not in (here / fname).read_text(encoding="utf-8"):
                missing.append(ref)
    readme = (here.parent / "README.md").read_text(encoding="utf-8")
    note(request, f"{len(EXCLUDED)} excluded quantities, {sum(map(len, EXCLUDED.values()))} substitute tests")
    assert not missing, missing
    assert "Not reproduced" in readme
