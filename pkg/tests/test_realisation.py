import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cidra import realisation as rl
from cidra.cellparams import setpoint
from cidra.modelio import (
    ModelFormatError,
    load_grid,
    load_model,
    model_bytes,
    model_from_bytes,
    save_grid,
    save_model,
)
from cidra.realisation import (
    ConfigError,
    HermitianError,
    OrderDeficiencyError,
    RealisationConfig,
    SetpointError,
    StateSpaceModel,
    bilinear_grid,
    build_hankel,
    ho_kalman,
    impulse_response,
    markov_error,
    quasi_static_setpoint,
    realise_grid,
    realise_setpoint,
    stabilise,
    subsample_markov,
    truncated_svd,
)
from cidra.tfgen import TfRequest, assemble_simo, evaluate
from oracles import discrete_response, oracle_markov, random_system, rel_l2

TINY = dict(hankel_rows=100, hankel_cols=100, tf_sample_hours=0.25, order=4)
DESK = dict(hankel_rows=400, hankel_cols=400, tf_sample_hours=1.0)


# ---------------------------------------------------------------------------
# config


def test_defaults_follow_reference_table():
    c = RealisationConfig()
    assert (c.hankel_rows, c.hankel_cols, c.tf_sample_hours) == (2500, 2500, 4.5)
    assert (c.sample_rate, c.system_period, c.order) == (4.0, 0.25, 8)
    assert (c.electrolyte_points, c.electrode_points) == (6, 4)
    assert c.soc_grid == (1.0, 0.75, 0.5, 0.25, 0.0)


def test_sample_count_rounds_up_to_even():
    assert RealisationConfig(**TINY).n_samples == 3600
    c = RealisationConfig(hankel_rows=10, hankel_cols=10, order=2, tf_sample_hours=1.0, sample_rate=1.0001, system_period=1 / 1.0001)
    assert c.n_samples % 2 == 0 and c.n_samples >= 1.0 * 3600 * 1.0001


@pytest.mark.parametrize(
    "changes, field",
    [
        (dict(outputs=()), "outputs"),
        (dict(outputs=("voltage",)), "outputs"),
        (dict(order=500), "order"),
        (dict(order=0), "order"),
        (dict(system_period=0.3), "system_period"),
        (dict(tf_sample_hours=0.01), "tf_sample_hours"),
        (dict(svd_strategy="magic"), "svd_strategy"),
        (dict(soc_grid=()), "soc_grid"),
        (dict(soc_grid=(0.5, 1.5)), "soc_grid"),
        (dict(temp_grid=(-3.0,)), "temp_grid"),
    ],
)
def test_config_validation_names_field(changes, field):
    with pytest.raises(ConfigError) as exc:
        RealisationConfig(**{**TINY, **changes})
    assert exc.value.field == field


def test_config_dict_round_trip():
    c = RealisationConfig(**TINY, soc_grid=(0.9, 0.1), outputs=("cse", "j"))
    assert RealisationConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        RealisationConfig.from_dict({**c.to_dict(), "bogus": 1})


# ---------------------------------------------------------------------------
# bilinear grid and impulse response


def test_bilinear_grid_examples():
    T, N = 0.25, 64
    s = bilinear_grid(T, N)
    assert s[0] == 0
    assert abs(s[N // 4] - 2j / T) < 1e-12
    assert np.isinf(s[N // 2])
    f = np.arange(1, N)
    assert np.array_equal(s[N - f], np.conj(s[f]))
    with pytest.raises(ValueError):
        bilinear_grid(T, 63)


def test_bilinear_grid_matches_exponential_form():
    T, N = 0.5, 40
    f = np.arange(N)
    f = f[f != N // 2]
    w = np.exp(2j * np.pi * f / N)
    np.testing.assert_allclose(bilinear_grid(T, N)[f], 2 / T * (w - 1) / (w + 1), atol=1e-12)


def test_constant_spectrum_is_pure_feedthrough():
    g = impulse_response(np.full((2, 16), 3.5 + 0j))
    np.testing.assert_allclose(g[:, 0], 3.5)
    np.testing.assert_allclose(g[:, 1:], 0, atol=1e-15)


def test_impulse_response_recovers_oracle():
    A, B, C, D = random_system(3, 2, seed=1)
    N = 2048
    G = discrete_response(A, B, C, D, np.exp(2j * np.pi * np.arange(N) / N))
    g = impulse_response(G)
    ref = oracle_markov(A, B, C, D, N // 4)
    assert np.max(np.abs(g[:, : N // 4] - ref)) <= 1e-8 * np.max(np.abs(ref))


def test_impulse_response_stable_under_doubling():
    A, B, C, D = random_system(3, 1, seed=2)
    early = []
    for N in (1024, 2048):
        G = discrete_response(A, B, C, D, np.exp(2j * np.pi * np.arange(N) / N))
        early.append(impulse_response(G)[:, :100])
    np.testing.assert_allclose(early[0], early[1], atol=1e-9)


def test_impulse_response_rejects_asymmetric_spectrum():
    G = np.ones((1, 8), dtype=complex)
    G[0, 1] = 1 + 1j
    with pytest.raises(HermitianError):
        impulse_response(G)


def test_subsample_scales_tail_and_keeps_feedthrough():
    t = np.arange(40)
    g = np.exp(-0.1 * t)[None, :] * 0.25
    g[0, 0] = 2.0
    out = subsample_markov(g, 4, np.array([2.0]))
    np.testing.assert_allclose(out[0, 1:], 4 * g[0, 4::4][: out.shape[1] - 1])
    assert out[0, 0] == 2.0
    assert subsample_markov(g, 1) is g


# ---------------------------------------------------------------------------
# Hankel and SVD


def test_hankel_delta_example():
    G = np.zeros((1, 12))
    G[0, 1] = 1.0
    H, Hs = build_hankel(G, 5, 5)
    assert H.shape == (5, 5) and H[0, 0] == 1 and np.count_nonzero(H) == 1
    assert np.count_nonzero(Hs) == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6), st.integers(0, 10**6))
def test_hankel_structure(p, H_n, H_m, seed):
    G = np.random.default_rng(seed).standard_normal((p, H_n + H_m + 3))
    H, Hs = build_hankel(G, H_n, H_m)
    assert H.shape == Hs.shape == (H_n * p, H_m)
    for i in range(H_n):
        for j in range(H_m):
            np.testing.assert_array_equal(H[i * p : (i + 1) * p, j], G[:, i + j + 1])
            np.testing.assert_array_equal(Hs[i * p : (i + 1) * p, j], G[:, i + j + 2])
            if i + 1 < H_n and j >= 1:
                np.testing.assert_array_equal(H[i * p : (i + 1) * p, j], H[(i + 1) * p : (i + 2) * p, j - 1])


def test_hankel_rank_of_order_three_system():
    A, B, C, D = random_system(3, 2, seed=3)
    H, _ = build_hankel(oracle_markov(A, B, C, D, 60), 25, 25)
    s = np.linalg.svd(H, compute_uv=False)
    assert np.sum(s > 1e-8 * s[0]) == 3


def test_hankel_needs_enough_samples():
    with pytest.raises(ValueError, match="at least 11"):
        build_hankel(np.zeros((1, 10)), 5, 5)


@pytest.mark.parametrize("strategy", rl.SVD_STRATEGIES)
def test_svd_padded_diagonal(strategy):
    H = np.zeros((6, 5))
    H[0, 0], H[1, 1], H[2, 2] = 3, 2, 1
    U, s, V = truncated_svd(H, 2, strategy)
    np.testing.assert_allclose(s, [3, 2], rtol=1e-12)
    np.testing.assert_allclose(np.abs(U.T @ H @ V), np.diag([3, 2]), atol=1e-12)


@pytest.mark.parametrize("strategy", rl.SVD_STRATEGIES)
def test_svd_random_matches_dense(strategy):
    H = np.random.default_rng(4).standard_normal((400, 400))
    ref = np.linalg.svd(H, compute_uv=False)[:8]
    U, s, V = truncated_svd(H, 8, strategy)
    np.testing.assert_allclose(s, ref, rtol=1e-9)
    np.testing.assert_allclose(U.T @ U, np.eye(8), atol=1e-10)
    np.testing.assert_allclose(V.T @ V, np.eye(8), atol=1e-10)


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 30), st.integers(2, 30), st.integers(1, 6), st.integers(0, 10**6))
def test_svd_eckart_young(m, n, M, seed):
    M = min(M, m, n)
    H = np.random.default_rng(seed).standard_normal((m, n))
    U, s, V = truncated_svd(H, M)
    full = np.linalg.svd(H, compute_uv=False)
    bound = full[M] if M < full.size else 0.0
    assert np.linalg.norm(H - (U * s) @ V.T, 2) <= bound * (1 + 1e-6) + 1e-12 * full[0]


def test_svd_iterative_falls_back_with_notice(monkeypatch, caplog):
    def boom(*a, **k):
        raise rl.LanczosNotConverged("forced")

    monkeypatch.setattr(rl, "gkl_svd", boom)
    H = np.diag([5.0, 4.0, 1.0])
    with caplog.at_level(logging.WARNING, logger="cidra.realisation"):
        _, s, _ = truncated_svd(H, 2, "iterative")
    np.testing.assert_allclose(s, [5, 4])
    assert "falling back to dense" in caplog.text


# ---------------------------------------------------------------------------
# Ho-Kalman


def test_ho_kalman_order_three_oracle():
    A, B, C, D = random_system(3, 2, seed=5)
    g = oracle_markov(A, B, C, D, 120)
    H, Hs = build_hankel(g, 40, 40)
    m = ho_kalman(*truncated_svd(H, 3, "dense"), Hs, g[:, 0], 3)
    assert np.array_equal(m.D, g[:, 0])
    assert rel_l2(m.markov(51)[:, 1:], g[:, 1:51]) < 1e-8


def test_ho_kalman_geometric_sequence():
    g = 0.5 ** np.arange(30.0)[None, :]
    H, Hs = build_hankel(g, 10, 10)
    m = ho_kalman(*truncated_svd(H, 1), Hs, g[:, 0], 1)
    assert abs(m.A[0, 0] - 0.5) < 1e-10
    assert abs(m.B[0] * m.C[0, 0] - 0.5) < 1e-10


def test_ho_kalman_reports_order_deficiency():
    g = 0.5 ** np.arange(30.0)[None, :]
    H, Hs = build_hankel(g, 10, 10)
    with pytest.raises(OrderDeficiencyError, match="smaller order"):
        ho_kalman(*truncated_svd(H, 3, "dense"), Hs, g[:, 0], 3)


def test_markov_error_zero_for_exact_model():
    A, B, C, D = random_system(4, 3, seed=6)
    m = StateSpaceModel(A, B, C, D, np.zeros(3), 1.0)
    assert markov_error(m, oracle_markov(A, B, C, D, 60), 50) == 0.0


# ---------------------------------------------------------------------------
# stabilisation


def _ss(A):
    A = np.atleast_2d(A)
    n = A.shape[0]
    return StateSpaceModel(A, np.ones(n), np.ones((1, n)), [0.0], [0.0], 1.0)


def test_stabilise_real_pole():
    np.testing.assert_allclose(stabilise(_ss([[1.25]])).A, [[0.8]], rtol=1e-14)


def test_stabilise_rotation_pair():
    th = 0.7
    R = 1.5 * np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    A = stabilise(_ss(R)).A
    assert A.dtype == float
    lam = np.linalg.eigvals(A)
    np.testing.assert_allclose(np.abs(lam), 1 / 1.5, rtol=1e-12)
    np.testing.assert_allclose(np.sort(np.abs(np.angle(lam))), [th, th], rtol=1e-12)


def test_stabilise_leaves_stable_matrix_alone():
    A, *_ = random_system(5, 1, seed=7)
    assert np.array_equal(stabilise(_ss(A)).A, A)


def test_stabilise_is_exact_reflection():
    rng = np.random.default_rng(8)
    lam = np.array([1.7, -1.3, 0.5, -0.2])
    T = rng.standard_normal((4, 4)) + 2 * np.eye(4)
    A = stabilise(_ss(T @ np.diag(lam) @ np.linalg.inv(T))).A
    np.testing.assert_allclose(np.sort(np.linalg.eigvals(A).real), np.sort([1 / 1.7, -1 / 1.3, 0.5, -0.2]), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_stabilise_random_unstable(seed, n):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    A *= rng.uniform(1.01, 1.99) / np.max(np.abs(np.linalg.eigvals(A)))
    before = np.linalg.eigvals(A)
    out = stabilise(_ss(A)).A
    after = np.linalg.eigvals(out)
    assert np.isrealobj(out)
    assert np.max(np.abs(after)) <= 1 - 1e-12
    # every phase survives (match each old eigenvalue to the nearest new phase)
    for lam in before:
        assert np.min(np.abs(np.angle(after) - np.angle(lam))) < 1e-6


def test_stabilise_defective_matrix_uses_schur():
    A = np.array([[1.5, 1.0], [0.0, 1.5]])
    out = stabilise(_ss(A)).A
    assert np.max(np.abs(np.linalg.eigvals(out))) <= 1 - 1e-9 + 1e-15


# ---------------------------------------------------------------------------
# OCP time-scale split


def test_quasi_static_flags_follow_crossover(params):
    cfg = RealisationConfig(**DESK)
    cut = cfg.ocp_cutoff * cfg.record_rate
    for soc in (0.0, 0.5, 1.0):
        sp = quasi_static_setpoint(setpoint(params, soc), cut)
        for w in ("neg", "pos"):
            assert sp.electrode(w).ocp_integrator == (sp.ocp_crossover(w) >= cut)


def test_quasi_static_response_matches_in_record_band(params):
    cfg = RealisationConfig(**DESK)
    s = bilinear_grid(cfg.system_period, cfg.n_samples)[1:50]
    sp = setpoint(params, 0.9)
    sq = quasi_static_setpoint(sp, cfg.ocp_cutoff * cfg.record_rate)
    assert not sq.neg.ocp_integrator
    a = evaluate(TfRequest(sp), s)
    b = evaluate(TfRequest(sq), s)
    scale = np.abs(a).max(axis=1, keepdims=True)
    keep = scale[:, 0] > 0
    assert np.max(np.abs(a - b)[keep] / scale[keep]) < 1e-5


def test_quasi_static_removes_runaway_dc(params):
    cfg = RealisationConfig(**DESK)
    s = bilinear_grid(cfg.system_period, cfg.n_samples)
    sq = quasi_static_setpoint(setpoint(params, 1.0), cfg.ocp_cutoff * cfg.record_rate)
    fr = assemble_simo(TfRequest(sq, outputs=("cse",)), s)
    assert np.max(np.abs(fr.G[:, 0]) / np.abs(fr.G[:, 1])) < 10


# ---------------------------------------------------------------------------
# full pipeline


@pytest.fixture(scope="module")
def desk_models(params):
    cfg = RealisationConfig(**DESK, order=4)
    return {soc: realise_setpoint(params, cfg, soc) for soc in (1.0, 0.75, 0.5, 0.25, 0.0)}


def test_desk_self_reconstruction(desk_models):
    for m in desk_models.values():
        assert m.order == 4
        assert m.markov_error <= 0.05
        assert m.spectral_radius <= 1.0
        assert len(m.labels) == m.n_outputs == 36


def test_default_config_setpoint(params):
    # full reference configuration, one setpoint (a few seconds, about 2 GB)
    m = realise_setpoint(params, RealisationConfig(), 0.75)
    assert m.order == 8 and m.T_s == 0.25 and m.n_outputs == 36
    assert m.spectral_radius <= 1.0
    assert m.markov_error <= 0.05
    assert np.all(np.isfinite(m.A)) and np.all(np.isfinite(m.C))


def test_model_d_matches_step_zero(params):
    cfg = RealisationConfig(**TINY, soc_grid=(0.5,))
    m = realise_setpoint(params, cfg, 0.5)
    sp = quasi_static_setpoint(setpoint(params, 0.5), cfg.ocp_cutoff * cfg.record_rate)
    req = TfRequest(sp, cfg.electrode_locations, cfg.electrolyte_locations(params))
    fr = assemble_simo(req, bilinear_grid(cfg.system_period, cfg.n_samples))
    np.testing.assert_allclose(m.D, impulse_response(fr)[:, 0], rtol=1e-12, atol=1e-300)
    np.testing.assert_array_equal(m.res0, fr.res0)


def test_subsampled_pipeline(params):
    cfg = RealisationConfig(**TINY, sample_rate=4.0, system_period=0.5)
    m = realise_setpoint(params, cfg, 0.5)
    assert m.T_s == 0.5 and m.markov_error <= 0.05


def test_grid_counts_and_identity(params):
    cfg = RealisationConfig(**TINY, soc_grid=(1.0, 0.75, 0.5, 0.25, 0.0))
    grid = realise_grid(params, cfg)
    assert len(grid) == 5
    single = realise_grid(params, cfg.replace(soc_grid=(0.5,)))
    assert np.array_equal(single[0.5, 298.15].A, realise_setpoint(params, cfg, 0.5).A)


def test_grid_thirty_models(params):
    cfg = RealisationConfig(
        hankel_rows=60, hankel_cols=60, tf_sample_hours=0.1, order=3, outputs=("cse", "j"),
        temp_grid=(278.15, 288.15, 298.15, 308.15, 318.15, 328.15),
    )
    grid = realise_grid(params, cfg)
    assert len(grid) == 30
    assert grid.temps.size == 6 and grid.socs.size == 5
    assert all(t > 0 for t in grid.setpoint_times.values())


def test_grid_failure_names_setpoint(params, monkeypatch):
    cfg = RealisationConfig(**TINY, soc_grid=(0.75, 0.25))
    real = rl.realise_setpoint

    def flaky(p, c, soc, temp=None, eig=None):
        if soc == 0.25:
            raise OrderDeficiencyError("synthetic")
        return real(p, c, soc, temp, eig)

    monkeypatch.setattr(rl, "realise_setpoint", flaky)
    with pytest.raises(SetpointError, match="soc=0.25"):
        realise_grid(params, cfg)


# ---------------------------------------------------------------------------
# model files


def test_model_file_round_trip(tmp_path, desk_models):
    m = desk_models[0.5]
    path = save_model(m, tmp_path / "m.cidr")
    back = load_model(path)
    for name in ("A", "B", "C", "D", "res0"):
        assert np.array_equal(getattr(back, name), getattr(m, name))
    assert (back.T_s, back.soc, back.temp) == (m.T_s, m.soc, m.temp)
    assert [lab.name for lab in back.labels] == [lab.name for lab in m.labels]
    assert path.read_bytes()[:4] == b"CIDR"


def test_model_file_rejects_corruption(desk_models):
    data = model_bytes(desk_models[0.5])
    with pytest.raises(ModelFormatError, match="magic"):
        model_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(ModelFormatError, match="expected"):
        model_from_bytes(data[:-8])
    with pytest.raises(ModelFormatError, match="version"):
        model_from_bytes(data[:4] + (99).to_bytes(4, "little") + data[8:])


def test_grid_directory_round_trip_is_deterministic(tmp_path, params):
    cfg = RealisationConfig(**TINY, soc_grid=(0.75, 0.25))
    grid = realise_grid(params, cfg)
    a = save_grid(grid, tmp_path / "a")
    b = save_grid(realise_grid(params, cfg), tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    back = load_grid(tmp_path / "a")
    assert back.config == cfg and len(back) == 2
    assert np.array_equal(back[0.25, 298.15].C, grid[0.25, 298.15].C)
