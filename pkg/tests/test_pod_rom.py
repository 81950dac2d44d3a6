import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import sparse as sp

from supgrom.assembly import graetz_problem, square_problem
from supgrom.mesh import build_structured_mesh
from supgrom.ocp_steady import Stabilization
from supgrom.pod_rom import (RomMode, ReducedSolveError, SnapshotCollectionError, build_bases,
                             build_reduced_model, collect_snapshots, correlation_matrix,
                             draw_training_set, load_offline, make_model, pod_basis,
                             projection_error, save_offline, solve_reduced, truncation_report)


def test_draw_examples():
    ts = draw_training_set([(1e4, 1e6)], 100, 7)
    assert len(ts) == 100
    assert np.all((ts.samples >= 1e4) & (ts.samples <= 1e6))
    one = draw_training_set((1e4, 1e6), 1, 3)
    assert one.samples.shape == (1, 1)
    a = draw_training_set([(1e4, 1e5), (0, 1.57)], 20, 9)
    b = draw_training_set([(1e4, 1e5), (0, 1.57)], 20, 9)
    assert a.samples.tobytes() == b.samples.tobytes()
    assert not np.array_equal(a.samples, draw_training_set([(1e4, 1e5), (0, 1.57)], 20, 10).samples)


def test_draw_rejects_empty_box():
    with pytest.raises(ValueError):
        draw_training_set([(2.0, 1.0)], 5, 1)


@given(st.integers(1, 50), st.integers(0, 2**63 - 1))
def test_draw_in_box(n, seed):
    ts = draw_training_set([(1e4, 1e5), (0.0, 1.57)], n, seed)
    assert ts.samples.shape == (n, 2)
    assert np.all(ts.samples >= [1e4, 0.0]) and np.all(ts.samples <= [1e5, 1.57])


def test_correlation_examples():
    G = sp.diags([1.0, 2.0, 4.0])
    S = np.array([[1.0, 0.0], [0.0, 1 / np.sqrt(2)], [0.0, 0.0]])
    np.testing.assert_allclose(correlation_matrix(S, G), 0.5 * np.eye(2))


def test_pod_identical_snapshots():
    G = sp.diags([1.0, 2.0, 3.0])
    v = np.array([1.0, -2.0, 0.5])
    S = np.column_stack([v, v, v])
    C = correlation_matrix(S, G)
    with pytest.warns(RuntimeWarning):
        pod = pod_basis(C, S, G, 2)
    assert pod.basis.shape[1] == 1
    eta = pod.basis[:, 0]
    ref = v / np.sqrt(v @ (G @ v))
    np.testing.assert_allclose(eta * np.sign(eta @ ref), ref, atol=1e-14)
    assert pod.eigenvalues[1] <= 1e-12 * pod.eigenvalues[0]
    assert pod.warning


@given(st.integers(0, 2**32 - 1))
def test_pod_orthonormal_and_tail(seed):
    rng = np.random.default_rng(seed)
    n, m = 30, 12
    D = rng.uniform(0.5, 2.0, n)
    G = sp.diags(D)
    # decaying spectrum keeps every mode well above the floor
    S = rng.standard_normal((n, m)) * np.logspace(0, -3, m)
    C = correlation_matrix(S, G)
    pod = pod_basis(C, S, G, m)
    B = pod.basis
    np.testing.assert_allclose(B.T @ (G @ B), np.eye(B.shape[1]), atol=1e-8)
    lam = pod.eigenvalues
    assert np.all(np.diff(lam) <= 1e-15 * lam[0])
    for N in (1, m // 2, m):
        err = projection_error(S, B[:, :N], G)
        tail = lam[N:].sum()
        assert abs(np.sqrt(max(err, 0)) - np.sqrt(tail)) <= 1e-8 * np.sqrt(lam.sum())


def test_pod_rejects_zero_modes():
    with pytest.raises(ValueError):
        pod_basis(np.eye(2), np.eye(2), None, 0)


def test_truncation_report_tail():
    class B:
        eigenvalues = np.array([4.0, 2.0, 1.0])
    rep = truncation_report({"y": B()})
    assert rep["y"]["tail"] == [7.0, 3.0, 1.0, 0.0]


@pytest.fixture(scope="module")
def graetz_rom():
    problem = graetz_problem()
    mesh = build_structured_mesh(problem.domain, 20, 10)
    model = make_model(problem, mesh)
    ts = draw_training_set(problem.parameter_box, 12, 4)
    snaps = collect_snapshots(problem, mesh, ts, model=model)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        bases = build_bases(snaps, 12)
    return problem, mesh, model, snaps, bases, build_reduced_model(problem, bases, model)


def test_snapshot_shapes(graetz_rom):
    problem, mesh, model, snaps, bases, rom = graetz_rom
    nf = model.spaces.n_free
    assert snaps.Y.shape == (nf, 12) and snaps.P.shape == (nf, 12)
    assert snaps.U.shape == (mesh.n_vertices, 12)
    for G in snaps.grams.values():
        assert abs(G - G.T).max() == 0


def test_identical_samples_give_identical_columns(graetz_rom):
    problem, mesh, model, *_ = graetz_rom
    snaps = collect_snapshots(problem, mesh, np.array([[2e5], [2e5]]), model=model)
    assert np.array_equal(snaps.Y[:, 0], snaps.Y[:, 1])


def test_aggregated_space_is_orthonormal(graetz_rom):
    problem, mesh, model, snaps, bases, rom = graetz_rom
    Z = bases.Z
    G = snaps.grams["y"]
    np.testing.assert_allclose(Z.T @ (G @ Z), np.eye(Z.shape[1]), atol=1e-8)
    assert np.all(np.diff(bases.z_count) >= 0)
    assert bases.z_count[bases.N_max] == Z.shape[1]


def test_reduced_blocks_shape(graetz_rom):
    problem, mesh, model, snaps, bases, rom = graetz_rom
    for N in range(1, rom.N_max + 1):
        A, b = rom.assemble([1e5], N, RomMode.ONLINE_OFFLINE)
        zc, nN, _ = rom.block_sizes(N)
        assert A.shape == (2 * zc + nN,) * 2 and zc <= 2 * N


def test_projection_matches_direct_oracle(graetz_rom):
    problem, mesh, model, snaps, bases, rom = graetz_rom
    N = rom.N_max
    zc = bases.z_count[N]
    V = sp.block_diag([bases.Z[:, :zc], bases.U[:, :N], bases.Z[:, :zc]]).toarray()
    for mode in RomMode:
        system = model.assemble([3.3e5], mode.stabilization)
        A_ref = V.T @ (system.matrix @ V)
        b_ref = V.T @ system.rhs
        A, b = rom.assemble([3.3e5], N, mode)
        assert np.abs(A - A_ref).max() <= 1e-12 * np.abs(A_ref).max()
        assert np.abs(b - b_ref).max() <= 1e-12 * np.abs(b_ref).max()


def test_snapshot_reproduction(graetz_rom):
    problem, mesh, model, snaps, bases, rom = graetz_rom
    N = rom.N_max
    for k in (0, 5):
        red = solve_reduced(rom, snaps.samples[k], N)
        for var, x in zip("yup", (red.y, red.u, red.p)):
            ref = snaps.matrix(var)[:, k]
            G = snaps.grams[var]
            d = x - ref
            assert np.sqrt(d @ (G @ d)) <= 1e-6 * np.sqrt(ref @ (G @ ref))


def test_reduced_gradient_identity(graetz_rom):
    *_, rom = graetz_rom
    red = solve_reduced(rom, [4e5], rom.N_max, RomMode.ONLY_OFFLINE)
    assert red.gradient_residual <= 1e-10


def test_reduced_rejects_bad_sizes(graetz_rom):
    *_, rom = graetz_rom
    with pytest.raises(ValueError, match="empty"):
        solve_reduced(rom, [1e5], 0)
    with pytest.raises(ValueError):
        solve_reduced(rom, [1e5], rom.N_max + 1)


def test_singular_reduced_system_names_inputs(graetz_rom):
    problem, mesh, model, snaps, bases, rom = graetz_rom
    saved = rom.terms
    rom.terms = {m: [(t, 0 * A) for t, A in saved[m]] for m in saved}
    rom._cache.clear()
    try:
        with pytest.raises(ReducedSolveError, match="N=2, mode=OnlineOffline"):
            solve_reduced(rom, [1e5], 2)
    finally:
        rom.terms = saved
        rom._cache.clear()


def test_offline_roundtrip(graetz_rom, tmp_path):
    *_, rom = graetz_rom
    save_offline(rom, tmp_path, extra={"note": "x"})
    loaded, manifest = load_offline(tmp_path)
    assert manifest["note"] == "x"
    for mode in RomMode:
        a = solve_reduced(rom, [7e5], rom.N_max, mode)
        b = solve_reduced(loaded, [7e5], rom.N_max, mode)
        np.testing.assert_array_equal(a.coef, b.coef)


def test_collection_failure_is_reported(graetz_rom, monkeypatch):
    problem, mesh, model, *_ = graetz_rom
    from supgrom.linalg import SingularMatrixError

    def boom(mu, stab):
        raise SingularMatrixError("singular", 3)

    monkeypatch.setattr(model, "solve", boom)
    with pytest.raises(SnapshotCollectionError) as info:
        collect_snapshots(problem, mesh, np.array([[1e5]]), model=model)
    assert info.value.failures[0][0] == 0


def test_parabolic_snapshot_reproduction():
    problem = square_problem(parabolic=True, n_time_steps=4)
    mesh = build_structured_mesh(problem.domain, 8, 8)
    model = make_model(problem, mesh)
    ts = draw_training_set(problem.parameter_box, 5, 2)
    snaps = collect_snapshots(problem, mesh, ts, model=model)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        bases = build_bases(snaps, 5)
    rom = build_reduced_model(problem, bases, model)
    red = solve_reduced(rom, snaps.samples[3], rom.N_max)
    ref = snaps.Y[:, 3]
    G = snaps.grams["y"]
    d = red.y - ref
    assert np.sqrt(d @ (G @ d)) <= 1e-6 * np.sqrt(ref @ (G @ ref))
