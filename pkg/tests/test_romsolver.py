import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from podfv.hfsolver import force_coefficients
from podfv.romassembly import OperatorBlocks, assemble, compose_system
from podfv.romsolver import (
    ForceMap,
    GalerkinROM,
    ReducedState,
    RomRunConfig,
    RomStepError,
    RomTrajectory,
    initialize,
    integrate,
    jacobian,
    newton_step_solve,
    reconstruct,
    residual,
    solve_pressure_coefficients,
)
from podfv._validation import DimensionError

TIGHT = dict(tol_abs=1e-15, tol_rel=1e-15)


def blocks(n_u=1, n_p=1, **given):
    """Operator blocks that are zero except for those given."""
    shapes = {
        "B": (n_u, n_u), "C": (n_u, n_u, n_u), "K": (n_u, n_p), "K0": (n_u,), "D": (n_p, n_p), "E": (n_p,),
        "G": (n_p, n_u, n_u), "A1": (n_u,), "A2": (n_u,), "B1": (n_u, n_u), "B2": (n_u, n_u), "E1": (n_p,),
        "F1": (n_p, n_u), "F2": (n_p, n_u),
    }
    arrays = {k: np.zeros(s) for k, s in shapes.items()}
    arrays["D"] = np.eye(n_p)
    arrays.update({k: np.asarray(v, dtype=float) for k, v in given.items()})
    return OperatorBlocks(**arrays)


def random_system(seed, n_u=4, n_p=3, u_D=1.1, nu=0.03):
    rng = np.random.default_rng(seed)
    D = rng.normal(size=(n_p, n_p))
    b = blocks(
        n_u,
        n_p,
        B=-np.eye(n_u) + 0.1 * rng.normal(size=(n_u, n_u)),
        C=0.3 * rng.normal(size=(n_u, n_u, n_u)),
        K=rng.normal(size=(n_u, n_p)),
        K0=rng.normal(size=n_u),
        D=D @ D.T + n_p * np.eye(n_p),
        E=rng.normal(size=n_p),
        G=0.3 * rng.normal(size=(n_p, n_u, n_u)),
        A1=rng.normal(size=n_u),
        A2=rng.normal(size=n_u),
        B1=0.1 * rng.normal(size=(n_u, n_u)),
        B2=0.1 * rng.normal(size=(n_u, n_u)),
        E1=rng.normal(size=n_p),
        F1=rng.normal(size=(n_p, n_u)),
        F2=rng.normal(size=(n_p, n_u)),
    )
    return compose_system(b, nu, u_D), rng


def test_linear_decay_root():
    system = compose_system(blocks(B=[[-1.0]]), nu=1.0, u_D=0.0)
    for dt in (0.1, 0.5, 2.0):
        state = ReducedState([1.0], [0.0])
        nxt, _, _ = newton_step_solve(state, system, RomRunConfig(dt, dt, **TIGHT))
        assert abs(nxt.a[0] - 1.0 / (1.0 + dt)) <= 1e-12
        r_a, r_b = residual(nxt, state, system, dt)
        assert abs(r_a[0]) <= 1e-14 and abs(r_b[0]) <= 1e-14


def test_quadratic_root():
    system = compose_system(blocks(C=[[[1.0]]]), nu=0.0, u_D=0.0)
    nxt, _, _ = newton_step_solve(ReducedState([1.0], [0.0]), system, RomRunConfig(1.0, 1.0, **TIGHT))
    assert abs(nxt.a[0] - (np.sqrt(5.0) - 1.0) / 2.0) <= 1e-12
    assert nxt.a[0] == pytest.approx(0.618034, abs=1e-6)


def test_newton_digits_double():
    system = compose_system(blocks(C=[[[1.0]]]), nu=0.0, u_D=0.0)
    state = ReducedState([3.0], [0.0])
    _, its, trace = newton_step_solve(state, system, RomRunConfig(1.0, 1.0, **TIGHT))
    assert its >= 3
    r = np.array(trace)
    tail = r[(r < 1e-2) & (r > 1e-14)]
    # quadratic convergence: log10 of the residual roughly doubles per iteration
    ratios = np.log10(tail[1:]) / np.log10(tail[:-1])
    assert len(ratios) >= 1 and np.all(ratios > 1.8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 0.5))
def test_jacobian_matches_central_differences(seed, dt):
    system, rng = random_system(seed)
    state = ReducedState(rng.normal(size=4), rng.normal(size=3))
    nxt = ReducedState(rng.normal(size=4), rng.normal(size=3))
    J = jacobian(nxt, system, dt)
    x0 = np.concatenate([nxt.a, nxt.b])
    h = 1e-6
    fd = np.empty_like(J)
    for k in range(len(x0)):
        xp, xm = x0.copy(), x0.copy()
        xp[k] += h
        xm[k] -= h
        rp = np.concatenate(residual(ReducedState(xp[:4], xp[4:]), state, system, dt))
        rm = np.concatenate(residual(ReducedState(xm[:4], xm[4:]), state, system, dt))
        fd[:, k] = (rp - rm) / (2 * h)
    assert np.abs(J - fd).max() <= 1e-6 * np.abs(J).max()


def test_step_zeroes_the_coupled_residual():
    system, rng = random_system(3)
    state = ReducedState(0.3 * rng.normal(size=4), np.zeros(3))
    cfg = RomRunConfig(0.05, 0.05)
    nxt, _, trace = newton_step_solve(state, system, cfg)
    assert trace[-1] <= cfg.tol_abs + cfg.tol_rel * trace[0]
    # integrate uses the same Newton iteration
    traj = integrate(state, system, cfg)
    assert np.allclose(traj.a[-1], nxt.a, atol=1e-12) and np.allclose(traj.b[-1], nxt.b, atol=1e-12)


def test_pressure_coefficients_solve_algebraic_equation():
    system, rng = random_system(5)
    a = rng.normal(size=4)
    b = solve_pressure_coefficients(a, system)
    _, r_b = residual(ReducedState(a, b), ReducedState(a, b), system, 0.1)
    assert np.abs(r_b).max() <= 1e-12 * max(1.0, np.abs(b).max())


def test_first_order_in_time():
    system, rng = random_system(9)
    a0 = 0.2 * rng.normal(size=4)
    s0 = ReducedState(a0, solve_pressure_coefficients(a0, system))

    def end(dt):
        return integrate(s0, system, RomRunConfig(dt, 1.0, **TIGHT)).a[-1]

    ref = end(0.1 / 8)
    e1 = np.linalg.norm(end(0.1) - ref)
    e2 = np.linalg.norm(end(0.05) - ref)
    # against a dt/8 reference the error ratio of a first-order method is (1 - 1/8) / (1/2 - 1/8)
    assert e1 / e2 == pytest.approx(7.0 / 3.0, rel=0.15)


def test_integration_grid_and_metadata():
    system, rng = random_system(1)
    s0 = ReducedState(np.zeros(4), np.zeros(3), t=2.0)
    traj = integrate(s0, system, RomRunConfig(0.1, 1.0, u_D=0.9))
    assert len(traj) == 11
    assert np.allclose(traj.t, 2.0 + 0.1 * np.arange(11))
    assert traj.meta["u_D"] == 0.9 and traj.wall_time > 0
    assert traj.newton_iterations[0] == 0


def test_failed_step_reports_partial_trajectory():
    system = compose_system(blocks(C=[[[1.0]]]), nu=0.0, u_D=0.0)
    # a large explicit state with one Newton iteration allowed cannot converge
    with pytest.raises(RomStepError) as info:
        integrate(ReducedState([50.0], [0.0]), system, RomRunConfig(1.0, 3.0, max_iter=1, **TIGHT))
    assert info.value.partial is not None and len(info.value.partial) == 1
    assert len(info.value.trace) == 2


def test_state_dimension_checked():
    system, _ = random_system(0)
    with pytest.raises(DimensionError):
        integrate(ReducedState(np.zeros(3), np.zeros(3)), system, RomRunConfig(0.1, 0.2))
    with pytest.raises(ValueError):
        ReducedState([np.nan], [0.0])
    with pytest.raises(ValueError):
        RomRunConfig(dt=0.0, t_end=1.0)


def test_trajectory_csv_roundtrip(tmp_path):
    traj = RomTrajectory(np.arange(3.0), np.arange(6.0).reshape(3, 2) / 7, np.ones((3, 1)) / 3, np.zeros(3, int))
    traj.to_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "t,a_1,a_2,b_1"
    back = RomTrajectory.from_csv(tmp_path / "c.csv")
    assert np.array_equal(back.a, traj.a) and np.array_equal(back.b, traj.b)


def test_initialize_and_reconstruct_snapshot(body_mesh, small_runs, small_basis):
    snap = small_runs[0][0]
    system = compose_system(assemble(body_mesh, small_basis), 0.01, snap.u_in)
    state = initialize(body_mesh, small_basis, system, snap.U[:, 3], snap.times[3])
    u, p, F = reconstruct(state, small_basis, snap.u_in)
    # all usable modes are kept, so the velocity and flux snapshot are recovered
    assert np.abs(u[:, 0] - snap.U[:, 3]).max() <= 1e-8 * np.abs(snap.U).max()
    assert np.abs(F[:, 0] - snap.Fm[:, 3]).max() <= 1e-8 * np.abs(snap.Fm).max()
    assert p.shape == (body_mesh.n_cells, 1)
    with pytest.raises(DimensionError):
        initialize(body_mesh, small_basis, system, snap.U[:-1, 0])


def test_force_map_equals_reconstructed_forces(body_mesh, small_basis, rng):
    basis = small_basis.truncate(5, 4)
    fmap = ForceMap(body_mesh, basis, 0.8, 0.01, diameter=0.5)
    a, b = rng.normal(size=(6, 5)), rng.normal(size=(6, 4))
    u, p, _ = reconstruct((a, b), basis, 0.8)
    d, l = force_coefficients(body_mesh, u, p, 0.8, 0.5, nu=0.01)
    got = fmap((a, b))
    assert np.allclose(got[:, 0], d, rtol=1e-12, atol=1e-12)
    assert np.allclose(got[:, 1], l, rtol=1e-12, atol=1e-12)


def test_galerkin_estimator(body_mesh, small_runs):
    snap = small_runs[0][0]
    rom = GalerkinROM(mesh=body_mesh, n_u=4, nu=0.01, diameter=0.5)
    assert rom.get_params()["n_u"] == 4
    rom.fit(snap)
    A = rom.transform(snap.U)
    assert A.shape == (snap.n_snapshots, 4)
    dt = rom.dt_
    f = rom.predict(np.array([0.0, dt, 2 * dt]))
    assert f.shape == (3, 2) and np.all(np.isfinite(f))
    # the first prediction is the force of the projected initial snapshot
    traj = rom.simulate(0.0)
    assert np.allclose(f[0], rom.forces_(traj)[0])
    with pytest.raises(ValueError):
        rom.predict(np.array([0.5 * dt]))
