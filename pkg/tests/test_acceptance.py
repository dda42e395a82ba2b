"""Acceptance checks, one test per criterion.

Each test prints a single ``acceptance <n>: PASS|FAIL ...`` line with the
measured figures and then asserts the criterion at its stated tolerance.

The shedding criteria (6 to 9) need four full-order runs of about four
minutes each on one core. They are computed once per session. Set
``PODFV_ACCEPTANCE_CACHE`` to a directory to keep them on disk between
sessions; runtimes are then taken from the wall time recorded with the run.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from podfv import fvops
from podfv.cli import load_hf, save_hf
from podfv.evaluation import ShedCase, mode_sweep_report, shedding_frequency, speedup
from podfv.fvops import CellField
from podfv.hfsolver import CaseConfig, PisoSolver, pressure_bcs, run_case, velocity_bcs
from podfv.mesh import generate_channel_mesh
from podfv.pod import (
    build_basis,
    correlation_matrix,
    cumulative_energy,
    eig_spectrum,
    velocity_modes,
    velocity_weights,
)
from podfv.romassembly import assemble, compose_system
from podfv.romsolver import (
    ReducedState,
    RomRunConfig,
    RomStepError,
    jacobian,
    newton_step_solve,
    residual,
)

from conftest import interior_cells, shear
from test_fvops import affine, affine_vec, exact_bcs
from test_hfsolver import uniform_start
from test_pod import align, weighted_svd
from test_romassembly import close, div_conv, proj_p, proj_u, random_basis, vfield
from test_romsolver import TIGHT, blocks, random_system

pytestmark = pytest.mark.acceptance

# desk analogue of the shedding case: unit square body, Re = u D / nu = 100
SHED_MESH = dict(nx=160, ny=64, lx=20.0, ly=8.0, obstacle=(5.0, 6.0, 3.5, 4.5))
SHED_DT = 0.04
TRAIN_U = (0.8, 1.0, 1.2)
HELD_OUT_U = 0.9
# shedding is fully developed well before this time in every run
FREQUENCY_TAIL_START = 100.0


def shed_config(u_in):
    return CaseConfig(
        nu=0.01,
        u_in=u_in,
        dt=SHED_DT,
        t_end=150.0,
        snapshot_stride=0,
        n_snapshots=120,
        snapshot_periods=1.5,
        body_diameter=1.0,
        perturbation=0.05,
        blend=1.0,
    )


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\nacceptance {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return report


def orthonormality_error(mesh, basis):
    w = velocity_weights(mesh)
    G_u = basis.phi.T @ (w[:, None] * basis.phi)
    G_p = basis.chi.T @ (mesh.cell_volumes[:, None] * basis.chi)
    return max(np.abs(G_u - np.eye(basis.n_u)).max(), np.abs(G_p - np.eye(basis.n_p)).max())


# -- shared full-order data ------------------------------------------------------------------
@pytest.fixture(scope="session")
def shed_mesh():
    return generate_channel_mesh(**SHED_MESH)


class HFRuns:
    """Full-order shedding runs, computed lazily and reused."""

    def __init__(self, mesh):
        self.mesh = mesh
        self.runs = {}
        cache = os.environ.get("PODFV_ACCEPTANCE_CACHE")
        self.cache = Path(cache) if cache else None

    def __call__(self, u_in):
        if u_in not in self.runs:
            cfg = shed_config(u_in)
            directory = None
            if self.cache is not None:
                key = f"{self.mesh.content_hash()}-u{u_in:g}-dt{cfg.dt:g}-b{cfg.blend:g}"
                directory = self.cache / key
            if directory is not None and (directory / "U.snap").exists():
                self.runs[u_in] = load_hf(directory, self.mesh)
            else:
                snap, forces = run_case(self.mesh, cfg)
                if directory is not None:
                    save_hf(directory, snap, forces)
                self.runs[u_in] = (snap, forces)
        return self.runs[u_in]

    def wall(self, u_in):
        return float(self(u_in)[0].meta["wall_time"])


@pytest.fixture(scope="session")
def hf_runs(shed_mesh):
    return HFRuns(shed_mesh)


@pytest.fixture(scope="session")
def shed_case(shed_mesh, hf_runs):
    """Re = 100 basis and operators with the time it took to build them."""
    snap, forces = hf_runs(1.0)
    t0 = time.perf_counter()
    basis = build_basis(shed_mesh, [snap], n_u=12, n_p=12)
    blocks_ = assemble(shed_mesh, basis)
    offline = time.perf_counter() - t0
    case = ShedCase(shed_mesh, snap, forces, basis, blocks_, nu=0.01, u_D=1.0, diameter=1.0, rom_dt=SHED_DT)
    return case, offline


# -- 1 to 5: operator and solver identities --------------------------------------------------
def test_criterion_1_pod(verdict, body_mesh, small_basis, rng):
    t0 = time.perf_counter()
    worst_modes = worst_eigs = 0.0
    for n_s in range(3, 13):
        n_h = int(rng.integers(20, 80))
        S = rng.normal(size=(n_h, n_s)) @ np.diag(2.0 ** -np.arange(n_s))
        w = rng.uniform(0.5, 2.0, n_h)
        lam, Q = eig_spectrum(correlation_matrix(S, w))
        n = min(n_s, 6)
        sig2, ref = weighted_svd(S, w, n)
        phi = velocity_modes(S, lam, Q, n)
        worst_eigs = max(worst_eigs, np.abs(lam[:n] / sig2[:n] - 1).max())
        worst_modes = max(worst_modes, np.abs(align(phi, ref) - ref).max())
    orth = orthonormality_error(body_mesh, small_basis)
    elapsed = time.perf_counter() - t0
    ok = orth <= 1e-8 and worst_modes <= 1e-9 and worst_eigs <= 1e-9 and elapsed < 10
    verdict(1, ok, f"orthonormality {orth:.1e}, modes {worst_modes:.1e}, eigenvalues {worst_eigs:.1e} rel, {elapsed:.2f} s")


def test_criterion_2_fv_operators(verdict, channel, body_mesh, skewed, rng):
    t0 = time.perf_counter()
    exact = 0.0
    for m in (channel, body_mesh, skewed):
        inner = interior_cells(m)
        p = CellField(affine(m.cell_centers), exact_bcs(m, affine))
        u = CellField(affine_vec(m.cell_centers), exact_bcs(m, affine_vec))
        exact = max(
            exact,
            np.abs(fvops.interpolate_to_faces(m, p) - affine(m.face_centers)).max(),
            np.abs(fvops.gauss_gradient(m, p)[inner] - [-1.3, 2.1]).max(),
            np.abs(fvops.gauss_gradient(m, u)[inner] - [[0.5, -1.0], [1.5, 0.25]]).max(),
            np.abs(fvops.laplacian(m, 1.0, p)[inner]).max(),
            np.abs(fvops.laplacian(m, 0.3, u)[inner]).max(),
        )
    telescoping = 0.0
    for m in (body_mesh, skewed):
        F = rng.normal(size=m.n_faces)
        total = fvops.divergence_of_flux(m, F) @ m.cell_volumes
        telescoping = max(telescoping, abs(total - F[m.boundary].sum()) / max(1.0, np.abs(F).sum()))
        u = CellField(rng.normal(size=(m.n_cells, 2)), {pt.name: fvops.FixedValue(rng.normal(size=2)) for pt in m.patches})
        conv = (fvops.convection(m, F, u) * m.cell_volumes[:, None]).sum(axis=0)
        uf = fvops.interpolate_to_faces(m, u, flux=F)
        expect = (F[m.boundary, None] * uf[m.boundary]).sum(axis=0)
        telescoping = max(telescoping, np.abs(conv - expect).max() / max(1.0, np.abs(expect).max()))
    elapsed = time.perf_counter() - t0
    ok = exact <= 1e-10 and telescoping <= 1e-12 and elapsed < 5
    verdict(2, ok, f"affine/linear exactness {exact:.1e}, telescoping {telescoping:.1e}, {elapsed:.2f} s")


def test_criterion_3_assembly_oracle(verdict, body_mesh):
    t0 = time.perf_counter()
    mesh = shear(body_mesh, 0.2)
    rng = np.random.default_rng(7)
    basis = random_basis(mesh, rng)
    blk = assemble(mesh, basis)
    pb, hom = pressure_bcs(mesh), fvops.homogeneous(velocity_bcs(mesh, 0.0))
    lift = vfield(basis, np.zeros(basis.n_u), velocity_bcs(mesh, 1.0), lift=1.0)
    checks = {}
    for k in range(3):
        a, a2, b = rng.normal(size=basis.n_u), rng.normal(size=basis.n_u), rng.normal(size=basis.n_p)
        ua, ua2 = vfield(basis, a, hom), vfield(basis, a2, hom)
        q = CellField(basis.chi @ b, pb)
        conv = fvops.convection(mesh, basis.psi @ a, ua2)
        checks[f"B{k}"] = close(blk.B @ a, proj_u(mesh, basis, fvops.laplacian(mesh, 1.0, ua)))
        checks[f"C{k}"] = close(np.einsum("ijk,j,k->i", blk.C, a, a2), proj_u(mesh, basis, conv))
        checks[f"G{k}"] = close(np.einsum("ijk,j,k->i", blk.G, a, a2), proj_p(mesh, basis, div_conv(mesh, conv)))
        checks[f"K{k}"] = close(blk.K @ b, proj_u(mesh, basis, fvops.gauss_gradient(mesh, q)))
        checks[f"D{k}"] = abs(b @ blk.D @ b - fvops.grad_inner_product(mesh, q, q)) <= 1e-9 * abs(b @ blk.D @ b)
        conv_jc = fvops.convection(mesh, basis.psi @ a, lift)
        conv_cj = fvops.convection(mesh, basis.F_c, ua)
        checks[f"B1_{k}"] = close(blk.B1 @ a, proj_u(mesh, basis, conv_jc))
        checks[f"B2_{k}"] = close(blk.B2 @ a, proj_u(mesh, basis, conv_cj))
        checks[f"F1_{k}"] = close(blk.F1 @ a, proj_p(mesh, basis, div_conv(mesh, conv_jc)))
        checks[f"F2_{k}"] = close(blk.F2 @ a, proj_p(mesh, basis, div_conv(mesh, conv_cj)))
        # composed momentum and pressure equations on reconstructed fields
        for u_D, nu in ((1.0, 0.01), (0.7, 0.05)):
            system = compose_system(blk, nu, u_D)
            u = vfield(basis, a, velocity_bcs(mesh, u_D), lift=u_D)
            F = u_D * basis.F_c + basis.psi @ a
            p = CellField(basis.p_mean + basis.chi @ b, pb)
            conv_full = fvops.convection(mesh, F, u)
            rhs = fvops.laplacian(mesh, nu, u) - conv_full - fvops.gauss_gradient(mesh, p)
            reduced = system.f + system.L @ a - np.einsum("ijk,j,k->i", blk.C, a, a) - blk.K @ b
            checks[f"momentum{k}_{u_D}"] = close(reduced, proj_u(mesh, basis, rhs))
            gp = fvops.gauss_gradient(mesh, p)
            full = np.array(
                [fvops.inner_product(mesh, fvops.gauss_gradient(mesh, CellField(c, pb)), gp) for c in basis.chi.T]
            ) - proj_p(mesh, basis, div_conv(mesh, conv_full))
            reduced_p = system.D @ b - (system.g + system.F_BC @ a + np.einsum("ijk,j,k->i", blk.G, a, a))
            checks[f"pressure{k}_{u_D}"] = close(reduced_p, full)
    conv_cc = fvops.convection(mesh, basis.F_c, lift)
    checks["A1"] = close(blk.A1, proj_u(mesh, basis, fvops.laplacian(mesh, 1.0, lift)))
    checks["A2"] = close(blk.A2, proj_u(mesh, basis, conv_cc))
    checks["E1"] = close(blk.E1, proj_p(mesh, basis, div_conv(mesh, conv_cc)))
    checks["K0"] = close(blk.K0, proj_u(mesh, basis, fvops.gauss_gradient(mesh, CellField(basis.p_mean, pb))))
    elapsed = time.perf_counter() - t0
    failed = sorted(k for k, v in checks.items() if not v)
    ok = not failed and elapsed < 30
    verdict(3, ok, f"{len(checks) - len(failed)}/{len(checks)} projections match at 1e-9 rel {failed or ''}, {elapsed:.2f} s")


def test_criterion_4_reduced_solver(verdict):
    t0 = time.perf_counter()
    roots = 0.0
    linear = compose_system(blocks(B=[[-1.0]]), nu=1.0, u_D=0.0)
    for dt in (0.1, 0.5, 2.0):
        nxt, _, _ = newton_step_solve(ReducedState([1.0], [0.0]), linear, RomRunConfig(dt, dt, **TIGHT))
        roots = max(roots, abs(nxt.a[0] - 1.0 / (1.0 + dt)))
    quadratic = compose_system(blocks(C=[[[1.0]]]), nu=0.0, u_D=0.0)
    nxt, _, _ = newton_step_solve(ReducedState([1.0], [0.0]), quadratic, RomRunConfig(1.0, 1.0, **TIGHT))
    roots = max(roots, abs(nxt.a[0] - (np.sqrt(5.0) - 1.0) / 2.0))

    fd_err = 0.0
    for seed in range(10):
        system, rng = random_system(seed)
        state = ReducedState(rng.normal(size=4), rng.normal(size=3))
        nxt = ReducedState(rng.normal(size=4), rng.normal(size=3))
        dt = 0.05 + 0.05 * seed
        J = jacobian(nxt, system, dt)
        x0 = np.concatenate([nxt.a, nxt.b])
        fd = np.empty_like(J)
        for k in range(len(x0)):
            xp, xm = x0.copy(), x0.copy()
            xp[k] += 1e-6
            xm[k] -= 1e-6
            rp = np.concatenate(residual(ReducedState(xp[:4], xp[4:]), state, system, dt))
            rm = np.concatenate(residual(ReducedState(xm[:4], xm[4:]), state, system, dt))
            fd[:, k] = (rp - rm) / 2e-6
        fd_err = max(fd_err, np.abs(J - fd).max() / np.abs(J).max())

    _, _, trace = newton_step_solve(ReducedState([3.0], [0.0]), quadratic, RomRunConfig(1.0, 1.0, **TIGHT))
    r = np.array(trace)
    tail = r[(r < 1e-2) & (r > 1e-14)]
    ratios = np.log10(tail[1:]) / np.log10(tail[:-1])
    doubling = len(ratios) >= 1 and bool(np.all(ratios > 1.8))
    elapsed = time.perf_counter() - t0
    ok = roots <= 1e-12 and fd_err <= 1e-6 and doubling and elapsed < 5
    verdict(
        4,
        ok,
        f"roots {roots:.1e}, Jacobian vs FD {fd_err:.1e} rel, digit ratios {np.round(ratios, 2).tolist()}, {elapsed:.2f} s",
    )


def test_criterion_5_hf_sanity(verdict, body_mesh):
    t0 = time.perf_counter()
    m = generate_channel_mesh(48, 16, 6.0, 1.0, sides="wall")
    s = PisoSolver(m, CaseConfig(nu=0.1, u_in=1.0, dt=0.05))
    for _ in range(300):
        s.step()
    column = np.isclose(m.cell_centers[:, 0], 5.0625)
    y = m.cell_centers[column, 1]
    poiseuille = np.abs(s.state.u[column, 0] - 6.0 * y * (1.0 - y)).max() / 1.5

    m = generate_channel_mesh(20, 8, 4.0, 1.6)
    s = PisoSolver(m, CaseConfig(nu=0.01, u_in=1.0, dt=0.05))
    uniform_start(s, 1.0)
    for _ in range(1000):
        s.step()
    uniform = max(np.abs(s.state.u - [1.0, 0.0]).max(), np.abs(s.state.p).max())

    s = PisoSolver(body_mesh, CaseConfig(nu=0.01, u_in=1.0, dt=0.02))
    divergence = 0.0
    for _ in range(50):
        s.step()
        divergence = max(divergence, s.last_divergence / s.divergence_scale())
    elapsed = time.perf_counter() - t0
    ok = poiseuille <= 0.02 and uniform <= 1e-8 and divergence <= 1e-8 and elapsed < 120
    verdict(
        5,
        ok,
        f"Poiseuille {100 * poiseuille:.2f}%, uniform drift {uniform:.1e}, flux divergence {divergence:.1e}, {elapsed:.1f} s",
    )


# -- 6 to 9: the shedding case -------------------------------------------------------------
def test_criterion_6_shedding_reproduction(verdict, shed_case, hf_runs):
    case, offline = shed_case
    t0 = time.perf_counter()
    report = mode_sweep_report(case, n_list=(3, 7))
    r3, r7 = report.row(3), report.row(7)
    # the training window holds too few periods to resolve 2% spectrally, so
    # both spectra come from long records: the developed HF tail and a
    # reduced run of the same length started from the first snapshot
    tail = case.forces.window(FREQUENCY_TAIL_START)
    traj, f = case.run_rom(7, t_span=tail.t[-1] - tail.t[0])
    f_hf = shedding_frequency(tail.t, tail.lift)
    f_rom = shedding_frequency(traj.t, f[:, 1])
    freq_err = abs(f_rom - f_hf) / f_hf
    elapsed = time.perf_counter() - t0 + offline + hf_runs.wall(1.0)
    periods = (case.window[1] - case.window[0]) * f_hf
    orth = orthonormality_error(case.mesh, case.basis)
    ok = (
        r7.eps_lift <= 5.0
        and r7.eps_drag <= 10.0
        and r7.eps_lift < r3.eps_lift
        and r7.eps_drag < r3.eps_drag
        and freq_err <= 0.02
        and orth <= 1e-8
        and elapsed <= 600
    )
    verdict(
        6,
        ok,
        f"{case.mesh.n_cells} cells, {case.snapshots.U.shape[1]} snapshots over {periods:.2f} periods; "
        f"N=7 lift {r7.eps_lift:.2f}% drag {r7.eps_drag:.2f}%, N=3 lift {r3.eps_lift:.2f}% drag {r3.eps_drag:.2f}%; "
        f"f_ROM {f_rom:.4f} vs f_HF {f_hf:.4f} ({100 * freq_err:.2f}%); {elapsed:.0f} s",
    )


def test_criterion_7_long_horizon(verdict, shed_case):
    case, _ = shed_case
    t0, t1 = case.window
    span = 4.0 * (t1 - t0)
    basis = case.basis
    w = velocity_weights(case.mesh)
    U_h = case.snapshots.U - np.outer(basis.phi_c, np.full(case.snapshots.U.shape[1], case.u_D))
    lines, ok = [], True
    for n in (3, 5, 7, 10):
        energy = cumulative_energy(basis.lambda_u, n)
        train_max = np.abs(basis.phi[:, :n].T @ (w[:, None] * U_h)).max()
        try:
            traj, _ = case.run_rom(n, t_span=span)
            peak = np.abs(traj.a).max()
            status = f"max|a| {peak:.2f} ({peak / train_max:.2f}x)"
            bounded = bool(np.isfinite(peak) and peak <= 10 * train_max)
        except RomStepError as exc:
            reached = exc.partial.t[-1] if exc.partial is not None else t0
            status, bounded = f"diverged at t={reached:.1f}", False
        if energy >= 0.99:
            ok = ok and bounded
        lines.append(f"N={n} (energy {energy:.4f}) {status}")
    verdict(7, ok, f"to {span / (t1 - t0):.0f}x the window: " + "; ".join(lines))


def test_criterion_8_multi_reynolds(verdict, shed_mesh, hf_runs):
    train = [hf_runs(u) for u in TRAIN_U]
    held_snap, held_forces = hf_runs(HELD_OUT_U)
    t0 = time.perf_counter()
    basis = build_basis(shed_mesh, [s for s, _ in train], n_u=10, n_p=10)
    blk = assemble(shed_mesh, basis)
    # start from the nearest trained run and let the model settle on its own cycle
    start_snap = train[TRAIN_U.index(1.0)][0]
    case = ShedCase(shed_mesh, start_snap, train[1][1], basis, blk, nu=0.01, u_D=HELD_OUT_U, diameter=1.0, rom_dt=SHED_DT)
    tail = held_forces.window(FREQUENCY_TAIL_START)
    settle = 20.0
    traj, f = case.run_rom(10, t_span=settle + tail.t[-1] - tail.t[0])
    settled = traj.t >= traj.t[0] + settle - 1e-9
    f_rom = shedding_frequency(traj.t[settled], f[settled, 1])
    f_hf = shedding_frequency(tail.t, tail.lift)
    err = abs(f_rom - f_hf) / f_hf
    elapsed = time.perf_counter() - t0 + sum(hf_runs.wall(u) for u in (*TRAIN_U, HELD_OUT_U))
    orth = orthonormality_error(shed_mesh, basis)
    ok = err <= 0.05 and orth <= 1e-8 and elapsed <= 1200
    verdict(
        8,
        ok,
        f"pooled Re {[round(u * 100) for u in TRAIN_U]}, predicted Re {HELD_OUT_U * 100:.0f}: "
        f"St_ROM {f_rom:.4f} vs St_HF {f_hf:.4f} ({100 * err:.2f}%); {elapsed:.0f} s including HF runs",
    )


def test_criterion_9_speedup(verdict, shed_case, hf_runs):
    case, _ = shed_case
    t0, t1 = case.window
    hf_wall = case.hf_wall_per_time() * (t1 - t0)
    rom_walls = [case.run_rom(7)[0].wall_time for _ in range(3)]
    su = speedup(hf_wall, float(np.median(rom_walls)))
    verdict(9, su >= 100, f"HF {hf_wall:.2f} s vs ROM {1e3 * np.median(rom_walls):.1f} ms over the window: speedup {su:.0f}")
