"""Desk-scale full-order solver for unsteady incompressible flow.

Collocated finite volumes with a segregated PIMPLE loop: backward-Euler
momentum prediction (convection linearised about the current face flux,
linear/upwind blend by deferred correction), then PISO pressure
correctors with momentum-weighted face fluxes so that pressure and
velocity do not decouple on the collocated grid.

Boundary conditions follow the usual bluff-body setup:

============  =====================  ==================
patch kind    velocity               pressure
============  =====================  ==================
inlet         fixed ``(u_in, 0)``    zero gradient
outlet        zero gradient          fixed 0
wall          no slip                zero gradient
slip-side     slip                   zero gradient
============  =====================  ==================
"""

from __future__ import annotations

import logging
import math
import time as _time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import fvops
from .fvops import CellField, FixedValue, Slip, ZeroGradient
from .mesh import Mesh

__all__ = [
    "CaseConfig",
    "FlowState",
    "ForceHistory",
    "PisoSolver",
    "SnapshotSet",
    "SolverError",
    "choose_snapshot_stride",
    "estimate_period",
    "force_coefficients",
    "pressure_bcs",
    "run_case",
    "velocity_bcs",
]

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """The full-order solver failed (non-convergence, blow-up, bad setup)."""


@dataclass
class CaseConfig:
    nu: float = 0.01
    rho: float = 1.0
    u_in: float = 1.0
    dt: float = 0.02
    t_end: float = 10.0
    piso_correctors: int = 2
    outer_correctors: int = 1
    snapshot_stride: int = 1
    n_snapshots: int = 120
    snapshot_periods: float = 1.5
    body_diameter: float = 1.0
    body_patch: str = "cylinder"
    blend: float = fvops.DEFAULT_BLEND
    limit_pressure_gradient: bool = False
    pressure_tol: float = 1e-8
    momentum_tol: float = 1e-7
    max_linear_iter: int = 2000
    perturbation: float = 0.0
    ddt_flux_correction: bool = True

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.piso_correctors < 1 or self.outer_correctors < 1:
            raise ValueError("corrector counts must be >= 1")
        if self.body_diameter <= 0:
            raise ValueError("body_diameter must be positive")
        if self.snapshot_stride < 0 or self.n_snapshots < 1:
            raise ValueError("snapshot_stride must be >= 0 (0 = automatic) and n_snapshots >= 1")
        if not 0.0 <= self.blend <= 1.0:
            raise ValueError("blend must lie in [0, 1]")

    @property
    def reynolds(self) -> float:
        return abs(self.u_in) * self.body_diameter / self.nu

    def to_dict(self) -> dict:
        return asdict(self)


def velocity_bcs(mesh: Mesh, u_in) -> dict:
    """Velocity boundary conditions for ``mesh`` with inlet speed ``u_in``."""
    bcs = {}
    for p in mesh.patches:
        if p.kind == "inlet":
            bcs[p.name] = FixedValue((float(u_in), 0.0))
        elif p.kind == "outlet":
            bcs[p.name] = ZeroGradient()
        elif p.kind == "wall":
            bcs[p.name] = FixedValue((0.0, 0.0))
        else:
            bcs[p.name] = Slip()
    return bcs


def pressure_bcs(mesh: Mesh) -> dict:
    return {p.name: FixedValue(0.0) if p.kind == "outlet" else ZeroGradient() for p in mesh.patches}


@dataclass
class FlowState:
    u: np.ndarray
    p: np.ndarray
    F: np.ndarray
    t: float = 0.0

    def copy(self) -> "FlowState":
        return FlowState(self.u.copy(), self.p.copy(), self.F.copy(), self.t)


@dataclass
class SnapshotSet:
    """Snapshot matrices, one snapshot per column.

    ``U`` stacks velocity as ``[u_x of all cells, u_y of all cells]`` so it
    has ``2 * n_cells`` rows; ``P`` has ``n_cells`` rows and ``Fm``
    ``n_faces`` rows.
    """

    U: np.ndarray
    P: np.ndarray
    Fm: np.ndarray
    times: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        n = len(self.times)
        if not (self.U.shape[1] == self.P.shape[1] == self.Fm.shape[1] == n):
            raise ValueError("U, P, Fm and times must describe the same number of snapshots")
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("snapshot times must be strictly increasing")

    @property
    def n_snapshots(self) -> int:
        return len(self.times)

    @property
    def u_in(self) -> float:
        return float(self.meta.get("u_in", 0.0))


@dataclass
class ForceHistory:
    t: np.ndarray
    drag: np.ndarray
    lift: np.ndarray

    def window(self, t0, t1=math.inf) -> "ForceHistory":
        m = (self.t >= t0 - 1e-12) & (self.t <= t1 + 1e-12)
        return ForceHistory(self.t[m], self.drag[m], self.lift[m])


def stack_velocity(u: np.ndarray) -> np.ndarray:
    return np.concatenate([u[:, 0], u[:, 1]])


def unstack_velocity(col: np.ndarray) -> np.ndarray:
    n = len(col) // 2
    return np.column_stack([col[:n], col[n:]])


def force_coefficients(mesh: Mesh, u, p, u_in: float, diameter: float, patch="cylinder", nu=None):
    """Drag and lift coefficients on a wall patch, per unit depth.

    Force is the pressure part ``sum p_f S_f`` (wall faces take the owner
    pressure, zero-gradient) plus the viscous wall traction
    ``nu |S_f| u_t / |d|`` from the tangential velocity of the wall cell.
    Coefficients are ``2 F / (u_in**2 D)``; ``p`` is already divided by
    density. ``u`` and ``p`` may be single fields or stacked snapshot
    columns (``(2n, m)`` and ``(n, m)``), in which case arrays are returned.
    """
    pt = mesh.patch(patch)
    if pt.size == 0:
        raise ValueError(f"patch {patch!r} has no faces")
    if u_in == 0 or diameter <= 0:
        raise ValueError("u_in must be nonzero and diameter positive")
    faces = pt.slice
    own = mesh.owner[faces]
    S = mesh.face_areas[faces]
    n = mesh.normals[faces]
    p = np.asarray(p, dtype=float)
    u = np.asarray(u, dtype=float)
    if p.ndim == 1:
        pf = p[own]
        force = pf @ S
        if nu:
            up = u[own]
            ut = up - np.einsum("ij,ij->i", up, n)[:, None] * n
            force = force + nu * ((mesh.area_mag[faces] / mesh.d_mag[faces])[:, None] * ut).sum(axis=0)
        scale = 2.0 / (u_in**2 * diameter)
        return float(force[0] * scale), float(force[1] * scale)
    # stacked columns: u is (2n, m), p is (n, m)
    ncell = mesh.n_cells
    pf = p[own]
    force = S.T @ pf
    if nu:
        ux, uy = u[own], u[ncell + own]
        dot = ux * n[:, :1] + uy * n[:, 1:]
        utx = ux - dot * n[:, :1]
        uty = uy - dot * n[:, 1:]
        g = (mesh.area_mag[faces] / mesh.d_mag[faces])[:, None]
        force = force + nu * np.vstack([(g * utx).sum(axis=0), (g * uty).sum(axis=0)])
    scale = 2.0 / (u_in**2 * diameter)
    return force[0] * scale, force[1] * scale


def estimate_period(t, signal) -> float:
    """Mean period from upward zero crossings of the mean-removed signal."""
    t = np.asarray(t, dtype=float)
    s = np.asarray(signal, dtype=float)
    s = s - s.mean()
    idx = np.nonzero((s[:-1] < 0) & (s[1:] >= 0))[0]
    if len(idx) < 2:
        return math.nan
    tc = t[idx] - s[idx] * (t[idx + 1] - t[idx]) / (s[idx + 1] - s[idx])
    return float((tc[-1] - tc[0]) / (len(tc) - 1))


def choose_snapshot_stride(period: float, dt: float, n_snapshots=120, periods=1.5) -> int:
    """Stride (in time steps) so ``n_snapshots`` cover about ``periods`` periods."""
    if not np.isfinite(period) or period <= 0:
        raise SolverError("cannot choose a snapshot stride without a shedding period estimate")
    return max(1, int(round(periods * period / (n_snapshots * dt))))


class PisoSolver:
    """Owns one flow state and advances it in time."""

    def __init__(self, mesh: Mesh, config: CaseConfig):
        self.mesh = mesh
        self.cfg = config
        self.u_bcs = velocity_bcs(mesh, config.u_in)
        self.p_bcs = pressure_bcs(mesh)
        if not mesh.patches_of_kind("outlet"):
            raise SolverError("pressure system is singular: no outlet (fixed-value pressure) patch")
        self._setup()
        n = mesh.n_cells
        u0 = np.zeros((n, 2))
        # a uniform transverse velocity breaks the mirror symmetry of symmetric geometries
        u0[:, 1] = config.perturbation * config.u_in
        self.state = FlowState(u0, np.zeros(n), self._initial_flux(), 0.0)
        self.last_divergence = 0.0
        self.linear_iterations = {"momentum": 0, "pressure": 0}

    # -- static, mesh-only quantities ------------------------------------
    def _setup(self):
        m = self.mesh
        n, n_int = m.n_cells, m.n_internal_faces
        self.own = m.owner
        self.nei = m.neighbour[:n_int]
        self.own_i = m.owner[:n_int]
        self.own_b = m.owner[n_int:]
        self.gdiff = m.delta_mag / m.d_mag  # |delta|/|d|; |S|/|d_b| on boundary faces
        self.vol = m.cell_volumes

        kinds = np.empty(m.n_boundary_faces, dtype=object)
        for pt in m.patches:
            kinds[pt.start - n_int : pt.start - n_int + pt.size] = pt.kind
        self.b_inlet = kinds == "inlet"
        self.b_outlet = kinds == "outlet"
        self.b_wall = kinds == "wall"
        self.b_slip = kinds == "slip-side"
        self.b_normals = m.normals[n_int:]
        self.b_area = m.face_areas[n_int:]

        # CSR pattern: diagonal then (own,nei) then (nei,own)
        rows = np.concatenate([np.arange(n), self.own_i, self.nei])
        cols = np.concatenate([np.arange(n), self.nei, self.own_i])
        tag = np.arange(1, len(rows) + 1, dtype=float)
        A = sp.csr_matrix((tag, (rows, cols)), shape=(n, n))
        A.sort_indices()
        self._perm = (A.data - 1).astype(np.int64)
        self._pattern = A
        self._n_int = n_int

        u_bvals = fvops.boundary_face_values(m, CellField(np.zeros((n, 2)), self.u_bcs))
        self.u_inlet_vals = u_bvals

        # unit-coefficient pressure Laplacian factorised once, used as PCG preconditioner
        ref = self._assemble_sym(np.ones(m.n_faces) * self.gdiff)
        self._p_ref = spla.splu(ref.tocsc(), permc_spec="MMD_AT_PLUS_A")

    def _initial_flux(self):
        F = np.zeros(self.mesh.n_faces)
        Fb = np.einsum("ij,ij->i", self.b_area, self.u_inlet_vals)
        F[self._n_int :][self.b_inlet] = Fb[self.b_inlet]
        return F

    def _matrix(self, diag, off_on, off_no):
        A = self._pattern.copy()
        A.data = np.concatenate([diag, off_on, off_no])[self._perm]
        return A

    def _assemble_sym(self, coef):
        """SPD matrix of ``sum_f coef_f (p_P - p_N)`` with outlet Dirichlet rows."""
        n_int = self._n_int
        ci = coef[:n_int]
        diag = np.bincount(self.own_i, weights=ci, minlength=self.mesh.n_cells)
        diag += np.bincount(self.nei, weights=ci, minlength=self.mesh.n_cells)
        cb = np.where(self.b_outlet, coef[n_int:], 0.0)
        diag += np.bincount(self.own_b, weights=cb, minlength=self.mesh.n_cells)
        return self._matrix(diag, -ci, -ci)

    # -- operators on the current state -------------------------------------
    def _face_values_u(self, u, F):
        """Linear and upwind face values of u on internal faces."""
        w = self.mesh.weights[: self._n_int, None]
        uo, un = u[self.own_i], u[self.nei]
        lin = w * uo + (1 - w) * un
        up = np.where((F[: self._n_int] >= 0)[:, None], uo, un)
        return lin, up

    def _boundary_u(self, u):
        ub = self.u_inlet_vals.copy()
        uo = u[self.own_b]
        zg = self.b_outlet
        ub[zg] = uo[zg]
        s = self.b_slip
        nrm = self.b_normals[s]
        ub[s] = uo[s] - np.einsum("ij,ij->i", uo[s], nrm)[:, None] * nrm
        return ub

    def grad_p(self, p):
        fld = CellField(p, self.p_bcs)
        if self.cfg.limit_pressure_gradient:
            return fvops.limited_gauss_gradient(self.mesh, fld)
        return fvops.gauss_gradient(self.mesh, fld)

    def _momentum_system(self, u_old, u_lag, F, p):
        """Assemble per-component diagonals, shared off-diagonals and RHS."""
        cfg, m = self.cfg, self.mesh
        n, n_int = m.n_cells, self._n_int
        nu = cfg.nu
        Fi = F[:n_int]
        gam = nu * self.gdiff
        gi = gam[:n_int]
        # owner row: +max(F,0) on diag, min(F,0) off; neighbour row mirrored
        diag = self.vol / cfg.dt
        diag = diag + np.bincount(self.own_i, weights=np.maximum(Fi, 0.0) + gi, minlength=n)
        diag += np.bincount(self.nei, weights=np.maximum(-Fi, 0.0) + gi, minlength=n)
        off_on = np.minimum(Fi, 0.0) - gi
        off_no = -np.maximum(Fi, 0.0) - gi

        rhs = (self.vol / cfg.dt)[:, None] * u_old
        Fb = F[n_int:]
        gb = gam[n_int:]
        ob = self.own_b
        # fixed-value faces (inlet, wall): convective inflow and diffusion to the face value
        fixed = self.b_inlet | self.b_wall
        diag_b = np.where(fixed, gb, 0.0)
        rhs_b = np.where(fixed[:, None], (gb[:, None] - Fb[:, None]) * self.u_inlet_vals, 0.0)
        # outlet: zero gradient, convected owner value
        diag_b = diag_b + np.where(self.b_outlet, Fb, 0.0)
        diag += np.bincount(ob, weights=diag_b, minlength=n)
        rhs[:, 0] += np.bincount(ob, weights=rhs_b[:, 0], minlength=n)
        rhs[:, 1] += np.bincount(ob, weights=rhs_b[:, 1], minlength=n)

        # slip: -gamma (u_P . n) n, normal part implicit per component
        comp_diag = np.zeros((n, 2))
        s = self.b_slip
        nrm = self.b_normals[s]
        gs = gb[s]
        uo = u_lag[ob[s]]
        for c in range(2):
            comp_diag[:, c] = np.bincount(ob[s], weights=gs * nrm[:, c] ** 2, minlength=n)
            cross = np.einsum("ij,ij->i", uo, nrm) - uo[:, c] * nrm[:, c]
            rhs[:, c] -= np.bincount(ob[s], weights=gs * nrm[:, c] * cross, minlength=n)

        # deferred correction towards the linear scheme
        if cfg.blend > 0:
            lin, up = self._face_values_u(u_lag, F)
            corr = cfg.blend * Fi[:, None] * (lin - up)
            for c in range(2):
                rhs[:, c] -= np.bincount(self.own_i, weights=corr[:, c], minlength=n)
                rhs[:, c] += np.bincount(self.nei, weights=corr[:, c], minlength=n)

        return diag, comp_diag, off_on, off_no, rhs

    def _jacobi(self, A_off, diag, rhs, x0):
        x = x0.copy()
        tol = self.cfg.momentum_tol
        bnorm = max(np.linalg.norm(rhs), 1e-300)
        for it in range(1, self.cfg.max_linear_iter + 1):
            r = rhs - A_off @ x - diag * x
            rn = np.linalg.norm(r)
            if rn <= tol * bnorm:
                self.linear_iterations["momentum"] += it
                return x
            x = x + r / diag
        raise SolverError(f"momentum smoother stalled: relative residual {rn / bnorm:.3e} after {it} sweeps")

    def momentum_predict(self, state=None):
        """Provisional velocity from the implicit momentum equation with the
        current pressure gradient as source."""
        st = self.state if state is None else state
        return self._predict(st.u, st.u, st.F, st.p)[0]

    def _predict(self, u_old, u_lag, F, p):
        diag, comp_diag, off_on, off_no, rhs = self._momentum_system(u_old, u_lag, F, p)
        A_off = self._matrix(np.zeros_like(diag), off_on, off_no)
        gp = self.grad_p(p)
        u_star = np.empty_like(u_lag)
        for c in range(2):
            b = rhs[:, c] - self.vol * gp[:, c]
            u_star[:, c] = self._jacobi(A_off, diag + comp_diag[:, c], b, u_lag[:, c])
        return u_star, (diag, comp_diag, A_off, rhs)

    def pressure_correct(self, u_star, system, p_guess, old=None):
        """One PISO corrector: returns ``(p, F, u)`` with a conservative flux.

        ``old`` is the ``(u, F)`` pair of the previous time level. When given
        (and ``ddt_flux_correction`` is on) the interpolated old velocity
        inside the face flux is replaced by the old conservative flux, which
        keeps the momentum-interpolated flux from depending on ``dt``.
        """
        m = self.mesh
        n_int = self._n_int
        diag, comp_diag, A_off, rhs = system
        A = diag + 0.5 * (comp_diag[:, 0] + comp_diag[:, 1])
        H = np.empty_like(u_star)
        for c in range(2):
            H[:, c] = rhs[:, c] - A_off @ u_star[:, c] - (diag + comp_diag[:, c] - A) * u_star[:, c]
        HbyA = H / A[:, None]
        rAU = self.vol / A

        w = m.weights[:n_int]
        phi = np.empty(m.n_faces)
        hf = w[:, None] * HbyA[self.own_i] + (1 - w)[:, None] * HbyA[self.nei]
        phi[:n_int] = np.einsum("ij,ij->i", m.face_areas[:n_int], hf)
        hb = self._boundary_u(HbyA)
        phi[n_int:] = np.einsum("ij,ij->i", self.b_area, hb)
        phi[n_int:][self.b_wall | self.b_slip] = 0.0

        rf = np.empty(m.n_faces)
        rf[:n_int] = w * rAU[self.own_i] + (1 - w) * rAU[self.nei]
        rf[n_int:] = rAU[self.own_b]
        if old is not None and self.cfg.ddt_flux_correction:
            u_old, F_old = old
            uf_old = w[:, None] * u_old[self.own_i] + (1 - w)[:, None] * u_old[self.nei]
            phi[:n_int] += rf[:n_int] / self.cfg.dt * (F_old[:n_int] - np.einsum("ij,ij->i", m.face_areas[:n_int], uf_old))
        coef = rf * self.gdiff
        Ap = self._assemble_sym(coef)
        b = -m.cell_face_sums(phi)
        p = self._solve_pressure(Ap, b, p_guess)

        F = phi.copy()
        F[:n_int] -= coef[:n_int] * (p[self.nei] - p[self.own_i])
        out = self.b_outlet
        F[n_int:][out] -= coef[n_int:][out] * (0.0 - p[self.own_b[out]])
        u = HbyA - rAU[:, None] * self.grad_p(p)
        return p, F, u

    def _solve_pressure(self, Ap, b, x0):
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            return np.zeros_like(b)
        M = spla.LinearOperator(Ap.shape, matvec=self._p_ref.solve, dtype=float)
        count = [0]

        def cb(_):
            count[0] += 1

        x, info = spla.cg(Ap, b, x0=x0, rtol=self.cfg.pressure_tol, atol=0.0, M=M, maxiter=self.cfg.max_linear_iter, callback=cb)
        self.linear_iterations["pressure"] += count[0]
        if info != 0:
            res = np.linalg.norm(b - Ap @ x) / bnorm
            raise SolverError(f"pressure CG did not converge (info={info}, relative residual {res:.3e})")
        return x

    def divergence_scale(self) -> float:
        return abs(self.cfg.u_in) * self.cfg.body_diameter / self.mesh.cell_volumes.min()

    def step(self) -> FlowState:
        st = self.state
        cfg = self.cfg
        u, p, F = st.u, st.p, st.F
        for _ in range(cfg.outer_correctors):
            u_star, system = self._predict(st.u, u, F, p)
            u_corr = u_star
            for _ in range(cfg.piso_correctors):
                p, F, u_corr = self.pressure_correct(u_corr, system, p, old=(st.u, st.F))
            u = u_corr
        div = np.abs(fvops.divergence_of_flux(self.mesh, F)).max()
        self.last_divergence = float(div)
        scale = self.divergence_scale()
        umax = np.abs(u).max()
        if not np.isfinite(umax) or umax > 1e6 * max(abs(cfg.u_in), 1e-300):
            raise SolverError(f"solution diverged at t={st.t + cfg.dt:.6g} (max |u| = {umax:.3e})")
        if div > 1e-8 * scale:
            raise SolverError(f"mass conservation violated at t={st.t + cfg.dt:.6g}: max |div F| = {div:.3e}")
        self.state = FlowState(u, p, F, st.t + cfg.dt)
        return self.state

    def forces(self, state=None):
        st = self.state if state is None else state
        return force_coefficients(
            self.mesh, st.u, st.p, self.cfg.u_in, self.cfg.body_diameter, self.cfg.body_patch, nu=self.cfg.nu
        )


def run_case(mesh: Mesh, config: CaseConfig, progress=None):
    """Integrate a case and collect snapshots and force history.

    With a positive ``snapshot_stride`` the run ends at ``t_end`` and the
    last ``n_snapshots`` states spaced ``snapshot_stride`` steps apart form
    the snapshot set. With ``snapshot_stride == 0`` the run first integrates
    to ``t_end``, estimates the shedding period from lift zero crossings,
    picks the stride so the snapshots cover ``snapshot_periods`` periods and
    then keeps integrating while recording them.

    Returns ``(SnapshotSet, ForceHistory)``.
    """
    cfg = config
    solver = PisoSolver(mesh, cfg)
    has_body = any(p.name == cfg.body_patch for p in mesh.patches)
    n_steps = int(round(cfg.t_end / cfg.dt))
    t_hist, d_hist, l_hist = [], [], []
    snaps = []
    wall0 = _time.perf_counter()

    def record():
        if has_body:
            d, l = solver.forces()
        else:
            d = l = 0.0
        t_hist.append(solver.state.t)
        d_hist.append(d)
        l_hist.append(l)

    stride = cfg.snapshot_stride
    if stride > 0:
        first = n_steps - (cfg.n_snapshots - 1) * stride
        if first < 1:
            raise SolverError("t_end too short for the requested snapshot window")
    for k in range(1, n_steps + 1):
        solver.step()
        record()
        if stride > 0 and k >= first and (k - first) % stride == 0:
            snaps.append(solver.state.copy())
        if progress and k % 200 == 0:
            progress(solver.state.t, l_hist[-1])
    if stride == 0:
        hist = ForceHistory(np.array(t_hist), np.array(d_hist), np.array(l_hist))
        tail = hist.window(0.5 * cfg.t_end)
        stride = choose_snapshot_stride(estimate_period(tail.t, tail.lift), cfg.dt, cfg.n_snapshots, cfg.snapshot_periods)
        for k in range(1, (cfg.n_snapshots - 1) * stride + 2):
            solver.step()
            record()
            if (k - 1) % stride == 0:
                snaps.append(solver.state.copy())
    wall = _time.perf_counter() - wall0

    U = np.column_stack([stack_velocity(s.u) for s in snaps])
    P = np.column_stack([s.p for s in snaps])
    Fm = np.column_stack([s.F for s in snaps])
    meta = dict(cfg.to_dict())
    meta.update(
        mesh_hash=mesh.content_hash(),
        snapshot_stride=stride,
        wall_time=wall,
        n_steps=len(t_hist),
        momentum_iterations=solver.linear_iterations["momentum"],
        pressure_iterations=solver.linear_iterations["pressure"],
    )
    snapset = SnapshotSet(U, P, Fm, [s.t for s in snaps], meta)
    forces = ForceHistory(np.array(t_hist), np.array(d_hist), np.array(l_hist))
    return snapset, forces
