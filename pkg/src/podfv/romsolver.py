"""Time integration of the reduced system and reconstruction of fields.

Each step solves the backward-Euler residual of the coupled
velocity/pressure coefficient system

    r_a = a+ - a - dt (f + L a+ - a+^T C a+ - K b+)
    r_b = D b+ - (g + F_BC a+ + a+^T G a+)

monolithically with Newton's method and the analytic Jacobian. ``f``,
``L``, ``g`` are the composed constant and linear terms of
:class:`~podfv.romassembly.ReducedSystem`.
"""

from __future__ import annotations

import time as _time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.linalg.lapack import dgesv as _gesv
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import DimensionError
from .hfsolver import SnapshotSet, force_coefficients
from .mesh import Mesh
from .pod import PodBasis, build_basis, velocity_weights
from .romassembly import ReducedSystem, assemble, compose_system

__all__ = [
    "ForceMap",
    "GalerkinROM",
    "ReducedState",
    "RomRunConfig",
    "RomStepError",
    "RomTrajectory",
    "initialize",
    "integrate",
    "jacobian",
    "newton_step_solve",
    "reconstruct",
    "residual",
]


class RomStepError(RuntimeError):
    """Newton failed on a reduced time step.

    ``trace`` holds the residual norms of the failed step and ``partial``
    the trajectory accepted before the failure (if any).
    """

    def __init__(self, message, trace=(), partial=None):
        super().__init__(message)
        self.trace = list(trace)
        self.partial = partial


@dataclass
class ReducedState:
    a: np.ndarray
    b: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float).reshape(-1)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b))):
            raise ValueError("reduced state has non-finite coefficients")


@dataclass
class RomRunConfig:
    """Reduced run settings. ``u_D``/``nu`` override the system's values."""

    dt: float
    t_end: float
    tol_abs: float = 1e-10
    tol_rel: float = 1e-8
    max_iter: int = 25
    u_D: float | None = None
    nu: float | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not (self.tol_abs > 0 and self.tol_rel > 0):
            raise ValueError("Newton tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class RomTrajectory:
    t: np.ndarray
    a: np.ndarray  # (n_t, N_u)
    b: np.ndarray  # (n_t, N_p)
    newton_iterations: np.ndarray
    wall_time: float = 0.0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    def state(self, k: int) -> ReducedState:
        return ReducedState(self.a[k], self.b[k], self.t[k])

    def to_csv(self, path) -> None:
        """Columns ``t,a_1..a_Nu,b_1..b_Np``."""
        n_u, n_p = self.a.shape[1], self.b.shape[1]
        header = ",".join(["t"] + [f"a_{i + 1}" for i in range(n_u)] + [f"b_{i + 1}" for i in range(n_p)])
        data = np.column_stack([self.t, self.a, self.b])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")

    @classmethod
    def from_csv(cls, path) -> "RomTrajectory":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        data = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))
        n_u = sum(h.startswith("a_") for h in header)
        return cls(data[:, 0], data[:, 1 : 1 + n_u], data[:, 1 + n_u :], np.zeros(len(data), dtype=int))


# -- residual and Jacobian --------------------------------------------------------
def _quad(T, a):
    """``(a^T T_i a)_i`` for a third-order tensor."""
    return np.einsum("ijk,j,k->i", T, a, a)


def _quad_jac(T, a):
    return np.einsum("ilk,k->il", T, a) + np.einsum("ijl,j->il", T, a)


def residual(next_state: ReducedState, state: ReducedState, system: ReducedSystem, dt: float):
    """Backward-Euler residual ``(r_a, r_b)`` of a proposed step."""
    a1, b1 = next_state.a, next_state.b
    blk = system.blocks
    r_a = a1 - state.a - dt * (system.f + system.L @ a1 - _quad(blk.C, a1) - blk.K @ b1)
    r_b = system.D @ b1 - (system.g + system.F_BC @ a1 + _quad(blk.G, a1))
    return r_a, r_b


def jacobian(next_state: ReducedState, system: ReducedSystem, dt: float) -> np.ndarray:
    """Analytic Jacobian of :func:`residual` with respect to ``(a+, b+)``."""
    a1 = next_state.a
    blk = system.blocks
    n_u, n_p = system.n_u, system.n_p
    J = np.empty((n_u + n_p, n_u + n_p))
    J[:n_u, :n_u] = np.eye(n_u) - dt * (system.L - _quad_jac(blk.C, a1))
    J[:n_u, n_u:] = dt * blk.K
    J[n_u:, :n_u] = -(system.F_BC + _quad_jac(blk.G, a1))
    J[n_u:, n_u:] = system.D
    return J


def _check_state(state: ReducedState, system: ReducedSystem):
    if state.a.shape != (system.n_u,) or state.b.shape != (system.n_p,):
        raise DimensionError(
            f"state has ({len(state.a)}, {len(state.b)}) coefficients, system expects ({system.n_u}, {system.n_p})"
        )


class _Stepper:
    """Composed system arrays frozen for repeated Newton steps.

    :class:`ReducedSystem` derives its composed terms on access; holding
    them here (and the quadratic tensors reshaped for matrix products)
    removes most per-step overhead from long integrations.
    """

    def __init__(self, system: ReducedSystem, dt: float):
        blk = system.blocks
        n, m = system.n_u, system.n_p
        self.n_u, self.m, self.dt = n, m, dt
        # r = M x + c - [a_old; 0] + q(a),  x = [a+; b+]
        self.M = np.block([[np.eye(n) - dt * system.L, dt * blk.K], [-system.F_BC, system.D]])
        self.c = np.concatenate([-dt * system.f, -system.g])
        Q = np.concatenate([dt * blk.C, -blk.G])
        self.Q = Q.reshape((n + m) * n, n)
        self.Qt = Q.transpose(0, 2, 1).reshape((n + m) * n, n)

    def residual(self, x, a0):
        n = self.n_u
        a1 = x[:n]
        Mq = (self.Q @ a1).reshape(-1, n)
        r = self.M @ x + self.c + Mq @ a1
        r[:n] -= a0
        return r, Mq

    def jacobian(self, x, Mq):
        n = self.n_u
        J = self.M.copy()
        J[:, :n] += Mq + (self.Qt @ x[:n]).reshape(-1, n)
        return J

    def step(self, x0, t, config: RomRunConfig):
        """Newton solve for the step leaving ``x0 = [a; b]`` (warm start)."""
        a0 = x0[: self.n_u]
        x = x0.copy()
        r, Mq = self.residual(x, a0)
        trace = [float(np.sqrt(r @ r))]
        target = config.tol_abs + config.tol_rel * trace[0]
        it = 0
        while trace[-1] > target:
            if it >= config.max_iter:
                raise RomStepError(
                    f"Newton did not converge at t={t:.6g} in {config.max_iter} iterations "
                    f"(residual {trace[-1]:.3e}, target {target:.3e})",
                    trace,
                )
            _, _, dx, info = _gesv(self.jacobian(x, Mq), -r, overwrite_a=1, overwrite_b=1)
            if info != 0:
                raise RomStepError(f"singular Newton Jacobian at t={t:.6g}", trace)
            it += 1
            x = x + dx
            r, Mq = self.residual(x, a0)
            trace.append(float(np.sqrt(r @ r)))
            if not np.isfinite(trace[-1]):
                raise RomStepError(f"Newton diverged at t={t:.6g}", trace)
        return x, it, trace


def newton_step_solve(state: ReducedState, system: ReducedSystem, config: RomRunConfig, guess=None):
    """Advance one step. Returns ``(next_state, n_iterations, residual_trace)``.

    ``guess`` (a :class:`ReducedState`) replaces the default warm start
    from ``state``.
    """
    _check_state(state, system)
    stepper = _Stepper(system, config.dt)
    if guess is None:
        guess = state
    # the stepper starts from a0; emulate an explicit guess by shifting it
    a0 = np.asarray(state.a, dtype=float)
    n = stepper.n_u
    x = np.concatenate([guess.a, guess.b]).astype(float)
    r, Mq = stepper.residual(x, a0)
    trace = [float(np.sqrt(r @ r))]
    target = config.tol_abs + config.tol_rel * trace[0]
    it = 0
    t = state.t + config.dt
    while trace[-1] > target:
        if it >= config.max_iter:
            raise RomStepError(
                f"Newton did not converge at t={t:.6g} in {config.max_iter} iterations "
                f"(residual {trace[-1]:.3e}, target {target:.3e})",
                trace,
            )
        J = stepper.jacobian(x, Mq)
        try:
            lu = sla.lu_factor(J)
        except (ValueError, sla.LinAlgError) as exc:
            raise RomStepError(f"Newton Jacobian is not usable at t={t:.6g}: {exc}", trace) from exc
        if np.any(np.abs(np.diag(lu[0])) <= np.finfo(float).eps * np.abs(J).max()):
            raise RomStepError(f"singular Newton Jacobian at t={t:.6g}", trace)
        dx = sla.lu_solve(lu, -r)
        it += 1
        x = x + dx
        r, Mq = stepper.residual(x, a0)
        trace.append(float(np.sqrt(r @ r)))
        if not np.isfinite(trace[-1]):
            raise RomStepError(f"Newton diverged at t={t:.6g}", trace)
    return ReducedState(x[:n], x[n:], t), it, trace


def _with_overrides(system: ReducedSystem, config: RomRunConfig) -> ReducedSystem:
    if config.u_D is None and config.nu is None:
        return system
    return system.with_parameters(nu=config.nu, u_D=config.u_D)


def integrate(state0: ReducedState, system: ReducedSystem, config: RomRunConfig) -> RomTrajectory:
    """Backward-Euler integration from ``state0`` to ``state0.t + t_end``.

    Each step is warm-started from the previous one. On failure a
    :class:`RomStepError` carries the partial trajectory.
    """
    system = _with_overrides(system, config)
    _check_state(state0, system)
    n_steps = int(round(config.t_end / config.dt))
    ts = np.empty(n_steps + 1)
    A = np.empty((n_steps + 1, system.n_u))
    B = np.empty((n_steps + 1, system.n_p))
    its = np.zeros(n_steps + 1, dtype=int)
    ts[0], A[0], B[0] = state0.t, state0.a, state0.b
    wall0 = _time.perf_counter()
    stepper = _Stepper(system, config.dt)
    x = np.concatenate([state0.a, state0.b]).astype(float)
    n_u = system.n_u
    for k in range(1, n_steps + 1):
        t = state0.t + k * config.dt
        try:
            x, its[k], _ = stepper.step(x, t, config)
        except RomStepError as exc:
            exc.partial = RomTrajectory(ts[:k], A[:k], B[:k], its[:k], _time.perf_counter() - wall0)
            raise
        ts[k], A[k], B[k] = t, x[:n_u], x[n_u:]
    wall = _time.perf_counter() - wall0
    return RomTrajectory(ts, A, B, its, wall, {"u_D": system.u_D, "nu": system.nu, "dt": config.dt})


# -- initial state and reconstruction ---------------------------------------------
def solve_pressure_coefficients(a, system: ReducedSystem) -> np.ndarray:
    """``b`` from the algebraic pressure equation for given ``a``."""
    a = np.asarray(a, dtype=float)
    rhs = system.g + system.F_BC @ a + _quad(system.blocks.G, a)
    return np.linalg.solve(system.D, rhs) if system.n_p else np.zeros(0)


def initialize(mesh: Mesh, basis: PodBasis, system: ReducedSystem, u0, t0=0.0) -> ReducedState:
    """Project a velocity field (stacked ``(2n,)`` or ``(n, 2)``) onto the
    homogeneous basis and solve the pressure equation for ``b``."""
    u0 = np.asarray(u0, dtype=float)
    if u0.ndim == 2:
        u0 = np.concatenate([u0[:, 0], u0[:, 1]])
    if u0.shape != (2 * mesh.n_cells,):
        raise DimensionError(f"initial velocity has {u0.size} entries, mesh needs {2 * mesh.n_cells}")
    w = velocity_weights(mesh)
    a = basis.phi[:, : system.n_u].T @ (w * (u0 - system.u_D * basis.phi_c))
    return ReducedState(a, solve_pressure_coefficients(a, system), t0)


def _coefficients(obj):
    if isinstance(obj, ReducedState):
        return obj.a[:, None], obj.b[:, None]
    if isinstance(obj, RomTrajectory):
        return obj.a.T, obj.b.T
    a, b = obj
    return np.atleast_2d(np.asarray(a, float).T), np.atleast_2d(np.asarray(b, float).T)


def reconstruct(states, basis: PodBasis, u_D: float):
    """Full-order ``(u, p, F)`` columns for a state or trajectory.

    ``u = u_D phi_c + phi a``, ``p = p_mean + chi b``, ``F = u_D F_c + psi a``.
    """
    a, b = _coefficients(states)
    n_u, n_p = a.shape[0], b.shape[0]
    if n_u > basis.n_u or n_p > basis.n_p:
        raise DimensionError("state has more coefficients than the basis has modes")
    u = u_D * basis.phi_c[:, None] + basis.phi[:, :n_u] @ a
    p = basis.p_mean[:, None] + basis.chi[:, :n_p] @ b
    F = u_D * basis.F_c[:, None] + basis.psi[:, :n_u] @ a
    return u, p, F


class ForceMap:
    """Drag and lift as affine functions of the reduced coefficients.

    Force coefficients are linear in ``(u, p)``, so evaluating them on the
    lifting pair and on each mode once gives exactly the coefficients of
    the reconstructed fields for any ``(a, b)``.
    """

    def __init__(self, mesh: Mesh, basis: PodBasis, u_D: float, nu: float, diameter=1.0, patch="cylinder"):
        kw = dict(u_in=u_D, diameter=diameter, patch=patch, nu=nu)
        d0, l0 = force_coefficients(mesh, u_D * basis.phi_c[:, None], basis.p_mean[:, None], **kw)
        du, lu = force_coefficients(mesh, basis.phi, np.zeros((mesh.n_cells, basis.n_u)), **kw)
        dp, lp = force_coefficients(mesh, np.zeros((2 * mesh.n_cells, basis.n_p)), basis.chi, **kw)
        self.offset = np.array([d0[0], l0[0]])
        self.wa = np.vstack([du, lu])
        self.wb = np.vstack([dp, lp])

    def __call__(self, states):
        """``(n_t, 2)`` array of ``(drag, lift)``."""
        a, b = _coefficients(states)
        return (self.offset[:, None] + self.wa[:, : a.shape[0]] @ a + self.wb[:, : b.shape[0]] @ b).T


class GalerkinROM(BaseEstimator):
    """POD-Galerkin reduced model with a scikit-learn style interface.

    ``fit`` builds the basis from snapshot sets and assembles the reduced
    operators; ``predict`` integrates from a given (or the first training)
    snapshot and returns drag and lift coefficients at the requested times.

    Parameters
    ----------
    mesh : Mesh
    n_u, n_p : int
        Velocity and pressure modes.
    nu : float
        Viscosity used online.
    u_D : float, optional
        Inlet velocity used online; defaults to that of the first training set.
    dt : float, optional
        Reduced time step; defaults to the training snapshot spacing.
    mean_pressure_gradient : bool
        Keep the mean-pressure force term.
    tol_abs, tol_rel, max_iter
        Newton settings.
    """

    def __init__(
        self,
        mesh=None,
        n_u=7,
        n_p=None,
        nu=0.01,
        u_D=None,
        dt=None,
        mean_pressure_gradient=True,
        tol_abs=1e-10,
        tol_rel=1e-8,
        max_iter=25,
        diameter=1.0,
        body_patch="cylinder",
    ):
        self.mesh = mesh
        self.n_u = n_u
        self.n_p = n_p
        self.nu = nu
        self.u_D = u_D
        self.dt = dt
        self.mean_pressure_gradient = mean_pressure_gradient
        self.tol_abs = tol_abs
        self.tol_rel = tol_rel
        self.max_iter = max_iter
        self.diameter = diameter
        self.body_patch = body_patch

    def fit(self, X, y=None, basis=None):
        """Fit on a :class:`SnapshotSet` or a list of them.

        A prebuilt ``basis`` skips the decomposition step.
        """
        if self.mesh is None:
            raise ValueError("GalerkinROM needs a mesh")
        sets = [X] if isinstance(X, SnapshotSet) else list(X)
        n_p = self.n_u if self.n_p is None else self.n_p
        self.basis_ = (basis if basis is not None else build_basis(self.mesh, sets)).truncate(self.n_u, n_p)
        self.blocks_ = assemble(self.mesh, self.basis_)
        u_D = sets[0].u_in if self.u_D is None else self.u_D
        self.system_ = compose_system(self.blocks_, self.nu, u_D, self.mean_pressure_gradient)
        self.forces_ = ForceMap(self.mesh, self.basis_, u_D, self.nu, self.diameter, self.body_patch)
        self.dt_ = self.dt if self.dt is not None else float(np.median(np.diff(sets[0].times)))
        self.u0_ = sets[0].U[:, 0]
        self.t0_ = float(sets[0].times[0])
        return self

    def transform(self, U):
        """Velocity coefficients ``a`` of stacked velocity columns ``(2n, m)``."""
        check_is_fitted(self, "system_")
        U = np.asarray(U, dtype=float)
        w = velocity_weights(self.mesh)
        return (self.basis_.phi.T @ (w[:, None] * (U - self.system_.u_D * self.basis_.phi_c[:, None]))).T

    def simulate(self, t_end, u0=None, t0=None) -> RomTrajectory:
        check_is_fitted(self, "system_")
        u0 = self.u0_ if u0 is None else u0
        state = initialize(self.mesh, self.basis_, self.system_, u0, self.t0_ if t0 is None else t0)
        cfg = RomRunConfig(self.dt_, t_end, self.tol_abs, self.tol_rel, self.max_iter)
        return integrate(state, self.system_, cfg)

    def predict(self, times, u0=None):
        """``(len(times), 2)`` drag/lift at ``times`` measured from the
        initial snapshot (which must be a multiple of the reduced step)."""
        times = np.asarray(times, dtype=float)
        traj = self.simulate(times.max(), u0=u0, t0=0.0)
        idx = np.rint(times / self.dt_).astype(int)
        if np.any(np.abs(idx * self.dt_ - times) > 1e-9 * max(1.0, times.max())):
            raise ValueError("prediction times must lie on the reduced time grid")
        return self.forces_(traj)[idx]
