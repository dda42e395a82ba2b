"""Galerkin projection of the discrete momentum and pressure-Poisson
equations onto a POD basis.

With ``u = u_D phi_c + sum_i a_i phi_i``, ``F = u_D F_c + sum_i a_i psi_i``
and ``p = p_mean + sum_i b_i chi_i`` the reduced model reads::

    da/dt = A_BC + (nu B + B_BC) a - a^T C a - K b - K0
    D b   = -E + E_BC + F_BC a + a^T G a

with the boundary (lifting) terms::

    A_BC = nu u_D A1 - u_D**2 A2      B_BC = -u_D (B1 + B2)
    E_BC = u_D**2 E1                  F_BC = u_D (F1 + F2)

``K0_i = (phi_i, grad p_mean)`` is the mean-pressure force on the velocity
modes. It vanishes only when the mean pressure gradient is orthogonal to the
velocity space, which is not the case behind a bluff body, so it is kept
by default (``ReducedSystem.mean_pressure_gradient``).

All operators are the same discrete operators the full-order solver uses
(linear interpolation for convection), so every block equals the projection
of the corresponding full-order term evaluated on reconstructed fields.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import fvops
from ._validation import DimensionError
from .fvops import CellField, FixedValue, Slip, ZeroGradient
from .hfsolver import pressure_bcs, velocity_bcs
from .io import ArtifactError, content_hash, read_archive, write_archive
from .mesh import Mesh
from .pod import PodBasis

__all__ = [
    "MAX_VELOCITY_MODES",
    "OperatorBlocks",
    "ROM_MAGIC",
    "ReducedSystem",
    "assemble",
    "assemble_B",
    "assemble_C",
    "assemble_K",
    "assemble_bc_terms",
    "assemble_mean_pressure_force",
    "assemble_pressure_block",
    "compose_system",
    "convective_bcs",
    "mode_fields",
]

ROM_MAGIC = "podfv-rom v1"
MAX_VELOCITY_MODES = 64
COND_LIMIT = 1e12
TIKHONOV = 1e-12

_BLOCK_NAMES = ("B", "C", "K", "K0", "D", "E", "G", "A1", "A2", "B1", "B2", "E1", "F1", "F2")


# -- batched field helpers ----------------------------------------------------
def mode_fields(stacked: np.ndarray) -> np.ndarray:
    """``(2n, m)`` stacked velocity columns as ``(n, 2, m)``."""
    stacked = np.asarray(stacked, dtype=float)
    if stacked.ndim == 1:
        stacked = stacked[:, None]
    n = stacked.shape[0] // 2
    return np.stack([stacked[:n], stacked[n:]], axis=1)


def _vector_face_values(mesh: Mesh, V: np.ndarray, bcs: dict) -> np.ndarray:
    """Linear face values of a batch of vector fields ``(n, 2, m)``."""
    n_int = mesh.n_internal_faces
    w = mesh.weights[:n_int, None, None]
    out = np.empty((mesh.n_faces, 2, V.shape[2]))
    out[:n_int] = w * V[mesh.owner[:n_int]] + (1.0 - w) * V[mesh.neighbour[:n_int]]
    for patch in mesh.patches:
        sl = patch.slice
        bc = bcs[patch.name]
        vo = V[mesh.owner[sl]]
        if isinstance(bc, FixedValue):
            val = np.asarray(bc.value, dtype=float)
            out[sl] = val[:, None] if val.ndim == 1 else val
        elif isinstance(bc, ZeroGradient):
            out[sl] = vo
        elif isinstance(bc, Slip):
            nrm = mesh.normals[sl]
            out[sl] = vo - np.einsum("fc,fcm->fm", nrm, vo)[:, None, :] * nrm[:, :, None]
        else:
            raise TypeError(f"unsupported boundary condition {bc!r} on patch {patch.name}")
    return out


def _cell_sums(mesh: Mesh, X: np.ndarray) -> np.ndarray:
    shape = X.shape
    return (mesh.incidence @ X.reshape(shape[0], -1)).reshape((mesh.n_cells,) + shape[1:])


def _convect(mesh: Mesh, flux: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """``conv(flux, field) = sum_f F_f u_f / V`` for every flux/field pair
    given along the trailing axis (both broadcast to ``(nf, 2, m)``)."""
    return _cell_sums(mesh, flux * faces) / mesh.cell_volumes[:, None, None]


def convective_bcs(mesh: Mesh) -> dict:
    """Boundary conditions for the convective acceleration field whose
    divergence drives the pressure equation.

    Where pressure is zero-gradient the normal momentum balance makes the
    normal component of ``(u . grad) u`` vanish, so the face value is zero;
    where pressure is fixed (outlet) the field is extrapolated.
    """
    return {
        name: ZeroGradient() if isinstance(bc, FixedValue) else FixedValue(0.0)
        for name, bc in pressure_bcs(mesh).items()
    }


def _divergence(mesh: Mesh, conv: np.ndarray) -> np.ndarray:
    """Discrete divergence ``(n, m)`` of a batch of convective fields."""
    cf = _vector_face_values(mesh, conv, convective_bcs(mesh))
    flux = np.einsum("fc,fcm->fm", mesh.face_areas, cf)
    return _cell_sums(mesh, flux) / mesh.cell_volumes[:, None]


class _Projector:
    """Volume-weighted projections onto the velocity and pressure modes."""

    def __init__(self, mesh: Mesh, basis: PodBasis):
        self.mesh = mesh
        vol = mesh.cell_volumes
        self.phi = mode_fields(basis.phi)
        self.wphi = self.phi * vol[:, None, None]
        self.wchi = basis.chi * vol[:, None]

    def u(self, X):
        """``(phi_i, X_m)`` for ``X`` of shape ``(n, 2, ...)``."""
        return np.tensordot(self.wphi, X, axes=([0, 1], [0, 1]))

    def p(self, X):
        return np.tensordot(self.wchi, X, axes=([0], [0]))


def _check_basis(mesh: Mesh, basis: PodBasis):
    if basis.phi.shape[0] != 2 * mesh.n_cells or basis.chi.shape[0] != mesh.n_cells:
        raise DimensionError("basis modes do not match the mesh cell count")
    if basis.psi.shape[0] != mesh.n_faces:
        raise DimensionError("flux modes do not match the mesh face count")
    if basis.psi.shape[1] != basis.phi.shape[1]:
        raise DimensionError("flux and velocity modes must be paired index-wise")
    if basis.n_u > MAX_VELOCITY_MODES:
        raise DimensionError(
            f"{basis.n_u} velocity modes would need {basis.n_u**3} doubles for C; limit is {MAX_VELOCITY_MODES} modes"
        )


# -- individual blocks ---------------------------------------------------------
def assemble_B(mesh: Mesh, basis: PodBasis) -> np.ndarray:
    """``B_ij = (phi_i, lap(phi_j))`` with unit diffusivity and homogeneous BCs."""
    proj = _Projector(mesh, basis)
    bcs = fvops.homogeneous(velocity_bcs(mesh, 0.0))
    lap = np.stack([fvops.laplacian(mesh, 1.0, CellField(proj.phi[:, :, j], bcs)) for j in range(basis.n_u)], axis=2)
    return proj.u(lap) if basis.n_u else np.zeros((0, 0))


def assemble_C(mesh: Mesh, basis: PodBasis) -> np.ndarray:
    """``C_ijk = (phi_i, conv(psi_j, phi_k))``."""
    proj = _Projector(mesh, basis)
    n = basis.n_u
    faces = _vector_face_values(mesh, proj.phi, fvops.homogeneous(velocity_bcs(mesh, 0.0)))
    C = np.empty((n, n, n))
    for j in range(n):
        C[:, j, :] = proj.u(_convect(mesh, basis.psi[:, j, None, None], faces))
    return C


def assemble_K(mesh: Mesh, basis: PodBasis) -> np.ndarray:
    """``K_ij = (phi_i, grad chi_j)``."""
    proj = _Projector(mesh, basis)
    grads = _pressure_gradients(mesh, basis.chi)
    return proj.u(grads)


def _pressure_gradients(mesh: Mesh, P: np.ndarray) -> np.ndarray:
    bcs = pressure_bcs(mesh)
    P = np.asarray(P, dtype=float)
    if P.ndim == 1:
        return fvops.gauss_gradient(mesh, CellField(P, bcs))
    out = np.empty((mesh.n_cells, 2, P.shape[1]))
    for j in range(P.shape[1]):
        out[:, :, j] = fvops.gauss_gradient(mesh, CellField(P[:, j], bcs))
    return out


def assemble_pressure_block(mesh: Mesh, basis: PodBasis):
    """``(D, E, G)`` of the projected pressure-Poisson equation.

    ``D_ij = (grad chi_i, grad chi_j)``, ``E_i = (grad chi_i, grad p_mean)``,
    ``G_ijk = (chi_i, div conv(psi_j, phi_k))``.
    """
    proj = _Projector(mesh, basis)
    vol = mesh.cell_volumes[:, None, None]
    gchi = _pressure_gradients(mesh, basis.chi)
    gbar = _pressure_gradients(mesh, basis.p_mean)
    D = np.tensordot(gchi * vol, gchi, axes=([0, 1], [0, 1]))
    D = 0.5 * (D + D.T)
    E = np.tensordot(gchi * vol, gbar, axes=([0, 1], [0, 1]))
    n = basis.n_u
    faces = _vector_face_values(mesh, proj.phi, fvops.homogeneous(velocity_bcs(mesh, 0.0)))
    G = np.empty((basis.n_p, n, n))
    for j in range(n):
        G[:, j, :] = proj.p(_divergence(mesh, _convect(mesh, basis.psi[:, j, None, None], faces)))
    return D, E, G


def assemble_mean_pressure_force(mesh: Mesh, basis: PodBasis) -> np.ndarray:
    """``K0_i = (phi_i, grad p_mean)``."""
    return _Projector(mesh, basis).u(_pressure_gradients(mesh, basis.p_mean)[:, :, None])[:, 0]


def assemble_bc_terms(mesh: Mesh, basis: PodBasis):
    """Lifting contributions ``(A1, A2, B1, B2, E1, F1, F2)``.

    ``A1_i = (phi_i, lap phi_c)``, ``A2_i = (phi_i, conv(F_c, phi_c))``,
    ``B1_ij = (phi_i, conv(psi_j, phi_c))``, ``B2_ij = (phi_i, conv(F_c, phi_j))``,
    ``E1_i = (chi_i, div conv(F_c, phi_c))``,
    ``F1_ij = (chi_i, div conv(psi_j, phi_c))``,
    ``F2_ij = (chi_i, div conv(F_c, phi_j))``.
    """
    proj = _Projector(mesh, basis)
    lift_bcs = velocity_bcs(mesh, 1.0)
    phi_c = mode_fields(basis.phi_c)
    F_c = basis.F_c[:, None, None]
    c_faces = _vector_face_values(mesh, phi_c, lift_bcs)
    m_faces = _vector_face_values(mesh, proj.phi, fvops.homogeneous(velocity_bcs(mesh, 0.0)))

    A1 = proj.u(fvops.laplacian(mesh, 1.0, CellField(phi_c[:, :, 0], lift_bcs))[:, :, None])[:, 0]
    conv_cc = _convect(mesh, F_c, c_faces)
    conv_jc = _convect(mesh, basis.psi[:, None, :], c_faces)
    conv_cj = _convect(mesh, F_c, m_faces)
    A2 = proj.u(conv_cc)[:, 0]
    B1 = proj.u(conv_jc)
    B2 = proj.u(conv_cj)
    E1 = proj.p(_divergence(mesh, conv_cc))[:, 0]
    F1 = proj.p(_divergence(mesh, conv_jc))
    F2 = proj.p(_divergence(mesh, conv_cj))
    return A1, A2, B1, B2, E1, F1, F2


# -- containers ----------------------------------------------------------------
@dataclass
class OperatorBlocks:
    """Raw projected operators, independent of ``nu`` and ``u_D``."""

    B: np.ndarray
    C: np.ndarray
    K: np.ndarray
    K0: np.ndarray
    D: np.ndarray
    E: np.ndarray
    G: np.ndarray
    A1: np.ndarray
    A2: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    E1: np.ndarray
    F1: np.ndarray
    F2: np.ndarray
    basis_hash: str = ""
    mesh_hash: str = ""

    def __post_init__(self):
        nu_, np_ = self.B.shape[0], self.D.shape[0]
        expected = {
            "B": (nu_, nu_),
            "C": (nu_, nu_, nu_),
            "K": (nu_, np_),
            "K0": (nu_,),
            "D": (np_, np_),
            "E": (np_,),
            "G": (np_, nu_, nu_),
            "A1": (nu_,),
            "A2": (nu_,),
            "B1": (nu_, nu_),
            "B2": (nu_, nu_),
            "E1": (np_,),
            "F1": (np_, nu_),
            "F2": (np_, nu_),
        }
        for name, shape in expected.items():
            got = np.shape(getattr(self, name))
            if got != shape:
                raise DimensionError(f"block {name} has shape {got}, expected {shape}")

    @property
    def n_u(self) -> int:
        return self.B.shape[0]

    @property
    def n_p(self) -> int:
        return self.D.shape[0]

    def arrays(self) -> dict:
        return {name: getattr(self, name) for name in _BLOCK_NAMES}

    def truncate(self, n_u: int, n_p: int | None = None) -> "OperatorBlocks":
        """Leading sub-blocks; identical to assembling on a truncated basis."""
        n_p = n_u if n_p is None else n_p
        if n_u > self.n_u or n_p > self.n_p:
            raise DimensionError(f"blocks hold ({self.n_u}, {self.n_p}) modes, asked for ({n_u}, {n_p})")
        u, p = slice(0, n_u), slice(0, n_p)
        return replace(
            self,
            B=self.B[u, u],
            C=self.C[u, u, u],
            K=self.K[u, p],
            K0=self.K0[u],
            D=self.D[p, p],
            E=self.E[p],
            G=self.G[p, u, u],
            A1=self.A1[u],
            A2=self.A2[u],
            B1=self.B1[u, u],
            B2=self.B2[u, u],
            E1=self.E1[p],
            F1=self.F1[p, u],
            F2=self.F2[p, u],
        )


def assemble(mesh: Mesh, basis: PodBasis) -> OperatorBlocks:
    """Every projected block for ``basis`` on ``mesh``."""
    _check_basis(mesh, basis)
    if basis.mesh_hash and basis.mesh_hash != mesh.content_hash():
        raise DimensionError("basis was built on a different mesh")
    D, E, G = assemble_pressure_block(mesh, basis)
    A1, A2, B1, B2, E1, F1, F2 = assemble_bc_terms(mesh, basis)
    return OperatorBlocks(
        B=assemble_B(mesh, basis),
        C=assemble_C(mesh, basis),
        K=assemble_K(mesh, basis),
        K0=assemble_mean_pressure_force(mesh, basis),
        D=D,
        E=E,
        G=G,
        A1=A1,
        A2=A2,
        B1=B1,
        B2=B2,
        E1=E1,
        F1=F1,
        F2=F2,
        basis_hash=basis.digest(),
        mesh_hash=mesh.content_hash(),
    )


@dataclass
class ReducedSystem:
    """Operator blocks composed for one viscosity and boundary velocity.

    Parameters
    ----------
    blocks : OperatorBlocks
    nu : float
        Kinematic viscosity.
    u_D : float
        Inlet velocity scaling the lifting terms.
    mean_pressure_gradient : bool
        Include ``K0`` in the momentum equation.
    shift : float
        Tikhonov shift added to the diagonal of ``D`` (set by
        :func:`compose_system` when ``D`` is ill-conditioned).
    """

    blocks: OperatorBlocks
    nu: float
    u_D: float
    mean_pressure_gradient: bool = True
    shift: float = 0.0
    cond_D: float = field(default=np.nan)

    @property
    def n_u(self) -> int:
        return self.blocks.n_u

    @property
    def n_p(self) -> int:
        return self.blocks.n_p

    @property
    def A_BC(self) -> np.ndarray:
        b = self.blocks
        return self.nu * self.u_D * b.A1 - self.u_D**2 * b.A2

    @property
    def B_BC(self) -> np.ndarray:
        return -self.u_D * (self.blocks.B1 + self.blocks.B2)

    @property
    def E_BC(self) -> np.ndarray:
        return self.u_D**2 * self.blocks.E1

    @property
    def F_BC(self) -> np.ndarray:
        return self.u_D * (self.blocks.F1 + self.blocks.F2)

    @property
    def L(self) -> np.ndarray:
        """Linear momentum operator ``nu B + B_BC``."""
        return self.nu * self.blocks.B + self.B_BC

    @property
    def f(self) -> np.ndarray:
        """Constant momentum forcing ``A_BC - K0``."""
        if self.mean_pressure_gradient:
            return self.A_BC - self.blocks.K0
        return self.A_BC

    @property
    def D(self) -> np.ndarray:
        return self.blocks.D + self.shift * np.eye(self.n_p)

    @property
    def g(self) -> np.ndarray:
        """Constant pressure forcing ``-E + E_BC``."""
        return -self.blocks.E + self.E_BC

    def with_parameters(self, nu=None, u_D=None) -> "ReducedSystem":
        return replace(self, nu=self.nu if nu is None else float(nu), u_D=self.u_D if u_D is None else float(u_D))

    def truncate(self, n_u, n_p=None) -> "ReducedSystem":
        return compose_system(self.blocks.truncate(n_u, n_p), self.nu, self.u_D, self.mean_pressure_gradient)

    def _payload(self):
        arrays = self.blocks.arrays()
        arrays.update(A_BC=self.A_BC, B_BC=self.B_BC, E_BC=self.E_BC, F_BC=self.F_BC)
        meta = {
            "n_u": self.n_u,
            "n_p": self.n_p,
            "nu": self.nu,
            "u_D": self.u_D,
            "mean_pressure_gradient": self.mean_pressure_gradient,
            "shift": self.shift,
            "cond_D": None if not np.isfinite(self.cond_D) else float(self.cond_D),
            "basis_hash": self.blocks.basis_hash,
            "mesh_hash": self.blocks.mesh_hash,
        }
        return arrays, meta

    def digest(self) -> str:
        return content_hash(*self._payload())

    def save(self, path) -> str:
        return write_archive(path, ROM_MAGIC, *self._payload())

    @classmethod
    def load(cls, path) -> "ReducedSystem":
        arrays, meta, digest = read_archive(path, ROM_MAGIC)
        blocks = OperatorBlocks(
            **{name: arrays[name] for name in _BLOCK_NAMES},
            basis_hash=meta["basis_hash"],
            mesh_hash=meta["mesh_hash"],
        )
        cond = meta.get("cond_D")
        system = cls(
            blocks,
            float(meta["nu"]),
            float(meta["u_D"]),
            bool(meta["mean_pressure_gradient"]),
            float(meta["shift"]),
            np.nan if cond is None else float(cond),
        )
        if system.digest() != digest:
            raise ArtifactError(f"{path}: content hash mismatch")
        return system


def compose_system(blocks: OperatorBlocks, nu: float, u_D: float, mean_pressure_gradient=True) -> ReducedSystem:
    """Compose the reduced system; regularise ``D`` if it is ill-conditioned."""
    if not isinstance(blocks, OperatorBlocks):
        raise TypeError("compose_system expects OperatorBlocks")
    shift = 0.0
    cond = float(np.linalg.cond(blocks.D)) if blocks.n_p else 1.0
    if cond > COND_LIMIT:
        shift = TIKHONOV * float(np.trace(blocks.D)) / blocks.n_p
    return ReducedSystem(blocks, float(nu), float(u_D), bool(mean_pressure_gradient), shift, cond)

