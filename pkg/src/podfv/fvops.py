"""Finite-volume operators on a :class:`~podfv.mesh.Mesh`.

Every operator returns per-cell values already divided by the cell volume,
so ``gauss_gradient(mesh, p)[i]`` is the Gauss estimate of the gradient in
cell ``i``. Boundary faces take their values from the field's boundary
conditions:

* :class:`FixedValue` -- prescribed value at the face
* :class:`ZeroGradient` -- owner value copied to the face
* :class:`Slip` -- vectors lose their normal component at the face (mirror
  average); scalars behave like zero-gradient
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .mesh import Mesh

__all__ = [
    "CellField",
    "FixedValue",
    "Slip",
    "ZeroGradient",
    "boundary_face_values",
    "convection",
    "divergence_of_flux",
    "face_flux",
    "gauss_gradient",
    "grad_inner_product",
    "inner_product",
    "interpolate_to_faces",
    "laplacian",
    "limited_gauss_gradient",
    "SCHEMES",
]

SCHEMES = ("linear", "upwind", "linear-upwind-blend")
DEFAULT_BLEND = 0.8


@dataclass(frozen=True)
class FixedValue:
    value: object = 0.0


@dataclass(frozen=True)
class ZeroGradient:
    pass


@dataclass(frozen=True)
class Slip:
    pass


@dataclass
class CellField:
    """Cell-centred scalar ``(n,)`` or 2-vector ``(n, 2)`` values plus BCs.

    ``bcs`` maps every patch name of the mesh to a boundary condition.
    """

    values: np.ndarray
    bcs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim not in (1, 2) or (self.values.ndim == 2 and self.values.shape[1] != 2):
            raise ValueError("cell field values must have shape (n,) or (n, 2)")

    @property
    def kind(self) -> str:
        return "scalar" if self.values.ndim == 1 else "vector"

    def with_values(self, values, bcs=None) -> "CellField":
        return replace(self, values=np.asarray(values, dtype=float), bcs=self.bcs if bcs is None else bcs)

    def check(self, mesh: Mesh) -> None:
        if len(self.values) != mesh.n_cells:
            raise ValueError(f"field has {len(self.values)} values, mesh has {mesh.n_cells} cells")
        missing = [p.name for p in mesh.patches if p.name not in self.bcs]
        if missing:
            raise ValueError(f"boundary conditions missing for patches {missing}")


def homogeneous(bcs: dict) -> dict:
    """Same BC types with every fixed value set to zero."""
    return {name: FixedValue(0.0) if isinstance(bc, FixedValue) else bc for name, bc in bcs.items()}


def _values(field_or_array):
    if isinstance(field_or_array, CellField):
        return field_or_array.values
    return np.asarray(field_or_array, dtype=float)


def boundary_face_values(mesh: Mesh, fld: CellField) -> np.ndarray:
    """Face values on all boundary faces, in mesh boundary-face order."""
    fld.check(mesh)
    v = fld.values
    n_int = mesh.n_internal_faces
    out = np.empty((mesh.n_boundary_faces,) + v.shape[1:])
    for patch in mesh.patches:
        sl = slice(patch.start - n_int, patch.start - n_int + patch.size)
        owners = mesh.owner[patch.slice]
        bc = fld.bcs[patch.name]
        if isinstance(bc, FixedValue):
            out[sl] = np.broadcast_to(np.asarray(bc.value, dtype=float), out[sl].shape)
        elif isinstance(bc, ZeroGradient) or (isinstance(bc, Slip) and v.ndim == 1):
            out[sl] = v[owners]
        elif isinstance(bc, Slip):
            n = mesh.normals[patch.slice]
            vp = v[owners]
            out[sl] = vp - np.einsum("ij,ij->i", vp, n)[:, None] * n
        else:
            raise TypeError(f"unsupported boundary condition {bc!r} on patch {patch.name}")
    return out


def interpolate_to_faces(mesh: Mesh, fld: CellField, scheme="linear", flux=None, blend=DEFAULT_BLEND):
    """Face values for every face of the mesh.

    ``scheme`` is ``"linear"`` (inverse-distance weights), ``"upwind"``
    (value of the cell upstream of ``flux``) or ``"linear-upwind-blend"``
    (``blend * linear + (1 - blend) * upwind``). Upwind-based schemes need
    ``flux``.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown interpolation scheme {scheme!r}")
    if scheme != "linear" and flux is None:
        raise ValueError(f"scheme {scheme!r} requires a face flux")
    v = fld.values
    n_int = mesh.n_internal_faces
    own = v[mesh.owner[:n_int]]
    nei = v[mesh.neighbour[:n_int]]
    out = np.empty((mesh.n_faces,) + v.shape[1:])
    if scheme == "linear":
        w = mesh.weights[:n_int]
        if v.ndim == 2:
            w = w[:, None]
        out[:n_int] = w * own + (1.0 - w) * nei
    else:
        F = np.asarray(flux, dtype=float)[:n_int]
        pos = F >= 0.0
        if v.ndim == 2:
            pos = pos[:, None]
        up = np.where(pos, own, nei)
        if scheme == "upwind":
            out[:n_int] = up
        else:
            w = mesh.weights[:n_int]
            if v.ndim == 2:
                w = w[:, None]
            out[:n_int] = blend * (w * own + (1.0 - w) * nei) + (1.0 - blend) * up
    out[n_int:] = boundary_face_values(mesh, fld)
    return out


def gauss_gradient(mesh: Mesh, fld: CellField) -> np.ndarray:
    """Cell gradient ``sum_f S_f p_f / V``: shape ``(n, 2)`` for scalars,
    ``(n, 2, 2)`` (component, direction) for vectors."""
    pf = interpolate_to_faces(mesh, fld, "linear")
    if pf.ndim == 1:
        return mesh.cell_face_sums(pf[:, None] * mesh.face_areas) / mesh.cell_volumes[:, None]
    out = np.empty((mesh.n_cells, 2, 2))
    for c in range(2):
        out[:, c, :] = mesh.cell_face_sums(pf[:, c, None] * mesh.face_areas) / mesh.cell_volumes[:, None]
    return out


def limited_gauss_gradient(mesh: Mesh, fld: CellField) -> np.ndarray:
    """Gauss gradient of a scalar, scaled per cell so that extrapolated
    face values ``p_P + grad.(x_f - x_P)`` stay inside the min/max of the
    cell and its face neighbours."""
    p = fld.values
    grad = gauss_gradient(mesh, fld)
    faces, other = mesh.cell_stencil
    ext_vals = np.concatenate([p, boundary_face_values(mesh, fld)])[other]
    pmax = np.maximum(p, ext_vals.max(axis=1))
    pmin = np.minimum(p, ext_vals.min(axis=1))
    r = mesh.face_centers[faces] - mesh.cell_centers[:, None, :]
    ext = np.einsum("ic,ifc->if", grad, r)
    bound = np.where(ext > 0, (pmax - p)[:, None], (pmin - p)[:, None])
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(ext != 0, bound / ext, 1.0)
    alpha = np.clip(ratio.min(axis=1), 0.0, 1.0)
    return grad * alpha[:, None]


def face_flux(mesh: Mesh, u: CellField) -> np.ndarray:
    """Face flux ``S_f . u_f`` with linear interpolation."""
    uf = interpolate_to_faces(mesh, u, "linear")
    return np.einsum("ij,ij->i", mesh.face_areas, uf)


def convection(mesh: Mesh, flux, u: CellField, scheme="linear", blend=DEFAULT_BLEND) -> np.ndarray:
    """``sum_f F_f u_f / V`` for the given face flux and transported field."""
    flux = np.asarray(flux, dtype=float)
    if flux.shape != (mesh.n_faces,):
        raise ValueError("flux must have one value per face")
    uf = interpolate_to_faces(mesh, u, scheme, flux=flux, blend=blend)
    if uf.ndim == 1:
        return mesh.cell_face_sums(flux * uf) / mesh.cell_volumes
    return mesh.cell_face_sums(flux[:, None] * uf) / mesh.cell_volumes[:, None]


def laplacian(mesh: Mesh, nu, u: CellField) -> np.ndarray:
    """``sum_f nu S_f . (grad u)_f / V`` with deferred non-orthogonal correction.

    Internal faces use ``|delta| (u_N - u_P) / |d| + k . (grad u)_f`` where
    the face gradient is interpolated from Gauss cell gradients. Boundary
    faces use the one-sided difference to the face value; zero-gradient
    faces contribute nothing.
    """
    v = u.values
    n_int = mesh.n_internal_faces
    own, nei = mesh.owner, mesh.neighbour[:n_int]
    coef = mesh.delta_mag / mesh.d_mag
    if v.ndim == 2:
        coef = coef[:, None]
    flux = np.empty((mesh.n_faces,) + v.shape[1:])
    flux[:n_int] = coef[:n_int] * (v[nei] - v[own[:n_int]])

    if np.any(mesh.k[:n_int] != 0.0):
        grad = gauss_gradient(mesh, u)
        w = mesh.weights[:n_int]
        if v.ndim == 1:
            gf = w[:, None] * grad[own[:n_int]] + (1 - w)[:, None] * grad[nei]
            flux[:n_int] += np.einsum("ij,ij->i", mesh.k[:n_int], gf)
        else:
            gf = w[:, None, None] * grad[own[:n_int]] + (1 - w)[:, None, None] * grad[nei]
            flux[:n_int] += np.einsum("fj,fcj->fc", mesh.k[:n_int], gf)

    ub = boundary_face_values(mesh, u)
    flux[n_int:] = coef[n_int:] * (ub - v[own[n_int:]])
    for patch in mesh.patches:
        if isinstance(u.bcs[patch.name], ZeroGradient) or (v.ndim == 1 and isinstance(u.bcs[patch.name], Slip)):
            flux[patch.slice] = 0.0
    out = mesh.cell_face_sums(flux)
    vol = mesh.cell_volumes if v.ndim == 1 else mesh.cell_volumes[:, None]
    return nu * out / vol


def divergence_of_flux(mesh: Mesh, flux) -> np.ndarray:
    """Per-cell ``sum_f (+/-) F_f / V``, owners positive. ``flux`` may hold
    several fluxes as columns."""
    flux = np.asarray(flux, dtype=float)
    vol = mesh.cell_volumes if flux.ndim == 1 else mesh.cell_volumes[:, None]
    return mesh.cell_face_sums(flux) / vol


def inner_product(mesh: Mesh, a, b) -> float:
    """Volume-weighted L2 inner product ``sum_i (a_i . b_i) V_i``."""
    av, bv = _values(a), _values(b)
    if av.shape != bv.shape:
        raise ValueError(f"field kind mismatch: {av.shape} vs {bv.shape}")
    if av.ndim == 1:
        return float(np.dot(av * mesh.cell_volumes, bv))
    return float(np.einsum("ij,ij,i->", av, bv, mesh.cell_volumes))


def grad_inner_product(mesh: Mesh, p: CellField, q: CellField) -> float:
    return inner_product(mesh, gauss_gradient(mesh, p), gauss_gradient(mesh, q))
