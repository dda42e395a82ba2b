"""POD bases by the method of snapshots, with lifting for Dirichlet inlets.

Snapshot matrices hold one snapshot per column. Velocity columns are
stacked ``[u_x; u_y]`` (``2 n_cells`` rows), pressure columns have
``n_cells`` rows and flux columns ``n_faces`` rows. Inner products are
volume weighted, so orthonormality means ``Phi.T @ diag(w) @ Phi = I``
with ``w`` the cell volumes (repeated per velocity component).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_snapshot_matrix, check_weights
from .hfsolver import SnapshotSet
from .io import ArtifactError, content_hash, read_archive, write_archive
from .mesh import Mesh

__all__ = [
    "BASIS_MAGIC",
    "POD",
    "PodBasis",
    "PooledSnapshots",
    "build_basis",
    "correlation_matrix",
    "cumulative_energy",
    "eig_spectrum",
    "flux_modes",
    "homogenize",
    "lifting_function",
    "pool_snapshots",
    "pressure_modes",
    "velocity_modes",
]

BASIS_MAGIC = "podfv-basis v1"
EIG_CUTOFF = 1e-14
_DERIVED_META = ("n_s", "n_u", "n_p")


class PodError(ValueError):
    pass


def velocity_weights(mesh: Mesh) -> np.ndarray:
    return np.concatenate([mesh.cell_volumes, mesh.cell_volumes])


def lifting_function(U, reference_values, Fm=None):
    """Lifting field scaled to unit value at the reference point.

    Parameters
    ----------
    U : (N_h, N_s) array
        Velocity snapshots.
    reference_values : (N_s,) array
        Velocity of each snapshot at the reference point on the Dirichlet
        inlet. Their mean is ``u_mr``.
    Fm : (n_faces, N_s) array, optional
        Flux snapshots. When given, the lifting flux is their mean over
        ``u_mr``, which keeps it as conservative as the snapshots.
        Otherwise only ``(phi_c, u_mr)`` is returned and the caller derives
        the flux from ``phi_c``.

    Returns
    -------
    phi_c, F_c, u_mr
        ``F_c`` is None when ``Fm`` is not given.
    """
    U = check_snapshot_matrix(U)
    ref = np.asarray(reference_values, dtype=float).reshape(-1)
    if len(ref) != U.shape[1]:
        raise PodError("need one reference value per snapshot")
    u_mr = float(ref.mean())
    if u_mr == 0.0:
        raise PodError("mean velocity at the reference point is zero; cannot scale the lifting function")
    phi_c = U.sum(axis=1) / (U.shape[1] * u_mr)
    F_c = None
    if Fm is not None:
        Fm = check_snapshot_matrix(Fm)
        F_c = Fm.sum(axis=1) / (Fm.shape[1] * u_mr)
    return phi_c, F_c, u_mr


def homogenize(S, u_D, lift):
    """Remove ``u_D[j] * lift`` from column ``j`` of ``S``."""
    S = check_snapshot_matrix(S)
    u_D = np.broadcast_to(np.asarray(u_D, dtype=float), (S.shape[1],))
    return S - np.outer(lift, u_D)


def correlation_matrix(S, weights=None):
    """``C_ij = (s_i, s_j)`` under the weighted inner product."""
    S = check_snapshot_matrix(S)
    if weights is None:
        C = S.T @ S
    else:
        w = check_weights(weights, S.shape[0])
        C = S.T @ (w[:, None] * S)
    return 0.5 * (C + C.T)


def eig_spectrum(C):
    """Eigen-decomposition of a symmetric correlation matrix.

    Eigenvalues come back sorted descending (a stable sort, so exact ties
    keep the solver's order), tiny negative round-off is clamped to zero and each eigenvector
    is signed so its largest-magnitude entry is positive.
    """
    C = np.asarray(C, dtype=float)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise PodError("correlation matrix must be square")
    scale = np.abs(C).max() if C.size else 0.0
    if np.abs(C - C.T).max() > 1e-12 * max(scale, 1e-300):
        raise PodError("correlation matrix is not symmetric")
    lam, Q = np.linalg.eigh(C)
    order = np.argsort(-lam, kind="stable")
    lam, Q = lam[order], Q[:, order]
    norm = np.linalg.norm(C, 2) if C.size else 0.0
    if np.any(lam < -1e-12 * norm):
        raise PodError(f"correlation matrix has a negative eigenvalue {lam.min():.3e}")
    lam = np.where(lam < 0.0, 0.0, lam)
    idx = np.argmax(np.abs(Q), axis=0)
    signs = np.sign(Q[idx, np.arange(Q.shape[1])])
    signs[signs == 0] = 1.0
    return lam, Q * signs


def usable_modes(lam) -> int:
    lam = np.asarray(lam, dtype=float)
    if lam.size == 0 or lam[0] <= 0:
        return 0
    return int(np.count_nonzero(lam > EIG_CUTOFF * lam[0]))


def _check_count(lam, n, what):
    usable = usable_modes(lam)
    if n > usable:
        raise PodError(f"requested {n} {what} modes but only {usable} are numerically usable")


def orthonormalizer(Phi, weights) -> np.ndarray:
    """Matrix ``T = G^{-1/2}`` with ``G = Phi.T W Phi``, so ``Phi @ T`` is
    exactly orthonormal.

    Trailing snapshot modes (small eigenvalues) inherit round-off of order
    ``eps * lambda_1 / lambda_i``; this symmetric correction removes it while
    changing each mode by no more than that error.
    """
    if Phi.shape[1] == 0:
        return np.eye(0)
    G = Phi.T @ (weights[:, None] * Phi)
    g, V = np.linalg.eigh(0.5 * (G + G.T))
    if g.min() <= 0:
        raise PodError("modes are linearly dependent; reduce the number of modes")
    return (V / np.sqrt(g)) @ V.T


def velocity_modes(U_h, lam, Q, n):
    """``phi_i = U_h Q_i / sqrt(lambda_i)`` for the first ``n`` modes."""
    _check_count(lam, n, "velocity")
    return check_snapshot_matrix(U_h) @ Q[:, :n] / np.sqrt(lam[:n])


def flux_modes(F_h, lam, Q, n):
    """Flux modes from the velocity eigenpairs (shared coefficients)."""
    _check_count(lam, n, "flux")
    return check_snapshot_matrix(F_h) @ Q[:, :n] / np.sqrt(lam[:n])


def pressure_modes(P, n, weights=None):
    """Mean pressure and modes of the fluctuations.

    Returns ``(p_mean, chi, lam, Q)``; ``lam``/``Q`` cover every snapshot.
    """
    P = check_snapshot_matrix(P)
    p_mean = P.mean(axis=1)
    Pf = P - p_mean[:, None]
    lam, Q = eig_spectrum(correlation_matrix(Pf, weights))
    if n == 0:
        return p_mean, np.zeros((P.shape[0], 0)), lam, Q
    _check_count(lam, n, "pressure")
    chi = Pf @ Q[:, :n] / np.sqrt(lam[:n])
    w = np.ones(P.shape[0]) if weights is None else check_weights(weights, P.shape[0])
    return p_mean, chi @ orthonormalizer(chi, w), lam, Q


def cumulative_energy(lam, n) -> float:
    """Fraction of the eigenvalue sum captured by the first ``n`` modes."""
    lam = np.asarray(lam, dtype=float)
    total = lam.sum()
    if total <= 0:
        raise PodError("spectrum is identically zero")
    return float(lam[:n].sum() / total)


class POD(TransformerMixin, BaseEstimator):
    """Method-of-snapshots POD as a scikit-learn transformer.

    ``X`` follows the scikit-learn layout: one snapshot per row
    (``(n_snapshots, n_dofs)``), i.e. the transpose of a snapshot matrix.

    Parameters
    ----------
    n_modes : int
        Number of modes kept.
    weights : array of shape (n_dofs,), optional
        Inner-product weights (cell volumes). Identity when None.
    center : bool
        Subtract the snapshot mean before decomposing (used for pressure).
    """

    def __init__(self, n_modes=5, weights=None, center=False):
        self.n_modes = n_modes
        self.weights = weights
        self.center = center

    def fit(self, X, y=None):
        X = check_snapshot_matrix(X).T  # -> (n_dofs, n_snapshots)
        w = None if self.weights is None else check_weights(self.weights, X.shape[0])
        self.mean_ = X.mean(axis=1) if self.center else np.zeros(X.shape[0])
        Xc = X - self.mean_[:, None]
        self.eigenvalues_, self.eigenvectors_ = eig_spectrum(correlation_matrix(Xc, w))
        self._w = np.ones(X.shape[0]) if w is None else w
        Phi = velocity_modes(Xc, self.eigenvalues_, self.eigenvectors_, self.n_modes)
        self.components_ = (Phi @ orthonormalizer(Phi, self._w)).T
        self.n_features_in_ = X.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_snapshot_matrix(X)
        return (X - self.mean_) @ (self._w[:, None] * self.components_.T)

    def inverse_transform(self, A):
        check_is_fitted(self, "components_")
        return np.asarray(A, dtype=float) @ self.components_ + self.mean_

    def cumulative_energy(self, n=None):
        check_is_fitted(self, "eigenvalues_")
        return cumulative_energy(self.eigenvalues_, self.n_modes if n is None else n)


@dataclass
class PooledSnapshots:
    """Snapshot sets from several runs, concatenated column-wise.

    ``u_D[j]`` is the inlet velocity of the run column ``j`` came from;
    ``params[j]`` its Reynolds number.
    """

    U: np.ndarray
    P: np.ndarray
    Fm: np.ndarray
    times: np.ndarray
    u_D: np.ndarray
    params: np.ndarray
    mesh_hash: str = ""

    @property
    def n_snapshots(self) -> int:
        return self.U.shape[1]


def pool_snapshots(sets) -> PooledSnapshots:
    if isinstance(sets, SnapshotSet):
        sets = [sets]
    sets = list(sets)
    if not sets:
        raise PodError("no snapshot sets to pool")
    hashes = {s.meta.get("mesh_hash", "") for s in sets}
    if len(hashes) > 1:
        raise PodError("snapshot sets come from different meshes")
    u_D = np.concatenate([np.full(s.n_snapshots, s.u_in) for s in sets])
    params = np.concatenate(
        [np.full(s.n_snapshots, s.u_in * s.meta.get("body_diameter", 1.0) / s.meta.get("nu", 1.0)) for s in sets]
    )
    return PooledSnapshots(
        U=np.hstack([s.U for s in sets]),
        P=np.hstack([s.P for s in sets]),
        Fm=np.hstack([s.Fm for s in sets]),
        times=np.concatenate([s.times for s in sets]),
        u_D=u_D,
        params=params,
        mesh_hash=hashes.pop(),
    )


@dataclass
class PodBasis:
    """Velocity, flux and pressure modes plus the lifting pair.

    ``phi`` is ``(2 n_cells, N_u)``, ``psi`` ``(n_faces, N_u)``, ``chi``
    ``(n_cells, N_p)``. Eigen-data cover every snapshot so the basis can be
    truncated without recomputation.
    """

    phi: np.ndarray
    psi: np.ndarray
    chi: np.ndarray
    lambda_u: np.ndarray
    lambda_p: np.ndarray
    Q_u: np.ndarray
    Q_p: np.ndarray
    p_mean: np.ndarray
    phi_c: np.ndarray
    F_c: np.ndarray
    u_mr: float
    reference_face: int
    mesh_hash: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n_u(self) -> int:
        return self.phi.shape[1]

    @property
    def n_p(self) -> int:
        return self.chi.shape[1]

    def truncate(self, n_u, n_p=None) -> "PodBasis":
        n_p = n_u if n_p is None else n_p
        if n_u > self.n_u or n_p > self.n_p:
            raise PodError(f"basis holds ({self.n_u}, {self.n_p}) modes, asked for ({n_u}, {n_p})")
        return replace(self, phi=self.phi[:, :n_u], psi=self.psi[:, :n_u], chi=self.chi[:, :n_p])

    def energy(self, n_u=None, n_p=None):
        return (
            cumulative_energy(self.lambda_u, self.n_u if n_u is None else n_u),
            cumulative_energy(self.lambda_p, self.n_p if n_p is None else n_p),
        )

    def _payload(self):
        arrays = {
            "phi": self.phi,
            "psi": self.psi,
            "chi": self.chi,
            "lambda_u": self.lambda_u,
            "lambda_p": self.lambda_p,
            "Q_u": self.Q_u,
            "Q_p": self.Q_p,
            "p_mean": self.p_mean,
            "phi_c": self.phi_c,
            "F_c": self.F_c,
        }
        meta = {k: v for k, v in self.meta.items() if k not in _DERIVED_META}
        meta.update(
            mesh_hash=self.mesh_hash,
            n_s=int(len(self.lambda_u)),
            n_u=self.n_u,
            n_p=self.n_p,
            u_mr=self.u_mr,
            reference_face=int(self.reference_face),
        )
        return arrays, meta

    def digest(self) -> str:
        """Content hash; equal to the hash stored by :meth:`save`."""
        return content_hash(*self._payload())

    def save(self, path) -> str:
        return write_archive(path, BASIS_MAGIC, *self._payload())

    @classmethod
    def load(cls, path) -> "PodBasis":
        arrays, meta, digest = read_archive(path, BASIS_MAGIC)
        meta = {k: v for k, v in meta.items() if k not in _DERIVED_META}
        basis = cls(
            u_mr=float(meta.pop("u_mr")),
            reference_face=int(meta.pop("reference_face")),
            mesh_hash=meta.pop("mesh_hash"),
            meta=meta,
            **arrays,
        )
        if basis.digest() != digest:
            raise ArtifactError(f"{path}: content hash mismatch")
        return basis


def default_reference_face(mesh: Mesh) -> int:
    """Inlet face closest to the inlet centreline."""
    inlet = mesh.patches_of_kind("inlet")
    if not inlet:
        raise PodError("mesh has no inlet patch for the lifting reference point")
    y_mid = 0.5 * (mesh.extent[2] + mesh.extent[3])
    faces = inlet[0].slice
    fc = mesh.face_centers[faces]
    x0 = fc[:, 0].mean()
    return mesh.nearest_boundary_face(inlet[0].name, (x0, y_mid))


def build_basis(mesh: Mesh, snapshots, n_u=None, n_p=None, reference_face=None) -> PodBasis:
    """Lift, homogenise and decompose one or more snapshot sets.

    ``n_u``/``n_p`` default to every numerically usable mode. The inlet is
    assumed to carry a uniform ``(u_D, 0)`` profile, so the value at the
    reference face of each snapshot is its run's ``u_D``.
    """
    pooled = snapshots if isinstance(snapshots, PooledSnapshots) else pool_snapshots(snapshots)
    if pooled.mesh_hash and pooled.mesh_hash != mesh.content_hash():
        raise PodError("snapshots were produced on a different mesh")
    ref = default_reference_face(mesh) if reference_face is None else int(reference_face)
    phi_c, F_c, u_mr = lifting_function(pooled.U, pooled.u_D, pooled.Fm)
    U_h = homogenize(pooled.U, pooled.u_D, phi_c)
    F_h = homogenize(pooled.Fm, pooled.u_D, F_c)

    w_u = velocity_weights(mesh)
    lam_u, Q_u = eig_spectrum(correlation_matrix(U_h, w_u))
    n_u = usable_modes(lam_u) if n_u is None else n_u
    phi = velocity_modes(U_h, lam_u, Q_u, n_u)
    T = orthonormalizer(phi, w_u)
    phi = phi @ T
    psi = flux_modes(F_h, lam_u, Q_u, n_u) @ T

    if n_p is None:
        n_p = usable_modes(pressure_modes(pooled.P, 0, mesh.cell_volumes)[2])
    p_mean, chi, lam_p, Q_p = pressure_modes(pooled.P, n_p, mesh.cell_volumes)

    return PodBasis(
        phi=phi,
        psi=psi,
        chi=chi,
        lambda_u=lam_u,
        lambda_p=lam_p,
        Q_u=Q_u,
        Q_p=Q_p,
        p_mean=p_mean,
        phi_c=phi_c,
        F_c=F_c,
        u_mr=u_mr,
        reference_face=ref,
        mesh_hash=mesh.content_hash(),
        meta={"u_D": sorted(set(float(v) for v in pooled.u_D)), "n_snapshots": int(pooled.n_snapshots)},
    )
