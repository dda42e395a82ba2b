"""Finite-volume tessellation and the desk-scale channel/bluff-body geometry.

Faces are stored in flat arrays. Internal faces come first (owner and
neighbour both cells); boundary faces follow, grouped contiguously by
patch. Area vectors of internal faces point from owner to neighbour; area
vectors of boundary faces point out of the domain.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

__all__ = [
    "BoundaryPatch",
    "Face",
    "Mesh",
    "MeshError",
    "PATCH_KINDS",
    "generate_channel_mesh",
    "orthogonality_decomposition",
    "read_mesh",
    "write_mesh",
]

PATCH_KINDS = ("inlet", "outlet", "wall", "slip-side")
CORRECTION_VARIANTS = ("minimum", "orthogonal", "over-relaxed")

MESH_MAGIC = "podfv-mesh v1"


class MeshError(ValueError):
    """Raised for invalid geometry or topology."""


@dataclass(frozen=True)
class BoundaryPatch:
    name: str
    kind: str
    start: int
    size: int

    def __post_init__(self):
        if self.kind not in PATCH_KINDS:
            raise MeshError(f"unknown patch kind {self.kind!r}; expected one of {PATCH_KINDS}")

    @property
    def faces(self) -> np.ndarray:
        return np.arange(self.start, self.start + self.size)

    @property
    def slice(self) -> slice:
        return slice(self.start, self.start + self.size)


class Face(NamedTuple):
    """Read-only view of a single face, mostly for inspection and tests."""

    area_vector: np.ndarray
    center: np.ndarray
    owner: int
    neighbour: int
    patch: str | None
    d: np.ndarray
    delta: np.ndarray
    k: np.ndarray
    interp_weight: float


def orthogonality_decomposition(area_vector, d=None, variant="orthogonal"):
    """Split face area vectors into a part parallel to ``d`` and a remainder.

    Returns ``(delta, k)`` with ``delta + k == area_vector`` and ``delta``
    parallel to ``d``. ``variant`` selects how long ``delta`` is:

    * ``"minimum"``: projection of ``S_f`` on ``d``
    * ``"orthogonal"``: ``|delta| = |S_f|``
    * ``"over-relaxed"``: ``|delta| = |S_f|**2 / (d_hat . S_f)``

    Works on a single face (shape ``(2,)``) or a stack (``(n, 2)``). A
    :class:`Face` may be passed in place of ``area_vector``; its ``d`` is
    used when ``d`` is None.
    """
    if isinstance(area_vector, Face):
        if d is None:
            d = area_vector.d
        area_vector = area_vector.area_vector
    if variant not in CORRECTION_VARIANTS:
        raise MeshError(f"unknown non-orthogonal correction variant {variant!r}")
    S = np.asarray(area_vector, dtype=float)
    d = np.asarray(d, dtype=float)
    single = S.ndim == 1
    S = np.atleast_2d(S)
    d = np.atleast_2d(d)

    s_mag = np.linalg.norm(S, axis=1)
    d_mag = np.linalg.norm(d, axis=1)
    if np.any(s_mag == 0.0):
        raise MeshError("degenerate face: zero area vector")
    if np.any(d_mag == 0.0):
        raise MeshError("degenerate face: coincident cell centres")
    d_hat = d / d_mag[:, None]
    s_dot = np.einsum("ij,ij->i", d_hat, S)

    if variant == "minimum":
        length = s_dot
    elif variant == "orthogonal":
        length = s_mag
    else:
        if np.any(s_dot <= 0.0):
            raise MeshError("over-relaxed correction needs d_hat . S_f > 0")
        length = s_mag**2 / s_dot
    delta = length[:, None] * d_hat
    k = S - delta
    if single:
        return delta[0], k[0]
    return delta, k


@dataclass(frozen=True, eq=False)
class Mesh:
    """Polygonal 2-D finite-volume mesh with owner/neighbour topology.

    Volumes are areas times unit depth. ``neighbour`` is ``-1`` for
    boundary faces, which occupy indices ``n_internal_faces`` onward.
    """

    cell_centers: np.ndarray
    cell_volumes: np.ndarray
    face_areas: np.ndarray
    face_centers: np.ndarray
    owner: np.ndarray
    neighbour: np.ndarray
    patches: tuple
    correction: str = "orthogonal"
    extent: tuple = field(default=(0.0, 0.0, 0.0, 0.0))

    def __post_init__(self):
        for name in ("cell_centers", "cell_volumes", "face_areas", "face_centers", "owner", "neighbour"):
            arr = getattr(self, name)
            arr.setflags(write=False)
        n_int = int(np.count_nonzero(self.neighbour >= 0))
        if np.any(self.neighbour[:n_int] < 0) or np.any(self.neighbour[n_int:] >= 0):
            raise MeshError("internal faces must precede boundary faces")
        covered = sum(p.size for p in self.patches)
        if covered != self.n_faces - n_int:
            raise MeshError("every boundary face must belong to exactly one patch")
        object.__setattr__(self, "n_internal_faces", n_int)
        self._derive_geometry()

    # geometry derived once; the mesh never changes afterwards
    def _derive_geometry(self):
        n_int = self.n_internal_faces
        own = self.owner
        nb = self.neighbour[:n_int]
        d = self.face_centers - self.cell_centers[own]
        d[:n_int] = self.cell_centers[nb] - self.cell_centers[own[:n_int]]
        d_mag = np.linalg.norm(d, axis=1)
        delta, k = orthogonality_decomposition(self.face_areas, d, self.correction)

        w = np.ones(self.n_faces)
        dp = np.linalg.norm(self.face_centers[:n_int] - self.cell_centers[own[:n_int]], axis=1)
        dn = np.linalg.norm(self.face_centers[:n_int] - self.cell_centers[nb], axis=1)
        w[:n_int] = dn / (dp + dn)

        s_mag = np.linalg.norm(self.face_areas, axis=1)
        normals = self.face_areas / s_mag[:, None]
        derived = {
            "d": d,
            "d_mag": d_mag,
            "delta": delta,
            "k": k,
            "delta_mag": np.linalg.norm(delta, axis=1),
            "weights": w,
            "area_mag": s_mag,
            "normals": normals,
        }
        for name, arr in derived.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_cells(self) -> int:
        return len(self.cell_volumes)

    @property
    def n_faces(self) -> int:
        return len(self.owner)

    @property
    def n_boundary_faces(self) -> int:
        return self.n_faces - self.n_internal_faces

    @property
    def internal(self) -> slice:
        return slice(0, self.n_internal_faces)

    @property
    def boundary(self) -> slice:
        return slice(self.n_internal_faces, self.n_faces)

    def patch(self, name: str) -> BoundaryPatch:
        for p in self.patches:
            if p.name == name:
                return p
        raise KeyError(f"no patch named {name!r}; have {[p.name for p in self.patches]}")

    def patches_of_kind(self, kind: str) -> list:
        return [p for p in self.patches if p.kind == kind]

    def face(self, i: int) -> Face:
        nb = int(self.neighbour[i])
        patch = None
        if nb < 0:
            patch = next(p.name for p in self.patches if p.start <= i < p.start + p.size)
        return Face(
            area_vector=self.face_areas[i].copy(),
            center=self.face_centers[i].copy(),
            owner=int(self.owner[i]),
            neighbour=nb,
            patch=patch,
            d=self.d[i].copy(),
            delta=self.delta[i].copy(),
            k=self.k[i].copy(),
            interp_weight=float(self.weights[i]),
        )

    def cell_face_sums(self, face_values: np.ndarray) -> np.ndarray:
        """Sum outward-signed face quantities into cells.

        ``face_values`` is per-face (``(nf,)`` or ``(nf, m)``), oriented with
        the face area vector. Owners receive ``+value``, neighbours
        ``-value``.
        """
        face_values = np.asarray(face_values, dtype=float)
        out_shape = (self.n_cells,) + face_values.shape[1:]
        out = np.zeros(out_shape)
        n_int = self.n_internal_faces
        if face_values.ndim == 1:
            out += np.bincount(self.owner, weights=face_values, minlength=self.n_cells)
            out -= np.bincount(self.neighbour[:n_int], weights=face_values[:n_int], minlength=self.n_cells)
            return out
        for c in range(face_values.shape[1]):
            out[:, c] += np.bincount(self.owner, weights=face_values[:, c], minlength=self.n_cells)
            out[:, c] -= np.bincount(self.neighbour[:n_int], weights=face_values[:n_int, c], minlength=self.n_cells)
        return out

    @cached_property
    def incidence(self) -> sp.csr_matrix:
        """Signed cell-face incidence (``+1`` owner, ``-1`` neighbour) so that
        ``incidence @ X`` equals :meth:`cell_face_sums` for any number of
        trailing columns."""
        n_int = self.n_internal_faces
        rows = np.concatenate([self.owner, self.neighbour[:n_int]])
        cols = np.concatenate([np.arange(self.n_faces), np.arange(n_int)])
        vals = np.concatenate([np.ones(self.n_faces), -np.ones(n_int)])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_cells, self.n_faces))

    @cached_property
    def cell_stencil(self):
        """Padded per-cell face table ``(faces, other)``, both ``(n, max_faces)``.

        ``other`` indexes the extended array ``[cell values, boundary face
        values]``: the neighbour cell across an internal face or the
        boundary face itself. Padding repeats the cell's first face.
        """
        n = self.n_cells
        n_int = self.n_internal_faces
        cells = np.concatenate([self.owner, self.neighbour[:n_int]])
        faces = np.concatenate([np.arange(self.n_faces), np.arange(n_int)])
        other = np.concatenate([self.neighbour[:n_int], n + np.arange(self.n_boundary_faces), self.owner[:n_int]])
        order = np.lexsort((faces, cells))
        cells, faces, other = cells[order], faces[order], other[order]
        counts = np.bincount(cells, minlength=n)
        width = int(counts.max())
        start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        slot = np.arange(len(cells)) - start[cells]
        tab_f = np.repeat(faces[start][:, None], width, axis=1)
        tab_o = np.repeat(other[start][:, None], width, axis=1)
        tab_f[cells, slot] = faces
        tab_o[cells, slot] = other
        tab_f.setflags(write=False)
        tab_o.setflags(write=False)
        return tab_f, tab_o

    def closure_residual(self) -> np.ndarray:
        """Per-cell sum of outward area vectors; zero for closed cells."""
        return self.cell_face_sums(self.face_areas)

    def content_hash(self) -> str:
        """64-bit content hash (hex) used to detect stale artifacts."""
        h = hashlib.blake2b(digest_size=8)
        for arr in (self.cell_centers, self.cell_volumes, self.face_areas, self.face_centers, self.owner, self.neighbour):
            h.update(np.ascontiguousarray(arr).astype("<f8" if arr.dtype.kind == "f" else "<i8").tobytes())
        for p in self.patches:
            h.update(f"{p.name}:{p.kind}:{p.start}:{p.size};".encode())
        return h.hexdigest()

    def nearest_boundary_face(self, patch: str, point) -> int:
        p = self.patch(patch)
        dist = np.linalg.norm(self.face_centers[p.slice] - np.asarray(point, dtype=float), axis=1)
        return p.start + int(np.argmin(dist))


def _check_aligned(value, spacing, origin, label):
    idx = (value - origin) / spacing
    rounded = round(idx)
    if abs(idx - rounded) > 1e-9:
        raise MeshError(f"obstacle edge {label}={value} is not aligned to the grid (spacing {spacing})")
    return int(rounded)


def generate_channel_mesh(
    nx: int,
    ny: int,
    lx: float,
    ly: float,
    obstacle=None,
    sides: str = "slip-side",
    correction: str = "orthogonal",
) -> Mesh:
    """Cartesian channel, optionally with a rectangular obstacle blanked out.

    Parameters
    ----------
    nx, ny : int
        Cells along x and y, both at least 2.
    lx, ly : float
        Domain length and height; the domain is ``[0, lx] x [0, ly]``.
    obstacle : tuple of float, optional
        ``(x0, x1, y0, y1)``. Edges must fall on grid lines and the
        rectangle must not touch the outer boundary. Its faces form the
        ``"cylinder"`` wall patch.
    sides : {"slip-side", "wall"}
        Kind given to the ``"bottom"`` and ``"top"`` patches.

    Patches, in face order: ``inlet`` (x=0), ``outlet`` (x=lx), ``bottom``,
    ``top``, then ``cylinder`` when an obstacle is present.
    """
    if nx < 2 or ny < 2:
        raise MeshError("nx and ny must both be >= 2")
    if lx <= 0 or ly <= 0:
        raise MeshError("domain lengths must be positive")
    if sides not in ("slip-side", "wall"):
        raise MeshError("sides must be 'slip-side' or 'wall'")
    hx, hy = lx / nx, ly / ny

    solid = np.zeros((nx, ny), dtype=bool)
    if obstacle is not None:
        x0, x1, y0, y1 = (float(v) for v in obstacle)
        if not (x0 < x1 and y0 < y1):
            raise MeshError("obstacle must have positive extent")
        i0 = _check_aligned(x0, hx, 0.0, "x0")
        i1 = _check_aligned(x1, hx, 0.0, "x1")
        j0 = _check_aligned(y0, hy, 0.0, "y0")
        j1 = _check_aligned(y1, hy, 0.0, "y1")
        if i0 <= 0 or j0 <= 0 or i1 >= nx or j1 >= ny:
            raise MeshError("obstacle touches or crosses the outer boundary")
        solid[i0:i1, j0:j1] = True

    # cell ids in (i fastest, then j) order, skipping solid cells
    cell_id = -np.ones((nx, ny), dtype=np.int64)
    fluid_ij = [(i, j) for j in range(ny) for i in range(nx) if not solid[i, j]]
    for c, (i, j) in enumerate(fluid_ij):
        cell_id[i, j] = c
    n_cells = len(fluid_ij)
    ij = np.array(fluid_ij, dtype=float)
    centers = np.column_stack(((ij[:, 0] + 0.5) * hx, (ij[:, 1] + 0.5) * hy))
    volumes = np.full(n_cells, hx * hy)

    internal = []  # (owner, neighbour, S, center)
    inlet, outlet, bottom, top, body = [], [], [], [], []

    # vertical faces at x = i*hx, i = 0..nx
    for j in range(ny):
        yc = (j + 0.5) * hy
        for i in range(nx + 1):
            left = cell_id[i - 1, j] if i > 0 else -1
            right = cell_id[i, j] if i < nx else -1
            xf = i * hx
            if left >= 0 and right >= 0:
                internal.append((left, right, (hy, 0.0), (xf, yc)))
            elif left >= 0:
                target = outlet if i == nx else body
                target.append((left, (hy, 0.0), (xf, yc)))
            elif right >= 0:
                target = inlet if i == 0 else body
                target.append((right, (-hy, 0.0), (xf, yc)))
    # horizontal faces at y = j*hy
    for j in range(ny + 1):
        yf = j * hy
        for i in range(nx):
            xc = (i + 0.5) * hx
            below = cell_id[i, j - 1] if j > 0 else -1
            above = cell_id[i, j] if j < ny else -1
            if below >= 0 and above >= 0:
                internal.append((below, above, (0.0, hx), (xc, yf)))
            elif below >= 0:
                target = top if j == ny else body
                target.append((below, (0.0, hx), (xc, yf)))
            elif above >= 0:
                target = bottom if j == 0 else body
                target.append((above, (0.0, -hx), (xc, yf)))

    owners, neighbours, areas, fcenters = [], [], [], []
    for o, n, s, c in internal:
        owners.append(o)
        neighbours.append(n)
        areas.append(s)
        fcenters.append(c)
    patches = []
    start = len(internal)
    groups = [("inlet", "inlet", inlet), ("outlet", "outlet", outlet), ("bottom", sides, bottom), ("top", sides, top)]
    if obstacle is not None:
        groups.append(("cylinder", "wall", body))
    for name, kind, faces in groups:
        for o, s, c in faces:
            owners.append(o)
            neighbours.append(-1)
            areas.append(s)
            fcenters.append(c)
        patches.append(BoundaryPatch(name, kind, start, len(faces)))
        start += len(faces)

    return Mesh(
        cell_centers=centers,
        cell_volumes=volumes,
        face_areas=np.array(areas, dtype=float),
        face_centers=np.array(fcenters, dtype=float),
        owner=np.array(owners, dtype=np.int64),
        neighbour=np.array(neighbours, dtype=np.int64),
        patches=tuple(patches),
        correction=correction,
        extent=(0.0, float(lx), 0.0, float(ly)),
    )


def write_mesh(mesh: Mesh, path) -> None:
    """Write the ``podfv-mesh v1`` text format.

    Layout (whitespace separated, one record per line)::

        podfv-mesh v1
        <n_cells> <n_faces> <n_patches> <correction>
        cx cy volume                      # n_cells lines
        Sx Sy owner neighbour cx cy       # n_faces lines; neighbour -1 on boundary
        name kind start size              # n_patches lines
    """
    lines = [MESH_MAGIC, f"{mesh.n_cells} {mesh.n_faces} {len(mesh.patches)} {mesh.correction}"]
    for (cx, cy), v in zip(mesh.cell_centers.tolist(), mesh.cell_volumes.tolist()):
        lines.append(f"{cx!r} {cy!r} {v!r}")
    for s, o, n, c in zip(mesh.face_areas.tolist(), mesh.owner.tolist(), mesh.neighbour.tolist(), mesh.face_centers.tolist()):
        lines.append(f"{s[0]!r} {s[1]!r} {o} {n} {c[0]!r} {c[1]!r}")
    for p in mesh.patches:
        lines.append(f"{p.name} {p.kind} {p.start} {p.size}")
    lines.append("extent " + " ".join(repr(float(e)) for e in mesh.extent))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != MESH_MAGIC:
        raise MeshError(f"{path}: not a {MESH_MAGIC} file")
    n_cells, n_faces, n_patches, correction = lines[1].split()
    n_cells, n_faces, n_patches = int(n_cells), int(n_faces), int(n_patches)
    cells = np.loadtxt(lines[2 : 2 + n_cells], ndmin=2)
    faces = np.loadtxt(lines[2 + n_cells : 2 + n_cells + n_faces], ndmin=2)
    patches = []
    off = 2 + n_cells + n_faces
    for line in lines[off : off + n_patches]:
        name, kind, start, size = line.split()
        patches.append(BoundaryPatch(name, kind, int(start), int(size)))
    extent = (0.0, 0.0, 0.0, 0.0)
    if len(lines) > off + n_patches and lines[off + n_patches].startswith("extent"):
        extent = tuple(float(v) for v in lines[off + n_patches].split()[1:])
    return Mesh(
        cell_centers=cells[:, :2].copy(),
        cell_volumes=cells[:, 2].copy(),
        face_areas=faces[:, :2].copy(),
        face_centers=faces[:, 4:6].copy(),
        owner=faces[:, 2].astype(np.int64),
        neighbour=faces[:, 3].astype(np.int64),
        patches=tuple(patches),
        correction=correction,
        extent=extent,
    )
