import numpy as np
import pytest

from podfv.mesh import Mesh, generate_channel_mesh


def shear(mesh: Mesh, s: float, correction="orthogonal") -> Mesh:
    """Image of ``mesh`` under ``(x, y) -> (x + s y, y)``.

    Volumes are preserved (unit Jacobian) and area vectors transform with
    the cofactor matrix, so the result is a valid non-orthogonal mesh.
    """
    A = np.array([[1.0, s], [0.0, 1.0]])
    cof = np.array([[1.0, 0.0], [-s, 1.0]])
    return Mesh(
        cell_centers=mesh.cell_centers @ A.T,
        cell_volumes=mesh.cell_volumes.copy(),
        face_areas=mesh.face_areas @ cof.T,
        face_centers=mesh.face_centers @ A.T,
        owner=mesh.owner.copy(),
        neighbour=mesh.neighbour.copy(),
        patches=mesh.patches,
        correction=correction,
        extent=mesh.extent,
    )


def interior_cells(mesh: Mesh) -> np.ndarray:
    """Cells none of whose faces lie on the boundary."""
    on_boundary = np.zeros(mesh.n_cells, dtype=bool)
    on_boundary[mesh.owner[mesh.n_internal_faces :]] = True
    return np.flatnonzero(~on_boundary)


@pytest.fixture(scope="session")
def channel():
    return generate_channel_mesh(12, 8, 3.0, 2.0)


@pytest.fixture(scope="session")
def body_mesh():
    return generate_channel_mesh(16, 10, 4.0, 2.5, obstacle=(1.0, 1.5, 1.0, 1.5))


@pytest.fixture(scope="session")
def skewed():
    return shear(generate_channel_mesh(10, 8, 2.0, 1.6), 0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def _small_case(mesh, u_in):
    from podfv.hfsolver import CaseConfig, run_case

    cfg = CaseConfig(nu=0.01, u_in=u_in, dt=0.05, t_end=2.0, snapshot_stride=2, n_snapshots=12, body_diameter=0.5, perturbation=0.02)
    return run_case(mesh, cfg)


@pytest.fixture(scope="session")
def small_runs(body_mesh):
    """Two short HF runs on the body mesh (u_in = 1.0 and 0.7), 12 snapshots each."""
    return [_small_case(body_mesh, u) for u in (1.0, 0.7)]


@pytest.fixture(scope="session")
def small_basis(body_mesh, small_runs):
    from podfv.pod import build_basis

    return build_basis(body_mesh, [small_runs[0][0]])
