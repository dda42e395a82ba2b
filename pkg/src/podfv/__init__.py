"""POD-Galerkin reduced-order modelling on finite-volume flow snapshots.

The pipeline runs mesh -> full-order runs -> POD basis -> operator
assembly -> reduced integration -> evaluation; each stage lives in its
own module and the most used entry points are re-exported here.
"""

from .evaluation import ShedCase, mode_sweep_report, wape, wape_shifted_drag
from .hfsolver import CaseConfig, PisoSolver, run_case
from .mesh import Mesh, generate_channel_mesh, read_mesh, write_mesh
from .pod import POD, PodBasis, build_basis
from .romassembly import OperatorBlocks, ReducedSystem, assemble, compose_system
from .romsolver import ForceMap, GalerkinROM, RomRunConfig, initialize, integrate, reconstruct

__version__ = "0.1.0"

__all__ = [
    "POD",
    "CaseConfig",
    "ForceMap",
    "GalerkinROM",
    "Mesh",
    "OperatorBlocks",
    "PisoSolver",
    "PodBasis",
    "ReducedSystem",
    "RomRunConfig",
    "ShedCase",
    "assemble",
    "build_basis",
    "compose_system",
    "generate_channel_mesh",
    "initialize",
    "integrate",
    "mode_sweep_report",
    "read_mesh",
    "reconstruct",
    "run_case",
    "wape",
    "wape_shifted_drag",
    "write_mesh",
]
