"""Command-line pipeline: mesh -> HF runs -> POD -> assembly -> ROM -> evaluation.

Every stage reads its inputs from and writes its outputs to the artifact
directory, so stages can be rerun independently. Exit codes:

0 success, 2 missing input, 3 stale artifact (hash mismatch),
4 dimension mismatch, 5 solver failure.

Configuration is an INI file::

    [paths]
    root = artifacts            ; PODFV_ROOT overrides this

    [mesh]
    nx = 160
    ny = 64
    lx = 20
    ly = 8
    obstacle = 5, 6, 3.5, 4.5   ; or "none"

    [hf]
    u_in = 1.0                  ; comma-separated for several Reynolds numbers
    nu = 0.01
    dt = 0.04
    t_end = 100

    [pod]
    train = 1.0                 ; inlet velocities used for the basis
    n_u = 20

    [rom]
    n_u = 7
    u_D = 1.0
    t_span = 30

    [eval]
    sweep = 3, 5, 7, 10
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evaluation
from ._validation import DimensionError
from .hfsolver import CaseConfig, ForceHistory, SnapshotSet, SolverError, run_case
from .io import ArtifactError, read_snapshots, write_snapshots
from .mesh import Mesh, MeshError, generate_channel_mesh, read_mesh, write_mesh
from .pod import PodBasis, PodError, build_basis
from .romassembly import ReducedSystem, assemble, compose_system
from .romsolver import ForceMap, RomRunConfig, RomStepError, initialize, integrate

log = logging.getLogger("podfv")

EXIT_OK, EXIT_MISSING, EXIT_STALE, EXIT_DIMENSION, EXIT_SOLVER = 0, 2, 3, 4, 5


class MissingInputError(Exception):
    pass


class StaleArtifactError(Exception):
    pass


# -- configuration -------------------------------------------------------------------
def _floats(text: str) -> list:
    return [float(v) for v in text.replace(",", " ").split()]


def _ints(text: str) -> list:
    return [int(v) for v in text.replace(",", " ").split()]


class PipelineConfig:
    """Typed view of the INI configuration."""

    def __init__(self, parser: configparser.ConfigParser):
        self.raw = parser
        root = os.environ.get("PODFV_ROOT") or parser.get("paths", "root", fallback="artifacts")
        self.root = Path(root)

        m = parser["mesh"] if parser.has_section("mesh") else {}
        obstacle = m.get("obstacle", "5, 6, 3.5, 4.5")
        self.mesh = dict(
            nx=int(m.get("nx", 160)),
            ny=int(m.get("ny", 64)),
            lx=float(m.get("lx", 20.0)),
            ly=float(m.get("ly", 8.0)),
            obstacle=None if obstacle.strip().lower() == "none" else tuple(_floats(obstacle)),
            sides=m.get("sides", "slip-side"),
            correction=m.get("correction", "orthogonal"),
        )

        h = parser["hf"] if parser.has_section("hf") else {}
        self.u_in = _floats(h.get("u_in", "1.0"))
        self.hf = {}
        for f in fields(CaseConfig):
            if f.name == "u_in" or f.name not in h:
                continue
            self.hf[f.name] = type(f.default)(h[f.name]) if not isinstance(f.default, bool) else h.getboolean(f.name)
        self.hf.setdefault("snapshot_stride", 0)

        p = parser["pod"] if parser.has_section("pod") else {}
        self.train = _floats(p.get("train", " ".join(str(u) for u in self.u_in)))
        self.pod_n_u = int(p["n_u"]) if "n_u" in p else None
        self.pod_n_p = int(p["n_p"]) if "n_p" in p else self.pod_n_u

        r = parser["rom"] if parser.has_section("rom") else {}
        self.rom_n_u = int(r.get("n_u", 7))
        self.rom_n_p = int(r.get("n_p", self.rom_n_u))
        self.rom_u_D = float(r["u_D"]) if "u_D" in r else self.train[0]
        self.rom_nu = float(r.get("nu", self.hf.get("nu", CaseConfig.nu)))
        self.rom_dt = float(r["dt"]) if "dt" in r else None
        self.rom_t_span = float(r["t_span"]) if "t_span" in r else None
        self.rom_tol_abs = float(r.get("tol_abs", 1e-10))
        self.rom_tol_rel = float(r.get("tol_rel", 1e-8))
        self.rom_max_iter = int(r.get("max_iter", 25))
        self.mean_pressure_gradient = r.getboolean("mean_pressure_gradient", True) if r else True

        e = parser["eval"] if parser.has_section("eval") else {}
        self.sweep = _ints(e.get("sweep", "3, 5, 7, 10"))
        self.freq_periods = float(e.get("frequency_periods", 8))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.is_file():
            raise MissingInputError(f"config file not found: {path}")
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        parser.optionxform = str
        parser.read(path)
        return cls(parser)

    # artifact locations
    @property
    def mesh_path(self) -> Path:
        return self.root / "mesh.txt"

    def hf_dir(self, u) -> Path:
        return self.root / "hf" / f"u{u:g}"

    @property
    def basis_path(self) -> Path:
        return self.root / "basis.bin"

    @property
    def rom_path(self) -> Path:
        return self.root / "rom.bin"

    @property
    def rom_dir(self) -> Path:
        return self.root / "rom"

    @property
    def eval_dir(self) -> Path:
        return self.root / "eval"

    def case_config(self, u) -> CaseConfig:
        return CaseConfig(u_in=u, **self.hf)


# -- artifact helpers ---------------------------------------------------------------------
def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingInputError(f"missing input: {path}")
    return path


def load_mesh(cfg: PipelineConfig) -> Mesh:
    return read_mesh(_require(cfg.mesh_path))


def save_hf(directory: Path, snap: SnapshotSet, forces: ForceHistory) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    # wall time goes to its own file so the snapshot files are reproducible byte for byte
    meta = {k: v for k, v in snap.meta.items() if k != "wall_time"}
    write_snapshots(directory / "U.snap", "velocity", snap.U, snap.times, meta)
    write_snapshots(directory / "P.snap", "pressure", snap.P, snap.times, meta)
    write_snapshots(directory / "F.snap", "flux", snap.Fm, snap.times, meta)
    if "wall_time" in snap.meta:
        (directory / "timing.txt").write_text(f"wall_time = {snap.meta['wall_time']!r}\n")
    np.savetxt(
        directory / "forces.csv",
        np.column_stack([forces.t, forces.drag, forces.lift]),
        delimiter=",",
        header="t,drag,lift",
        comments="",
        fmt="%.17g",
    )


def load_hf(directory: Path, mesh: Mesh):
    _, U, times, meta = read_snapshots(_require(directory / "U.snap"))
    _, P, _, _ = read_snapshots(_require(directory / "P.snap"))
    _, Fm, _, _ = read_snapshots(_require(directory / "F.snap"))
    if meta.get("mesh_hash") != mesh.content_hash():
        raise StaleArtifactError(f"{directory}: snapshots were produced on a different mesh")
    if U.shape[0] != 2 * mesh.n_cells or P.shape[0] != mesh.n_cells or Fm.shape[0] != mesh.n_faces:
        raise DimensionError(f"{directory}: snapshot sizes do not match the mesh")
    data = np.atleast_2d(np.loadtxt(_require(directory / "forces.csv"), delimiter=",", skiprows=1))
    timing = directory / "timing.txt"
    if timing.exists():
        key, _, value = timing.read_text().partition("=")
        meta[key.strip()] = float(value)
    return SnapshotSet(U, P, Fm, times, meta), ForceHistory(data[:, 0], data[:, 1], data[:, 2])


def load_basis(cfg: PipelineConfig, mesh: Mesh) -> PodBasis:
    basis = PodBasis.load(_require(cfg.basis_path))
    if basis.mesh_hash != mesh.content_hash():
        raise StaleArtifactError(f"{cfg.basis_path}: basis was built on a different mesh")
    return basis


def load_rom(cfg: PipelineConfig, basis: PodBasis) -> ReducedSystem:
    system = ReducedSystem.load(_require(cfg.rom_path))
    if system.blocks.basis_hash != basis.digest():
        raise StaleArtifactError(f"{cfg.rom_path}: operators were assembled from a different basis")
    return system


# -- stages ----------------------------------------------------------------------------------
def cmd_mesh_gen(cfg: PipelineConfig, jobs: int = 1) -> None:
    mesh = generate_channel_mesh(**cfg.mesh)
    cfg.root.mkdir(parents=True, exist_ok=True)
    write_mesh(mesh, cfg.mesh_path)
    log.info("mesh: %d cells, %d faces -> %s", mesh.n_cells, mesh.n_faces, cfg.mesh_path)


def _hf_job(args):
    mesh_path, case, out = args
    mesh = read_mesh(mesh_path)
    snap, forces = run_case(mesh, case)
    save_hf(Path(out), snap, forces)
    return case.u_in, snap.meta["wall_time"]


def cmd_hf_run(cfg: PipelineConfig, jobs: int = 1) -> None:
    load_mesh(cfg)
    tasks = [(cfg.mesh_path, cfg.case_config(u), cfg.hf_dir(u)) for u in cfg.u_in]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_hf_job, tasks))
    else:
        results = [_hf_job(t) for t in tasks]
    for u, wall in results:
        log.info("hf run u_in=%g finished in %.1f s", u, wall)


def cmd_pod(cfg: PipelineConfig, jobs: int = 1) -> None:
    mesh = load_mesh(cfg)
    sets = [load_hf(cfg.hf_dir(u), mesh)[0] for u in cfg.train]
    basis = build_basis(mesh, sets, cfg.pod_n_u, cfg.pod_n_p)
    digest = basis.save(cfg.basis_path)
    e_u, e_p = basis.energy()
    log.info("basis %s: N_u=%d N_p=%d energy %.6f/%.6f", digest, basis.n_u, basis.n_p, e_u, e_p)


def cmd_assemble(cfg: PipelineConfig, jobs: int = 1) -> None:
    mesh = load_mesh(cfg)
    basis = load_basis(cfg, mesh)
    blocks = assemble(mesh, basis)
    system = compose_system(blocks, cfg.rom_nu, cfg.rom_u_D, cfg.mean_pressure_gradient)
    digest = system.save(cfg.rom_path)
    log.info("operators %s: cond(D)=%.3e shift=%.3e", digest, system.cond_D, system.shift)


def _initial_velocity(cfg: PipelineConfig, mesh: Mesh, u_D: float):
    """First snapshot of the HF run closest in inlet velocity."""
    available = [u for u in cfg.u_in if (cfg.hf_dir(u) / "U.snap").exists()]
    if not available:
        raise MissingInputError(f"no HF snapshots under {cfg.root / 'hf'} to initialise the reduced model")
    u = min(available, key=lambda v: abs(v - u_D))
    snap, _ = load_hf(cfg.hf_dir(u), mesh)
    return snap


def cmd_rom_run(cfg: PipelineConfig, jobs: int = 1) -> None:
    mesh = load_mesh(cfg)
    full_basis = load_basis(cfg, mesh)
    basis = full_basis.truncate(cfg.rom_n_u, cfg.rom_n_p)
    system = load_rom(cfg, full_basis).truncate(cfg.rom_n_u, cfg.rom_n_p)
    system = system.with_parameters(nu=cfg.rom_nu, u_D=cfg.rom_u_D)
    snap = _initial_velocity(cfg, mesh, cfg.rom_u_D)
    dt = cfg.rom_dt or float(np.median(np.diff(snap.times)))
    span = cfg.rom_t_span or float(snap.times[-1] - snap.times[0])
    state = initialize(mesh, basis, system, snap.U[:, 0], float(snap.times[0]))
    run_cfg = RomRunConfig(dt, span, cfg.rom_tol_abs, cfg.rom_tol_rel, cfg.rom_max_iter)
    traj = integrate(state, system, run_cfg)
    cfg.rom_dir.mkdir(parents=True, exist_ok=True)
    traj.to_csv(cfg.rom_dir / "coefficients.csv")
    fmap = ForceMap(mesh, basis, system.u_D, system.nu, snap.meta.get("body_diameter", 1.0), snap.meta.get("body_patch", "cylinder"))
    f = fmap(traj)
    np.savetxt(cfg.rom_dir / "forces.csv", np.column_stack([traj.t, f]), delimiter=",", header="t,drag,lift", comments="", fmt="%.17g")
    timing = {
        "rom_wall_s": traj.wall_time,
        "rom_steps": len(traj) - 1,
        "n_u": system.n_u,
        "n_p": system.n_p,
        "u_D": system.u_D,
        "hf_wall_s_same_span": float(snap.meta.get("wall_time", np.nan)) / (snap.meta["n_steps"] * snap.meta["dt"]) * span,
    }
    timing["speedup"] = timing["hf_wall_s_same_span"] / max(traj.wall_time, 1e-12)
    (cfg.rom_dir / "timing.txt").write_text("".join(f"{k} = {v}\n" for k, v in timing.items()))
    log.info("rom run: %d steps in %.3f s (speedup %.0f)", len(traj) - 1, traj.wall_time, timing["speedup"])


def cmd_eval(cfg: PipelineConfig, jobs: int = 1) -> None:
    mesh = load_mesh(cfg)
    full_basis = load_basis(cfg, mesh)
    system = load_rom(cfg, full_basis)
    u_ref = cfg.train[0]
    snap, forces = load_hf(cfg.hf_dir(u_ref), mesh)
    case = evaluation.ShedCase(
        mesh, snap, forces, full_basis, system.blocks, cfg.rom_nu, u_ref,
        snap.meta.get("body_diameter", 1.0), snap.meta.get("body_patch", "cylinder"), system.mean_pressure_gradient,
        cfg.rom_dt,
    )  # fmt: skip
    sweep = [n for n in cfg.sweep if n <= min(full_basis.n_u, full_basis.n_p)]
    report = evaluation.mode_sweep_report(case, sweep)

    # shedding frequency per available HF run, ROM at the same inlet velocity
    for u in cfg.u_in:
        if not (cfg.hf_dir(u) / "U.snap").exists():
            continue
        s_u, f_u = load_hf(cfg.hf_dir(u), mesh)
        period = 1.0 / evaluation.shedding_frequency(*_tail(f_u, s_u))
        case_u = evaluation.ShedCase(
            mesh, s_u, f_u, full_basis, system.blocks, cfg.rom_nu, u,
            case.diameter, case.body_patch, system.mean_pressure_gradient, cfg.rom_dt,
        )  # fmt: skip
        traj, fr = case_u.run_rom(cfg.rom_n_u, cfg.rom_n_p, t_span=cfg.freq_periods * period)
        re = u * case.diameter / cfg.rom_nu
        report.frequency_hf[re] = evaluation.shedding_frequency(*_tail(f_u, s_u))
        report.frequency_rom[re] = evaluation.shedding_frequency(traj.t, fr[:, 1])
        report.strouhal_hf[re] = evaluation.strouhal(report.frequency_hf[re], u, case.diameter)
        report.strouhal_rom[re] = evaluation.strouhal(report.frequency_rom[re], u, case.diameter)
    report.write(cfg.eval_dir)
    print(report.summary_table())


def _tail(forces: ForceHistory, snap: SnapshotSet):
    """HF lift over the final half of the spin-up plus the snapshot window."""
    t_end = float(forces.t[-1])
    t_start = float(snap.meta.get("t_end", t_end)) * 0.5
    w = forces.window(t_start, t_end)
    return w.t, w.lift


def cmd_pipeline(cfg: PipelineConfig, jobs: int = 1) -> None:
    for stage in (cmd_mesh_gen, cmd_hf_run, cmd_pod, cmd_assemble, cmd_rom_run, cmd_eval):
        log.info("stage %s", stage.__name__[4:])
        stage(cfg, jobs)


COMMANDS = {
    "mesh-gen": cmd_mesh_gen,
    "hf-run": cmd_hf_run,
    "pod": cmd_pod,
    "assemble": cmd_assemble,
    "rom-run": cmd_rom_run,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="podfv", description="POD-Galerkin reduced models of finite-volume flow solutions")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI configuration file")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes for independent runs")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = PipelineConfig.load(args.config)
        COMMANDS[args.command](cfg, max(1, args.jobs))
    except (MissingInputError, FileNotFoundError) as exc:
        print(f"podfv: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except StaleArtifactError as exc:
        print(f"podfv: stale artifact: {exc}", file=sys.stderr)
        return EXIT_STALE
    except DimensionError as exc:
        print(f"podfv: dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_DIMENSION
    except PodError as exc:
        print(f"podfv: dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_DIMENSION
    except (SolverError, RomStepError, evaluation.EvalError) as exc:
        print(f"podfv: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ArtifactError, MeshError) as exc:
        print(f"podfv: bad artifact: {exc}", file=sys.stderr)
        return EXIT_STALE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
