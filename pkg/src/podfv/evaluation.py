"""Comparison of full-order and reduced force histories.

Percent errors follow the weighted absolute percentage error

    WAPE = 100/n * sum_t |x_hf(t) - x_rom(t)| / mean(|x_hf|)

where the denominator is the mean magnitude of the reference signal (lift
has zero mean, so a signed mean would be useless). Drag is compared after
removing the reference mean from both signals, since its fluctuation is
tiny next to its mean.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import periodogram

from .hfsolver import ForceHistory, SnapshotSet, estimate_period
from .mesh import Mesh
from .pod import PodBasis, cumulative_energy
from .romassembly import OperatorBlocks, compose_system
from .romsolver import ForceMap, RomRunConfig, RomStepError, initialize, integrate

__all__ = [
    "EvalError",
    "EvalReport",
    "ShedCase",
    "SignalPair",
    "SweepRow",
    "frequency_resolution",
    "mode_sweep_report",
    "psd_peak_frequency",
    "shedding_frequency",
    "speedup",
    "strouhal",
    "wape",
    "wape_shifted_drag",
    "zero_crossing_frequency",
]


class EvalError(ValueError):
    pass


@dataclass
class SignalPair:
    """Reference and reduced samples on a common time grid."""

    times: np.ndarray
    hf: np.ndarray
    rom: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.hf = np.asarray(self.hf, dtype=float)
        self.rom = np.asarray(self.rom, dtype=float)
        if not (len(self.times) == len(self.hf) == len(self.rom)):
            raise EvalError("times, hf and rom must have equal lengths")
        if len(self.times) < 2:
            raise EvalError("need at least two samples")

    @classmethod
    def resample(cls, hf_times, hf_values, rom_times, rom_values) -> "SignalPair":
        """Interpolate the reduced series linearly onto the reference time
        stamps that lie inside the reduced time span."""
        hf_times = np.asarray(hf_times, dtype=float)
        rom_times = np.asarray(rom_times, dtype=float)
        eps = 1e-9 * max(1.0, abs(rom_times[-1]))
        m = (hf_times >= rom_times[0] - eps) & (hf_times <= rom_times[-1] + eps)
        t = hf_times[m]
        return cls(t, np.asarray(hf_values, dtype=float)[m], np.interp(t, rom_times, rom_values))


def wape(pair: SignalPair) -> float:
    """Weighted absolute percentage error of ``pair.rom`` against ``pair.hf``."""
    denom = np.mean(np.abs(pair.hf))
    if denom == 0.0:
        raise EvalError("reference signal is identically zero; WAPE is undefined (use the shifted variant)")
    return float(100.0 * np.mean(np.abs(pair.hf - pair.rom)) / denom)


def wape_shifted_drag(pair: SignalPair) -> float:
    """WAPE of the drag fluctuation: both signals minus the reference mean."""
    mean = pair.hf.mean()
    shifted = SignalPair(pair.times, pair.hf - mean, pair.rom - mean)
    if np.mean(np.abs(shifted.hf)) <= 1e-14 * max(abs(mean), 1.0):
        raise EvalError("reference drag has no fluctuation; the shifted WAPE is undefined")
    return wape(shifted)


def psd_peak_frequency(signal, sample_dt: float, pad: int = 1) -> float:
    """Frequency of the periodogram peak.

    The signal is mean-removed and Hann-tapered (single segment). ``pad``
    zero-pads to ``pad`` times the length, which interpolates the spectrum
    between native bins of width ``1 / (n dt)`` and locates the peak more
    finely; ``pad=1`` gives the native-bin answer.
    """
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1 or len(x) < 4:
        raise EvalError("need a 1-D signal with at least 4 samples")
    if sample_dt <= 0:
        raise EvalError("sample spacing must be positive")
    if np.ptp(x) <= 1e-14 * max(np.abs(x).max(), 1e-300):
        raise EvalError("signal is constant; no spectral peak")
    nfft = int(pad) * len(x)
    f, pxx = periodogram(x, fs=1.0 / sample_dt, window="hann", nfft=nfft, detrend="constant", scaling="spectrum")
    return float(f[1:][np.argmax(pxx[1:])])


def frequency_resolution(n: int, sample_dt: float) -> float:
    return 1.0 / (n * sample_dt)


def strouhal(f: float, U: float, D: float) -> float:
    if U <= 0 or D <= 0:
        raise EvalError("velocity and length scale must be positive")
    return f * D / U


def speedup(hf_wall: float, rom_wall: float) -> float:
    if rom_wall <= 0:
        raise EvalError("reduced wall time must be positive")
    return hf_wall / rom_wall


@dataclass
class ShedCase:
    """Everything needed to compare a reduced model with one HF run."""

    mesh: Mesh
    snapshots: SnapshotSet
    forces: ForceHistory
    basis: PodBasis
    blocks: OperatorBlocks
    nu: float
    u_D: float
    diameter: float = 1.0
    body_patch: str = "cylinder"
    mean_pressure_gradient: bool = True
    rom_dt: float | None = None

    @property
    def window(self):
        return float(self.snapshots.times[0]), float(self.snapshots.times[-1])

    @property
    def snapshot_dt(self) -> float:
        return float(np.median(np.diff(self.snapshots.times)))

    def hf_wall_per_time(self) -> float:
        """HF wall-clock seconds per unit of simulated time."""
        meta = self.snapshots.meta
        return float(meta["wall_time"]) / (meta["n_steps"] * meta["dt"])

    def run_rom(self, n_u, n_p=None, t_span=None, dt=None):
        """Integrate the reduced model from the first snapshot.

        The step is ``dt``, else ``rom_dt``, else the snapshot spacing.
        Returns ``(trajectory, forces)`` with forces of shape ``(n_t, 2)``.
        """
        n_p = n_u if n_p is None else n_p
        system = compose_system(self.blocks.truncate(n_u, n_p), self.nu, self.u_D, self.mean_pressure_gradient)
        basis = self.basis.truncate(n_u, n_p)
        t0, t1 = self.window
        state = initialize(self.mesh, basis, system, self.snapshots.U[:, 0], t0)
        if dt is None:
            dt = self.snapshot_dt if self.rom_dt is None else self.rom_dt
        cfg = RomRunConfig(dt, (t1 - t0) if t_span is None else t_span)
        traj = integrate(state, system, cfg)
        fmap = ForceMap(self.mesh, basis, self.u_D, self.nu, self.diameter, self.body_patch)
        return traj, fmap(traj)


@dataclass
class SweepRow:
    n_u: int
    n_p: int
    energy: float
    eps_lift: float
    eps_drag: float
    rom_wall: float
    speedup: float = float("nan")
    status: str = "ok"


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    frequency_hf: dict = field(default_factory=dict)
    frequency_rom: dict = field(default_factory=dict)
    strouhal_hf: dict = field(default_factory=dict)
    strouhal_rom: dict = field(default_factory=dict)
    speedup: float = float("nan")
    series: dict = field(default_factory=dict)

    def row(self, n_u) -> SweepRow:
        for r in self.rows:
            if r.n_u == n_u:
                return r
        raise KeyError(n_u)

    @property
    def trend_ok(self) -> bool:
        """Lift and drag errors at N=7 both below those at N=3 (if both ran)."""
        try:
            r3, r7 = self.row(3), self.row(7)
        except KeyError:
            return False
        return r7.eps_lift < r3.eps_lift and r7.eps_drag < r3.eps_drag

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n_u", "n_p", "energy", "eps_lift_pct", "eps_drag_pct", "rom_wall_s", "speedup", "status"])
            for r in self.rows:
                w.writerow(
                    [r.n_u, r.n_p, f"{r.energy:.8f}", f"{r.eps_lift:.6g}", f"{r.eps_drag:.6g}", f"{r.rom_wall:.6g}", f"{r.speedup:.6g}", r.status]
                )

    def write_plot_data(self, directory) -> list:
        """One two-column ``x y`` file per stored series; returns the paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, (x, y) in sorted(self.series.items()):
            p = directory / f"{name}.dat"
            np.savetxt(p, np.column_stack([x, y]), fmt="%.10g")
            paths.append(p)
        return paths

    def summary_table(self) -> str:
        """Plain-text table: errors per mode count, then frequencies."""
        lines = []
        ns = [r.n_u for r in self.rows]
        head = "                  " + "".join(f"N_u=N_p={n:<4d}" for n in ns)
        lines.append(head)
        lines.append("eps_lift (%)      " + "".join(f"{r.eps_lift:<12.3f}" for r in self.rows))
        lines.append("eps_drag (%)      " + "".join(f"{r.eps_drag:<12.3f}" for r in self.rows))
        lines.append("energy            " + "".join(f"{r.energy:<12.6f}" for r in self.rows))
        lines.append("(WAPE denominators use mean |x_hf|; drag shifted by the HF mean)")
        if self.frequency_hf:
            lines.append("")
            lines.append(f"{'Re':>8} {'f_HF':>10} {'f_ROM':>10} {'St_HF':>8} {'St_ROM':>8}")
            for re in sorted(self.frequency_hf):
                lines.append(
                    f"{re:8.2f} {self.frequency_hf[re]:10.5f} {self.frequency_rom.get(re, float('nan')):10.5f} "
                    f"{self.strouhal_hf.get(re, float('nan')):8.4f} {self.strouhal_rom.get(re, float('nan')):8.4f}"
                )
        if np.isfinite(self.speedup):
            lines.append("")
            lines.append(f"speedup (HF wall / ROM wall over the same window): {self.speedup:.1f}")
        return "\n".join(lines)

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.to_csv(directory / "mode_sweep.csv")
        self.write_plot_data(directory / "plot-data")
        (directory / "summary.txt").write_text(self.summary_table() + "\n")


def mode_sweep_report(case: ShedCase, n_list=(3, 5, 7, 10), out_dir=None) -> EvalReport:
    """Run the reduced model for each mode count over the training window
    and compare lift and shifted drag with the HF history."""
    report = EvalReport()
    hf = case.forces.window(*case.window)
    report.series["hf_lift"] = (hf.t, hf.lift)
    report.series["hf_drag"] = (hf.t, hf.drag)
    t0, t1 = case.window
    hf_wall = case.hf_wall_per_time() * (t1 - t0)
    for n in n_list:
        energy = cumulative_energy(case.basis.lambda_u, n)
        try:
            traj, f = case.run_rom(n)
        except RomStepError as exc:
            nan = float("nan")
            report.rows.append(SweepRow(n, n, energy, nan, nan, nan, nan, f"failed: {exc}"))
            continue
        lift = SignalPair.resample(hf.t, hf.lift, traj.t, f[:, 1])
        drag = SignalPair.resample(hf.t, hf.drag, traj.t, f[:, 0])
        su = speedup(hf_wall, traj.wall_time)
        report.rows.append(SweepRow(n, n, energy, wape(lift), wape_shifted_drag(drag), traj.wall_time, su))
        report.series[f"rom_lift_N{n}"] = (traj.t, f[:, 1])
        report.series[f"rom_drag_N{n}"] = (traj.t, f[:, 0])
    ok = [r for r in report.rows if r.status == "ok"]
    if ok:
        # the slowest (largest) model gives the conservative figure
        report.speedup = min(r.speedup for r in ok)
    if out_dir is not None:
        report.write(out_dir)
    return report


def shedding_frequency(t, lift, pad=16) -> float:
    """PSD-peak frequency of a uniformly sampled lift history."""
    t = np.asarray(t, dtype=float)
    dt = float(np.median(np.diff(t)))
    if np.max(np.abs(np.diff(t) - dt)) > 1e-6 * dt:
        raise EvalError("lift history is not uniformly sampled")
    return psd_peak_frequency(lift, dt, pad=pad)


def zero_crossing_frequency(t, signal) -> float:
    return 1.0 / estimate_period(t, signal)
