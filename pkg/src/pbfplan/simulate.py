"""Forward simulation of power-field and spot-sequence plans, plus evaluation metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .beamplan import US, SpotSequence, deposition_bins
from .inputs import InputMap, PowerFieldTrajectory
from .objective import MaskVector, mask_variance
from .transcription import MeltLimits, Schedule, StepOperator
from .transport import LinearDynamics, VoxelMesh


@dataclass(eq=False)
class SimulationResult:
    times: np.ndarray  # (K,) s
    states: np.ndarray  # (K, n) K
    weights: np.ndarray  # (K,) quadrature weight of each state, s
    knot_rows: np.ndarray  # (N,) row of each knot in ``states``
    variance: np.ndarray  # (K,) K^2
    cumulative: np.ndarray  # (K,) K^2 s
    peak: np.ndarray  # (n,) K
    input_energy: float  # J
    boundary_energy: float  # J lost through plate and exposed faces
    energy_change: float  # J

    @property
    def total_variance(self) -> float:
        return float(self.cumulative[-1])

    @property
    def knot_states(self) -> np.ndarray:
        return self.states[self.knot_rows]

    @property
    def energy_residual(self) -> float:
        """Relative mismatch of the energy balance."""
        lhs = self.energy_change
        rhs = self.input_energy - self.boundary_energy
        scale = max(abs(self.input_energy), abs(self.boundary_energy), abs(lhs), 1e-300)
        return abs(lhs - rhs) / scale

    def timeseries_csv(self, mask: MaskVector) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_s", "variance_K2", "cumulative_K2s", "mask_max_K", "mask_min_K"])
        on = self.states[:, mask.mu]
        for t, v, c, hi, lo in zip(self.times, self.variance, self.cumulative, on.max(axis=1), on.min(axis=1)):
            w.writerow([f"{t:.9e}", f"{v:.9e}", f"{c:.9e}", f"{hi:.6f}", f"{lo:.6f}"])
        return buf.getvalue()


@dataclass(frozen=True)
class MeltMetrics:
    over: int
    under: int

    @property
    def cumulative(self) -> int:
        return self.over + self.under


def _grid(schedule: Schedule, substeps: int):
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    steps = [schedule.dt[k] / substeps for k in range(schedule.N - 1)]
    times = [0.0]
    weights = []
    knot_rows = [0]
    t = 0.0
    for k, h in enumerate(steps):
        for s in range(substeps):
            weights.append(h)
            t = schedule.times[k] + (s + 1) * h
            times.append(t)
        knot_rows.append(len(times) - 1)
    weights.append(float(schedule.dt[-1]))
    times = np.array(times)
    times[knot_rows] = schedule.times
    return np.array(steps), times, np.array(weights), np.array(knot_rows)


def _run(dyn: LinearDynamics, imap: InputMap, T_init, schedule, substeps, mask, power_at):
    """Integrate with a zero-order hold; ``power_at(k, s, h)`` gives the surface power."""
    steps, times, weights, knot_rows = _grid(schedule, substeps)
    T = np.array(T_init, dtype=float)
    if T.shape != (dyn.n,):
        raise ValueError(f"initial state has shape {T.shape}, expected ({dyn.n},)")
    C = dyn.heat_capacity
    ops: dict[float, StepOperator] = {}
    states = [T]
    e_in = 0.0
    e_out = 0.0
    for k, h in enumerate(steps):
        op = ops.get(h)
        if op is None:
            op = ops[h] = StepOperator(dyn, imap, h)
        for s in range(substeps):
            u = power_at(k, s, h)
            T = op.step(T, u)
            e_in += h * float(np.sum(u))
            e_out += h * dyn.boundary_loss(T)
            states.append(T)
    states = np.array(states)
    var = mask_variance(states, mask)
    return SimulationResult(
        times=times,
        states=states,
        weights=weights,
        knot_rows=knot_rows,
        variance=var,
        cumulative=np.cumsum(var * weights),
        peak=states.max(axis=0),
        input_energy=e_in,
        boundary_energy=e_out,
        energy_change=C * float(np.sum(states[-1] - states[0])),
    )


def _mask_of(dyn, mask):
    if mask is not None:
        return mask
    if dyn.mesh.melt_mask is None:
        raise ValueError("no mask given and the mesh carries none")
    return MaskVector(dyn.mesh.melt_mask)


def simulate_fields(
    dyn: LinearDynamics,
    imap: InputMap,
    fields: PowerFieldTrajectory,
    T_init,
    schedule: Schedule,
    substeps: int = 1,
    mask: MaskVector | None = None,
) -> SimulationResult:
    """Implicit Euler at ``dt/substeps`` with each knot's power held over its step."""
    u = fields.u
    if u.shape != (schedule.N, imap.m):
        raise ValueError(f"power trajectory has shape {u.shape}, expected {(schedule.N, imap.m)}")
    mask = _mask_of(dyn, mask)
    return _run(dyn, imap, T_init, schedule, substeps, mask, lambda k, s, h: u[k])


def simulate_beam(
    dyn: LinearDynamics,
    imap: InputMap,
    seq: SpotSequence,
    T_init,
    schedule: Schedule,
    substeps: int = 1,
    mask: MaskVector | None = None,
) -> SimulationResult:
    """Replay a spot sequence on the thermal grid of ``schedule``.

    Beam motion is integrated at sub-microsecond resolution; the deposition of
    each microsecond is averaged over every thermal substep.  Time past the end
    of the sequence is unpowered.
    """
    mask = _mask_of(dyn, mask)
    bins = deposition_bins(seq, imap)
    csum = np.vstack([np.zeros(imap.m), np.cumsum(bins, axis=0)])
    total = len(bins)
    starts = np.r_[0.0, np.cumsum(schedule.dt[:-1])] / US

    def power_at(k, s, h):
        h_us = h / US
        if abs(h_us - round(h_us)) > 1e-6:
            raise ValueError("beam replay needs thermal substeps of whole microseconds")
        a = int(round(starts[k] + s * h_us))
        b = a + int(round(h_us))
        lo, hi = min(a, total), min(b, total)
        return (csum[hi] - csum[lo]) / (b - a)

    return _run(dyn, imap, T_init, schedule, substeps, mask, power_at)


def melt_metrics(result: SimulationResult, mask: MaskVector, limits: MeltLimits) -> MeltMetrics:
    """Off-mask voxels that ever pass the solidus, mask voxels that never reach the liquidus."""
    peak = result.peak
    over = int(np.sum(peak[~mask.mu] > limits.solidus))
    under = int(np.sum(peak[mask.mu] < limits.liquidus))
    return MeltMetrics(over=over, under=under)


def top_layer_image(T, mesh: VoxelMesh) -> np.ndarray:
    """Top-layer temperatures as a (ny, nx) array, NaN where there is no voxel."""
    z = mesh.coords[:, 2]
    top = z == z.max()
    img = np.full((mesh.dims[1], mesh.dims[0]), np.nan)
    img[mesh.coords[top, 1], mesh.coords[top, 0]] = np.asarray(T)[top]
    return img


def write_pgm(path, image, vmin: float, vmax: float) -> None:
    """Plain (P2) 8-bit grayscale; NaN cells are written black."""
    img = np.asarray(image, dtype=float)
    span = max(vmax - vmin, 1e-12)
    g = np.clip(np.round((img - vmin) / span * 255.0), 0, 255)
    g = np.where(np.isnan(img), 0, g).astype(int)
    lines = ["P2", f"{img.shape[1]} {img.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in g]
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
