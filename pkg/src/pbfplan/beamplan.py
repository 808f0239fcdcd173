"""Spot-melt beam planning.

A power field is only an idealization: the real beam is a Gaussian spot that
jumps between dwell points.  The greedy planner builds a spot sequence whose
recent time-averaged deposition tracks a target power field, accounting for
the power laid down while the deflection coils slew the beam between points.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .inputs import InputMap, PowerFieldTrajectory
from .objective import MaskVector

US = 1e-6  # one command tick, s
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class BeamModel:
    power: float = 3000.0  # W
    fwhm: float = 250e-6  # m
    tau: float = 1e-6  # deflection time constant, s
    max_speed: float = 4000.0  # m/s
    substeps: int = 10  # motion samples per microsecond

    def __post_init__(self):
        if not self.power > 0:
            raise ValueError("beam power must be positive")
        if not (self.fwhm > 0 and self.tau >= 0 and self.max_speed > 0):
            raise ValueError("fwhm and max_speed must be positive, tau nonnegative")
        if self.substeps < 1:
            raise ValueError("need at least one motion substep per microsecond")

    @property
    def sigma(self) -> float:
        return self.fwhm / FWHM_PER_SIGMA

    @property
    def command_resolution(self) -> float:
        return US


@dataclass(frozen=True)
class BeamState:
    position: np.ndarray  # (2,) m
    target: np.ndarray  # (2,) m
    time_us: int = 0

    def __post_init__(self):
        if int(self.time_us) != self.time_us or self.time_us < 0:
            raise ValueError("beam time must be a nonnegative integer number of microseconds")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(2))
        object.__setattr__(self, "target", np.asarray(self.target, dtype=float).reshape(2))


def _advance(pos, target, n_sub, model: BeamModel, midpoints: bool = False):
    """Positions after each of ``n_sub`` motion substeps; works on (..., 2) arrays.

    With ``midpoints`` also returns the position half way through each
    substep in time, which is where deposition is sampled.
    """
    h = US / model.substeps
    keep = math.exp(-h / model.tau) if model.tau > 0 else 0.0
    keep_half = math.exp(-0.5 * h / model.tau) if model.tau > 0 else 0.0
    cap = model.max_speed * h
    out = np.empty((n_sub,) + np.shape(pos))
    mid = np.empty_like(out) if midpoints else None
    p = np.array(pos, dtype=float)

    def move(p, frac, limit):
        step = (target - p) * frac
        length = np.linalg.norm(step, axis=-1, keepdims=True)
        return p + step * np.minimum(1.0, limit / np.maximum(length, 1e-300))

    for s in range(n_sub):
        if midpoints:
            mid[s] = move(p, 1.0 - keep_half, 0.5 * cap)
        p = move(p, 1.0 - keep, cap)
        out[s] = p
    return (out, mid) if midpoints else out


def beam_motion_step(state: BeamState, target, duration_us: int, model: BeamModel):
    """Slew toward ``target`` for ``duration_us``; returns (final state, sampled positions).

    Samples are taken at the end of each of the ``duration_us * substeps``
    motion substeps.  Below the speed cap the motion is the exact first-order
    response, so a step lasting one time constant leaves ``1/e`` of the distance.
    """
    duration_us = int(duration_us)
    if duration_us < 1:
        raise ValueError("duration must be at least 1 microsecond")
    target = np.asarray(target, dtype=float)
    samples = _advance(state.position, target, duration_us * model.substeps, model)
    return BeamState(samples[-1], target, state.time_us + duration_us), samples


class Footprint:
    """Gaussian deposition onto the surface voxels of an input map."""

    def __init__(self, imap: InputMap, model: BeamModel):
        self.model = model
        self.l = imap.voxel_size
        self.nx, self.ny = imap.grid_shape
        self.ix = imap.surface_ij[:, 0]
        self.iy = imap.surface_ij[:, 1]
        self._xe = np.arange(self.nx + 1) * self.l
        self._ye = np.arange(self.ny + 1) * self.l

    def __call__(self, positions) -> np.ndarray:
        """Power per surface voxel (W) for beam centres ``positions`` (..., 2)."""
        pos = np.asarray(positions, dtype=float)
        sig = self.model.sigma
        cx = ndtr((self._xe - pos[..., :1]) / sig)
        cy = ndtr((self._ye - pos[..., 1:]) / sig)
        fx = np.diff(cx, axis=-1)
        fy = np.diff(cy, axis=-1)
        return self.model.power * fx[..., self.ix] * fy[..., self.iy]


def gaussian_footprint(beam_pos, imap: InputMap, model: BeamModel) -> np.ndarray:
    """Power (W) each surface voxel receives from a beam centred at ``beam_pos``."""
    return Footprint(imap, model)(beam_pos)


def _bins_from_midpoints(mid, fp: Footprint, power_on: bool):
    """Mean power per microsecond bin from the substep midpoints of one command."""
    sub = fp.model.substeps
    dep = fp(mid)
    if not power_on:
        dep = np.zeros_like(dep)
    return dep.reshape(-1, sub, dep.shape[-1]).mean(axis=1)


@dataclass(eq=False)
class SpotSequence:
    """Beam commands: dwell at a surface voxel centre for an integer number of microseconds."""

    targets: np.ndarray  # (k,) surface voxel index
    positions: np.ndarray  # (k, 2) m
    dwell_us: np.ndarray  # (k,) int
    power: np.ndarray  # (k,) W
    model: BeamModel
    start: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.int64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        self.dwell_us = np.asarray(self.dwell_us, dtype=np.int64).reshape(-1)
        self.power = np.asarray(self.power, dtype=float).reshape(-1)
        self.start = np.asarray(self.start, dtype=float).reshape(2)
        k = len(self.targets)
        if not (len(self.positions) == len(self.dwell_us) == len(self.power) == k):
            raise ValueError("command arrays differ in length")
        if np.any(self.dwell_us < 1):
            raise ValueError("dwell must be at least 1 microsecond")

    def __len__(self):
        return len(self.targets)

    @property
    def start_times_us(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.dwell_us)[:-1]]).astype(np.int64)

    @property
    def total_duration_us(self) -> int:
        return int(self.dwell_us.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t_us", "x_mm", "y_mm", "dwell_us", "power_W"])
        for t, (x, y), d, p in zip(self.start_times_us, self.positions, self.dwell_us, self.power):
            w.writerow([int(t), f"{x * 1e3:.6f}", f"{y * 1e3:.6f}", int(d), f"{p:.6g}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(self.to_csv())


def read_spot_csv(path, imap: InputMap, model: BeamModel, start=None) -> SpotSequence:
    """Parse a spot CSV back, snapping each row to the nearest surface voxel centre.

    The beam starts at the centre of the build area unless ``start`` is given,
    as it does for the planners.
    """
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    pos = np.array([[float(r["x_mm"]) * 1e-3, float(r["y_mm"]) * 1e-3] for r in rows]).reshape(-1, 2)
    d2 = ((pos[:, None, :] - imap.centers[None]) ** 2).sum(axis=-1)
    targets = np.argmin(d2, axis=1) if len(rows) else np.zeros(0, int)
    return SpotSequence(
        targets=targets,
        positions=imap.centers[targets],
        dwell_us=[int(r["dwell_us"]) for r in rows],
        power=[float(r["power_W"]) for r in rows],
        model=model,
        start=_default_start(imap) if start is None else start,
    )


def deposition_bins(seq: SpotSequence, imap: InputMap) -> np.ndarray:
    """Replay ``seq`` and return mean surface power (W) for every microsecond, shape (T, m)."""
    fp = Footprint(imap, seq.model)
    out = np.zeros((seq.total_duration_us, imap.m))
    pos = seq.start
    t = 0
    for target, d, p in zip(seq.positions, seq.dwell_us, seq.power):
        samples, mid = _advance(pos, target, int(d) * seq.model.substeps, seq.model, midpoints=True)
        bins = _bins_from_midpoints(mid, fp, p > 0)
        if p > 0 and p != seq.model.power:
            bins *= p / seq.model.power
        out[t : t + d] = bins
        pos = samples[-1]
        t += int(d)
    return out


def _steps_us(schedule) -> np.ndarray:
    us = schedule.dt / US
    r = np.rint(us)
    if np.any(np.abs(us - r) > 1e-6) or np.any(r < 1):
        raise ValueError("beam planning needs timesteps that are whole microseconds")
    return r.astype(np.int64)


def _spans(schedule):
    """(start_us, length_us, build, knot) per planned interval, last knot excluded."""
    steps = _steps_us(schedule)
    t = 0
    out = []
    for k in range(schedule.N - 1):
        out.append((t, int(steps[k]), bool(schedule.build[k]), k))
        t += int(steps[k])
    return out


def _default_start(imap: InputMap) -> np.ndarray:
    nx, ny = imap.grid_shape
    return np.array([nx, ny], dtype=float) * imap.voxel_size / 2


def greedy_approximate(
    fields: PowerFieldTrajectory,
    schedule,
    model: BeamModel,
    imap: InputMap,
    dwell: int = 50,
    window: float | None = None,
    start=None,
    candidates=None,
) -> SpotSequence:
    """Greedy spot sequence whose windowed average deposition tracks ``fields``.

    At each decision the beam tries every candidate voxel: it slews there and
    dwells ``dwell`` microseconds at full power, depositing along the way.
    The deposition over the trailing ``window`` (clipped to the time elapsed in
    the current build phase) is averaged with the history and compared to the
    target field of the active knot; the candidate with the smallest squared
    error wins, ties going to the lowest index.  Cool intervals become
    zero-power holds.
    """
    dwell = int(dwell)
    if dwell < 1:
        raise ValueError("dwell must be at least 1 microsecond")
    u = fields.u
    if u.shape != (schedule.N, imap.m):
        raise ValueError(f"field trajectory has shape {u.shape}, expected {(schedule.N, imap.m)}")
    cand = np.arange(imap.m) if candidates is None else np.asarray(candidates, dtype=np.int64)
    if len(cand) == 0:
        raise ValueError("no candidate voxels")
    win_us = int(round((window if window is not None else float(schedule.dt[0])) / US))
    win_us = max(win_us, 1)
    fp = Footprint(imap, model)
    centers = imap.centers
    cand_pos = centers[cand]
    spans = _spans(schedule)
    horizon = sum(s[1] for s in spans)

    hist = np.zeros((horizon + dwell, imap.m))
    csum = np.zeros((horizon + dwell + 1, imap.m))
    pos = _default_start(imap) if start is None else np.asarray(start, dtype=float)
    start_pos = pos.copy()
    last_target = int(cand[0])
    targets, dwells, powers = [], [], []
    phase_start = 0
    prev_build = False
    knot_at = np.empty(horizon, dtype=np.int64)
    for t0, length, build, k in spans:
        knot_at[t0 : t0 + length] = k

    def commit(t, bins):
        hist[t : t + len(bins)] = bins
        csum[t + 1 : t + len(bins) + 1] = csum[t] + np.cumsum(bins, axis=0)

    t = 0
    while t < horizon:
        k = knot_at[t]
        build = bool(schedule.build[k])
        if not build:
            end = t
            while end < horizon and not schedule.build[knot_at[end]]:
                end += 1
            d = end - t
            targets.append(last_target)
            dwells.append(d)
            powers.append(0.0)
            samples = _advance(pos, centers[last_target], d * model.substeps, model)
            commit(t, np.zeros((d, imap.m)))
            pos = samples[-1]
            t = end
            prev_build = False
            continue
        if not prev_build:
            phase_start = t
            prev_build = True
        end = t
        while end < horizon and schedule.build[knot_at[end]]:
            end += 1
        d = min(dwell, end - t)
        # slew and dwell toward every candidate at once
        samples, mid = _advance(
            np.broadcast_to(pos, cand_pos.shape), cand_pos, d * model.substeps, model, midpoints=True
        )
        dep = fp(mid)  # (d*sub, c, m)
        dep = dep.reshape(d, model.substeps, len(cand), imap.m).mean(axis=1)
        new = dep.sum(axis=0)  # (c, m)
        t_end = t + d
        lo = max(phase_start, t_end - win_us)
        past = csum[t] - csum[lo]
        span = t_end - lo
        target = u[k]
        err = (past[None, :] + new) / span - target[None, :]
        score = np.sum(err * err, axis=1)
        best = int(np.argmin(score))
        j = int(cand[best])
        targets.append(j)
        dwells.append(d)
        powers.append(model.power)
        commit(t, dep[:, best, :])
        pos = samples[-1, best]
        last_target = j
        t = t_end

    return SpotSequence(
        targets=targets,
        positions=centers[np.asarray(targets, dtype=np.int64)] if targets else np.zeros((0, 2)),
        dwell_us=dwells,
        power=powers,
        model=model,
        start=start_pos,
    )


def random_spot_plan(
    imap: InputMap,
    mask: MaskVector,
    model: BeamModel,
    dwell: int,
    schedule,
    seed: int,
    start=None,
) -> SpotSequence:
    """Uniformly random mask voxels (never the same one twice in a row) over the build spans."""
    surf = np.flatnonzero(mask.mu[imap.surface_ids])
    if len(surf) == 0:
        raise ValueError("mask has no surface voxels")
    dwell = int(dwell)
    if dwell < 1:
        raise ValueError("dwell must be at least 1 microsecond")
    rng = np.random.default_rng(seed)
    targets, dwells, powers = [], [], []
    last = -1
    for t0, length, build, k in _merge_spans(_spans(schedule)):
        if not build:
            targets.append(last if last >= 0 else int(surf[0]))
            dwells.append(length)
            powers.append(0.0)
            continue
        left = length
        while left > 0:
            if len(surf) == 1:
                j = int(surf[0])
            else:
                j = last
                while j == last:
                    j = int(surf[rng.integers(len(surf))])
            d = min(dwell, left)
            targets.append(j)
            dwells.append(d)
            powers.append(model.power)
            last = j
            left -= d
    return SpotSequence(
        targets=targets,
        positions=imap.centers[np.asarray(targets, dtype=np.int64)] if targets else np.zeros((0, 2)),
        dwell_us=dwells,
        power=powers,
        model=model,
        start=_default_start(imap) if start is None else start,
    )


def _merge_spans(spans):
    merged = []
    for t0, length, build, k in spans:
        if merged and merged[-1][2] == build:
            a, b, c, d = merged[-1]
            merged[-1] = (a, b + length, c, d)
        else:
            merged.append((t0, length, build, k))
    return merged


def uniform_field_plan(mask: MaskVector, schedule, imap: InputMap, power: float | None = None) -> PowerFieldTrajectory:
    """Equal power on every mask surface voxel during build knots, nothing elsewhere."""
    on = mask.mu[imap.surface_ids]
    if not on.any():
        raise ValueError("mask has no surface voxels")
    P = imap.p_max if power is None else float(power)
    u = np.zeros((schedule.N, imap.m))
    u[np.ix_(schedule.build, on)] = P / on.sum()
    return PowerFieldTrajectory(u)
