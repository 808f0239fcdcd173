"""Power-field input model: commanded power on each top-surface voxel."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .transport import Material, VoxelMesh


@dataclass(frozen=True, eq=False)
class InputMap:
    """Maps the ``m`` surface powers (W) onto the ``n`` temperature rates.

    ``surface_ids[j]`` is the voxel heated by input ``j``; ``surface_ij`` holds
    its in-plane grid coordinates, used by the beam model.
    """

    B: sp.csc_matrix  # K/(s W)
    surface_ids: np.ndarray
    surface_ij: np.ndarray
    voxel_size: float
    grid_shape: tuple[int, int]
    heat_capacity: float
    p_min: float = 3000.0
    p_max: float = 3000.0

    def __post_init__(self):
        if not 0 <= self.p_min <= self.p_max:
            raise ValueError(f"need 0 <= P_min <= P_max, got {self.p_min}, {self.p_max}")

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def n(self) -> int:
        return self.B.shape[0]

    @property
    def fixed_power(self) -> bool:
        return self.p_min == self.p_max

    @property
    def centers(self) -> np.ndarray:
        """In-plane surface voxel centres, (m, 2) in metres."""
        return (self.surface_ij + 0.5) * self.voxel_size

    def with_power(self, p_min: float, p_max: float | None = None) -> "InputMap":
        return InputMap(
            B=self.B,
            surface_ids=self.surface_ids,
            surface_ij=self.surface_ij,
            voxel_size=self.voxel_size,
            grid_shape=self.grid_shape,
            heat_capacity=self.heat_capacity,
            p_min=p_min,
            p_max=p_min if p_max is None else p_max,
        )


def build_power_field_input(
    mesh: VoxelMesh, material: Material, p_min: float = 3000.0, p_max: float = 3000.0
) -> InputMap:
    """One input per voxel of the top layer; power lands in that voxel only."""
    ids = mesh.top_layer()
    C = material.heat_capacity(mesh.voxel_size)
    m = len(ids)
    B = sp.csc_matrix((np.full(m, 1.0 / C), (ids, np.arange(m))), shape=(mesh.n, m))
    return InputMap(
        B=B,
        surface_ids=ids,
        surface_ij=mesh.coords[ids, :2].copy(),
        voxel_size=mesh.voxel_size,
        grid_shape=(mesh.dims[0], mesh.dims[1]),
        heat_capacity=C,
        p_min=p_min,
        p_max=p_max,
    )


@dataclass(frozen=True, eq=False)
class PowerFieldTrajectory:
    """Per-knot surface power, shape (N, m) in W."""

    u: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u", np.atleast_2d(np.asarray(self.u, dtype=float)))

    def __len__(self):
        return len(self.u)

    @property
    def totals(self) -> np.ndarray:
        return self.u.sum(axis=1)


@dataclass
class PowerFieldReport:
    negative: list = field(default_factory=list)  # (knot, input) pairs
    below_min: list = field(default_factory=list)  # knot ids
    above_max: list = field(default_factory=list)
    cool_nonzero: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.negative or self.below_min or self.above_max or self.cool_nonzero)


def validate_power_field(
    traj: PowerFieldTrajectory, imap: InputMap, build, rtol: float = 1e-9
) -> PowerFieldReport:
    """Check nonnegativity, total-power bounds on build knots and zero power on cool knots.

    ``build`` is a boolean phase tag per knot (True = build).
    """
    u = traj.u
    build = np.asarray(build, dtype=bool)
    if u.shape[1] != imap.m:
        raise ValueError(f"power field has {u.shape[1]} inputs, map expects {imap.m}")
    if len(build) != len(u):
        raise ValueError(f"{len(u)} knots but {len(build)} phase tags")
    slack = rtol * max(imap.p_max, 1.0)
    rep = PowerFieldReport()
    rep.negative = [tuple(map(int, kj)) for kj in np.argwhere(u < -slack)]
    tot = u.sum(axis=1)
    for k in range(len(u)):
        if build[k]:
            if tot[k] < imap.p_min - slack:
                rep.below_min.append(k)
            if tot[k] > imap.p_max + slack:
                rep.above_max.append(k)
        elif np.any(np.abs(u[k]) > slack):
            rep.cool_nonzero.append(k)
    return rep
