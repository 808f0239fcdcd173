"""Voxelized conduction/convection transport model.

The part is split into cubic voxels of side ``l``.  Each voxel exchanges heat
with its face neighbours by conduction, with the baseplate through its bottom
face (fixed plate temperature) and with the surroundings through every other
uncovered face (Newton cooling).  Collecting the balances gives the linear
autonomous system ``dT/dt = A T + e``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

# face offsets of the 6-neighbourhood, the -z face is handled separately
_LATERAL_AND_TOP = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1))


@dataclass(frozen=True)
class Material:
    """Constant thermophysical properties (SI units)."""

    conductivity: float  # W/(m K)
    density: float  # kg/m^3
    specific_heat: float  # J/(kg K)

    def __post_init__(self):
        for name in ("conductivity", "density", "specific_heat"):
            if not getattr(self, name) > 0:
                raise ValueError(f"material {name} must be positive, got {getattr(self, name)}")

    @property
    def diffusivity(self) -> float:
        return self.conductivity / (self.density * self.specific_heat)

    def heat_capacity(self, voxel_size: float) -> float:
        """Lumped heat capacity of one voxel, J/K."""
        return self.specific_heat * self.density * voxel_size**3


# 316L stainless steel at the solidus temperature
STAINLESS_316L = Material(conductivity=31.1, density=7269.0, specific_heat=720.0)


@dataclass(frozen=True)
class Environment:
    convection_coefficient: float  # W/(m^2 K)
    ambient_temperature: float  # K
    baseplate_temperature: float  # K

    def __post_init__(self):
        if self.convection_coefficient < 0:
            raise ValueError("convection coefficient must be >= 0")
        if not (self.ambient_temperature > 0 and self.baseplate_temperature > 0):
            raise ValueError("temperatures must be positive (kelvin)")


@dataclass(frozen=True, eq=False)
class VoxelMesh:
    """Uniform voxel grid restricted to the occupied cells of a 3-D domain.

    ``coords`` holds integer ``(ix, iy, iz)`` per voxel in C order of the
    domain array, ``index`` maps grid cells back to voxel ids (-1 if empty).
    """

    voxel_size: float
    dims: tuple[int, int, int]
    coords: np.ndarray  # (n, 3) int
    edges: np.ndarray  # (n_edges, 2) int, i < j
    exposed_area: np.ndarray  # (n,) m^2
    baseplate_area: np.ndarray  # (n,) m^2
    index: np.ndarray  # dims-shaped int
    melt_mask: np.ndarray = field(default=None)  # (n,) bool

    @property
    def n(self) -> int:
        return len(self.coords)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def neighbors(self) -> list[list[int]]:
        out = [[] for _ in range(self.n)]
        for i, j in self.edges:
            out[i].append(int(j))
            out[j].append(int(i))
        return out

    def top_layer(self) -> np.ndarray:
        """Voxel ids in the highest occupied z layer, ordered by (ix, iy)."""
        z = self.coords[:, 2]
        ids = np.flatnonzero(z == z.max())
        order = np.lexsort((self.coords[ids, 1], self.coords[ids, 0]))
        return ids[order]

    def permuted(self, perm: np.ndarray) -> "VoxelMesh":
        """Same mesh with voxel ``perm[k]`` renumbered as ``k``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        edges = np.sort(inv[self.edges], axis=1)
        edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
        index = np.where(self.index >= 0, inv[np.maximum(self.index, 0)], -1)
        return VoxelMesh(
            voxel_size=self.voxel_size,
            dims=self.dims,
            coords=self.coords[perm],
            edges=edges,
            exposed_area=self.exposed_area[perm],
            baseplate_area=self.baseplate_area[perm],
            index=index,
            melt_mask=None if self.melt_mask is None else self.melt_mask[perm],
        )


def build_voxel_grid(domain, voxel_size: float, melt_mask=None, baseplate: bool = True) -> VoxelMesh:
    """Mesh every true cell of the boolean ``domain[ix, iy, iz]`` array.

    Cells at ``iz == 0`` sit on the baseplate (unless ``baseplate`` is false,
    in which case their bottom face counts as exposed).  ``melt_mask`` is an
    optional boolean array of the same shape flagging cells to be melted.
    """
    domain = np.asarray(domain, dtype=bool)
    if domain.ndim != 3:
        raise ValueError(f"domain must be 3-D, got shape {domain.shape}")
    if not domain.any():
        raise ValueError("empty domain")
    if not voxel_size > 0:
        raise ValueError("voxel size must be positive")

    coords = np.argwhere(domain)
    index = np.full(domain.shape, -1, dtype=np.int64)
    index[tuple(coords.T)] = np.arange(len(coords))
    padded = np.pad(domain, 1)
    area = voxel_size**2

    edges = []
    for axis in range(3):
        step = [0, 0, 0]
        step[axis] = 1
        nb = coords + step
        inside = nb[:, axis] < domain.shape[axis]
        src = np.flatnonzero(inside)
        dst = index[tuple(nb[inside].T)]
        keep = dst >= 0
        edges.append(np.column_stack([src[keep], dst[keep]]))
    edges = np.concatenate(edges)
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]

    open_faces = np.zeros(len(coords))
    c = coords + 1
    for dx, dy, dz in _LATERAL_AND_TOP:
        open_faces += ~padded[c[:, 0] + dx, c[:, 1] + dy, c[:, 2] + dz]
    below_empty = ~padded[c[:, 0], c[:, 1], c[:, 2] - 1]
    on_plate = coords[:, 2] == 0
    if baseplate:
        baseplate_area = np.where(on_plate, area, 0.0)
        open_faces += below_empty & ~on_plate
    else:
        baseplate_area = np.zeros(len(coords))
        open_faces += below_empty

    mm = None
    if melt_mask is not None:
        melt_mask = np.asarray(melt_mask, dtype=bool)
        if melt_mask.shape != domain.shape:
            raise ValueError("melt mask shape must match the domain")
        mm = melt_mask[tuple(coords.T)]

    return VoxelMesh(
        voxel_size=float(voxel_size),
        dims=tuple(int(d) for d in domain.shape),
        coords=coords,
        edges=edges,
        exposed_area=open_faces * area,
        baseplate_area=baseplate_area,
        index=index,
        melt_mask=mm,
    )


def graph_laplacian(mesh: VoxelMesh) -> sp.csr_matrix:
    """Degree minus adjacency of the voxel graph."""
    n = mesh.n
    i, j = mesh.edges.T if mesh.n_edges else (np.array([], int), np.array([], int))
    adj = sp.coo_matrix((np.ones(2 * len(i)), (np.r_[i, j], np.r_[j, i])), shape=(n, n)).tocsr()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return (sp.diags(deg) - adj).tocsr()


@dataclass(frozen=True, eq=False)
class LinearDynamics:
    """``dT/dt = A T + e`` for the voxel temperatures."""

    A: sp.csr_matrix  # 1/s
    e: np.ndarray  # K/s
    mesh: VoxelMesh
    material: Material
    environment: Environment

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def heat_capacity(self) -> float:
        return self.material.heat_capacity(self.mesh.voxel_size)

    def rate(self, T: np.ndarray) -> np.ndarray:
        return self.A @ T + self.e

    def boundary_loss(self, T: np.ndarray) -> float:
        """Total heat flow out through baseplate and exposed faces, W."""
        return -self.heat_capacity * float(np.sum(self.A @ T + self.e))

    def fixed_point(self) -> np.ndarray:
        """Steady state ``A T* + e = 0`` (requires some boundary coupling)."""
        import scipy.sparse.linalg as spla

        return spla.spsolve(self.A.tocsc(), -self.e)


def assemble_dynamics(mesh: VoxelMesh, material: Material, env: Environment) -> LinearDynamics:
    if mesh.n == 0:
        raise ValueError("empty mesh")
    l = mesh.voxel_size
    alpha = material.diffusivity
    C = material.heat_capacity(l)
    L = graph_laplacian(mesh)
    plate = alpha / l**4 * mesh.baseplate_area
    conv = env.convection_coefficient / C * mesh.exposed_area
    A = -(alpha / l**2 * L + sp.diags(plate + conv))
    e = plate * env.baseplate_temperature + conv * env.ambient_temperature
    return LinearDynamics(A=A.tocsr(), e=e, mesh=mesh, material=material, environment=env)
