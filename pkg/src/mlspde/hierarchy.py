"""Paired level data: nested unstructured meshes of D and structured meshes of D-bar.

Level 0 is the finest.  ``pairs[l]`` and ``pairs_bar[l]`` interpolate from
level ``l + 1`` to level ``l``; ``transfers[l]`` projects D-bar fields on
level ``l`` onto D.  Only level 0 is transferred geometrically; coarser
transfers come from the recursive Galerkin formula.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fespace import (
    FluxSpace,
    InterpolationPair,
    ScalarSpace,
    build_interpolations,
    galerkin_local_mass,
)
from .mesh import Mesh, build_structured_mesh, uniform_refine
from .timing import StageTimer
from .transfer import TransferOperator, build_transfer, coarsen_transfer

__all__ = ["Level", "LevelHierarchy", "embedding_box"]


@dataclass(eq=False)
class Level:
    index: int
    mesh: Mesh
    mesh_bar: Mesh
    flux: FluxSpace = field(init=False)
    scalar: ScalarSpace = field(init=False)
    flux_bar: FluxSpace = field(init=False)
    scalar_bar: ScalarSpace = field(init=False)
    local_mass: np.ndarray | None = None
    local_mass_bar: np.ndarray | None = None

    def __post_init__(self):
        self.flux = FluxSpace(self.mesh)
        self.scalar = ScalarSpace(self.mesh)
        self.flux_bar = FluxSpace(self.mesh_bar)
        self.scalar_bar = ScalarSpace(self.mesh_bar)


def embedding_box(mesh: Mesh, margin: float):
    """Axis-aligned box enclosing ``mesh`` with ``margin`` on every side."""
    if margin < 0:
        raise ValueError("embedding margin must be nonnegative")
    lo = mesh.vertices.min(axis=0) - margin
    hi = mesh.vertices.max(axis=0) + margin
    return list(zip(lo.tolist(), hi.tolist()))


@dataclass(eq=False)
class LevelHierarchy:
    levels: list
    pairs: list
    pairs_bar: list
    transfers: list
    timer: StageTimer

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def coarsest(self) -> int:
        return len(self.levels) - 1

    @property
    def dim(self) -> int:
        return self.levels[0].mesh.dim

    def __getitem__(self, l: int) -> Level:
        return self.levels[l]

    def Pbar(self, l: int) -> sp.csr_matrix:
        """Block interpolation diag(Pbar_u, Pbar_theta) from level l+1 to l."""
        p = self.pairs_bar[l]
        return sp.block_diag([p.P_u, p.P_theta], format="csr")

    @classmethod
    def build(cls, coarse: Mesh, coarse_bar: Mesh, n_refine: int, workers: int = 1,
              leaf_capacity: int = 8, max_depth: int = 20, timer: StageTimer | None = None):
        """Refine both coarse meshes ``n_refine`` times; levels ``0..n_refine``."""
        if n_refine < 0:
            raise ValueError("number of refinements must be nonnegative")
        if coarse.dim != coarse_bar.dim:
            raise ValueError("D and D-bar meshes differ in dimension")
        if coarse_bar.kind != "box":
            raise ValueError("the embedding mesh must be a structured box mesh")
        timer = timer if timer is not None else StageTimer()
        meshes, bars, rmaps, rmaps_bar = [coarse], [coarse_bar], [], []
        for _ in range(n_refine):
            m, r = uniform_refine(meshes[-1])
            mb, rb = uniform_refine(bars[-1])
            meshes.append(m)
            bars.append(mb)
            rmaps.append(r)
            rmaps_bar.append(rb)
        meshes, bars, rmaps, rmaps_bar = meshes[::-1], bars[::-1], rmaps[::-1], rmaps_bar[::-1]
        levels = [Level(i, m, mb) for i, (m, mb) in enumerate(zip(meshes, bars))]
        pairs: list[InterpolationPair] = []
        pairs_bar: list[InterpolationPair] = []
        for l in range(n_refine):
            fine, crs = levels[l], levels[l + 1]
            pairs.append(build_interpolations(crs.flux, fine.flux, rmaps[l]))
            pairs_bar.append(build_interpolations(crs.flux_bar, fine.flux_bar, rmaps_bar[l]))
        # cached element matrices: direct on the finest level, Galerkin above
        levels[0].local_mass = levels[0].flux.local_mass
        levels[0].local_mass_bar = levels[0].flux_bar.local_mass
        for l in range(n_refine):
            fine, crs = levels[l], levels[l + 1]
            crs.local_mass = galerkin_local_mass(crs.flux, fine.flux, pairs[l], fine.local_mass)
            crs.local_mass_bar = galerkin_local_mass(crs.flux_bar, fine.flux_bar, pairs_bar[l], fine.local_mass_bar)
        transfers: list[TransferOperator] = [
            build_transfer(meshes[0], bars[0], 0, workers, leaf_capacity, max_depth, timer)
        ]
        for l in range(n_refine):
            transfers.append(
                coarsen_transfer(transfers[l], pairs[l].P_theta, pairs_bar[l].P_theta, levels[l + 1].mesh.cell_volumes)
            )
        return cls(levels, pairs, pairs_bar, transfers, timer)

    @classmethod
    def from_config(cls, mesh_d: Mesh, margin: float, cells_bar, n_refine: int, **kw):
        box = embedding_box(mesh_d, margin)
        if np.isscalar(cells_bar):
            cells_bar = [int(cells_bar)] * mesh_d.dim
        return cls.build(mesh_d, build_structured_mesh(box, cells_bar), n_refine, **kw)
