"""Mixed Darcy flow ``q = -k grad p, div q = 0`` on the levels of D.

The discrete system is assembled for the negated pressure ``pt = -p``:

    [ M(k)  B^T ] [q ]   [ f ]   f_g = -p_D(g) * o_g  on Dirichlet facets
    [ B     0   ] [pt] = [ 0 ]

where ``o_g = +-1`` aligns the global facet normal with the outward one.
No-flow patches are imposed essentially (``q_g = 0``).  ``B`` and the
Dirichlet template ``f`` are built once per hierarchy: directly on the
finest level and by Galerkin projection above it.  ``M(k)`` on any level
is summed from cached element matrices scaled by ``1 / k``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fespace import assemble_divergence, assemble_flux_mass_local
from .hierarchy import LevelHierarchy
from .linalg import (
    DEFAULT_ATOL,
    DEFAULT_RTOL,
    SaddleSystem,
    SolverError,
    apply_essential_flux_bc,
    build_block_ldu,
    direct_solve,
    gmres,
)
from .mesh import Mesh, MeshError, locate_points

__all__ = [
    "DarcyError",
    "BoundaryCondition",
    "DarcyModel",
    "DarcySolution",
    "assemble_darcy",
    "solve_darcy",
    "qoi_effective_permeability",
    "qoi_point_pressure",
    "layered_log_permeability",
]


class DarcyError(ValueError):
    pass


@dataclass(frozen=True)
class BoundaryCondition:
    marker: str
    type: str  # "dirichlet" or "noflow"
    value: float = 0.0

    def __post_init__(self):
        if self.type not in ("dirichlet", "noflow"):
            raise DarcyError(f"boundary type must be 'dirichlet' or 'noflow', got {self.type!r}")


def _dirichlet_template(mesh: Mesh, bcs) -> np.ndarray:
    f = np.zeros(mesh.n_facets)
    for bc in bcs:
        if bc.type == "dirichlet":
            g = mesh.facets_on(bc.marker)
            f[g] -= bc.value * mesh.boundary_orientation[g]
    return f


def _noflow_facets(mesh: Mesh, bcs) -> np.ndarray:
    dirichlet = np.zeros(mesh.n_facets, dtype=bool)
    for bc in bcs:
        if bc.type == "dirichlet":
            dirichlet[mesh.facets_on(bc.marker)] = True
    b = mesh.boundary_facets
    return np.sort(b[~dirichlet[b]])


@dataclass(eq=False)
class DarcyModel:
    """Per-level data fixed across samples: ``B_l``, ``f_l``, constraints."""

    hierarchy: LevelHierarchy
    bcs: tuple
    B: list = field(default_factory=list)
    f: list = field(default_factory=list)
    noflow: list = field(default_factory=list)
    check_tol: float = 1e-10

    def __post_init__(self):
        h = self.hierarchy
        self.bcs = tuple(b if isinstance(b, BoundaryCondition) else BoundaryCondition(**b) for b in self.bcs)
        markers = set(h[0].mesh.markers)
        for bc in self.bcs:
            if bc.marker not in markers:
                raise DarcyError(f"unknown boundary marker {bc.marker!r}; known: {sorted(markers)}")
        if not any(bc.type == "dirichlet" and len(h[0].mesh.facets_on(bc.marker)) for bc in self.bcs):
            raise DarcyError("at least one nonempty Dirichlet patch is required")
        for l in range(h.n_levels):
            lev = h[l]
            B_direct = assemble_divergence(lev.flux, lev.scalar)
            f_direct = _dirichlet_template(lev.mesh, self.bcs)
            if l == 0:
                B, f = B_direct, f_direct
            else:
                pr = h.pairs[l - 1]
                B = (pr.P_theta.T @ self.B[l - 1] @ pr.P_u).tocsr()
                f = pr.P_u.T @ self.f[l - 1]
                err_B = abs(B - B_direct).max() if B.nnz else 0.0
                err_f = np.abs(f - f_direct).max(initial=0.0)
                scale = max(1.0, np.abs(f_direct).max(initial=0.0))
                if err_B > self.check_tol or err_f > self.check_tol * scale:
                    raise DarcyError(f"Galerkin consistency failed on level {l}: |dB|={err_B:.2e}, |df|={err_f:.2e}")
            self.B.append(B)
            self.f.append(f)
            self.noflow.append(_noflow_facets(lev.mesh, self.bcs))

    def outlet_facets(self, level: int, marker: str) -> np.ndarray:
        return self.hierarchy[level].mesh.facets_on(marker)


def _check_k(k: np.ndarray, n: int) -> np.ndarray:
    k = np.broadcast_to(np.asarray(k, dtype=float), (n,))
    if np.any(~np.isfinite(k)) or np.any(k <= 0):
        raise DarcyError("permeability must be positive and finite in every cell")
    return k


def assemble_darcy(model: DarcyModel, level: int, k) -> SaddleSystem:
    """Darcy system on ``level`` for cellwise permeability ``k``."""
    lev = model.hierarchy[level]
    k = _check_k(k, lev.mesh.n_cells)
    scale = 1.0 / k
    M = assemble_flux_mass_local(lev.flux, lev.local_mass, scale)
    sysm = SaddleSystem(
        M, model.B[level], None, model.f[level].copy(), np.zeros(lev.mesh.n_cells),
        variant="darcy", level=level, space=lev.flux, mass_scale=scale, local_mass=lev.local_mass,
    )
    return apply_essential_flux_bc(sysm, model.noflow[level], 0.0)


@dataclass(frozen=True, eq=False)
class DarcySolution:
    q: np.ndarray
    p: np.ndarray
    level: int
    iterations: int
    seconds: float
    mesh: Mesh | None = None


def solve_darcy(system: SaddleSystem, method: str = "gmres", schur_solver: str = "direct",
                variant: str = "ldu", gs_sweeps: int = 3, rtol: float = DEFAULT_RTOL,
                atol: float = DEFAULT_ATOL, restart: int = 50, maxit: int = 2000) -> DarcySolution:
    """Preconditioned GMRES (block-LDU) or sparse direct solve."""
    t0 = time.perf_counter()
    A = system.matrix()
    b = system.rhs()
    if method == "direct":
        x, its = direct_solve(A, b), 0
    elif method == "gmres":
        P = build_block_ldu(system, gs_sweeps, schur_solver, variant)
        try:
            x, its = gmres(A, b, P, restart=restart, rtol=rtol, atol=atol, maxit=maxit)
        except SolverError as exc:
            raise SolverError(f"Darcy solve on level {system.level} failed: {exc}") from exc
    else:
        raise DarcyError(f"unknown Darcy solver {method!r}")
    q, pt = system.split(x)
    mesh = system.space.mesh if system.space is not None else None
    return DarcySolution(q, -pt, system.level, its, time.perf_counter() - t0, mesh)


def qoi_effective_permeability(sol: DarcySolution, marker: str, mesh: Mesh | None = None) -> float:
    """Outward flux through the patch divided by its measure."""
    mesh = mesh if mesh is not None else sol.mesh
    if marker not in mesh.markers:
        raise DarcyError(f"unknown boundary marker {marker!r}")
    g = mesh.facets_on(marker)
    area = mesh.facet_measures[g].sum()
    return float(np.dot(sol.q[g], mesh.boundary_orientation[g]) / area)


def qoi_point_pressure(sol: DarcySolution, point, mesh: Mesh | None = None) -> float:
    """Pressure of the cell containing ``point`` (lowest index on ties)."""
    mesh = mesh if mesh is not None else sol.mesh
    c = locate_points(mesh, np.asarray(point, dtype=float)[None])[0]
    if c < 0:
        raise MeshError(f"point {list(np.ravel(point))} lies outside the domain")
    return float(sol.p[c])


def layered_log_permeability(mesh: Mesh, n_layers: int = 4, axis: int | None = None, contrast: float = 2.0,
                             seed: int = 0) -> np.ndarray:
    """Synthetic layered baseline: piecewise-constant log k in slabs along ``axis``.

    Layer values are drawn uniformly from ``[-contrast, contrast]``.
    """
    axis = mesh.dim - 1 if axis is None else axis
    rng = np.random.default_rng(seed)
    values = rng.uniform(-contrast, contrast, n_layers)
    x = mesh.cell_centroids[:, axis]
    lo, hi = mesh.vertices[:, axis].min(), mesh.vertices[:, axis].max()
    idx = np.clip(((x - lo) / (hi - lo) * n_layers).astype(int), 0, n_layers - 1)
    return values[idx]


def coarsen_cell_field(values: np.ndarray, P_theta: sp.csr_matrix, coarse_volumes: np.ndarray,
                       fine_volumes: np.ndarray) -> np.ndarray:
    """Volume-weighted average of a fine cell field onto the parent cells."""
    return (P_theta.T @ (fine_volumes * values)) / coarse_volumes
