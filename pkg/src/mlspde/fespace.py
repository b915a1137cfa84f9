"""Lowest-order Raviart-Thomas and piecewise-constant spaces.

Flux degrees of freedom are facet *integrals* of the normal component,
measured against the global facet normal of :class:`~mlspde.mesh.Mesh`.
With that normalisation the local basis of a cell, oriented outward, is

* simplex, facet opposite vertex ``v``:  ``(x - v) / (d |K|)``
* box cell, facet with opposite face at ``x_a = c``:  ``e_a (x_a - c) / |K|``

so every local basis function has unit outward flux and divergence
``1 / |K|``.  The divergence matrix therefore carries the orientation
signs only (entries +-1).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, MeshError, RefinementMap

__all__ = [
    "FluxSpace",
    "ScalarSpace",
    "InterpolationPair",
    "assemble_flux_mass",
    "assemble_flux_mass_local",
    "assemble_scalar_mass",
    "assemble_divergence",
    "build_interpolations",
    "local_flux_mass",
    "galerkin_local_mass",
    "dump_matrix_market",
]


class FESpaceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FluxSpace:
    mesh: Mesh

    @property
    def ndofs(self) -> int:
        return self.mesh.n_facets

    @property
    def cell_dofs(self) -> np.ndarray:
        """Local-to-global map: (n_cells, facets_per_cell)."""
        return self.mesh.cell_facets

    @property
    def cell_signs(self) -> np.ndarray:
        return self.mesh.cell_facet_signs

    @cached_property
    def local_mass(self) -> np.ndarray:
        """Outward-oriented element mass matrices, (n_cells, nfc, nfc)."""
        return local_flux_mass(self.mesh)

    def opposite_points(self) -> np.ndarray:
        """Per cell and local facet, the point ``c`` in the basis formula."""
        m = self.mesh
        x = m.vertices[m.cells]
        if m.kind == "simplex":
            return x  # local facet i is opposite vertex i
        lo, hi = m.cell_bounds
        d = m.dim
        out = np.empty((m.n_cells, 2 * d, d))
        for a in range(d):
            out[:, 2 * a, :] = hi  # lo face: basis vanishes on the hi face
            out[:, 2 * a + 1, :] = lo
        return out

    def eval_local_basis(self, cells: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Outward local basis values at ``points`` (n, d) inside ``cells`` -> (n, nfc, d)."""
        m = self.mesh
        c = self.opposite_points()[cells]  # (n, nfc, d)
        vol = m.cell_volumes[cells]
        diff = points[:, None, :] - c
        if m.kind == "simplex":
            return diff / (m.dim * vol)[:, None, None]
        d = m.dim
        out = np.zeros_like(diff)
        for a in range(d):
            for k in (2 * a, 2 * a + 1):
                out[:, k, a] = diff[:, k, a] / vol
        return out


@dataclass(frozen=True, eq=False)
class ScalarSpace:
    mesh: Mesh

    @property
    def ndofs(self) -> int:
        return self.mesh.n_cells


@dataclass(frozen=True, eq=False)
class InterpolationPair:
    """Coarse-to-fine operators for one refinement step."""

    P_u: sp.csr_matrix
    P_theta: sp.csr_matrix
    rmap: RefinementMap


# ------------------------------------------------------------ element data
def local_flux_mass(mesh: Mesh) -> np.ndarray:
    """Exact element mass matrices of the outward local RT0 basis."""
    d = mesh.dim
    vol = mesh.cell_volumes
    if mesh.kind == "box":
        lo, hi = mesh.cell_bounds
        h = hi - lo
        out = np.zeros((mesh.n_cells, 2 * d, 2 * d))
        for a in range(d):
            s = h[:, a] ** 2 / vol
            i, j = 2 * a, 2 * a + 1
            out[:, i, i] = out[:, j, j] = s / 3.0
            out[:, i, j] = out[:, j, i] = -s / 6.0
        return out
    x = mesh.vertices[mesh.cells]  # (nc, d+1, d)
    # int_K lam_k lam_l = |K| (1 + delta_kl) / ((d+1)(d+2))
    n = d + 1
    lam = (np.ones((n, n)) + np.eye(n)) / ((d + 1) * (d + 2))
    diff = x[:, None, :, :] - x[:, :, None, :]  # diff[c, i, k] = v_k - v_i
    # M_ij = sum_kl (v_k - v_i).(v_l - v_j) lam_kl |K| / (d |K|)^2
    g = np.einsum("cikx,kl,cjlx->cij", diff, lam, diff)
    return g / (d * d * vol)[:, None, None]


def _scatter(mesh: Mesh, local: np.ndarray, n: int) -> sp.csr_matrix:
    dofs = mesh.cell_facets
    nfc = dofs.shape[1]
    rows = np.repeat(dofs, nfc, axis=1).ravel()
    cols = np.tile(dofs, (1, nfc)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def _signed(space: FluxSpace, local: np.ndarray) -> np.ndarray:
    s = space.cell_signs
    return local * s[:, :, None] * s[:, None, :]


def assemble_flux_mass(space: FluxSpace, coeff=None) -> sp.csr_matrix:
    """Monolithic RT0 mass matrix, optionally weighted by a per-cell coefficient.

    Element integrals are recomputed from the mesh geometry on every call.
    """
    local = local_flux_mass(space.mesh)
    if coeff is not None:
        coeff = np.broadcast_to(np.asarray(coeff, dtype=float), (space.mesh.n_cells,))
        if np.any(~np.isfinite(coeff)) or np.any(coeff <= 0):
            raise FESpaceError("mass coefficient must be positive and finite")
        local = local * coeff[:, None, None]
    return _scatter(space.mesh, _signed(space, local), space.ndofs)


def assemble_flux_mass_local(space: FluxSpace, local: np.ndarray, scale=None) -> sp.csr_matrix:
    """Sum of ``scale_e L_e^T M_e L_e`` over cells, from cached local matrices."""
    if scale is not None:
        scale = np.asarray(scale, dtype=float)
        if np.any(~np.isfinite(scale)) or np.any(scale <= 0):
            raise FESpaceError("mass coefficient must be positive and finite")
        local = local * scale[:, None, None]
    return _scatter(space.mesh, _signed(space, local), space.ndofs)


def assemble_scalar_mass(space: ScalarSpace) -> sp.dia_matrix:
    return sp.diags(space.mesh.cell_volumes).tocsr()


def assemble_divergence(flux: FluxSpace, scalar: ScalarSpace) -> sp.csr_matrix:
    if flux.mesh is not scalar.mesh:
        raise FESpaceError("flux and scalar spaces live on different meshes")
    m = flux.mesh
    dofs = m.cell_facets
    rows = np.repeat(np.arange(m.n_cells), dofs.shape[1])
    return sp.csr_matrix((flux.cell_signs.ravel(), (rows, dofs.ravel())), shape=(m.n_cells, m.n_facets))


# ---------------------------------------------------------- interpolation
def build_interpolations(coarse: FluxSpace, fine: FluxSpace, rmap: RefinementMap) -> InterpolationPair:
    """Canonical embeddings of the coarse RT0 and P0 spaces into the fine ones."""
    cm, fm = coarse.mesh, fine.mesh
    if rmap.coarse is not cm or rmap.fine is not fm:
        raise FESpaceError("refinement map does not match the given spaces")
    parent = rmap.parent
    nc_f, nc_c = fm.n_cells, cm.n_cells
    P_theta = sp.csr_matrix((np.ones(nc_f), (np.arange(nc_f), parent)), shape=(nc_f, nc_c))

    fp = rmap.facet_parent
    on = np.flatnonzero(fp >= 0)
    inner = np.flatnonzero(fp < 0)
    # fine facet inside a coarse facet F: constant normal flux dof_F / |F|
    dots = np.einsum("fi,fi->f", fm.facet_normals[on], cm.facet_normals[fp[on]])
    v_on = np.sign(dots) * fm.facet_measures[on] / cm.facet_measures[fp[on]]
    # fine facet interior to coarse cell c: |g| psi(x_g) . n_g for each coarse local facet
    c = rmap.facet_cell[inner]
    psi = coarse.eval_local_basis(c, fm.facet_centroids[inner])  # (n, nfc, d)
    flux = np.einsum("njd,nd->nj", psi, fm.facet_normals[inner]) * fm.facet_measures[inner][:, None]
    flux *= coarse.cell_signs[c]
    rows = np.concatenate([on, np.repeat(inner, flux.shape[1])])
    cols = np.concatenate([fp[on], cm.cell_facets[c].ravel()])
    vals = np.concatenate([v_on, flux.ravel()])
    keep = np.abs(vals) > 1e-14
    P_u = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(fm.n_facets, cm.n_facets))
    if not np.all(np.isin(np.arange(nc_f), rmap.child_cells.ravel())):
        raise FESpaceError("meshes are not nested")
    return InterpolationPair(P_u, P_theta, rmap)


def galerkin_local_mass(coarse: FluxSpace, fine: FluxSpace, pair: InterpolationPair, fine_local: np.ndarray):
    """Coarse element mass matrices by local Galerkin projection of child matrices.

    For every coarse cell ``e`` the children's (outward) local matrices are
    combined through the restriction of ``P_u`` to the children's dofs, so
    the result depends on finer-level data only through ``fine_local``.
    """
    cm, fm = coarse.mesh, fine.mesh
    children = pair.rmap.child_cells  # (nc_c, nch)
    fdofs = fm.cell_facets[children]  # (nc_c, nch, nfl)
    fsgn = fm.cell_facet_signs[children]
    cdofs = cm.cell_facets  # (nc_c, ncl)
    csgn = cm.cell_facet_signs
    P = pair.P_u.tocsr()
    nc_c, nch, nfl = fdofs.shape
    ncl = cdofs.shape[1]
    r = np.broadcast_to(fdofs[:, :, :, None], (nc_c, nch, nfl, ncl)).ravel()
    q = np.broadcast_to(cdofs[:, None, None, :], (nc_c, nch, nfl, ncl)).ravel()
    vals = np.asarray(P[r, q]).reshape(nc_c, nch, nfl, ncl)
    Q = vals * fsgn[:, :, :, None] * csgn[:, None, None, :]
    Mf = fine_local[children]  # (nc_c, nch, nfl, nfl)
    return np.einsum("cknj,cknm,ckml->cjl", Q, Mf, Q)


def dump_matrix_market(A, path) -> None:
    """Coordinate-format ASCII dump (1-based indices) for debugging."""
    A = sp.coo_matrix(A)
    lines = ["%%MatrixMarket matrix coordinate real general", f"{A.shape[0]} {A.shape[1]} {A.nnz}"]
    lines += [f"{i + 1} {j + 1} {v:.17g}" for i, j, v in zip(A.row, A.col, A.data)]
    Path(path).write_text("\n".join(lines) + "\n")
