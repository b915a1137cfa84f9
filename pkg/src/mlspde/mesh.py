"""Structured box meshes and simplicial meshes with nested uniform refinement.

Two mesh families are supported in 2D and 3D:

* ``kind="box"``: tensor-product grids of quadrilaterals / hexahedra, cells
  numbered lexicographically (x fastest).  Every facet normal points in the
  positive axis direction, which coincides with "lower to higher cell index"
  for interior facets.
* ``kind="simplex"``: triangles / tetrahedra.  Interior facet normals point
  from the lower to the higher cell index, boundary normals point outward.

Local facet numbering: for simplices local facet ``i`` is opposite local
vertex ``i``; for box cells the order is ``(x-lo, x-hi, y-lo, y-hi[, z-lo,
z-hi])`` and local vertex ``i + 2j + 4k`` sits at the corner ``(i, j, k)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping

import numpy as np

__all__ = [
    "MeshError",
    "Mesh",
    "RefinementMap",
    "build_structured_mesh",
    "build_simplicial_mesh",
    "uniform_refine",
    "read_mesh",
    "write_mesh",
    "locate_points",
]

AXIS_NAMES = "xyz"
GEOM_TOL = 1e-12


class MeshError(ValueError):
    """Invalid geometry, dimension, or mesh file."""


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    cells: np.ndarray
    kind: str
    markers: Mapping[str, np.ndarray] = field(default_factory=dict)
    # box meshes only: ((lo, hi), ...) per axis and cells per axis
    extents: tuple | None = None
    shape: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("box", "simplex"):
            raise MeshError(f"unknown mesh kind {self.kind!r}")
        if self.dim not in (2, 3):
            raise MeshError(f"unsupported dimension {self.dim}")
        expected = 2**self.dim if self.kind == "box" else self.dim + 1
        if self.cells.ndim != 2 or self.cells.shape[1] != expected:
            raise MeshError(f"{self.kind} cells in {self.dim}D need {expected} vertices")
        self.vertices.setflags(write=False)
        self.cells.setflags(write=False)

    # ------------------------------------------------------------ sizes
    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_facets(self) -> int:
        return self.facets.shape[0]

    @property
    def facets_per_cell(self) -> int:
        return 2 * self.dim if self.kind == "box" else self.dim + 1

    # ---------------------------------------------------- cell geometry
    @cached_property
    def cell_volumes(self) -> np.ndarray:
        x = self.vertices[self.cells]
        if self.kind == "box":
            return np.prod(x.max(axis=1) - x.min(axis=1), axis=1)
        return _simplex_signed_volumes(x)

    @cached_property
    def cell_centroids(self) -> np.ndarray:
        return self.vertices[self.cells].mean(axis=1)

    @cached_property
    def cell_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.vertices[self.cells]
        return x.min(axis=1), x.max(axis=1)

    @cached_property
    def cell_sizes(self) -> np.ndarray:
        lo, hi = self.cell_bounds
        return np.max(hi - lo, axis=1)

    @property
    def measure(self) -> float:
        return float(self.cell_volumes.sum())

    # ------------------------------------------------------ topology
    def _local_facet_vertices(self) -> list[tuple[int, ...]]:
        d = self.dim
        if self.kind == "simplex":
            return [tuple(j for j in range(d + 1) if j != i) for i in range(d + 1)]
        out = []
        corners = list(itertools.product((0, 1), repeat=d))  # (i, j[, k])
        index = {c: sum(b << a for a, b in enumerate(c)) for c in corners}
        for axis in range(d):
            for side in (0, 1):
                out.append(tuple(sorted(index[c] for c in corners if c[axis] == side)))
        return out

    @cached_property
    def _topology(self):
        local = self._local_facet_vertices()
        nc, nfc = self.n_cells, len(local)
        fv = self.cells[:, np.array(local)]  # (nc, nfc, nvf)
        keys = np.sort(fv.reshape(nc * nfc, -1), axis=1)
        facets, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(nc, nfc)
        counts = np.bincount(inverse.ravel(), minlength=len(facets))
        if counts.max() > 2:
            raise MeshError("non-manifold mesh: facet shared by more than two cells")
        order = np.argsort(inverse.ravel(), kind="stable")
        owner = np.repeat(np.arange(nc), nfc)[order]
        start = np.concatenate([[0], np.cumsum(counts)[:-1]])
        facet_cells = np.full((len(facets), 2), -1, dtype=np.int64)
        facet_cells[:, 0] = owner[start]
        two = counts == 2
        facet_cells[two, 1] = owner[start[two] + 1]
        return facets, inverse, facet_cells

    @property
    def facets(self) -> np.ndarray:
        """Sorted vertex indices of each facet."""
        return self._topology[0]

    @property
    def cell_facets(self) -> np.ndarray:
        """(n_cells, facets_per_cell) global facet index of each local facet."""
        return self._topology[1]

    @property
    def facet_cells(self) -> np.ndarray:
        """(n_facets, 2) adjacent cells, lower index first; -1 marks the boundary."""
        return self._topology[2]

    @cached_property
    def boundary_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_cells[:, 1] < 0)

    @cached_property
    def interior_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_cells[:, 1] >= 0)

    # --------------------------------------------------- facet geometry
    @cached_property
    def facet_centroids(self) -> np.ndarray:
        return self.vertices[self.facets].mean(axis=1)

    @cached_property
    def facet_measures(self) -> np.ndarray:
        return self._facet_geometry[0]

    @cached_property
    def facet_normals(self) -> np.ndarray:
        """Unit normals with the global orientation described in the module doc."""
        return self._facet_geometry[1]

    @cached_property
    def _facet_geometry(self):
        x = self.vertices[self.facets]
        d = self.dim
        if self.kind == "box":
            ext = x.max(axis=1) - x.min(axis=1)
            axis = np.argmin(ext, axis=1)
            ext[np.arange(len(ext)), axis] = 1.0
            meas = np.prod(ext, axis=1)
            normals = np.eye(d)[axis]
            return meas, normals
        if d == 2:
            t = x[:, 1] - x[:, 0]
            n = np.stack([t[:, 1], -t[:, 0]], axis=1)
        else:
            n = np.cross(x[:, 1] - x[:, 0], x[:, 2] - x[:, 0])
        norm = np.linalg.norm(n, axis=1)
        meas = norm if d == 2 else 0.5 * norm
        n = n / norm[:, None]
        # orient outward from the lower-index (first) cell
        out = self.facet_centroids - self.cell_centroids[self.facet_cells[:, 0]]
        flip = np.einsum("ij,ij->i", n, out) < 0
        n[flip] *= -1
        return meas, n

    @cached_property
    def cell_facet_signs(self) -> np.ndarray:
        """+1 where the global facet normal points out of the cell, else -1."""
        cf = self.cell_facets
        n = self.facet_normals[cf]
        out = self.facet_centroids[cf] - self.cell_centroids[:, None, :]
        return np.where(np.einsum("cfi,cfi->cf", n, out) > 0, 1.0, -1.0)

    @cached_property
    def boundary_orientation(self) -> np.ndarray:
        """Per facet: +1 if the global normal is outward (boundary facets only meaningful)."""
        o = np.ones(self.n_facets)
        b = self.boundary_facets
        c = self.facet_cells[b, 0]
        pos = np.argmax(self.cell_facets[c] == b[:, None], axis=1)
        o[b] = self.cell_facet_signs[c, pos]
        return o

    # ------------------------------------------------------ markers
    def facets_on(self, marker: str) -> np.ndarray:
        if marker in ("*", "boundary"):
            return self.boundary_facets
        if marker not in self.markers:
            raise MeshError(f"unknown boundary marker {marker!r}; have {sorted(self.markers)}")
        return self.markers[marker]

    def measure_of(self, marker: str) -> float:
        return float(self.facet_measures[self.facets_on(marker)].sum())

    # ------------------------------------------------------ checks
    def check(self) -> None:
        """Raise MeshError if a structural invariant is violated."""
        if np.any(self.cell_volumes <= 0):
            raise MeshError("nonpositive cell volume")
        fc = self.facet_cells
        interior = fc[:, 1] >= 0
        c0, c1 = fc[interior, 0], fc[interior, 1]
        f = np.flatnonzero(interior)
        s0 = self.cell_facet_signs[c0, np.argmax(self.cell_facets[c0] == f[:, None], axis=1)]
        s1 = self.cell_facet_signs[c1, np.argmax(self.cell_facets[c1] == f[:, None], axis=1)]
        if np.any(s0 * s1 != -1):
            raise MeshError("inconsistent facet orientation")

    def __repr__(self) -> str:
        return f"Mesh(kind={self.kind!r}, dim={self.dim}, cells={self.n_cells}, facets={self.n_facets})"


@dataclass(frozen=True, eq=False)
class RefinementMap:
    """Parent/child tables between a coarse mesh and its uniform refinement."""

    coarse: Mesh
    fine: Mesh
    child_cells: np.ndarray  # (nc_coarse, n_children)
    parent: np.ndarray  # (nc_fine,)

    @cached_property
    def _facet_tables(self):
        return _facet_parents(self.coarse, self.fine, self.parent)

    @property
    def facet_parent(self) -> np.ndarray:
        """Coarse facet containing each fine facet, or -1 if interior to a coarse cell."""
        return self._facet_tables[0]

    @property
    def facet_cell(self) -> np.ndarray:
        """A coarse cell whose closure contains each fine facet."""
        return self._facet_tables[1]

    @cached_property
    def child_facets(self) -> np.ndarray:
        """(nf_coarse, 2**(d-1)) fine facets partitioning each coarse facet."""
        fp = self.facet_parent
        fine = np.flatnonzero(fp >= 0)
        order = fine[np.argsort(fp[fine], kind="stable")]
        n = 2 ** (self.coarse.dim - 1)
        if len(order) != n * self.coarse.n_facets:
            raise MeshError("coarse facets are not uniformly split")
        return order.reshape(self.coarse.n_facets, n)


# ---------------------------------------------------------------- helpers
def _simplex_signed_volumes(x: np.ndarray) -> np.ndarray:
    d = x.shape[2]
    e = x[:, 1:, :] - x[:, :1, :]
    return np.linalg.det(e) / math.factorial(d)


def _orient_simplices(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    cells = cells.copy()
    vol = _simplex_signed_volumes(vertices[cells])
    neg = vol < 0
    cells[neg, 0], cells[neg, 1] = cells[neg, 1].copy(), cells[neg, 0].copy()
    return cells


def _facet_parents(coarse: Mesh, fine: Mesh, parent: np.ndarray):
    """For each fine facet, locate the coarse facet it lies in (if any)."""
    c = parent[fine.facet_cells[:, 0]]
    cf = coarse.cell_facets[c]  # (nf_fine, nfc)
    pts = fine.vertices[fine.facets]  # (nf_fine, nvf, d)
    n = coarse.facet_normals[cf]  # (nf_fine, nfc, d)
    p0 = coarse.facet_centroids[cf]
    dist = np.einsum("fjd,fvd->fjv", n, pts) - np.einsum("fjd,fjd->fj", n, p0)[:, :, None]
    scale = coarse.cell_sizes[c][:, None, None]
    on = np.all(np.abs(dist) <= 1e-9 * scale, axis=2)  # (nf_fine, nfc)
    hit = on.any(axis=1)
    fp = np.full(fine.n_facets, -1, dtype=np.int64)
    fp[hit] = cf[hit, np.argmax(on[hit], axis=1)]
    return fp, c


def _box_markers(mesh_facets_centroid, normals, extents, dim, boundary):
    markers = {}
    for a in range(dim):
        for side, name in ((0, f"{AXIS_NAMES[a]}0"), (1, f"{AXIS_NAMES[a]}1")):
            v = extents[a][side]
            tol = 1e-9 * max(1.0, abs(extents[a][1] - extents[a][0]))
            sel = boundary[
                (np.abs(normals[boundary, a]) > 0.5)
                & (np.abs(mesh_facets_centroid[boundary, a] - v) <= tol)
            ]
            if len(sel):
                markers[name] = sel
    return markers


# ------------------------------------------------------------ structured
def build_structured_mesh(box, cells_per_axis, d: int | None = None) -> Mesh:
    """Tensor-product quad/hex grid on an axis-aligned box.

    ``box`` is a sequence of ``(lo, hi)`` pairs, one per axis. Boundary patches
    are named ``x0, x1, y0, y1[, z0, z1]`` (axis and side).
    """
    box = tuple((float(lo), float(hi)) for lo, hi in box)
    d = len(box) if d is None else d
    if d not in (2, 3) or len(box) != d:
        raise MeshError(f"structured meshes need d in (2, 3) with one extent per axis; got d={d}")
    n = tuple(int(k) for k in np.broadcast_to(cells_per_axis, (d,)))
    if any(k < 1 for k in n):
        raise MeshError("cells_per_axis must be >= 1")
    if any(hi - lo <= 0 for lo, hi in box):
        raise MeshError(f"invalid geometry: empty extent in {box}")
    axes = [np.linspace(lo, hi, k + 1) for (lo, hi), k in zip(box, n)]
    grid = np.meshgrid(*axes, indexing="ij")
    # vertex id = i + (nx+1) (j + (ny+1) k)
    vertices = np.stack([g.transpose(*reversed(range(d))).ravel() for g in grid], axis=1)
    stride = np.cumprod([1] + [k + 1 for k in n[:-1]])
    idx = np.stack(
        [g.transpose(*reversed(range(d))).ravel() for g in np.meshgrid(*[np.arange(k) for k in n], indexing="ij")],
        axis=1,
    )
    base = idx @ stride
    offs = [sum(b * stride[a] for a, b in enumerate(c)) for c in itertools.product((0, 1), repeat=d)]
    # itertools.product varies the last axis fastest; local ordering wants x fastest
    corners = list(itertools.product((0, 1), repeat=d))
    local = sorted(range(len(corners)), key=lambda i: sum(b << a for a, b in enumerate(corners[i])))
    cells = base[:, None] + np.array([offs[i] for i in local])[None, :]
    mesh = Mesh(vertices, cells.astype(np.int64), "box", {}, box, n)
    markers = _box_markers(mesh.facet_centroids, mesh.facet_normals, box, d, mesh.boundary_facets)
    return Mesh(vertices, mesh.cells, "box", markers, box, n)


def _refine_box(mesh: Mesh) -> tuple[Mesh, RefinementMap]:
    d = mesh.dim
    n = mesh.shape
    fine = build_structured_mesh(mesh.extents, tuple(2 * k for k in n))
    fn = fine.shape
    idx = np.stack(np.unravel_index(np.arange(fine.n_cells), tuple(reversed(fn))), axis=1)[:, ::-1]
    pidx = idx // 2
    cstride = np.cumprod([1] + list(n[:-1]))
    parent = pidx @ cstride
    order = np.argsort(parent, kind="stable")
    child_cells = order.reshape(mesh.n_cells, 2**d)
    return fine, RefinementMap(mesh, fine, child_cells, parent)


# ------------------------------------------------------------ simplicial
def _grid_vertices(n, extents):
    axes = [np.linspace(lo, hi, k + 1) for (lo, hi), k in zip(extents, n)]
    grid = np.meshgrid(*axes, indexing="ij")
    d = len(n)
    return np.stack([g.transpose(*reversed(range(d))).ravel() for g in grid], axis=1)


def _kuhn_cells(n, keep=None):
    """Kuhn simplices of an n-grid of cubes (conforming across cubes)."""
    d = len(n)
    stride = np.cumprod([1] + [k + 1 for k in n[:-1]])
    cubes = np.array(list(itertools.product(*[range(k) for k in reversed(n)])))[:, ::-1]
    if keep is not None:
        cubes = cubes[keep(cubes)]
    out = []
    for perm in itertools.permutations(range(d)):
        path = [np.zeros(d, dtype=int)]
        for a in perm:
            step = path[-1].copy()
            step[a] = 1
            path.append(step)
        out.append(np.stack([(cubes + p) @ stride for p in path], axis=1))
    # interleave so the simplices of one cube are contiguous
    return np.stack(out, axis=1).reshape(-1, d + 1)


def _finish_simplicial(vertices, cells, plane_markers=None, radial=None) -> Mesh:
    used = np.unique(cells)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    vertices = vertices[used]
    cells = _orient_simplices(vertices, remap[cells])
    mesh = Mesh(vertices, cells, "simplex", {})
    markers = _geometric_markers(mesh, plane_markers or {}, radial or {})
    return Mesh(vertices, cells, "simplex", markers)


def _geometric_markers(mesh: Mesh, planes: dict, radial: dict) -> dict:
    b = mesh.boundary_facets
    pts = mesh.vertices[mesh.facets[b]]
    assigned = np.zeros(len(b), dtype=bool)
    markers = {}
    for name, (axis, value) in planes.items():
        sel = np.all(np.abs(pts[:, :, axis] - value) <= 1e-9, axis=1) & ~assigned
        if sel.any():
            markers[name] = b[sel]
            assigned |= sel
    for name, radius in radial.items():
        r = np.linalg.norm(pts[:, :, :2], axis=2)
        sel = np.all(np.abs(r - radius) <= 1e-6 * radius, axis=1) & ~assigned
        if sel.any():
            markers[name] = b[sel]
            assigned |= sel
    if not assigned.all():
        markers["other"] = b[~assigned]
    return markers


def _box_planes(extents):
    planes = {}
    for a, (lo, hi) in enumerate(extents):
        planes[f"{AXIS_NAMES[a]}0"] = (a, lo)
        planes[f"{AXIS_NAMES[a]}1"] = (a, hi)
    return planes


def _unit_simplicial(d, n, extents=None):
    n = tuple(int(k) for k in np.broadcast_to(n, (d,)))
    extents = extents or tuple((0.0, 1.0) for _ in range(d))
    v = _grid_vertices(n, extents)
    return _finish_simplicial(v, _kuhn_cells(n), _box_planes(extents))


def _l_shape(n):
    if n % 2:
        raise MeshError("L-shape generator needs an even n")
    ext = ((0.0, 1.0), (0.0, 1.0))
    v = _grid_vertices((n, n), ext)
    h = n // 2
    keep = lambda c: ~((c[:, 0] >= h) & (c[:, 1] >= h))  # noqa: E731
    planes = _box_planes(ext)
    planes["notch_x"] = (0, 0.5)
    planes["notch_y"] = (1, 0.5)
    return _finish_simplicial(v, _kuhn_cells((n, n), keep), planes)


def _quarter_annulus(r_in, r_out, height, nr, nt, nz):
    # logical grid (radius, angle, z) mapped to the physical prism
    rr = np.linspace(r_in, r_out, nr + 1)
    tt = np.linspace(0.0, 0.5 * np.pi, nt + 1)
    zz = np.linspace(0.0, height, nz + 1)
    R, T, Z = np.meshgrid(rr, tt, zz, indexing="ij")
    R, T, Z = (a.transpose(2, 1, 0).ravel() for a in (R, T, Z))
    v = np.stack([R * np.cos(T), R * np.sin(T), Z], axis=1)
    planes = {"y0": (1, 0.0), "x0": (0, 0.0), "z0": (2, 0.0), "z1": (2, height)}
    return _finish_simplicial(v, _kuhn_cells((nr, nt, nz)), planes, {"inner": r_in, "outer": r_out})


GENERATORS = {
    "unit_square": lambda n=1, **kw: _unit_simplicial(2, n, kw.get("extents")),
    "unit_cube": lambda n=1, **kw: _unit_simplicial(3, n, kw.get("extents")),
    "l_shape": lambda n=2, **kw: _l_shape(int(n)),
    "quarter_annulus": lambda r_in=0.25, r_out=2.0, height=7.0, n=(4, 4, 8), **kw: _quarter_annulus(
        float(r_in), float(r_out), float(height), *(int(k) for k in n)
    ),
}


def build_simplicial_mesh(spec) -> Mesh:
    """Simplicial mesh from a generator descriptor or a mesh file path.

    A descriptor is a mapping such as ``{"generator": "unit_square", "n": 8}``
    or the shorthand string ``"unit_square:8"``.  Anything else naming an
    existing file is read with :func:`read_mesh`.
    """
    if isinstance(spec, Mapping):
        spec = dict(spec)
        name = spec.pop("generator")
    elif isinstance(spec, (str, Path)) and Path(spec).is_file():
        return read_mesh(spec)
    elif isinstance(spec, str):
        name, _, arg = spec.partition(":")
        spec = {"n": int(arg)} if arg else {}
    else:
        raise MeshError(f"cannot build a mesh from {spec!r}")
    if name not in GENERATORS:
        raise MeshError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}")
    mesh = GENERATORS[name](**spec)
    mesh.check()
    return mesh


def _refine_simplex(mesh: Mesh) -> tuple[Mesh, RefinementMap]:
    d = mesh.dim
    cells = mesh.cells
    pairs = list(itertools.combinations(range(d + 1), 2))
    e = np.sort(cells[:, np.array(pairs)], axis=2).reshape(-1, 2)
    edges, inv = np.unique(e, axis=0, return_inverse=True)
    mid = mesh.n_vertices + inv.reshape(len(cells), len(pairs))
    vertices = np.concatenate([mesh.vertices, mesh.vertices[edges].mean(axis=1)])
    m = {p: mid[:, k] for k, p in enumerate(pairs)}
    m.update({(b, a): v for (a, b), v in list(m.items())})
    v = [cells[:, i] for i in range(d + 1)]
    if d == 2:
        children = [
            [v[0], m[0, 1], m[0, 2]],
            [m[0, 1], v[1], m[1, 2]],
            [m[0, 2], m[1, 2], v[2]],
            [m[0, 1], m[1, 2], m[0, 2]],
        ]
    else:
        children = [
            [v[0], m[0, 1], m[0, 2], m[0, 3]],
            [m[0, 1], v[1], m[1, 2], m[1, 3]],
            [m[0, 2], m[1, 2], v[2], m[2, 3]],
            [m[0, 3], m[1, 3], m[2, 3], v[3]],
        ]
        # inner octahedron: split along the shortest of its three diagonals
        diags = [((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2))]
        lengths = np.stack(
            [np.linalg.norm(vertices[m[a]] - vertices[m[b]], axis=1) for a, b in diags], axis=1
        )
        # ties broken towards the first diagonal for determinism
        choice = np.argmin(lengths + 1e-12 * np.arange(3) * lengths.max(), axis=1)
        inner = np.empty((len(cells), 4, 4), dtype=np.int64)
        for k, (a, b) in enumerate(diags):
            others = [q for q in diags if q != (a, b)]
            (c, c2), (e1, e2) = others
            ring = [m[c], m[e1], m[c2], m[e2]]
            tets = [[m[a], m[b], ring[i], ring[(i + 1) % 4]] for i in range(4)]
            sel = choice == k
            inner[sel] = np.stack([np.stack(t, axis=1) for t in tets], axis=1)[sel]
        children += [list(inner[:, i].T) for i in range(4)]
    nch = len(children)
    fine_cells = np.stack([np.stack(c, axis=1) for c in children], axis=1).reshape(-1, d + 1)
    fine_cells = _orient_simplices(vertices, fine_cells)
    parent = np.repeat(np.arange(len(cells)), nch)
    child_cells = np.arange(len(fine_cells)).reshape(len(cells), nch)
    fine = Mesh(vertices, fine_cells, "simplex", {})
    rmap = RefinementMap(mesh, fine, child_cells, parent)
    fp = rmap.facet_parent
    markers = {}
    for name, facets in mesh.markers.items():
        hit = np.isin(fp, facets)
        markers[name] = np.flatnonzero(hit)
    fine = Mesh(vertices, fine_cells, "simplex", markers)
    return fine, RefinementMap(mesh, fine, child_cells, parent)


def uniform_refine(mesh: Mesh) -> tuple[Mesh, RefinementMap]:
    """Split every cell into 2**d children (red refinement for simplices)."""
    if mesh.kind == "box":
        return _refine_box(mesh)
    return _refine_simplex(mesh)


# ------------------------------------------------------------- file format
def read_mesh(path) -> Mesh:
    """Read the ASCII simplicial mesh format (see README, "Mesh files")."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise MeshError(f"cannot read mesh file {path}: {exc}") from exc
    lines = [ln.split("#", 1)[0].split() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    try:
        d, nv, nc, nb = (int(t) for t in lines[0])
        if d not in (2, 3):
            raise MeshError(f"{path}: unsupported dimension {d}")
        body = lines[1:]
        if len(body) != nv + nc + nb:
            raise MeshError(f"{path}: expected {nv + nc + nb} data lines, found {len(body)}")
        vertices = np.array([[float(t) for t in ln] for ln in body[:nv]])
        cells = np.array([[int(t) for t in ln] for ln in body[nv : nv + nc]], dtype=np.int64)
        bnd = [(ln[0], tuple(int(t) for t in ln[1:])) for ln in body[nv + nc :]]
    except MeshError:
        raise
    except (ValueError, IndexError) as exc:
        raise MeshError(f"{path}: malformed mesh file ({exc})") from exc
    if vertices.shape != (nv, d) or cells.shape != (nc, d + 1):
        raise MeshError(f"{path}: wrong number of coordinates or cell vertices")
    if cells.min() < 0 or cells.max() >= nv:
        raise MeshError(f"{path}: cell references a missing vertex")
    vol = _simplex_signed_volumes(vertices[cells])
    scale = np.max(np.ptp(vertices, axis=0)) ** d
    if np.any(np.abs(vol) <= 1e-14 * scale):
        raise MeshError(f"{path}: degenerate (zero-volume) cell {int(np.argmin(np.abs(vol)))}")
    if np.any(vol < 0):
        raise MeshError(f"{path}: inverted cell {int(np.argmin(vol))}")
    mesh = Mesh(vertices, cells, "simplex", {})
    lookup = {tuple(f): i for i, f in enumerate(mesh.facets.tolist())}
    boundary = set(mesh.boundary_facets.tolist())
    markers: dict[str, list[int]] = {}
    for name, verts in bnd:
        f = lookup.get(tuple(sorted(verts)))
        if f is None or f not in boundary:
            raise MeshError(f"{path}: boundary line {name} {verts} is not a boundary facet")
        markers.setdefault(name, []).append(f)
    listed = {f for fs in markers.values() for f in fs}
    rest = sorted(boundary - listed)
    if rest:
        markers.setdefault("unmarked", []).extend(rest)
    out = Mesh(vertices, cells, "simplex", {k: np.array(sorted(v), dtype=np.int64) for k, v in markers.items()})
    out.check()
    return out


def write_mesh(mesh: Mesh, path) -> None:
    if mesh.kind != "simplex":
        raise MeshError("only simplicial meshes have a file format")
    rows = [(name, f) for name, fs in sorted(mesh.markers.items()) for f in fs]
    out = [f"{mesh.dim} {mesh.n_vertices} {mesh.n_cells} {len(rows)}"]
    out += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    out += [" ".join(str(int(i)) for i in c) for c in mesh.cells]
    out += [f"{name} " + " ".join(str(int(i)) for i in mesh.facets[f]) for name, f in rows]
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------- point location
def locate_points(mesh: Mesh, points, tol: float = 1e-10) -> np.ndarray:
    """Index of the lowest-numbered cell containing each point (-1 if none)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.full(len(pts), -1, dtype=np.int64)
    lo, hi = mesh.cell_bounds
    for i, p in enumerate(pts):
        cand = np.flatnonzero(np.all((lo - tol <= p) & (p <= hi + tol), axis=1))
        if mesh.kind == "simplex" and len(cand):
            x = mesh.vertices[mesh.cells[cand]]
            T = (x[:, 1:, :] - x[:, :1, :]).transpose(0, 2, 1)
            lam = np.linalg.solve(T, (p - x[:, 0, :])[..., None])[..., 0]
            lam = np.concatenate([1 - lam.sum(axis=1, keepdims=True), lam], axis=1)
            cand = cand[np.all(lam >= -tol, axis=1)]
        if len(cand):
            out[i] = cand.min()
    return out
