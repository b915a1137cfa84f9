"""L2 projection of cellwise-constant fields between non-matching meshes.

The pipeline mirrors a distributed search in-process:

1. element bounding volumes and one octree-shaped BVH per mesh,
2. dual-tree comparison giving candidate cell pairs,
3. Morton-ordered load balancing of those pairs,
4. packing each chunk's geometry ("matching and rebalancing"),
5. clipping plus quadrature per chunk on a thread pool.

Only the intersection measure is needed for P0 x P0 coupling; the
quadrature returned by :func:`clip_cells` supports general integrands.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh
from .timing import StageTimer

__all__ = [
    "TransferError",
    "Bvh",
    "CandidatePairs",
    "TransferOperator",
    "build_bvh",
    "find_candidate_pairs",
    "brute_force_pairs",
    "balance_workload",
    "morton_codes",
    "clip_cells",
    "intersection_measures",
    "assemble_coupling",
    "coarsen_transfer",
    "build_transfer",
    "STAGES",
    "common_region",
]

PLANE_TOL = 1e-12

STAGES = (
    "Element bounding volumes generation",
    "BVH comparison",
    "Load balancing",
    "Matching and rebalancing",
    "Computation: intersection and quadrature",
)


class TransferError(ValueError):
    pass


# ------------------------------------------------------------------- BVH
@dataclass(frozen=True, eq=False)
class Bvh:
    """Octree-shaped hierarchy with node boxes fitted to their contents.

    Node 0 is the root.  ``children[n]`` is empty for leaves, whose element
    ids are ``items[n]``.
    """

    lo: np.ndarray
    hi: np.ndarray
    children: tuple
    items: tuple
    depth: np.ndarray
    elem_lo: np.ndarray
    elem_hi: np.ndarray
    region: tuple
    leaf_capacity: int
    max_depth: int

    @property
    def n_nodes(self) -> int:
        return len(self.children)

    def is_leaf(self, n: int) -> bool:
        return not self.children[n]

    @property
    def leaves(self) -> list[int]:
        return [n for n in range(self.n_nodes) if not self.children[n]]

    def size(self, n: int) -> int:
        if self.children[n]:
            return sum(self.size(c) for c in self.children[n])
        return len(self.items[n])

    def query(self, lo, hi) -> np.ndarray:
        """Elements whose boxes overlap the open box (lo, hi)."""
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        out, stack = [], [0]
        while stack:
            n = stack.pop()
            if not _overlap(self.lo[n], self.hi[n], lo, hi):
                continue
            if self.children[n]:
                stack.extend(self.children[n])
            else:
                ids = self.items[n]
                hit = np.all((self.elem_lo[ids] < hi) & (lo < self.elem_hi[ids]), axis=1)
                out.append(ids[hit])
        return np.sort(np.concatenate(out)) if out else np.zeros(0, dtype=np.int64)


def _overlap(alo, ahi, blo, bhi) -> bool:
    return bool(np.all(alo < bhi) and np.all(blo < ahi))


def common_region(*meshes: Mesh):
    lo = np.min([m.vertices.min(axis=0) for m in meshes], axis=0)
    hi = np.max([m.vertices.max(axis=0) for m in meshes], axis=0)
    return lo, hi


def build_bvh(mesh: Mesh, leaf_capacity: int = 8, max_depth: int = 20, region=None) -> Bvh:
    """Split the (shared) root region into octants until leaves are small.

    Elements are assigned by the centre of their box; node boxes are then
    fitted to the union of the element boxes they hold.
    """
    if mesh.n_cells == 0:
        raise TransferError("cannot build a hierarchy over an empty mesh")
    if leaf_capacity < 1 or max_depth < 0:
        raise TransferError("leaf_capacity must be >= 1 and max_depth >= 0")
    elo, ehi = mesh.cell_bounds
    region = common_region(mesh) if region is None else (np.asarray(region[0], float), np.asarray(region[1], float))
    centres = 0.5 * (elo + ehi)
    d = mesh.dim
    lo_l, hi_l, ch_l, it_l, dep_l = [], [], [], [], []

    def make(ids, rlo, rhi, depth):
        n = len(ch_l)
        lo_l.append(elo[ids].min(axis=0))
        hi_l.append(ehi[ids].max(axis=0))
        ch_l.append(())
        it_l.append(None)
        dep_l.append(depth)
        if len(ids) <= leaf_capacity or depth >= max_depth:
            it_l[n] = np.sort(ids)
            return n
        mid = 0.5 * (rlo + rhi)
        code = ((centres[ids] >= mid) * (1 << np.arange(d))).sum(axis=1)
        kids = []
        for o in range(1 << d):
            sel = ids[code == o]
            if len(sel) == 0:
                continue
            bits = (o >> np.arange(d)) & 1
            clo = np.where(bits, mid, rlo)
            chi = np.where(bits, rhi, mid)
            kids.append(make(sel, clo, chi, depth + 1))
        ch_l[n] = tuple(kids)
        return n

    make(np.arange(mesh.n_cells), region[0], region[1], 0)
    return Bvh(
        np.array(lo_l), np.array(hi_l), tuple(ch_l), tuple(it_l), np.array(dep_l),
        elo, ehi, region, leaf_capacity, max_depth,
    )


@dataclass(frozen=True, eq=False)
class CandidatePairs:
    """Sorted unique (D cell, D-bar cell) pairs with per-pair work estimates.

    ``cost`` is ``s_p * s_q`` for the leaf pair that produced the cell pair
    and ``key`` the Morton code of the D cell's centroid.
    """

    pairs: np.ndarray
    cost: np.ndarray
    key: np.ndarray
    chunks: tuple = field(default=())

    def __len__(self) -> int:
        return len(self.pairs)


def find_candidate_pairs(a: Bvh, b: Bvh, keys: np.ndarray | None = None) -> CandidatePairs:
    """Dual-tree traversal, pruning node pairs with disjoint boxes."""
    if a.elem_lo.shape[1] != b.elem_lo.shape[1]:
        raise TransferError("trees live in different dimensions")
    found, costs = [], []
    stack = [(0, 0)]
    while stack:
        p, q = stack.pop()
        if not _overlap(a.lo[p], a.hi[p], b.lo[q], b.hi[q]):
            continue
        pl, ql = a.is_leaf(p), b.is_leaf(q)
        if pl and ql:
            ip, iq = a.items[p], b.items[q]
            hit = np.all(
                (a.elem_lo[ip][:, None, :] < b.elem_hi[iq][None, :, :])
                & (b.elem_lo[iq][None, :, :] < a.elem_hi[ip][:, None, :]),
                axis=2,
            )
            r, c = np.nonzero(hit)
            if len(r):
                found.append(np.column_stack([ip[r], iq[c]]))
                costs.append(np.full(len(r), len(ip) * len(iq), dtype=float))
        elif pl or (not ql and (b.hi[q] - b.lo[q]).prod() > (a.hi[p] - a.lo[p]).prod()):
            stack.extend((p, c) for c in b.children[q])
        else:
            stack.extend((c, q) for c in a.children[p])
    if not found:
        empty = np.zeros((0, 2), dtype=np.int64)
        return CandidatePairs(empty, np.zeros(0), np.zeros(0, dtype=np.int64))
    pairs = np.concatenate(found)
    cost = np.concatenate(costs)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs, cost = pairs[order], cost[order]
    keep = np.ones(len(pairs), dtype=bool)
    keep[1:] = np.any(pairs[1:] != pairs[:-1], axis=1)
    pairs, cost = pairs[keep], cost[keep]
    if keys is None:
        keys = morton_codes(0.5 * (a.elem_lo + a.elem_hi), *a.region)
    return CandidatePairs(pairs, cost, keys[pairs[:, 0]])


def brute_force_pairs(mesh_a: Mesh, mesh_b: Mesh) -> np.ndarray:
    """All-pairs open-box overlap test; reference for the traversal."""
    alo, ahi = mesh_a.cell_bounds
    blo, bhi = mesh_b.cell_bounds
    hit = np.all((alo[:, None] < bhi[None]) & (blo[None] < ahi[:, None]), axis=2)
    return np.argwhere(hit)


def morton_codes(points: np.ndarray, lo, hi, bits: int = 10) -> np.ndarray:
    """Bit-interleaved integer coordinates on a 2^bits grid over [lo, hi]."""
    points = np.atleast_2d(points)
    span = np.where(np.asarray(hi) > np.asarray(lo), np.asarray(hi) - np.asarray(lo), 1.0)
    q = np.clip(((points - lo) / span * (1 << bits)).astype(np.int64), 0, (1 << bits) - 1)
    d = points.shape[1]
    code = np.zeros(len(points), dtype=np.int64)
    for bit in range(bits):
        for a in range(d):
            code |= ((q[:, a] >> bit) & 1) << (bit * d + a)
    return code


def balance_workload(pairs: CandidatePairs, n_workers: int) -> CandidatePairs:
    """Contiguous split of the Morton-ordered pairs into ``n_workers`` chunks.

    Chunk boundaries sit where the cost prefix sum is closest to each
    multiple of the mean load, so every chunk deviates from the mean by at
    most the largest single cost.
    """
    if n_workers < 1:
        raise TransferError("n_workers must be positive")
    order = np.lexsort((pairs.pairs[:, 1], pairs.pairs[:, 0], pairs.key)) if len(pairs) else np.zeros(0, dtype=np.int64)
    prefix = np.concatenate([[0.0], np.cumsum(pairs.cost[order])])
    total = prefix[-1]
    bounds = [0]
    for k in range(1, n_workers):
        target = k * total / n_workers
        j = int(np.searchsorted(prefix, target))
        if 0 < j < len(prefix) and abs(prefix[j - 1] - target) <= abs(prefix[j] - target):
            j -= 1
        bounds.append(min(max(j, bounds[-1]), len(order)))
    bounds.append(len(order))
    chunks = tuple(order[bounds[k] : bounds[k + 1]] for k in range(n_workers))
    return CandidatePairs(pairs.pairs, pairs.cost, pairs.key, chunks)


# -------------------------------------------------------------- clipping
def _clip_polygon(poly: list, axis: int, value: float, keep_below: bool) -> list:
    """Sutherland-Hodgman against the half-space x_axis <= value (or >=)."""
    if not poly:
        return poly
    sgn = 1.0 if keep_below else -1.0
    dist = [sgn * (p[axis] - value) for p in poly]
    dist = [0.0 if abs(s) <= PLANE_TOL else s for s in dist]
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        dp, dq = dist[i], dist[(i + 1) % n]
        if dp <= 0:
            out.append(p)
        if (dp < 0 < dq) or (dq < 0 < dp):
            t = dp / (dp - dq)
            x = p + t * (q - p)
            x[axis] = value
            out.append(x)
    return out


def _polygon_area_2d(poly) -> float:
    x = np.array(poly)
    return 0.5 * abs(np.dot(x[:, 0], np.roll(x[:, 1], -1)) - np.dot(x[:, 1], np.roll(x[:, 0], -1)))


def _simplex_faces_3d(x):
    """Outward faces of a tetrahedron as vertex lists."""
    faces = []
    for i in range(4):
        f = [x[j] for j in range(4) if j != i]
        n = np.cross(f[1] - f[0], f[2] - f[0])
        if np.dot(n, x[i] - f[0]) > 0:
            f = [f[0], f[2], f[1]]
        faces.append(f)
    return faces


def _clip_polyhedron(faces: list, axis: int, value: float, keep_below: bool) -> list:
    sgn = 1.0 if keep_below else -1.0
    dist = sgn * (np.concatenate([np.array(f) for f in faces])[:, axis] - value)
    if np.all(dist <= PLANE_TOL):
        return faces
    if np.all(dist >= -PLANE_TOL):
        return []
    new_faces, cap = [], []
    for f in faces:
        g = _clip_polygon(f, axis, value, keep_below)
        if len(g) >= 3:
            new_faces.append(g)
            cap.extend(p for p in g if abs(p[axis] - value) <= PLANE_TOL)
    if len(cap) >= 3:
        pts = np.unique(np.round(np.array(cap), 14), axis=0)
        if len(pts) >= 3:
            c = pts.mean(axis=0)
            other = [a for a in range(3) if a != axis]
            ang = np.arctan2(pts[:, other[1]] - c[other[1]], pts[:, other[0]] - c[other[0]])
            ring = list(pts[np.argsort(ang)])
            # orient the cap outward (normal sgn * e_axis)
            n = np.cross(ring[1] - ring[0], ring[2] - ring[0]) if len(ring) >= 3 else np.zeros(3)
            if n[axis] * sgn < 0:
                ring = ring[::-1]
            new_faces.append(ring)
    return new_faces if len(new_faces) >= 4 else []


def clip_cells(simplex, box_lo, box_hi):
    """Intersect a simplex (or box cell) with an axis-aligned box.

    ``simplex`` is a (d+1, d) vertex array, or a pair ``(lo, hi)`` for an
    axis-aligned cell.  Returns ``(points, weights, pieces)``: centroid
    quadrature on a centroid triangulation/tetrahedralization of the
    intersection, with ``pieces`` the (m, d+1, d) sub-simplices.  The
    weights sum to the intersection measure; an empty or measure-zero
    intersection yields empty arrays.
    """
    box_lo = np.asarray(box_lo, float)
    box_hi = np.asarray(box_hi, float)
    d = len(box_lo)
    if isinstance(simplex, tuple):  # box cell: intersection is a box
        lo = np.maximum(simplex[0], box_lo)
        hi = np.minimum(simplex[1], box_hi)
        w = float(np.prod(np.clip(hi - lo, 0, None)))
        if w <= 0 or np.any(hi - lo <= PLANE_TOL):
            return np.zeros((0, d)), np.zeros(0), np.zeros((0, d + 1, d))
        return (0.5 * (lo + hi))[None], np.array([w]), _box_simplices(lo, hi)
    x = np.asarray(simplex, float)
    if d == 2:
        poly = [p.copy() for p in x]
        for a in range(2):
            poly = _clip_polygon(poly, a, box_hi[a], True)
            poly = _clip_polygon(poly, a, box_lo[a], False)
        if len(poly) < 3:
            return np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3, 2))
        c = np.mean(poly, axis=0)
        tris = np.array([[c, poly[i], poly[(i + 1) % len(poly)]] for i in range(len(poly))])
        e1, e2 = tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]
        w = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    else:
        faces = _simplex_faces_3d(x)
        for a in range(3):
            faces = _clip_polyhedron(faces, a, box_hi[a], True)
            if faces:
                faces = _clip_polyhedron(faces, a, box_lo[a], False)
            if not faces:
                break
        if not faces:
            return np.zeros((0, 3)), np.zeros(0), np.zeros((0, 4, 3))
        c = np.mean(np.concatenate([np.array(f) for f in faces]), axis=0)
        tets = []
        for f in faces:
            fc = np.mean(f, axis=0)
            for i in range(len(f)):
                tets.append([c, fc, f[i], f[(i + 1) % len(f)]])
        tris = np.array(tets)
        w = np.abs(np.linalg.det(tris[:, 1:] - tris[:, :1])) / 6.0
    keep = w > 0
    tris, w = tris[keep], w[keep]
    if w.sum() <= PLANE_TOL ** d:
        return np.zeros((0, d)), np.zeros(0), np.zeros((0, d + 1, d))
    return tris.mean(axis=1), w, tris


def _box_simplices(lo, hi):
    """Kuhn triangulation of a box (used only for returning pieces)."""
    d = len(lo)
    out = []
    for perm in itertools.permutations(range(d)):
        v = lo.copy()
        s = [v.copy()]
        for a in perm:
            v[a] = hi[a]
            s.append(v.copy())
        out.append(s)
    return np.array(out)


def intersection_measures(mesh_d: Mesh, mesh_b: Mesh, pairs: np.ndarray) -> np.ndarray:
    """|tau cap tau_bar| for each listed pair; contained cells skip clipping."""
    if len(pairs) == 0:
        return np.zeros(0)
    p, q = pairs[:, 0], pairs[:, 1]
    alo, ahi = mesh_d.cell_bounds
    blo, bhi = mesh_b.cell_bounds
    inside = np.all((alo[p] >= blo[q] - PLANE_TOL) & (ahi[p] <= bhi[q] + PLANE_TOL), axis=1)
    out = np.where(inside, mesh_d.cell_volumes[p], 0.0)
    rest = np.flatnonzero(~inside)
    if mesh_d.kind == "box":
        lo = np.maximum(alo[p[rest]], blo[q[rest]])
        hi = np.minimum(ahi[p[rest]], bhi[q[rest]])
        ext = np.clip(hi - lo, 0, None)
        out[rest] = np.where(np.all(ext > PLANE_TOL, axis=1), ext.prod(axis=1), 0.0)
        return out
    x = mesh_d.vertices[mesh_d.cells]
    for i in rest:
        _, w, _ = clip_cells(x[p[i]], blo[q[i]], bhi[q[i]])
        out[i] = w.sum()
    return out


# ----------------------------------------------------------- operators
@dataclass(frozen=True, eq=False)
class TransferOperator:
    """Coupling ``G`` (D cells x D-bar cells) and projection ``Pi``."""

    G: sp.csr_matrix
    Pi: sp.csr_matrix
    level: int
    covered: np.ndarray
    volumes: np.ndarray

    @property
    def partially_covered(self) -> np.ndarray:
        return np.flatnonzero(self.covered < self.volumes * (1 - 1e-10))

    def apply(self, field_bar: np.ndarray) -> np.ndarray:
        return self.Pi @ field_bar


def _make_operator(G: sp.csr_matrix, volumes: np.ndarray, level: int) -> TransferOperator:
    G = sp.csr_matrix(G)
    G.eliminate_zeros()
    covered = np.asarray(G.sum(axis=1)).ravel()
    bad = np.flatnonzero(covered <= 1e-14 * volumes)
    if len(bad):
        raise TransferError(
            f"{len(bad)} cell(s) of the target mesh have no overlap with the source mesh "
            f"(first: {bad[:5].tolist()}); the projection is undefined there"
        )
    Pi = (sp.diags(1.0 / covered) @ G).tocsr()
    return TransferOperator(G, Pi, level, covered, volumes)


def assemble_coupling(mesh_d: Mesh, mesh_b: Mesh, pairs: CandidatePairs | None = None, level: int = 0,
                      workers: int = 1, timer: StageTimer | None = None) -> TransferOperator:
    """Entries ``G[tau, tau_bar] = |tau cap tau_bar|`` and ``Pi = W^-1 G``.

    Cells only partly covered by ``mesh_b`` are normalized by their covered
    measure; cells with no coverage raise :class:`TransferError`.
    """
    if mesh_d.dim != mesh_b.dim:
        raise TransferError("meshes have different dimensions")
    timer = timer if timer is not None else StageTimer()
    if pairs is None:
        with timer.stage(STAGES[0]):
            region = common_region(mesh_d, mesh_b)
            a = build_bvh(mesh_d, region=region)
            b = build_bvh(mesh_b, region=region)
        with timer.stage(STAGES[1]):
            pairs = find_candidate_pairs(a, b)
    if not pairs.chunks:
        with timer.stage(STAGES[2]):
            pairs = balance_workload(pairs, workers)
    with timer.stage(STAGES[3]):
        jobs = [pairs.pairs[c] for c in pairs.chunks]
    with timer.stage(STAGES[4]):
        if workers > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(lambda pr: intersection_measures(mesh_d, mesh_b, pr), jobs))
        else:
            results = [intersection_measures(mesh_d, mesh_b, pr) for pr in jobs]
    vals = np.zeros(len(pairs))
    for c, r in zip(pairs.chunks, results):
        vals[c] = r
    keep = vals > 0
    # pairs are sorted by (row, col), so CSR construction sums nothing and is order-stable
    G = sp.csr_matrix(
        (vals[keep], (pairs.pairs[keep, 0], pairs.pairs[keep, 1])), shape=(mesh_d.n_cells, mesh_b.n_cells)
    )
    return _make_operator(G, mesh_d.cell_volumes, level)


def coarsen_transfer(op: TransferOperator, P_theta, Pbar_theta, coarse_volumes=None) -> TransferOperator:
    """``G_{l+1} = P_theta^T G_l Pbar_theta`` from the finer operator."""
    G = op.G
    if P_theta.shape[0] != G.shape[0] or Pbar_theta.shape[0] != G.shape[1]:
        raise TransferError(
            f"dimension mismatch: G is {G.shape}, P_theta {P_theta.shape}, Pbar_theta {Pbar_theta.shape}"
        )
    Gc = (P_theta.T @ G @ Pbar_theta).tocsr()
    vol = P_theta.T @ op.volumes if coarse_volumes is None else np.asarray(coarse_volumes)
    return _make_operator(Gc, vol, op.level + 1)


def build_transfer(mesh_d: Mesh, mesh_b: Mesh, level: int = 0, workers: int = 1, leaf_capacity: int = 8,
                   max_depth: int = 20, timer: StageTimer | None = None) -> TransferOperator:
    """Run all five stages, recording their timings in ``timer``."""
    timer = timer if timer is not None else StageTimer()
    with timer.stage(STAGES[0]):
        region = common_region(mesh_d, mesh_b)
        a = build_bvh(mesh_d, leaf_capacity, max_depth, region)
        b = build_bvh(mesh_b, leaf_capacity, max_depth, region)
    with timer.stage(STAGES[1]):
        pairs = find_candidate_pairs(a, b)
    with timer.stage(STAGES[2]):
        pairs = balance_workload(pairs, workers)
    return assemble_coupling(mesh_d, mesh_b, pairs, level, workers, timer)
