"""Saddle-point systems and their solvers.

Contents: a ``SaddleSystem`` container with symmetric elimination of
essential flux constraints, preconditioned CG and right-preconditioned
restarted GMRES, the approximate block-LDU preconditioner for Darcy
systems, and hybridization of the reaction-diffusion (sampler) systems.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fespace import FluxSpace

log = logging.getLogger(__name__)

__all__ = [
    "SolverError",
    "NonConvergenceError",
    "SaddleSystem",
    "apply_essential_flux_bc",
    "direct_solve",
    "pcg",
    "gmres",
    "symmetric_gauss_seidel",
    "make_inverse",
    "BlockLduPreconditioner",
    "build_block_ldu",
    "HybridizedSystem",
    "hybridize",
]

DEFAULT_RTOL = 1e-6
DEFAULT_ATOL = 1e-12


class SolverError(RuntimeError):
    pass


class NonConvergenceError(SolverError):
    def __init__(self, msg, x, iterations, residual):
        super().__init__(msg)
        self.x = x
        self.iterations = iterations
        self.residual = residual


# ------------------------------------------------------------------ system
@dataclass(frozen=True, eq=False)
class SaddleSystem:
    """Block system ``[[M, B^T], [B, C]] [u; p] = [f_u; f_p]``.

    ``C`` is ``None`` for the Darcy variant and ``-kappa^2 W`` for the
    sampler variant.  Essential flux constraints are stored as
    ``(fixed, values)`` and eliminated symmetrically only when an assembled
    matrix is requested, so Galerkin coarsening can act on the raw blocks.
    """

    M: sp.csr_matrix
    B: sp.csr_matrix
    C: sp.csr_matrix | None
    f_u: np.ndarray
    f_p: np.ndarray
    fixed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    variant: str = "darcy"
    level: int = 0
    space: FluxSpace | None = None
    # per-cell weight of the flux mass and (sampler) reaction term, for hybridization
    mass_scale: np.ndarray | None = None
    reaction: np.ndarray | None = None
    # outward element mass matrices; defaults to the space's own
    local_mass: np.ndarray | None = None

    @property
    def element_mass(self) -> np.ndarray:
        loc = self.local_mass if self.local_mass is not None else self.space.local_mass
        return loc if self.mass_scale is None else loc * self.mass_scale[:, None, None]

    def __post_init__(self):
        nu, np_ = self.M.shape[0], self.B.shape[0]
        if self.M.shape != (nu, nu) or self.B.shape[1] != nu:
            raise ValueError("inconsistent block dimensions")
        if self.C is not None and self.C.shape != (np_, np_):
            raise ValueError("inconsistent D-block dimensions")
        if len(self.f_u) != nu or len(self.f_p) != np_:
            raise ValueError("inconsistent right-hand side dimensions")

    @property
    def n_u(self) -> int:
        return self.M.shape[0]

    @property
    def n_p(self) -> int:
        return self.B.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        n = self.n_u + self.n_p
        return (n, n)

    @property
    def free(self) -> np.ndarray:
        mask = np.ones(self.n_u, dtype=bool)
        mask[self.fixed] = False
        return np.flatnonzero(mask)

    def with_rhs(self, f_u=None, f_p=None) -> "SaddleSystem":
        return replace(
            self,
            f_u=self.f_u if f_u is None else np.asarray(f_u, dtype=float),
            f_p=self.f_p if f_p is None else np.asarray(f_p, dtype=float),
        )

    def blocks(self):
        """Eliminated blocks ``(M_e, B_e, C)`` and right-hand side ``(g_u, g_p)``."""
        mask = np.ones(self.n_u)
        mask[self.fixed] = 0.0
        Dm = sp.diags(mask)
        x_d = np.zeros(self.n_u)
        x_d[self.fixed] = self.values
        M_e = (Dm @ self.M @ Dm + sp.diags(1.0 - mask)).tocsr()
        B_e = (self.B @ Dm).tocsr()
        g_u = self.f_u - self.M @ x_d
        g_u[self.fixed] = self.values
        g_p = self.f_p - self.B @ x_d
        return M_e, B_e, self.C, g_u, g_p

    def matrix(self) -> sp.csr_matrix:
        M_e, B_e, C, _, _ = self.blocks()
        return sp.bmat([[M_e, B_e.T], [B_e, C]], format="csr")

    def rhs(self) -> np.ndarray:
        *_, g_u, g_p = self.blocks()
        return np.concatenate([g_u, g_p])

    def split(self, x):
        return x[: self.n_u], x[self.n_u :]


def apply_essential_flux_bc(system: SaddleSystem, dofs, value=0.0, mesh=None) -> SaddleSystem:
    """Constrain flux dofs; ``dofs`` is a facet index array or a marker name.

    ``value`` is the outward normal flux density; the dof value is
    ``value * |facet| * orientation``.  Re-applying a constraint overwrites
    it, so the operation is idempotent.
    """
    if isinstance(dofs, str):
        mesh = mesh if mesh is not None else system.space.mesh
        dofs = mesh.facets_on(dofs)
        vals = value * mesh.facet_measures[dofs] * mesh.boundary_orientation[dofs]
    else:
        dofs = np.asarray(dofs, dtype=np.int64)
        vals = np.broadcast_to(np.asarray(value, dtype=float), dofs.shape)
    table = dict(zip(system.fixed.tolist(), system.values.tolist()))
    table.update(zip(dofs.tolist(), vals.tolist()))
    fixed = np.array(sorted(table), dtype=np.int64)
    return replace(system, fixed=fixed, values=np.array([table[i] for i in fixed.tolist()], dtype=float))


# ------------------------------------------------------------------ direct
def direct_solve(A, b=None):
    """Sparse LU solve; accepts a matrix or a :class:`SaddleSystem`."""
    if isinstance(A, SaddleSystem):
        b = A.rhs() if b is None else b
        A = A.matrix()
    A = sp.csc_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise SolverError("matrix must be square")
    try:
        lu = spla.splu(A)
    except RuntimeError as exc:
        raise SolverError(f"factorization failed: {exc}") from exc
    x = lu.solve(np.asarray(b, dtype=float))
    if not np.all(np.isfinite(x)):
        raise SolverError("factorization produced non-finite values (singular matrix?)")
    return x


# ------------------------------------------------------------------ krylov
def _as_op(A):
    if callable(A) and not hasattr(A, "shape"):
        return A
    return lambda v: A @ v


def pcg(A, b, precond=None, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, maxit=1000, x0=None):
    """Preconditioned conjugate gradients.

    Stops when ``||b - A x|| <= max(rtol ||b||, atol)``.  Returns
    ``(x, iterations)``.
    """
    apply_A = _as_op(A)
    apply_P = precond if precond is not None else (lambda r: r)
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - apply_A(x) if x0 is not None else b.copy()
    tol = max(rtol * np.linalg.norm(b), atol)
    rnorm = np.linalg.norm(r)
    if rnorm <= tol:
        return x, 0
    z = apply_P(r)
    p = z.copy()
    rz = r @ z
    for it in range(1, maxit + 1):
        Ap = apply_A(p)
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rnorm = np.linalg.norm(r)
        if rnorm <= tol:
            return x, it
        z = apply_P(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NonConvergenceError(f"pcg: no convergence in {maxit} iterations (|r|={rnorm:.3e})", x, maxit, rnorm)


def gmres(A, b, precond=None, restart=50, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, maxit=1000, x0=None):
    """Right-preconditioned restarted GMRES; monitors the true residual norm."""
    apply_A = _as_op(A)
    apply_P = precond if precond is not None else (lambda r: r)
    b = np.asarray(b, dtype=float)
    n = len(b)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    tol = max(rtol * np.linalg.norm(b), atol)
    r = b - apply_A(x) if x0 is not None else b.copy()
    beta = np.linalg.norm(r)
    if beta <= tol:
        return x, 0
    total = 0
    while total < maxit:
        m = min(restart, maxit - total)
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs, sn = np.zeros(m), np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k_done = 0
        for k in range(m):
            Z[k] = apply_P(V[k])
            w = apply_A(Z[k])
            for i in range(k + 1):  # modified Gram-Schmidt
                H[i, k] = w @ V[i]
                w -= H[i, k] * V[i]
            H[k + 1, k] = np.linalg.norm(w)
            if H[k + 1, k] > 1e-300:
                V[k + 1] = w / H[k + 1, k]
            for i in range(k):
                t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
                H[i, k] = t
            denom = np.hypot(H[k, k], H[k + 1, k])
            cs[k], sn[k] = (1.0, 0.0) if denom == 0 else (H[k, k] / denom, H[k + 1, k] / denom)
            H[k, k] = cs[k] * H[k, k] + sn[k] * H[k + 1, k]
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            total += 1
            k_done = k + 1
            if abs(g[k + 1]) <= tol or total >= maxit:
                break
        y = sla.solve_triangular(H[:k_done, :k_done], g[:k_done])
        x = x + Z[:k_done].T @ y
        r = b - apply_A(x)
        beta = np.linalg.norm(r)
        if beta <= tol:
            return x, total
    raise NonConvergenceError(f"gmres: no convergence in {maxit} iterations (|r|={beta:.3e})", x, total, beta)


# ------------------------------------------------------------ smoothers etc
def symmetric_gauss_seidel(A, sweeps=3):
    """Linear approximate inverse: ``sweeps`` symmetric GS sweeps from a zero guess."""
    A = sp.csr_matrix(A)
    L = sp.tril(A, format="csr")
    U = sp.triu(A, format="csr")
    strict_U = sp.triu(A, k=1, format="csr")
    strict_L = sp.tril(A, k=-1, format="csr")

    def apply(r):
        x = np.zeros_like(r)
        for _ in range(sweeps):
            x = spla.spsolve_triangular(L, r - strict_U @ x, lower=True)
            x = spla.spsolve_triangular(U, r - strict_L @ x, lower=False)
        return x

    return apply


def make_inverse(A, kind: str = "direct", **opts) -> Callable[[np.ndarray], np.ndarray]:
    """Approximate inverse of an SPD matrix as a callable.

    ``direct``: sparse LU; ``amg``: one classical (Ruge-Stuben) AMG V-cycle;
    ``ilu``: incomplete LU; ``jacobi``: diagonal scaling.
    """
    A = sp.csr_matrix(A)
    if kind == "direct":
        lu = spla.splu(A.tocsc())
        return lu.solve
    if kind == "amg":
        import pyamg

        ml = pyamg.ruge_stuben_solver(A, max_coarse=opts.get("max_coarse", 50))
        return lambda r: ml.solve(r, x0=np.zeros_like(r), maxiter=1, cycle="V", tol=1e-300)
    if kind == "ilu":
        ilu = spla.spilu(A.tocsc(), drop_tol=opts.get("drop_tol", 1e-4), fill_factor=opts.get("fill_factor", 10))
        return ilu.solve
    if kind == "jacobi":
        d = A.diagonal()
        return lambda r: r / d
    raise ValueError(f"unknown inverse kind {kind!r}")


# ------------------------------------------------------------ block LDU
@dataclass(eq=False)
class BlockLduPreconditioner:
    n_u: int
    B: sp.csr_matrix
    M_inv: Callable
    S_inv: Callable
    S_tilde: sp.csr_matrix | None
    variant: str = "ldu"

    def __call__(self, r):
        r1, r2 = r[: self.n_u], r[self.n_u :]
        if self.variant == "diag":
            return np.concatenate([self.M_inv(r1), -self.S_inv(r2)])
        b1 = self.M_inv(r1)
        b2 = -self.S_inv(r2 - self.B @ b1)
        if self.variant == "lower":
            return np.concatenate([b1, b2])
        z1 = b1 - self.M_inv(self.B.T @ b2)
        if self.variant == "upper":
            return np.concatenate([self.M_inv(r1 - self.B.T @ (-self.S_inv(r2))), -self.S_inv(r2)])
        return np.concatenate([z1, b2])


def build_block_ldu(system: SaddleSystem, gs_sweeps: int = 3, schur_solver: str = "amg", variant="ldu", exact=False):
    """Approximate block-LDU preconditioner for a Darcy-type system.

    ``M~`` is ``gs_sweeps`` symmetric Gauss-Seidel sweeps on ``M(k)`` and
    ``S~ = B diag(M)^-1 B^T`` is inverted by ``schur_solver``.  With
    ``exact=True`` both factors are exact (``S`` the true Schur complement),
    turning the preconditioner into the exact inverse.
    """
    M, B, C, _, _ = system.blocks()
    if C is not None and C.nnz:
        raise SolverError("block-LDU expects a zero D-block (Darcy variant)")
    if exact:
        lu = spla.splu(sp.csc_matrix(M))
        MinvBt = lu.solve(B.T.toarray())
        S = sp.csr_matrix(B @ MinvBt)
        return BlockLduPreconditioner(system.n_u, B, lu.solve, make_inverse(S, "direct"), S, variant)
    S = (B @ sp.diags(1.0 / M.diagonal()) @ B.T).tocsr()
    return BlockLduPreconditioner(
        system.n_u, B, symmetric_gauss_seidel(M, gs_sweeps), make_inverse(S, schur_solver), S, variant
    )


# ------------------------------------------------------------ hybridization
@dataclass(eq=False)
class HybridizedSystem:
    """Element-decoupled form of a sampler system with facet multipliers.

    Local arrays are indexed ``[cell, local facet]`` in the outward basis.
    """

    system: SaddleSystem
    S_inv: np.ndarray  # (nc, nl, nl) inverse of M^ + B^T W^-1 B^ on free local dofs
    w: np.ndarray  # (nc,) reaction weight per cell (kappa^2 |K|)
    free_local: np.ndarray  # (nc, nl) bool
    fixed_local: np.ndarray  # (nc, nl) prescribed outward values
    S_local: np.ndarray  # (nc, nl, nl) full local M^ + b^T b / w
    C: sp.csr_matrix  # (n_lambda, nc * nl)
    H: sp.csr_matrix
    lambda_facets: np.ndarray
    rescale: np.ndarray
    _solver: Callable | None = None
    iterations: int = 0

    @property
    def n_multipliers(self) -> int:
        return len(self.lambda_facets)

    # rhs of the reduced system and the local particular solution
    def _local_rhs(self, f_u, f_p):
        sysm = self.system
        m = sysm.space.mesh
        cf = m.cell_facets
        sgn = m.cell_facet_signs
        share = np.where(m.facet_cells[:, 1] >= 0, 0.5, 1.0)
        r = sgn * f_u[cf] * share[cf]
        r = r + f_p[:, None] / self.w[:, None]
        r = r - np.einsum("cij,cj->ci", self.S_local, self.fixed_local)
        r = np.where(self.free_local, r, 0.0)
        return np.einsum("cij,cj->ci", self.S_inv, r)

    def reduced_rhs(self, f_u, f_p):
        g = self._local_rhs(f_u, f_p)
        return self.rescale * (self.C @ g.ravel()), g

    def recover(self, lam, g, f_p):
        """Global (u, theta) from multipliers and the local particular solution."""
        m = self.system.space.mesh
        lam = self.rescale * lam
        ct = (self.C.T @ lam).reshape(g.shape)
        uh = g - np.einsum("cij,cj->ci", self.S_inv, ct)
        uh = np.where(self.free_local, uh, self.fixed_local)
        theta = (uh.sum(axis=1) - f_p) / self.w
        first = m.facet_cells[:, 0]
        pos = np.argmax(m.cell_facets[first] == np.arange(m.n_facets)[:, None], axis=1)
        u = m.cell_facet_signs[first, pos] * uh[first, pos]
        return u, theta

    def multipliers_from(self, u, theta):
        """Multipliers consistent with a global (u, theta), used as a warm start."""
        sysm = self.system
        m = sysm.space.mesh
        cf = m.cell_facets
        sgn = m.cell_facet_signs
        uh = sgn * u[cf]
        M_loc = sysm.element_mass
        share = np.where(m.facet_cells[:, 1] >= 0, 0.5, 1.0)
        res = sgn * sysm.f_u[cf] * share[cf] - np.einsum("cij,cj->ci", M_loc, uh) - theta[:, None]
        lam = (self.C @ res.ravel()) / np.asarray(self.C.sum(axis=1)).ravel()
        return lam / self.rescale

    def set_solver(self, method="pcg", precond="amg", rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, maxit=1000):
        if self.n_multipliers == 0:
            self._solver = lambda rhs, x0=None: (np.zeros(0), 0)
            return self
        if method == "direct":
            lu = spla.splu(self.H.tocsc())
            self._solver = lambda rhs, x0=None: (lu.solve(rhs), 0)
        else:
            P = make_inverse(self.H, precond)
            H = self.H
            self._solver = lambda rhs, x0=None: pcg(H, rhs, P, rtol=rtol, atol=atol, maxit=maxit, x0=x0)
        return self

    def solve(self, f_u=None, f_p=None, x0=None):
        """Solve the original saddle system through the reduced multiplier system.

        ``x0`` optionally holds an initial guess ``(u, theta)`` for the
        iterative reduced solve.
        """
        u, theta, its = self.solve_info(f_u, f_p, x0)
        self.iterations = its
        return u, theta

    def solve_info(self, f_u=None, f_p=None, x0=None):
        """Like :meth:`solve` but returns ``(u, theta, iterations)`` without mutating state."""
        sysm = self.system
        f_u = sysm.f_u if f_u is None else f_u
        f_p = sysm.f_p if f_p is None else f_p
        if self._solver is None:
            self.set_solver()
        rhs, g = self.reduced_rhs(f_u, f_p)
        lam0 = None if x0 is None or self.n_multipliers == 0 else self.multipliers_from(*x0)
        lam, its = self._solver(rhs, lam0)
        return (*self.recover(lam, g, f_p), its)

    def dense_H(self):
        """Reference ``C (M^ + B^T W^-1 B^)^-1 C^T`` from dense global matrices."""
        nc, nl = self.w.shape[0], self.S_inv.shape[1]
        full = sla.block_diag(*[
            np.where(np.outer(fl, fl), s, 0.0) for fl, s in zip(self.free_local, self.S_local)
        ])
        free = self.free_local.ravel()
        Cd = self.C.toarray()[:, free]
        Sf = full[np.ix_(free, free)]
        D = np.diag(self.rescale)
        return D @ Cd @ np.linalg.solve(Sf, Cd.T) @ D


def hybridize(system: SaddleSystem) -> HybridizedSystem:
    """Decouple flux dofs per element and reduce to an SPD multiplier system."""
    if system.variant != "sampler" or system.reaction is None or system.space is None:
        raise SolverError("hybridization needs a sampler-variant system with element data")
    m = system.space.mesh
    w = np.asarray(system.reaction, dtype=float)
    if np.any(w <= 0):
        raise SolverError("singular reduced system: reaction term must be positive (kappa > 0)")
    nc, nl = m.cell_facets.shape
    M_loc = system.element_mass
    S = M_loc + 1.0 / w[:, None, None]  # b = ones in the outward basis
    fixed_mask = np.zeros(m.n_facets, dtype=bool)
    fixed_mask[system.fixed] = True
    fixed_val = np.zeros(m.n_facets)
    fixed_val[system.fixed] = system.values
    cf = m.cell_facets
    sgn = m.cell_facet_signs
    free_local = ~fixed_mask[cf]
    fixed_local = np.where(free_local, 0.0, sgn * fixed_val[cf])
    S_mod = np.where(free_local[:, :, None] & free_local[:, None, :], S, 0.0)
    S_mod = S_mod + np.eye(nl)[None] * (~free_local)[:, :, None]
    S_inv = np.linalg.inv(S_mod)
    S_inv = np.where(free_local[:, :, None] & free_local[:, None, :], S_inv, 0.0)

    lam_facets = np.flatnonzero((m.facet_cells[:, 1] >= 0) & ~fixed_mask)
    fc = m.facet_cells[lam_facets]
    rows, cols = [], []
    for side in (0, 1):
        c = fc[:, side]
        pos = np.argmax(cf[c] == lam_facets[:, None], axis=1)
        rows.append(np.arange(len(lam_facets)))
        cols.append(c * nl + pos)
    C = sp.csr_matrix(
        (np.ones(2 * len(lam_facets)), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(lam_facets), nc * nl),
    )
    # divergence weight of each multiplier's local dof; 1 for flux-integral dofs
    rescale = np.ones(len(lam_facets))
    blocks = sp.block_diag(list(S_inv), format="csr")
    D = sp.diags(rescale)
    H = (D @ C @ blocks @ C.T @ D).tocsr()
    H = 0.5 * (H + H.T)
    return HybridizedSystem(system, S_inv, w, free_local, fixed_local, S, C, H.tocsr(), lam_facets, rescale)
