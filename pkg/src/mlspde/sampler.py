"""Matérn Gaussian fields from the mixed SPDE ``(kappa^2 - Laplace) theta = g W``.

Fields are computed on the structured embedding mesh, where the mixed
system reads

    [ M   B^T        ] [u_bar    ]   [ 0                  ]
    [ B   -kappa^2 W ] [theta_bar] = [ -g W^{1/2} xi      ]

with ``u_bar . n = 0`` imposed essentially on the box boundary, and then
L2-projected onto the unstructured mesh of D.  Coarse systems are Galerkin
projections of the finest one; paired coarse samples are driven by the
restriction of the fine white noise.
"""

from __future__ import annotations

import math
import threading
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fespace import assemble_divergence, assemble_flux_mass_local
from .hierarchy import LevelHierarchy
from .linalg import (
    DEFAULT_ATOL,
    DEFAULT_RTOL,
    SaddleSystem,
    apply_essential_flux_bc,
    hybridize,
)
from .timing import StageTimer

__all__ = [
    "MaternParams",
    "NoiseVector",
    "Realization",
    "Sampler",
    "scaling_g",
    "draw_noise",
    "white_noise_rhs",
    "assemble_spde_system",
    "sample_single_level",
    "sample_pair",
]


@dataclass(frozen=True)
class MaternParams:
    """Matérn parameters with smoothness fixed by ``alpha = nu + d/2 = 2``."""

    sigma2: float
    kappa: float
    dim: int

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        if not (self.kappa > 0 and math.isfinite(self.kappa)):
            raise ValueError("kappa must be positive and finite")
        if not (self.sigma2 > 0 and math.isfinite(self.sigma2)):
            raise ValueError("sigma2 must be positive and finite")

    @classmethod
    def from_correlation_length(cls, sigma2: float, length: float, dim: int) -> "MaternParams":
        """Use ``kappa = sqrt(8 nu) / length``."""
        if length <= 0:
            raise ValueError("correlation length must be positive")
        nu = 2.0 - dim / 2.0
        return cls(sigma2, math.sqrt(8.0 * nu) / length, dim)

    @property
    def nu(self) -> float:
        return 2.0 - self.dim / 2.0

    @property
    def alpha(self) -> float:
        return self.nu + self.dim / 2.0

    @property
    def correlation_length(self) -> float:
        return math.sqrt(8.0 * self.nu) / self.kappa

    @property
    def g(self) -> float:
        return scaling_g(self)

    def metadata(self) -> dict:
        out = asdict(self)
        out.update(nu=self.nu, g=self.g, correlation_length=self.correlation_length,
                   kappa_mapping="kappa = sqrt(8 nu) / correlation_length")
        return out


def scaling_g(params: MaternParams) -> float:
    """Unit-marginal-variance scaling ``(4 pi)^{d/4} kappa^nu sqrt(Gamma(nu + d/2) / Gamma(nu))``."""
    d, nu = params.dim, params.nu
    return (4 * math.pi) ** (d / 4) * params.kappa**nu * math.sqrt(math.gamma(nu + d / 2) / math.gamma(nu))


@dataclass(frozen=True, eq=False)
class NoiseVector:
    """Standard normal draws on one structured level, tagged by stream."""

    level: int
    xi: np.ndarray
    seed: int | None = None
    stream: tuple = ()

    def metadata(self) -> dict:
        return {"level": self.level, "seed": self.seed, "stream": list(self.stream), "length": int(len(self.xi))}


def draw_noise(n: int, seed: int, stream: tuple, level: int | None = None) -> NoiseVector:
    """Counter-based Philox stream keyed by ``(seed, *stream)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    rng = np.random.Generator(np.random.Philox(ss))
    return NoiseVector(level if level is not None else (stream[0] if stream else 0), rng.standard_normal(n), seed, tuple(stream))


def white_noise_rhs(W, noise, g: float) -> np.ndarray:
    """``-g W^{1/2} xi`` for a diagonal mass ``W`` (vector or sparse diagonal)."""
    w = W.diagonal() if sp.issparse(W) else np.asarray(W, dtype=float)
    xi = noise.xi if isinstance(noise, NoiseVector) else np.asarray(noise, dtype=float)
    if w.shape != xi.shape:
        raise ValueError(f"noise has length {len(xi)} but the mass has {len(w)} cells")
    return -g * np.sqrt(w) * xi


@dataclass(frozen=True, eq=False)
class Realization:
    level: int
    theta_bar: np.ndarray
    theta: np.ndarray
    u_bar: np.ndarray | None = None
    noise: dict | None = None
    iterations: int = 0
    coarse: "Realization | None" = None


# --------------------------------------------------------------- systems
def assemble_spde_system(hierarchy: LevelHierarchy, level: int, params: MaternParams,
                         _cache: dict | None = None) -> SaddleSystem:
    """Sampler system on ``level``; finest assembled directly, coarser by Galerkin projection."""
    cache = _cache if _cache is not None else {}
    if level in cache:
        return cache[level]
    lev = hierarchy[level]
    if level == 0:
        M = assemble_flux_mass_local(lev.flux_bar, lev.local_mass_bar)
        B = assemble_divergence(lev.flux_bar, lev.scalar_bar)
        w = lev.mesh_bar.cell_volumes.copy()
    else:
        fine = assemble_spde_system(hierarchy, level - 1, params, cache)
        pb = hierarchy.pairs_bar[level - 1]
        M = (pb.P_u.T @ fine.M @ pb.P_u).tocsr()
        B = (pb.P_theta.T @ fine.B @ pb.P_u).tocsr()
        w = pb.P_theta.T @ (fine.reaction / params.kappa**2)
    k2 = params.kappa**2
    sysm = SaddleSystem(
        M, B, sp.diags(-k2 * w).tocsr(), np.zeros(M.shape[0]), np.zeros(B.shape[0]),
        variant="sampler", level=level, space=lev.flux_bar, reaction=k2 * w, local_mass=lev.local_mass_bar,
    )
    sysm = apply_essential_flux_bc(sysm, lev.mesh_bar.boundary_facets, 0.0)
    cache[level] = sysm
    return sysm


def solve_stage(level: int) -> str:
    return f"Solve sampler system for theta_bar_{level}"


def project_stage(level: int) -> str:
    return f"Compute theta_{level} = Pi_{level} theta_bar_{level}"


class _LevelSolver:
    def __init__(self, system: SaddleSystem, method: str, precond: str, rtol: float, atol: float, maxit: int):
        self.system = system
        self.method = method
        if method == "direct":
            self._lu = spla.splu(system.matrix().tocsc())
        elif method in ("hybrid", "hybrid-direct"):
            self._hyb = hybridize(system)
            self._hyb.set_solver("direct" if method == "hybrid-direct" else "pcg", precond, rtol, atol, maxit)
        else:
            raise ValueError(f"unknown sampler solver {method!r}")

    def solve(self, f_p: np.ndarray, x0=None):
        s = self.system
        if self.method == "direct":
            x = self._lu.solve(s.with_rhs(f_p=f_p).rhs())
            return x[: s.n_u], x[s.n_u :], 0
        return self._hyb.solve_info(np.zeros(s.n_u), f_p, x0)


class Sampler:
    """Hierarchical sampler with per-level cached systems and solvers.

    ``solver`` is ``hybrid`` (hybridization with PCG on the multiplier
    system, preconditioned by ``precond``), ``hybrid-direct`` or
    ``direct`` (LU of the monolithic saddle system).  ``g_scale`` multiplies
    the unit-variance scaling and exists to check that miscalibration is
    caught.
    """

    def __init__(self, hierarchy: LevelHierarchy, params: MaternParams, solver: str = "hybrid",
                 precond: str = "amg", rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
                 maxit: int = 1000, timer: StageTimer | None = None, g_scale: float = 1.0):
        if params.dim != hierarchy.dim:
            raise ValueError("parameter dimension does not match the mesh dimension")
        self.hierarchy = hierarchy
        self.params = params
        self.g_scale = float(g_scale)
        self.solver_opts = dict(method=solver, precond=precond, rtol=rtol, atol=atol, maxit=maxit)
        self.timer = timer if timer is not None else StageTimer()
        self._systems: dict = {}
        self._solvers: dict = {}
        self._lock = threading.Lock()

    def system(self, level: int) -> SaddleSystem:
        with self._lock:
            return assemble_spde_system(self.hierarchy, level, self.params, self._systems)

    def solver(self, level: int) -> _LevelSolver:
        with self._lock:
            if level not in self._solvers:
                sysm = assemble_spde_system(self.hierarchy, level, self.params, self._systems)
                with self.timer.stage("Preconditioner Set-up"):
                    o = self.solver_opts
                    self._solvers[level] = _LevelSolver(sysm, o["method"], o["precond"], o["rtol"], o["atol"], o["maxit"])
            return self._solvers[level]

    def prepare(self, levels=None) -> "Sampler":
        for l in range(self.hierarchy.n_levels) if levels is None else levels:
            self.solver(l)
        return self

    def noise(self, level: int, seed: int, stream: tuple) -> NoiseVector:
        return draw_noise(self.hierarchy[level].mesh_bar.n_cells, seed, stream, level)

    def rhs(self, level: int, noise: NoiseVector) -> np.ndarray:
        g = self.g_scale * self.params.g * math.sqrt(self.params.sigma2)
        return white_noise_rhs(self.hierarchy[level].mesh_bar.cell_volumes, noise, g)

    def _solve(self, level: int, f_p: np.ndarray, x0=None):
        return self.solver(level).solve(f_p, x0)

    def sample(self, level: int, noise: NoiseVector) -> Realization:
        f_p = self.rhs(level, noise)
        self.solver(level)
        with self.timer.stage(solve_stage(level)):
            u, th, its = self._solve(level, f_p)
        with self.timer.stage(project_stage(level)):
            theta = self.hierarchy.transfers[level].apply(th)
        return Realization(level, th, theta, u, noise.metadata(), its)

    def sample_pair(self, level: int, noise: NoiseVector) -> tuple[Realization, Realization]:
        """Fine sample on ``level`` and its coarse companion on ``level + 1``."""
        h = self.hierarchy
        if level + 1 >= h.n_levels:
            raise ValueError(f"level {level} has no coarser level")
        pb = h.pairs_bar[level]
        f_p = self.rhs(level, noise)
        f_pc = pb.P_theta.T @ f_p
        uc, thc, its_c = self._solve(level + 1, f_pc)
        x0 = (pb.P_u @ uc, pb.P_theta @ thc)
        u, th, its = self._solve(level, f_p, x0)
        meta = noise.metadata()
        coarse = Realization(level + 1, thc, h.transfers[level + 1].apply(thc), uc, meta, its_c)
        fine = Realization(level, th, h.transfers[level].apply(th), u, meta, its, coarse)
        return fine, coarse


def sample_single_level(sampler: Sampler, level: int, noise: NoiseVector) -> Realization:
    return sampler.sample(level, noise)


def sample_pair(sampler: Sampler, level: int, noise: NoiseVector) -> tuple[Realization, Realization]:
    return sampler.sample_pair(level, noise)
