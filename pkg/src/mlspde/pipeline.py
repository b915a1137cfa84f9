"""Builders that turn a resolved config into hierarchy, sampler and Darcy model."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .darcy import (
    DarcyModel,
    layered_log_permeability,
    qoi_effective_permeability,
    qoi_point_pressure,
)
from .hierarchy import LevelHierarchy
from .mesh import build_simplicial_mesh
from .mlmc import DarcyMlmcProblem
from .sampler import MaternParams, Sampler
from .stats import empirical_covariance, interior_probe_pairs, matern_cov, probe_summary, variance_field
from .timing import StageTimer

__all__ = [
    "build_hierarchy",
    "build_params",
    "build_sampler",
    "build_darcy",
    "build_mlmc_problem",
    "draw_realizations",
    "covariance_check",
]


def build_hierarchy(cfg: dict, workers: int = 1, timer: StageTimer | None = None) -> LevelHierarchy:
    g = cfg["geometry"]
    mesh = build_simplicial_mesh(g["domain"])
    t = cfg["transfer"]
    return LevelHierarchy.from_config(
        mesh, g["margin"], g["embedding_cells"], g["levels"], workers=workers,
        leaf_capacity=t["leaf_capacity"], max_depth=t["max_depth"], timer=timer,
    )


def build_params(cfg: dict, dim: int) -> MaternParams:
    m = cfg["matern"]
    if m["kappa"] is not None:
        return MaternParams(m["sigma2"], m["kappa"], dim)
    return MaternParams.from_correlation_length(m["sigma2"], m["correlation_length"], dim)


def build_sampler(cfg: dict, hierarchy: LevelHierarchy, timer: StageTimer | None = None) -> Sampler:
    s = cfg["sampler"]
    return Sampler(
        hierarchy, build_params(cfg, hierarchy.dim), s["solver"], s["preconditioner"], s["rtol"], s["atol"],
        s["maxit"], timer=timer, g_scale=cfg["matern"]["g_scale"],
    )


def build_darcy(cfg: dict, hierarchy: LevelHierarchy):
    """Darcy model, QoI callable ``(solution, mesh) -> float`` and finest-level log-k baseline."""
    d = cfg["darcy"]
    model = DarcyModel(hierarchy, d["bc"])
    if d["qoi"] == "effective_permeability":
        outlet = d["outlet"]

        def qoi(sol, mesh):
            return qoi_effective_permeability(sol, outlet, mesh)
    else:
        point = np.asarray(d["point"], dtype=float)

        def qoi(sol, mesh):
            return qoi_point_pressure(sol, point, mesh)

    base = d["log_k_mean"]
    if d["baseline"] == "layered":
        base = base + layered_log_permeability(hierarchy[0].mesh, d["layers"], contrast=d["layer_contrast"],
                                               seed=cfg["run"]["seed"])
    return model, qoi, base


def _solver_opts(cfg: dict) -> dict:
    d = cfg["darcy"]
    return dict(method=d["solver"], schur_solver=d["schur"], variant=d["ldu_variant"], gs_sweeps=d["gs_sweeps"],
                rtol=d["rtol"], atol=d["atol"], restart=d["restart"], maxit=d["maxit"])


def build_mlmc_problem(cfg: dict, hierarchy: LevelHierarchy, sampler: Sampler | None, seed: int) -> DarcyMlmcProblem:
    model, qoi, base = build_darcy(cfg, hierarchy)
    return DarcyMlmcProblem(sampler, model, qoi, seed, base, _solver_opts(cfg))


def draw_realizations(sampler: Sampler, level: int, n: int, seed: int, workers: int = 1, first: int = 0):
    """Realizations ``first .. first + n - 1`` on ``level``; stream ``(level, i)`` for sample ``i``."""
    sampler.solver(level)

    def one(i):
        return sampler.sample(level, sampler.noise(level, seed, (level, i)))

    idx = range(first, first + n)
    if workers > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(one, idx))
    return [one(i) for i in idx]


def covariance_check(cfg: dict, sampler: Sampler, n: int, seed: int, workers: int = 1, level: int | None = None):
    """Empirical covariance at probe pairs against the Matérn reference.

    Returns ``(probe, summary, samples)`` with ``samples`` of shape (n, cells of D).
    """
    v = cfg["verify"]
    level = v["level"] if level is None else level
    if n < 2:
        raise ValueError("covariance verification needs at least two samples")
    h = sampler.hierarchy
    mesh = h[level].mesh
    p = sampler.params
    lam = p.correlation_length
    hbar = float(h[level].mesh_bar.cell_sizes.max())
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    extent = float((hi - lo).min())
    max_d = v["max_distance"] if v["max_distance"] is not None else 2.0 * lam
    min_d = v["min_distance"] if v["min_distance"] is not None else 3.0 * hbar
    inset = v["inset"] if v["inset"] is not None else (lam if extent - 2 * lam >= max_d else 0.1 * extent)
    probe = interior_probe_pairs(lo, hi, v["probes"], max_d, seed=v["probe_seed"], inset=inset, snap_to=mesh,
                                 min_distance=min(min_d, max_d))
    real = draw_realizations(sampler, level, n, seed, workers)
    samples = np.array([r.theta for r in real])
    filled = empirical_covariance(samples, probe, mesh, n_boot=v["bootstrap"], seed=seed,
                                  reference=lambda r: matern_cov(r, p.sigma2, p.kappa, p.nu))
    summary = probe_summary(filled, v["n_se"], v["max_fail_fraction"])
    summary.update(level=level, samples=n, hbar=hbar, correlation_length=lam, kappa=p.kappa, nu=p.nu,
                   mean_variance=float(variance_field(samples).mean()))
    return filled, summary, samples
