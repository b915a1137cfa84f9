"""Monte Carlo and adaptive multilevel Monte Carlo estimation.

Levels run from 0 (finest) to L (coarsest).  The correction on level l is
``Y_l = Q_l - Q_{l+1}`` computed from one paired sample, and ``Y_L = Q_L``.
The estimator is the sum of the per-level sample means of ``Y_l``.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

__all__ = [
    "RunningStats",
    "LevelStats",
    "MlmcResult",
    "MlmcError",
    "mc_estimate",
    "optimal_allocation",
    "run_adaptive_mlmc",
    "fit_rate",
    "predicted_cost_order",
    "DarcyMlmcProblem",
]


class MlmcError(RuntimeError):
    def __init__(self, msg, partial=None):
        super().__init__(msg)
        self.partial = partial


@dataclass
class RunningStats:
    """Welford accumulator for mean and unbiased variance."""

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def push(self, x: float) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    @property
    def variance(self) -> float:
        return max(self.m2 / (self.n - 1), 0.0) if self.n > 1 else 0.0


def mc_estimate(samples) -> tuple[float, float, float]:
    """Sample mean, unbiased variance and standard error of the mean."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("no samples")
    mean = float(x.mean())
    if x.size < 2:
        return mean, float("nan"), float("nan")
    var = float(x.var(ddof=1))
    return mean, var, math.sqrt(var / x.size)


def optimal_allocation(V, C, eps2_sampling: float, min_samples: int = 1) -> np.ndarray:
    """``N_l = ceil(sum_j sqrt(V_j C_j) * sqrt(V_l / C_l) / eps2)``, at least ``min_samples``."""
    V = np.asarray(V, dtype=float)
    C = np.asarray(C, dtype=float)
    if V.shape != C.shape:
        raise ValueError("V and C must have the same length")
    if np.any(V < 0) or np.any(C <= 0) or eps2_sampling <= 0:
        raise ValueError("need V >= 0, C > 0 and a positive target")
    total = np.sum(np.sqrt(V * C))
    N = np.ceil(total * np.sqrt(V / C) / eps2_sampling - 1e-12)
    return np.maximum(N, min_samples).astype(np.int64)


def fit_rate(values) -> float | None:
    """Rate ``a`` in ``|v_l| ~ c 2^(a l)`` by least squares over log2|v|; ``None`` if unusable."""
    v = np.abs(np.asarray(values, dtype=float))
    ok = v > 0
    if ok.sum() < 2:
        return None
    l = np.flatnonzero(ok)
    a = np.polyfit(l, np.log2(v[ok]), 1)[0]
    return float(a)


def predicted_cost_order(alpha, beta, gamma) -> str:
    """Asymptotic MLMC cost in terms of eps for weak rate alpha, variance rate beta, cost rate gamma."""
    if alpha is None or beta is None or gamma is None or alpha <= 0:
        return "undetermined"
    if abs(beta - gamma) < 0.1:
        return "eps^-2 (log eps)^2"
    if beta > gamma:
        return "eps^-2"
    return f"eps^-{2 + (gamma - beta) / alpha:.3g}"


@dataclass
class LevelStats:
    level: int
    Y: RunningStats = field(default_factory=RunningStats)
    Q: RunningStats = field(default_factory=RunningStats)
    seconds: float = 0.0
    cost_model: float = 1.0

    @property
    def n(self) -> int:
        return self.Y.n

    @property
    def avg_seconds(self) -> float:
        return self.seconds / self.n if self.n else 0.0

    def as_row(self) -> dict:
        return {
            "level": self.level,
            "N": self.n,
            "mean_Q": self.Q.mean,
            "mean_Y": self.Y.mean,
            "var_Q": self.Q.variance,
            "var_Y": self.Y.variance,
            "cost_model": self.cost_model,
            "avg_seconds": self.avg_seconds,
            "total_seconds": self.seconds,
        }


@dataclass
class MlmcResult:
    estimate: float
    levels: list
    eps2: float
    sampling_error: float
    bias_estimate: float
    wall_time: float
    iterations: int
    converged: bool
    rates: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def mse_estimate(self) -> float:
        return self.sampling_error + self.bias_estimate**2

    @property
    def standard_error(self) -> float:
        return math.sqrt(self.sampling_error)

    def summary(self) -> dict:
        return {
            "estimate": self.estimate,
            "eps2": self.eps2,
            "sampling_error": self.sampling_error,
            "standard_error": self.standard_error,
            "bias_estimate": self.bias_estimate,
            "mse_estimate": self.mse_estimate,
            "converged": self.converged,
            "iterations": self.iterations,
            "samples": [s.n for s in self.levels],
            "rates": self.rates,
            "allocation_history": self.history,
        }


class LevelProblem(Protocol):
    n_levels: int

    def evaluate(self, level: int, index: int) -> tuple[float, float | None]: ...

    def cost(self, level: int) -> float: ...


def _result(stats, eps2, t0, iterations, converged, history) -> MlmcResult:
    means = [s.Y.mean for s in stats]
    est = float(sum(means))
    samp = float(sum(s.Y.variance / s.n for s in stats if s.n))
    L = len(stats) - 1
    corr = means[:L]
    alpha = fit_rate(corr[::-1]) if len(corr) >= 2 else None  # coarse-to-fine decay as a positive rate
    if alpha is not None:
        alpha = -alpha
    if L == 0:
        bias = 0.0
    elif alpha is not None and alpha > 0:
        bias = abs(means[0]) / (2**alpha - 1)
    else:
        bias = abs(means[0])
    beta = fit_rate([s.Y.variance for s in stats[:L]][::-1]) if L >= 2 else None
    gamma = fit_rate([s.cost_model for s in stats[:L]][::-1]) if L >= 2 else None
    rates = {
        "alpha": alpha,
        "beta": -beta if beta is not None else None,
        "gamma": gamma,
    }
    rates["predicted_cost"] = predicted_cost_order(rates["alpha"], rates["beta"], rates["gamma"])
    return MlmcResult(est, stats, eps2, samp, bias, time.perf_counter() - t0, iterations, converged, rates, history)


def run_adaptive_mlmc(problem: LevelProblem, eps2: float, warmup: int = 8, min_samples: int = 2,
                      max_samples: int = 10**6, max_iterations: int = 50, workers: int = 1,
                      cost: str = "model", progress: Callable | None = None) -> MlmcResult:
    """Draw samples until the optimal allocation for ``eps2 / 2`` sampling error is met.

    ``cost='model'`` uses the problem's deterministic cost model (so the
    allocation, and hence the estimate, does not depend on timing noise);
    ``cost='seconds'`` uses the measured mean wall time per sample.
    """
    if eps2 <= 0:
        raise ValueError("target MSE must be positive")
    if cost not in ("model", "seconds"):
        raise ValueError("cost must be 'model' or 'seconds'")
    t0 = time.perf_counter()
    nl = problem.n_levels
    stats = [LevelStats(l, cost_model=float(problem.cost(l))) for l in range(nl)]
    target = np.full(nl, max(warmup, min_samples), dtype=np.int64)
    history = []

    def run(li):
        l, i = li
        t = time.perf_counter()
        qf, qc = problem.evaluate(l, i)
        return qf, qc, time.perf_counter() - t

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    it = 0
    converged = False
    try:
        while it < max_iterations:
            it += 1
            for l in range(nl):
                todo = [(l, i) for i in range(stats[l].n, int(target[l]))]
                if not todo:
                    continue
                try:
                    results = list(pool.map(run, todo)) if pool else [run(t) for t in todo]
                except Exception as exc:
                    raise MlmcError(f"sampling failed on level {l}: {exc}",
                                    _result(stats, eps2, t0, it, False, history)) from exc
                for qf, qc, sec in results:  # index order, independent of scheduling
                    stats[l].Q.push(qf)
                    stats[l].Y.push(qf - qc if qc is not None else qf)
                    stats[l].seconds += sec
            V = np.array([s.Y.variance for s in stats])
            C = np.array([s.cost_model if cost == "model" else max(s.avg_seconds, 1e-9) for s in stats])
            N = np.minimum(optimal_allocation(V, C, eps2 / 2.0, min_samples), max_samples)
            history.append({"iteration": it, "variances": V.tolist(), "costs": C.tolist(), "allocation": N.tolist()})
            if progress:
                progress(it, stats, N)
            done = np.array([s.n for s in stats])
            if np.all(N <= done):
                converged = True
                break
            target = np.maximum(done, N)
    finally:
        if pool:
            pool.shutdown()
    return _result(stats, eps2, t0, it, converged, history)


class DarcyMlmcProblem:
    """Paired permeability samples pushed through the Darcy model on each level.

    ``k = exp(baseline_l + theta)``; with ``sampler=None`` the field is
    deterministic (``theta = 0``).
    """

    def __init__(self, sampler, model, qoi: Callable, seed: int, baseline=0.0, solver_opts=None):
        self.sampler = sampler
        self.model = model
        self.qoi = qoi
        self.seed = int(seed)
        self.hierarchy = model.hierarchy
        self.solver_opts = dict(solver_opts or {})
        self.baseline = self._baselines(baseline)

    def _baselines(self, baseline):
        from .darcy import coarsen_cell_field

        h = self.hierarchy
        if np.isscalar(baseline):
            return [np.full(h[l].mesh.n_cells, float(baseline)) for l in range(h.n_levels)]
        out = [np.asarray(baseline, dtype=float)]
        for l in range(h.n_levels - 1):
            out.append(coarsen_cell_field(out[-1], h.pairs[l].P_theta, h[l + 1].mesh.cell_volumes, h[l].mesh.cell_volumes))
        return out

    @property
    def n_levels(self) -> int:
        return self.hierarchy.n_levels

    def cost(self, level: int) -> float:
        """Unknown counts of the sampler and Darcy systems touched by one sample."""
        h = self.hierarchy

        def dofs(l):
            return h[l].mesh_bar.n_facets + h[l].mesh_bar.n_cells + h[l].mesh.n_facets + h[l].mesh.n_cells

        return float(dofs(level) + (dofs(level + 1) if level + 1 < h.n_levels else 0))

    def q_of(self, level: int, theta) -> float:
        from .darcy import assemble_darcy, solve_darcy

        k = np.exp(self.baseline[level] + theta)
        sol = solve_darcy(assemble_darcy(self.model, level, k), **self.solver_opts)
        return float(self.qoi(sol, self.hierarchy[level].mesh))

    def evaluate(self, level: int, index: int):
        L = self.n_levels - 1
        if self.sampler is None:
            zf = np.zeros(self.hierarchy[level].mesh.n_cells)
            qf = self.q_of(level, zf)
            qc = self.q_of(level + 1, np.zeros(self.hierarchy[level + 1].mesh.n_cells)) if level < L else None
            return qf, qc
        noise = self.sampler.noise(level, self.seed, (level, index))
        if level < L:
            fine, coarse = self.sampler.sample_pair(level, noise)
            return self.q_of(level, fine.theta), self.q_of(level + 1, coarse.theta)
        r = self.sampler.sample(level, noise)
        return self.q_of(level, r.theta), None
