"""Reference Matérn covariance and empirical checks of sampled fields."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from .mesh import Mesh, MeshError, locate_points

__all__ = [
    "CovarianceProbe",
    "matern_cov",
    "empirical_covariance",
    "variance_field",
    "interior_probe_pairs",
    "probe_summary",
    "variance_se",
]


def matern_cov(r, sigma2: float, kappa: float, nu: float):
    """``sigma2 / (2^(nu-1) Gamma(nu)) (kappa r)^nu K_nu(kappa r)``, equal to ``sigma2`` at r = 0."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("distances must be nonnegative")
    x = kappa * r
    with np.errstate(invalid="ignore", over="ignore"):
        val = sigma2 / (2 ** (nu - 1) * gamma_fn(nu)) * x**nu * kv(nu, x)
    # below 1e-10 the relative gap to sigma2 is under 1e-10 for nu >= 1/2, and x^nu K_nu(x) is 0 * inf
    val = np.where(x < 1e-10, sigma2, val)
    val = np.where(np.isfinite(val), val, 0.0)  # K_nu underflows for very large arguments
    return val if val.ndim else float(val)


@dataclass
class CovarianceProbe:
    """Point pairs with empirical covariance, bootstrap SE and reference value."""

    x: np.ndarray
    y: np.ndarray
    cov: np.ndarray | None = None
    se: np.ndarray | None = None
    reference: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if self.x.shape != self.y.shape:
            raise ValueError("probe endpoints must have matching shapes")

    @property
    def distance(self) -> np.ndarray:
        return np.linalg.norm(self.y - self.x, axis=1)

    def z_scores(self) -> np.ndarray:
        return (self.cov - self.reference) / self.se

    def rows(self) -> list[dict]:
        out = []
        for i in range(len(self.x)):
            out.append({
                "r": float(self.distance[i]),
                "empirical_cov": float(self.cov[i]),
                "se": float(self.se[i]),
                "reference_cov": float(self.reference[i]) if self.reference is not None else float("nan"),
            })
        return out


def _cells_for(mesh: Mesh, pts: np.ndarray) -> np.ndarray:
    cells = locate_points(mesh, pts)
    if np.any(cells < 0):
        bad = pts[cells < 0][0]
        raise MeshError(f"probe point {bad.tolist()} lies outside the domain")
    return cells


def empirical_covariance(samples: np.ndarray, probe: CovarianceProbe, mesh: Mesh, n_boot: int = 200,
                         seed: int = 12345, reference=None) -> CovarianceProbe:
    """Sample covariance of the cells containing each probe pair, with bootstrap SE.

    ``samples`` is (n_samples, n_cells).  ``reference`` may be a callable of
    distance, used to fill ``probe.reference``.
    """
    S = np.asarray(samples, dtype=float)
    if S.ndim != 2 or S.shape[0] < 2:
        raise ValueError("need at least two realizations")
    a = S[:, _cells_for(mesh, probe.x)]
    b = S[:, _cells_for(mesh, probe.y)]
    n = S.shape[0]

    def cov(a, b):
        return ((a - a.mean(axis=0)) * (b - b.mean(axis=0))).sum(axis=0) / (a.shape[0] - 1)

    est = cov(a, b)
    rng = np.random.default_rng(seed)
    boot = np.empty((n_boot, a.shape[1]))
    for k in range(n_boot):
        idx = rng.integers(0, n, n)
        boot[k] = cov(a[idx], b[idx])
    se = boot.std(axis=0, ddof=1)
    ref = reference(probe.distance) if callable(reference) else reference
    return CovarianceProbe(probe.x, probe.y, est, se, None if ref is None else np.asarray(ref, dtype=float))


def variance_field(samples: np.ndarray) -> np.ndarray:
    """Per-cell unbiased sample variance."""
    S = np.asarray(samples, dtype=float)
    if S.ndim != 2 or S.shape[0] < 2:
        raise ValueError("need at least two realizations")
    return S.var(axis=0, ddof=1)


def variance_se(samples: np.ndarray) -> np.ndarray:
    """Standard error of the per-cell sample variance (fourth-moment formula)."""
    S = np.asarray(samples, dtype=float)
    n = S.shape[0]
    c = S - S.mean(axis=0)
    m4 = (c**4).mean(axis=0)
    v = (c**2).sum(axis=0) / (n - 1)
    return np.sqrt(np.maximum(m4 - v**2 * (n - 3) / (n - 1), 0.0) / n)


def interior_probe_pairs(box_lo, box_hi, n_pairs: int, max_distance: float, seed: int = 0,
                         include_zero: bool = True, inset: float = 0.0, snap_to: Mesh | None = None,
                         min_distance: float = 0.0) -> CovarianceProbe:
    """Random pairs inside ``[lo + inset, hi - inset]`` with separations spread over ``[0, max_distance]``.

    With ``include_zero`` the first pair is a point with itself (a variance
    probe) and the others are spread over ``[min_distance, max_distance]``.  ``snap_to`` moves every point to the centroid of its containing
    cell, so the separation is the one the cellwise field actually sees.
    """
    lo = np.asarray(box_lo, float) + inset
    hi = np.asarray(box_hi, float) - inset
    if np.any(hi <= lo):
        raise ValueError("inset leaves no room for probe points")
    d = len(lo)
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    if include_zero:
        dists = np.concatenate([[0.0], np.linspace(min_distance or max_distance / n_pairs, max_distance, n_pairs - 1)])
    else:
        dists = np.linspace(min_distance or max_distance / n_pairs, max_distance, n_pairs)
    for r in dists:
        for _ in range(10000):
            x = lo + rng.random(d) * (hi - lo)
            v = rng.standard_normal(d)
            y = x + r * v / np.linalg.norm(v)
            if np.all(y >= lo) and np.all(y <= hi):
                if snap_to is None or np.all(locate_points(snap_to, np.array([x, y])) >= 0):
                    break
        else:
            raise ValueError(f"could not place a probe pair at distance {r}")
        xs.append(x)
        ys.append(y)
    xs, ys = np.array(xs), np.array(ys)
    if snap_to is not None:
        xs = snap_to.cell_centroids[_cells_for(snap_to, xs)]
        ys = snap_to.cell_centroids[_cells_for(snap_to, ys)]
    return CovarianceProbe(xs, ys)


def probe_summary(probe: CovarianceProbe, n_se: float = 3.0, max_fail_fraction: float = 0.05) -> dict:
    z = probe.z_scores()
    fail = np.abs(z) > n_se
    frac = float(fail.mean()) if len(z) else 0.0
    return {
        "n_probes": int(len(z)),
        "n_outside": int(fail.sum()),
        "fraction_outside": frac,
        "n_se": n_se,
        "max_fail_fraction": max_fail_fraction,
        "passed": bool(frac <= max_fail_fraction + 1e-12),
        "max_abs_z": float(np.max(np.abs(z))) if len(z) else 0.0,
    }
