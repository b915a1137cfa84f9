"""PNG figures rendered next to the CSV outputs (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .mesh import Mesh  # noqa: E402
from .stats import matern_cov  # noqa: E402

__all__ = ["plot_cell_field", "plot_covariance", "plot_mlmc_levels", "plot_timing"]

_STYLE = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps PNG bytes stable across reruns
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_cell_field(mesh: Mesh, values: np.ndarray, path, title: str = "") -> Path:
    """Cellwise field on a 2D mesh, or on the cells cut by the mid-plane z = const in 3D."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 4))
        ax.grid(False)
        if mesh.dim == 2 and mesh.kind == "simplex":
            im = ax.tripcolor(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.cells, facecolors=values,
                              shading="flat", cmap="viridis")
        elif mesh.dim == 2:
            nx, ny = mesh.shape
            xs = np.linspace(mesh.extents[0][0], mesh.extents[0][1], nx + 1)
            ys = np.linspace(mesh.extents[1][0], mesh.extents[1][1], ny + 1)
            im = ax.pcolormesh(xs, ys, np.asarray(values).reshape(ny, nx), cmap="viridis")
        else:
            lo, hi = mesh.cell_bounds
            z = 0.5 * (mesh.vertices[:, 2].min() + mesh.vertices[:, 2].max())
            sel = (lo[:, 2] <= z) & (z < hi[:, 2])
            c = mesh.cell_centroids[sel]
            im = ax.scatter(c[:, 0], c[:, 1], c=np.asarray(values)[sel], s=12, cmap="viridis")
            title = f"{title} (slice z={z:.3g})"
        ax.set_aspect("equal")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, shrink=0.85)
        return _save(fig, path)


def plot_covariance(probe, sigma2: float, kappa: float, nu: float, path, n_se: float = 3.0) -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.4))
        r = probe.distance
        grid = np.linspace(0, max(r.max(), 1e-12) * 1.05, 200)
        ax.plot(grid, matern_cov(grid, sigma2, kappa, nu), color="k", lw=1.2, label="Matérn reference")
        ax.errorbar(r, probe.cov, yerr=n_se * probe.se, fmt="o", ms=3.5, capsize=2, color="tab:blue",
                    label=f"empirical ± {n_se:g} SE")
        ax.set_xlabel("separation r")
        ax.set_ylabel("covariance")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_mlmc_levels(rows: list[dict], path) -> Path:
    """Per-level variance and mean of Q and of the corrections Y."""
    lev = np.array([r["level"] for r in rows])
    with plt.rc_context(_STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(7.5, 3.2))
        for key, lab, m in (("var_Q", "V[Q_l]", "o-"), ("var_Y", "V[Y_l]", "s--")):
            v = np.array([r[key] for r in rows], dtype=float)
            a.semilogy(lev, np.where(v > 0, v, np.nan), m, label=lab)
        a.set_xlabel("level (0 = finest)")
        a.legend(frameon=False)
        for key, lab, m in (("mean_Q", "|E[Q_l]|", "o-"), ("mean_Y", "|E[Y_l]|", "s--")):
            v = np.abs(np.array([r[key] for r in rows], dtype=float))
            b.semilogy(lev, np.where(v > 0, v, np.nan), m, label=lab)
        b.set_xlabel("level (0 = finest)")
        b.legend(frameon=False)
        for ax in (a, b):
            ax.set_xticks(lev)
            ax.invert_xaxis()
        return _save(fig, path)


def plot_timing(stages: dict, path) -> Path:
    names = list(stages)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(6.5, 0.35 * len(names) + 1.0))
        ax.barh(range(len(names)), [stages[n] for n in names], color="tab:gray")
        ax.set_yticks(range(len(names)), names)
        ax.invert_yaxis()
        ax.set_xlabel("seconds")
        return _save(fig, path)
