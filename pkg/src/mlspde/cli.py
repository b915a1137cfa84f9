"""Command-line entry points.

Exit codes: 0 success, 1 verification failed, 2 invalid config or
arguments, 3 runtime failure (partial telemetry is written first).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io as out_io
from .config import DEFAULTS, ConfigError, dump_config, load_config, resolve
from .linalg import SolverError
from .mesh import MeshError
from .mlmc import MlmcError, run_adaptive_mlmc
from .pipeline import (
    build_hierarchy,
    build_mlmc_problem,
    build_sampler,
    covariance_check,
    draw_realizations,
)
from .timing import StageTimer
from .transfer import STAGES, TransferError, build_transfer

log = logging.getLogger("mlspde")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _common(suppress: bool) -> argparse.ArgumentParser:
    # flags are accepted before and after the subcommand; the subcommand copy
    # suppresses its defaults so it cannot clobber values given up front
    d = {"default": argparse.SUPPRESS} if suppress else {}
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="YAML run configuration", **d)
    p.add_argument("--seed", type=int, help="master RNG seed (overrides run.seed)", **d)
    p.add_argument("--workers", type=int, help="worker threads (overrides run.workers)", **d)
    p.add_argument("--out", type=Path, help="output directory (overrides run.out)", **d)
    p.add_argument("--no-plots", action="store_true", help="skip PNG figures", **d)
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit", **d)
    p.add_argument("-v", "--verbose", action="store_true", **d)
    return p


def make_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    parser = argparse.ArgumentParser(prog="mlspde", description=__doc__.splitlines()[0],
                                     parents=[_common(suppress=False)])
    sub = parser.add_subparsers(dest="command")
    s = sub.add_parser("sample", parents=[common], help="write Gaussian field realizations")
    s.add_argument("--n", type=int, help="number of realizations (overrides sample.count)")
    s.add_argument("--level", type=int, help="hierarchy level (0 = finest)")
    v = sub.add_parser("verify-covariance", parents=[common], help="compare empirical and Matérn covariance")
    v.add_argument("--n", type=int, help="number of samples (overrides verify.samples)")
    v.add_argument("--level", type=int)
    m = sub.add_parser("mlmc", parents=[common], help="adaptive multilevel Monte Carlo run")
    m.add_argument("--target-mse", type=float, help="overrides mlmc.target_mse")
    t = sub.add_parser("transfer-bench", parents=[common], help="time the non-matching transfer stages")
    t.add_argument("--level", type=int, default=0)
    return parser


def _resolve(args) -> dict:
    cfg = load_config(args.config) if args.config else resolve({})
    run = cfg["run"]
    if args.seed is not None:
        run["seed"] = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be positive")
        run["workers"] = args.workers
    if args.out is not None:
        run["out"] = str(args.out)
    if args.no_plots:
        run["plots"] = False
    if getattr(args, "n", None) is not None and args.n < 0:
        raise ConfigError("--n must be nonnegative")
    return cfg


def _meta(cfg: dict, command: str, **extra) -> dict:
    return {"command": command, "version": out_io.version_string(), "config": cfg, **extra}


def _timing_outputs(cfg: dict, command: str, out: Path, timer: StageTimer, plots: bool) -> None:
    """Timing lives in its own files so the data files stay byte-stable across reruns."""
    rows = [{"stage": k, "seconds": v} for k, v in timer.stages.items()]
    out_io.write_csv(out / "timing.csv", rows, _meta(cfg, command), ["stage", "seconds"])
    out_io.write_json(out / "run.json", dict(_meta(cfg, command), timing=timer.stages))
    (out / "timing.txt").write_text(timer.table() + "\n")
    if plots and rows:
        from .plotting import plot_timing

        plot_timing(timer.stages, out / "timing.png")


def cmd_sample(cfg: dict, n: int, level: int) -> int:
    run = cfg["run"]
    out = Path(run["out"])
    timer = StageTimer()
    h = build_hierarchy(cfg, run["workers"], timer)
    if not 0 <= level < h.n_levels:
        raise ConfigError(f"level {level} outside 0..{h.coarsest}")
    sampler = build_sampler(cfg, h, timer)
    real = draw_realizations(sampler, level, n, run["seed"], run["workers"]) if n > 0 else []
    lev = h[level]
    base = _meta(cfg, "sample", level=level, count=n, params=sampler.params.metadata(),
                 cells_D=lev.mesh.n_cells, cells_D_bar=lev.mesh_bar.n_cells)
    out_io.write_json(out / "sample.json", base)  # written even for n = 0
    for i, r in enumerate(real):
        meta = dict(base, index=i, noise=r.noise)
        out_io.write_cell_field(out / f"realization_{i:04d}_theta.csv", r.theta, dict(meta, mesh="D"))
        out_io.write_cell_field(out / f"realization_{i:04d}_theta_bar.csv", r.theta_bar, dict(meta, mesh="D_bar"))
    iters = [r.iterations for r in real]
    _timing_outputs(cfg, "sample", out, timer, run["plots"])
    if run["plots"] and real:
        from .plotting import plot_cell_field

        plot_cell_field(lev.mesh, real[0].theta, out / "realization_0000_theta.png", "theta on D")
        plot_cell_field(lev.mesh_bar, real[0].theta_bar, out / "realization_0000_theta_bar.png", "theta_bar on D_bar")
    print(timer.table())
    if iters:
        print(f"\n{n} realization(s) on level {level}; solver iterations mean {np.mean(iters):.1f}, max {max(iters)}")
    print(f"outputs in {out}")
    return EXIT_OK


def cmd_verify(cfg: dict, n: int, level: int) -> int:
    run = cfg["run"]
    out = Path(run["out"])
    if n < 2:
        raise ConfigError("verify-covariance needs at least 2 samples")
    timer = StageTimer()
    h = build_hierarchy(cfg, run["workers"], timer)
    sampler = build_sampler(cfg, h, timer)
    probe, summary, samples = covariance_check(cfg, sampler, n, run["seed"], run["workers"], level)
    z = probe.z_scores()
    rows = []
    for i, row in enumerate(probe.rows()):
        row["z"] = float(z[i])
        row["within"] = int(abs(z[i]) <= cfg["verify"]["n_se"])
        for a in range(probe.x.shape[1]):
            row[f"x{a}"] = float(probe.x[i, a])
        for a in range(probe.y.shape[1]):
            row[f"y{a}"] = float(probe.y[i, a])
        rows.append(row)
    meta = _meta(cfg, "verify-covariance", params=sampler.params.metadata())
    out_io.write_csv(out / "covariance.csv", rows, meta)
    var = samples.var(axis=0, ddof=1)
    out_io.write_cell_field(out / "variance.csv", var, dict(meta, mesh="D"))
    out_io.write_json(out / "summary.json", dict(meta, summary=summary))
    _timing_outputs(cfg, "verify-covariance", out, timer, run["plots"])
    if run["plots"]:
        from .plotting import plot_cell_field, plot_covariance

        p = sampler.params
        plot_covariance(probe, p.sigma2, p.kappa, p.nu, out / "covariance.png", cfg["verify"]["n_se"])
        plot_cell_field(h[summary["level"]].mesh, var, out / "variance.png", "sample variance")
    print(f"{'r':>8} {'empirical':>10} {'SE':>8} {'reference':>10} {'z':>6}")
    for r in rows:
        print(f"{r['r']:8.4f} {r['empirical_cov']:10.4f} {r['se']:8.4f} {r['reference_cov']:10.4f} {r['z']:6.2f}")
    verdict = "PASS" if summary["passed"] else "FAIL"
    print(f"\n{verdict}: {summary['n_outside']}/{summary['n_probes']} probes outside {summary['n_se']:g} SE "
          f"(allowed fraction {summary['max_fail_fraction']:g})")
    return EXIT_OK if summary["passed"] else EXIT_FAIL


def _mlmc_outputs(cfg, out, result, plots):
    rows = [s.as_row() for s in result.levels]
    meta = _meta(cfg, "mlmc")
    cols = ["level", "N", "mean_Q", "mean_Y", "var_Q", "var_Y", "cost_model", "avg_seconds", "total_seconds"]
    out_io.write_csv(out / "levels.csv", rows, meta, cols)
    summary = result.summary()
    out_io.write_json(out / "summary.json", dict(meta, result=summary, timing={"wall_seconds": result.wall_time}))
    if plots:
        from .plotting import plot_mlmc_levels

        plot_mlmc_levels(rows, out / "levels.png")
    return rows


def cmd_mlmc(cfg: dict) -> int:
    run = cfg["run"]
    out = Path(run["out"])
    m = cfg["mlmc"]
    timer = StageTimer()
    h = build_hierarchy(cfg, run["workers"], timer)
    sampler = build_sampler(cfg, h, timer)
    problem = build_mlmc_problem(cfg, h, sampler, run["seed"])
    try:
        result = run_adaptive_mlmc(problem, m["target_mse"], m["warmup"], m["min_samples"], m["max_samples"],
                                   m["max_iterations"], run["workers"], m["cost"])
    except MlmcError as exc:
        if exc.partial is not None:
            _mlmc_outputs(cfg, out, exc.partial, False)
        print(f"error: {exc} (partial telemetry in {out})", file=sys.stderr)
        return EXIT_RUNTIME
    rows = _mlmc_outputs(cfg, out, result, run["plots"])
    _timing_outputs(cfg, "mlmc", out, timer, run["plots"])
    print(f"{'level':>5} {'N':>7} {'E[Q]':>12} {'E[Y]':>12} {'V[Q]':>11} {'V[Y]':>11} {'s/sample':>9}")
    for r in rows:
        print(f"{r['level']:5d} {r['N']:7d} {r['mean_Q']:12.6g} {r['mean_Y']:12.4e} {r['var_Q']:11.4e} "
              f"{r['var_Y']:11.4e} {r['avg_seconds']:9.4f}")
    s = result.summary()
    print(f"\nestimate {s['estimate']:.8g}  SE {s['standard_error']:.3g}  bias~{s['bias_estimate']:.3g}  "
          f"target MSE {s['eps2']:.3g}  converged={s['converged']}")
    print(f"predicted cost order: {s['rates']['predicted_cost']}")
    return EXIT_OK


def cmd_transfer_bench(cfg: dict, level: int) -> int:
    run = cfg["run"]
    out = Path(run["out"])
    h = build_hierarchy(cfg, run["workers"], StageTimer())
    if not 0 <= level < h.n_levels:
        raise ConfigError(f"level {level} outside 0..{h.coarsest}")
    timer = StageTimer()
    lev = h[level]
    t0 = time.perf_counter()
    op = build_transfer(lev.mesh, lev.mesh_bar, level, run["workers"], cfg["transfer"]["leaf_capacity"],
                        cfg["transfer"]["max_depth"], timer)
    total = time.perf_counter() - t0
    covered = float(op.G.sum())
    summary = {
        "level": level, "cells_D": lev.mesh.n_cells, "cells_D_bar": lev.mesh_bar.n_cells, "nnz_G": int(op.G.nnz),
        "sum_G": covered, "measure_D": float(lev.mesh.measure),
        "relative_volume_error": abs(covered - lev.mesh.measure) / lev.mesh.measure,
    }
    out_io.write_json(out / "transfer.json", dict(_meta(cfg, "transfer-bench"), summary=summary,
                                                   timing={"stages": timer.stages, "total": total}))
    _timing_outputs(cfg, "transfer-bench", out, timer, run["plots"])
    print(timer.table())
    print(f"\nG: {summary['nnz_G']} nonzeros, sum {covered:.12g} vs |D| {summary['measure_D']:.12g}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    if args.command is None and not args.print_config:
        parser.print_usage(sys.stderr)
        print("mlspde: error: a subcommand is required", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve(args)
        if args.print_config:
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        if args.command == "sample":
            n = cfg["sample"]["count"] if args.n is None else args.n
            level = cfg["sample"]["level"] if args.level is None else args.level
            return cmd_sample(cfg, n, level)
        if args.command == "verify-covariance":
            n = cfg["verify"]["samples"] if args.n is None else args.n
            return cmd_verify(cfg, n, args.level)
        if args.command == "mlmc":
            if args.target_mse is not None:
                if args.target_mse <= 0:
                    raise ConfigError("--target-mse must be positive")
                cfg["mlmc"]["target_mse"] = args.target_mse
            return cmd_mlmc(cfg)
        return cmd_transfer_bench(cfg, args.level)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MeshError, TransferError, SolverError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception:  # noqa: BLE001 - any other failure is a runtime failure, not a crash code
        log.exception("unexpected failure")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
