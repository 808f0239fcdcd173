"""Command-line front end: ``pbfplan plan|simulate|compare|export --config run.json``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .beamplan import read_spot_csv
from .config import ConfigError, RunConfig, load_config
from .formats import MaskParseError, fields_from_csv, fields_to_csv
from .inputs import PowerFieldTrajectory
from .pipeline import (
    SCENARIOS,
    Model,
    build_model,
    build_qp,
    first_violated_family,
    greedy_plan,
    run_scenarios,
    solver_settings,
)
from .simulate import SimulationResult, melt_metrics, simulate_beam, simulate_fields, top_layer_image, write_pgm
from .solver import Status, solve_qp
from .transcription import InfeasibleProblemError, write_qp

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_MAX_ITER = 0, 2, 3, 4
ENV_OUT = "PBFPLAN_OUT"
ENV_THREADS = "PBFPLAN_THREADS"
# Cumulative variances below this (K^2 s) are roundoff; reductions against them are reported as 0.
VARIANCE_FLOOR = 1e-12

log = logging.getLogger("pbfplan")

OUTPUTS = """\
output files (written to --out, $PBFPLAN_OUT or the config's output_dir):
  plan      optimal_fields.csv   optimal surface power per knot (W), one column per surface voxel
            spots_optimized.csv  greedy spot sequence: t_us,x_mm,y_mm,dwell_us,power_W
            solve_log.csv        interior-point iteration log
            summary.json         status, objective (K^2 s), KKT residuals, problem size
            timing.json          solver wall time (the only run-dependent file)
  simulate  needs optimal_fields.csv and spots_optimized.csv from a previous plan
            timeseries_optimized_exact.csv, timeseries_optimized_greedy.csv
                                 time_s,variance_K2,cumulative_K2s,mask_max_K,mask_min_K
            simulation.json      cumulative variance, melt metrics, energy audit
            snapshot_<scenario>_<t>us.pgm  top-layer temperature at each configured snapshot time
  compare   everything plan writes, plus
            spots_uniform.csv, spots_random.csv
            compare_<scenario>.csv  time series per scenario (same columns as above)
            compare_summary.csv  scenario,cumulative_K2s,opt_exact_reduction_pct,
                                 opt_greedy_reduction_pct,over,under,erroneous
            compare.json         the same table as JSON
            snapshot_<scenario>_<t>us.pgm
  export    qp.txt               the assembled QP in triplet text form (0-based)
            qp_layout.json       variable blocks and constraint row families

exit codes: 0 success, 2 config or parse error, 3 infeasible, 4 iteration limit
environment: PBFPLAN_OUT overrides the output directory, PBFPLAN_THREADS the thread count
"""


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def _json(path: Path, obj) -> None:
    _write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _num(v: float) -> float:
    return float(f"{v:.12g}")


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or os.environ.get(ENV_OUT) or cfg.output_dir
    p = Path(out)
    if not p.is_absolute() and not args.out and not os.environ.get(ENV_OUT):
        p = Path(cfg.base_dir) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _solve(model: Model, cfg: RunConfig, verbose: bool):
    """Assemble and solve; returns (qp, solution) or raises _Exit."""
    settings = solver_settings(cfg, verbose)
    try:
        qp = build_qp(model)
    except InfeasibleProblemError as exc:
        raise _Exit(EXIT_INFEASIBLE, f"infeasible before solving ({exc.family}): {exc}")
    sol = solve_qp(qp, settings)
    if sol.status is Status.INFEASIBLE:
        fam = first_violated_family(qp, settings)
        raise _Exit(EXIT_INFEASIBLE, f"infeasible: first violated constraint family: {fam}")
    return qp, sol


class _Exit(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _plan_outputs(out: Path, model: Model, qp, sol, cfg: RunConfig):
    traj = sol.trajectory
    times_us = model.schedule.times * 1e6
    _write(out / "optimal_fields.csv", fields_to_csv(traj.inputs, times_us, model.schedule.build, model.imap.surface_ij))
    _write(out / "solve_log.csv", sol.log_csv())
    summary = {
        "status": sol.status.value,
        "objective_K2s": _num(sol.objective),
        "iterations": sol.iterations,
        "residuals": {k: _num(v) for k, v in sol.residuals.as_dict().items()},
        "voxels": model.mesh.n,
        "inputs": model.imap.m,
        "knots": model.schedule.N,
        "mask_voxels": model.mask.count,
        "variables": qp.n_var,
        "equalities": qp.n_eq,
        "inequalities": qp.n_ineq,
    }
    _json(out / "summary.json", summary)
    _json(out / "timing.json", {"solve_wall_time_s": sol.wall_time})
    return PowerFieldTrajectory(traj.inputs)


def _snapshots(out: Path, name: str, result: SimulationResult, model: Model, cfg: RunConfig):
    vmin = float(model.T_init.min())
    vmax = model.limits.liquidus
    for t_us in cfg.simulation.snapshots_us:
        row = int(np.argmin(np.abs(result.times * 1e6 - t_us)))
        img = top_layer_image(result.states[row], model.mesh)
        write_pgm(out / f"snapshot_{name}_{int(round(t_us))}us.pgm", img, vmin, vmax)


def cmd_plan(args, cfg: RunConfig) -> int:
    model = build_model(cfg)
    out = _out_dir(args, cfg)
    qp, sol = _solve(model, cfg, args.verbose)
    if sol.status is Status.MAX_ITER:
        _write(out / "solve_log.csv", sol.log_csv())
        raise _Exit(EXIT_MAX_ITER, f"iteration limit reached after {sol.iterations} iterations")
    fields = _plan_outputs(out, model, qp, sol, cfg)
    greedy_plan(model, fields, cfg).write_csv(out / "spots_optimized.csv")
    print(f"plan: {sol.status.value}, objective {sol.objective:.6g} K^2 s, {sol.iterations} iterations")
    return EXIT_OK


def cmd_simulate(args, cfg: RunConfig) -> int:
    model = build_model(cfg)
    out = _out_dir(args, cfg)
    f_path, s_path = out / "optimal_fields.csv", out / "spots_optimized.csv"
    if not (f_path.is_file() and s_path.is_file()):
        raise _Exit(EXIT_CONFIG, f"{f_path.name} and {s_path.name} not found in {out}; run plan first")
    u = fields_from_csv(f_path.read_text(encoding="utf-8"))
    if u.shape != (model.schedule.N, model.imap.m):
        raise _Exit(EXIT_CONFIG, f"{f_path.name} does not match the configured problem size")
    seq = read_spot_csv(s_path, model.imap, model.beam)
    sub = cfg.simulation.substeps
    results = {
        "optimized_exact": simulate_fields(
            model.dyn, model.imap, PowerFieldTrajectory(u), model.T_init, model.schedule, sub, model.mask
        ),
        "optimized_greedy": simulate_beam(model.dyn, model.imap, seq, model.T_init, model.schedule, sub, model.mask),
    }
    report = {}
    for name, res in results.items():
        _write(out / f"timeseries_{name}.csv", res.timeseries_csv(model.mask))
        _snapshots(out, name, res, model, cfg)
        m = melt_metrics(res, model.mask, model.limits)
        report[name] = {
            "cumulative_K2s": _num(res.total_variance),
            "over": m.over,
            "under": m.under,
            "erroneous": m.cumulative,
            "energy_residual": _num(res.energy_residual),
        }
        print(f"{name}: cumulative variance {res.total_variance:.6g} K^2 s, over {m.over}, under {m.under}")
    _json(out / "simulation.json", report)
    return EXIT_OK


def cmd_compare(args, cfg: RunConfig) -> int:
    model = build_model(cfg)
    out = _out_dir(args, cfg)
    qp, sol = _solve(model, cfg, args.verbose)
    if sol.status is Status.MAX_ITER:
        raise _Exit(EXIT_MAX_ITER, f"iteration limit reached after {sol.iterations} iterations")
    optimal = _plan_outputs(out, model, qp, sol, cfg)
    plans, results, metrics = run_scenarios(model, optimal, cfg)
    plans["optimized_greedy"].write_csv(out / "spots_optimized.csv")
    plans["uniform_greedy"].write_csv(out / "spots_uniform.csv")
    plans["random_spot"].write_csv(out / "spots_random.csv")

    rows = []
    opt_e = results["optimized_exact"].total_variance
    opt_g = results["optimized_greedy"].total_variance
    for name in SCENARIOS:
        res = results[name]
        base = res.total_variance
        m = metrics[name]
        _write(out / f"compare_{name}.csv", res.timeseries_csv(model.mask))
        _snapshots(out, name, res, model, cfg)
        rows.append(
            {
                "scenario": name,
                "cumulative_K2s": _num(base),
                "opt_exact_reduction_pct": round(100.0 * (1.0 - opt_e / base), 1) if base > VARIANCE_FLOOR else 0.0,
                "opt_greedy_reduction_pct": round(100.0 * (1.0 - opt_g / base), 1) if base > VARIANCE_FLOOR else 0.0,
                "over": m.over,
                "under": m.under,
                "erroneous": m.cumulative,
            }
        )
    header = list(rows[0])
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(f"{r[k]:.12g}" if isinstance(r[k], float) else str(r[k]) for k in header))
    _write(out / "compare_summary.csv", "\n".join(lines) + "\n")
    _json(out / "compare.json", {"scenarios": rows, "status": sol.status.value})

    print(f"{'scenario':<18}{'cum. var (K^2 s)':>18}{'opt-exact red.':>16}{'opt-greedy red.':>17}{'over':>6}{'under':>7}")
    for r in rows:
        print(
            f"{r['scenario']:<18}{r['cumulative_K2s']:>18.6g}{r['opt_exact_reduction_pct']:>15.1f}%"
            f"{r['opt_greedy_reduction_pct']:>16.1f}%{r['over']:>6}{r['under']:>7}"
        )
    return EXIT_OK


def cmd_export(args, cfg: RunConfig) -> int:
    model = build_model(cfg)
    out = _out_dir(args, cfg)
    try:
        qp = build_qp(model)
    except InfeasibleProblemError as exc:
        raise _Exit(EXIT_INFEASIBLE, f"infeasible before solving ({exc.family}): {exc}")
    write_qp(qp, out / "qp.txt")
    layout = {
        "variables": {
            "states": [qp.state_slice.start, qp.state_slice.stop],
            "inputs": [qp.input_slice.start, qp.input_slice.stop],
            "mask_means": [qp.mean_slice.start, qp.mean_slice.stop],
        },
        "voxels": qp.n,
        "inputs_per_knot": qp.m,
        "knots": qp.N,
        "build_knots": [int(k) for k in model.schedule.build_knots],
        "equality_families": [[n, lo, hi] for n, lo, hi in qp.eq_families],
        "inequality_families": [[n, lo, hi] for n, lo, hi in qp.ineq_families],
    }
    _json(out / "qp_layout.json", layout)
    print(f"export: {qp.n_var} variables, {qp.n_eq} equalities, {qp.n_ineq} inequalities")
    return EXIT_OK


COMMANDS = {"plan": cmd_plan, "simulate": cmd_simulate, "compare": cmd_compare, "export": cmd_export}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pbfplan",
        description="Layer thermal planning for spot-melt powder bed fusion.",
        epilog=OUTPUTS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--threads", type=int, default=None, help="threads for linear algebra (default: $PBFPLAN_THREADS or 1)")
    p.add_argument("--verbose", action="store_true", help="log solver iterations to stderr")
    p.add_argument("--out", default=None, help="output directory")
    return p


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(ENV_THREADS)
    if env:
        try:
            return int(env)
        except ValueError:
            raise _Exit(EXIT_CONFIG, f"{ENV_THREADS} must be an integer, got {env!r}")
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        threads = _threads(args)
        if threads < 1:
            raise _Exit(EXIT_CONFIG, "--threads must be >= 1")
        cfg = load_config(args.config)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args, cfg)
    except _Exit as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, MaskParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
