"""Command-line front end.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical
non-convergence (or a failed identity in ``verify``).
"""

from __future__ import annotations

import dataclasses
import functools
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click

from . import io
from .config import SWEEP_AXES, ConfigError, ScenarioConfig, load_config, parse_config
from .linalg import LinearSolveError
from .state_solver import SolverDivergence, picard_solve, uniqueness_gap

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


def _load(config, out, seed) -> ScenarioConfig:
    cfg = load_config(config) if config else parse_config("")
    if out:
        cfg.out_dir = Path(out)
    if seed is not None:
        cfg.seed = seed
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    return cfg


def common_options(f):
    @click.option("--config", "config", type=click.Path(dir_okay=False), default=None,
                  help="Scenario TOML file (defaults apply when omitted).")
    @click.option("--out", "out", type=click.Path(file_okay=False), default=None,
                  help="Output directory (overrides [output] dir).")
    @click.option("--seed", type=click.IntRange(min=0, max=2 ** 64 - 1), default=None,
                  help="Random seed (overrides [optimizer] seed).")
    @click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True,
                  help="Worker processes for sweep.")
    @functools.wraps(f)
    def wrapper(*args, **kw):
        try:
            return f(*args, **kw)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            return EXIT_USAGE
    return wrapper


@click.group()
def cli():
    """Stationary convection solver and boundary optimal control."""


@cli.command()
@common_options
@click.option("--corrupt", type=click.Choice(["advection_skew", "scalar_advection_skew", "trace_identity",
                                              "summation_by_parts", "curl_grad"]),
              default=None, hidden=True)
@click.option("--trials", type=click.IntRange(min=1), default=100, show_default=True)
def verify(config, out, seed, threads, corrupt, trials):
    """Run the discrete identity suite on the configured grid."""
    from .verification import run_identity_suite

    cfg = _load(config, out, seed)
    results = run_identity_suite(cfg.grid, trials=trials, seed=cfg.seed, corrupt=corrupt)
    for r in results:
        click.echo(r.line())
    path = io.write_json(cfg.out_dir / "verify.json",
                         {"grid": list(cfg.grid.n),
                          "checks": [{"name": r.name, "value": r.value, "tol": r.tol, "passed": r.passed}
                                     for r in results]})
    io.write_manifest(cfg.out_dir, "verify", cfg.text, cfg.seed, [path])
    failed = [r.name for r in results if not r.passed]
    if failed:
        click.echo(f"failed identities: {', '.join(failed)}", err=True)
        return EXIT_NUMERIC
    return EXIT_OK


def _diagnostics(cfg, controls, state):
    from .adjoint_solver import regular_point_beta0
    from .grid import h1_norm

    return {
        "u_h1": h1_norm(state.u),
        "theta_h1": h1_norm(state.theta),
        "uniqueness_gap": uniqueness_gap(cfg.params, controls, None, cfg.uniqueness_C_ref),
        "beta0": regular_point_beta0(state, cfg.params, cfg.beta0_C_ref),
    }


def _write_state(cfg, state):
    return [io.write_vtk(cfg.out_dir / "state.vtk", state), io.write_state_csv(cfg.out_dir / "state.csv", state)]


@cli.command()
@common_options
def solve(config, out, seed, threads):
    """Solve the state equations for the configured initial controls."""
    cfg = _load(config, out, seed)
    controls = cfg.initial_controls()
    files = []
    try:
        state, rep = picard_solve(controls, None, cfg.params, cfg.solver)
    except (SolverDivergence, LinearSolveError) as exc:
        files.append(io.write_json(cfg.out_dir / "solve_report.json", {"converged": False, "message": str(exc)}))
        io.write_manifest(cfg.out_dir, "solve", cfg.text, cfg.seed, files)
        click.echo(f"solve failed: {exc}", err=True)
        return EXIT_NUMERIC
    files += _write_state(cfg, state)
    report = rep.to_json()
    report["diagnostics"] = _diagnostics(cfg, controls, state)
    files.append(io.write_json(cfg.out_dir / "solve_report.json", report))
    io.write_manifest(cfg.out_dir, "solve", cfg.text, cfg.seed, files)
    click.echo(f"{'converged' if rep.converged else 'NOT converged'}: picard {rep.picard_iters}, "
               f"newton {rep.newton_iters}, weak residual {max(rep.weak_residual):.3e}")
    return EXIT_OK if rep.converged else EXIT_NUMERIC


COST_HISTORY_HEADER = ("iter", "J", "step_g", "step_phi1", "step_phi2", "res_g", "res_phi1", "res_phi2")


@cli.command()
@common_options
def optimize(config, out, seed, threads):
    """Projected-gradient optimization of the boundary controls."""
    from .adjoint_solver import regular_point_beta0
    from .optimizer import (ControlSpace, cost, multiplier_bound_check, projected_gradient, reduced_gradient,
                            second_order_quotient, vi_check)

    cfg = _load(config, out, seed)
    try:
        initial = cfg.initial_controls()
    except ValueError as exc:
        raise ConfigError(f"initial controls: {exc}") from None
    targets = cfg.targets()
    opts = cfg.optimizer_options()

    def progress(it, J, res):
        if it % 10 == 0:
            click.echo(f"iter {it:4d}  J {J:.10e}  residual {max(res):.3e}")

    try:
        controls, state, adj, report = projected_gradient(initial, cfg.params, targets, cfg.weights, opts,
                                                          cfg.solver, callback=progress)
    except ValueError as exc:  # infeasible initial controls, inadmissible weights
        raise ConfigError(str(exc)) from None
    except (SolverDivergence, LinearSolveError) as exc:
        path = io.write_json(cfg.out_dir / "optimality_report.json", {"converged": False, "message": str(exc)})
        io.write_manifest(cfg.out_dir, "optimize", cfg.text, cfg.seed, [path])
        click.echo(f"optimize failed: {exc}", err=True)
        return EXIT_NUMERIC

    files = [io.write_controls_csv(cfg.out_dir / "controls.csv", controls), *_write_state(cfg, state),
             io.write_csv(cfg.out_dir / "cost_history.csv", COST_HISTORY_HEADER, report.history_rows())]
    space = ControlSpace(controls)
    grad = reduced_gradient(controls, adj, cfg.weights, space)
    slack = vi_check(controls, grad, space, samples=cfg.vi_samples, seed=cfg.seed, tol=cfg.opt_tol)
    so = second_order_quotient(state, adj, cfg.params, cfg.weights, controls,
                               samples=cfg.second_order_samples, seed=cfg.seed)
    report.second_order_min_quotient = so.min_quotient
    beta0 = regular_point_beta0(state, cfg.params, cfg.beta0_C_ref)
    implied = math.nan
    if beta0 > 0:
        lhs, rhs, implied = multiplier_bound_check(state, adj, targets, cfg.params, cfg.weights, beta0, cfg.C1_ref)
        report.multiplier_bound_lhs, report.multiplier_bound_rhs = lhs, rhs
    out_json = report.to_json()
    out_json["cost"] = cost(state, controls, targets, cfg.weights).to_json()
    out_json["vi_slack"] = {"g": slack[0], "phi1": slack[1], "phi2": slack[2]}
    out_json["second_order"] = {"min_quotient": so.min_quotient, "control_share_bound": so.control_share_bound}
    out_json["implied_C1"] = implied
    out_json["diagnostics"] = _diagnostics(cfg, controls, state)
    files.append(io.write_json(cfg.out_dir / "optimality_report.json", out_json))
    io.write_manifest(cfg.out_dir, "optimize", cfg.text, cfg.seed, files)
    click.echo(f"{'converged' if report.converged else 'NOT converged'} after {report.iterations} iterations: "
               f"J {report.cost_history[-1]:.10e}, residuals {', '.join(f'{r:.3e}' for r in report.vi_residuals)}")
    return EXIT_OK if report.converged else EXIT_NUMERIC


SWEEP_HEADER = ("point", "Pr", "R", "M", "B", "converged", "flagged", "picard_iters", "newton_iters",
                "u_h1", "theta_h1", "uniqueness_gap", "beta0", "message")


def _sweep_point(args):
    cfg, k, value = args
    p = cfg.params.replace(**{cfg.sweep_axis: value})
    cfg = dataclasses.replace(cfg, params=p)
    base = [k, p.Pr, p.R, p.M, p.B]
    try:
        controls = cfg.initial_controls()
        state, rep = picard_solve(controls, None, p, cfg.solver)
    except (SolverDivergence, LinearSolveError, ValueError) as exc:
        return base + [False, True, 0, 0, math.nan, math.nan, math.nan, math.nan, str(exc)]
    d = _diagnostics(cfg, controls, state)
    return base + [rep.converged, not rep.converged, rep.picard_iters, rep.newton_iters,
                   d["u_h1"], d["theta_h1"], d["uniqueness_gap"], d["beta0"], rep.message]


def _parse_axis(text):
    name, sep, vals = text.partition("=")
    if not sep or name.strip() not in SWEEP_AXES:
        raise ConfigError(f"--axis must look like R=0,1,2 with an axis in {SWEEP_AXES}, got {text!r}")
    try:
        values = tuple(float(v) for v in vals.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"--axis values must be numbers, got {vals!r}") from None
    return name.strip(), values


@cli.command()
@common_options
@click.option("--axis", "axis", default=None, help="Axis and values, e.g. R=0,1,2 (overrides [sweep]).")
def sweep(config, out, seed, threads, axis):
    """Solve the state at every point of a one-parameter sweep."""
    cfg = _load(config, out, seed)
    if axis is not None:
        cfg.sweep_axis, cfg.sweep_values = _parse_axis(axis)
    if not cfg.sweep_values:
        raise ConfigError("the sweep axis has no values")
    for v in cfg.sweep_values:
        try:
            cfg.params.replace(**{cfg.sweep_axis: v})
        except ValueError as exc:
            raise ConfigError(f"sweep value {cfg.sweep_axis}={v}: {exc}") from None
    jobs = [(cfg, k, v) for k, v in enumerate(cfg.sweep_values)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    for r in rows:
        click.echo(f"point {r[0]}: {cfg.sweep_axis}={r[SWEEP_HEADER.index(cfg.sweep_axis)]} "
                   f"{'flagged' if r[6] else 'converged'}")
    path = io.write_csv(cfg.out_dir / "sweep.csv", SWEEP_HEADER, rows)
    io.write_manifest(cfg.out_dir, "sweep", cfg.text, cfg.seed, [path])
    return EXIT_OK


def main(argv=None):
    try:
        code = cli.main(args=argv, prog_name="rbmcontrol", standalone_mode=False)
    except click.exceptions.Exit as exc:  # --help
        code = exc.exit_code
    except (click.ClickException, click.Abort) as exc:
        if isinstance(exc, click.ClickException):
            exc.show()
        code = EXIT_USAGE
    return code if isinstance(code, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
