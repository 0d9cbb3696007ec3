"""
dipwell - dipolar condensates in a triple-well trap.
Command-line entry point: relax, find and continue stationary states,
propagate in real time and run the sweep experiments.
"""
import version_check  # noqa: F401 - Must be first, checks Python version

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

import config
import field_io
import grid
import stationary
import sweep
import variational
from core import CHROMIUM52_SCATTERING_LENGTH_M, RampSchedule, UnitSystem, convert_units
from errors import (
    BranchLostError,
    CollapseError,
    ConfigError,
    DipwellError,
    ExitCode,
    FieldFormatError,
    IllConditionedAnsatzError,
    NewtonError,
    QuadratureError,
)
from logger import log, setup_logging
from relaxation import RelaxOutcome

COMMANDS = ["relax", "fixedpoint", "stability", "continue", "evolve", "ramp",
            "phasediagram", "cut", "metastable", "convert"]

RELAX_EXIT_CODES = {
    RelaxOutcome.CONVERGED: ExitCode.OK,
    RelaxOutcome.PLATEAU: ExitCode.PLATEAU,
    RelaxOutcome.MAX_STEPS: ExitCode.PLATEAU,
    RelaxOutcome.COLLAPSED: ExitCode.COLLAPSE,
}

# flag name -> dotted config key
OVERRIDES = {
    "na": "physical.na",
    "nadd": "physical.nadd",
    "polarization": "physical.polarization",
    "threads": "grid.threads",
    "dt": "grid.dt",
    "engine": "run.engine",
    "init": "run.init",
    "shape": "run.shape",
    "tol": "run.tol",
    "max_steps": "run.max_steps",
    "t_end": "run.t_end",
    "sample_every": "run.sample_every",
    "na_min": "run.na_min",
    "na_max": "run.na_max",
    "na_step": "run.na_step",
    "nadd_min": "run.nadd_min",
    "nadd_max": "run.nadd_max",
    "nadd_step": "run.nadd_step",
    "na_start": "run.na_start",
    "na_end": "run.na_end",
    "t_ramp": "run.t_ramp",
    "ds": "run.ds",
    "out": "run.out",
}


class RunContext:
    """Resolved configuration and output bookkeeping of one command."""

    def __init__(self, args, cfg: dict, explicit=frozenset()):
        self.args = args
        self.config = cfg
        self.explicit = set(explicit)  # dotted keys set by the config file or a flag
        self.out = Path(cfg["run"]["out"])
        self.params = config.to_physical_params(cfg)
        self.spec = config.to_grid_spec(cfg)
        self.settings = config.to_variational_settings(cfg)
        self.run = cfg["run"]
        self.artifacts = []
        self.outcome = "ok"
        self.extra = {}

    def path(self, name: str) -> Path:
        p = self.out / name
        self.artifacts.append(p)
        return p


# ============================================================================
# Seeds
# ============================================================================

def _require_seed(ctx: RunContext) -> Path:
    seed = ctx.args.seed
    if seed is None or not Path(seed).is_file():
        raise FileNotFoundError(f"seed file not found: {seed}")
    return Path(seed)


def _load_variational_seed(ctx: RunContext, required: bool = False) -> variational.VariationalState:
    if ctx.args.seed is None and not required:
        report = stationary.variational_relax(
            variational.initial_state(ctx.params, ctx.run["shape"]), ctx.params,
            tol=min(ctx.run["tol"] * 10, 1e-6), settings=ctx.settings)
        state = report.final_state if report.final_state is not None else report.plateau_state
        if state is None:
            raise CollapseError(f"no starting state: {report.message}")
        return state
    return variational.load_state(_require_seed(ctx).read_text())


def _load_grid_seed(ctx: RunContext) -> grid.GridState:
    if ctx.args.seed is not None:
        return grid.init_state(ctx.spec, "from_file", ctx.params.trap, path=_require_seed(ctx))
    kind = ctx.run["init"]
    if kind == "from_file":
        raise ConfigError("run.init = from_file needs --seed", key="run.init")
    return grid.init_state(ctx.spec, kind, ctx.params.trap)


def _fixed_point_json(fp: stationary.FixedPoint) -> dict:
    record = {"Na": fp.na, "Na_dd": fp.params.nadd, "E_mf": fp.e_mf, "mu": fp.mu,
              "populations": list(fp.populations), "residual": fp.residual,
              "iterations": fp.iterations, "stability": fp.stability}
    if fp.spectrum is not None:
        record["n_unstable"] = fp.spectrum.n_unstable
        record["max_Re_Lambda"] = fp.spectrum.max_re
        record["pairing_residual"] = fp.spectrum.pairing_residual
        record["paired"] = fp.spectrum.reliable
    return record


# ============================================================================
# Commands
# ============================================================================

def cmd_relax(ctx: RunContext) -> int:
    run = ctx.run
    if run["engine"] == "variational":
        start = variational.initial_state(ctx.params, run["shape"]) if ctx.args.seed is None \
            else _load_variational_seed(ctx, required=True)
        report = stationary.variational_relax(start, ctx.params, tol=run["tol"], max_steps=run["max_steps"],
                                              plateau_window=run["plateau_window"],
                                              stop_on_plateau=run["stop_on_plateau"], settings=ctx.settings)
    else:
        report = grid.relax(_load_grid_seed(ctx), ctx.params, tol=run["tol"], max_steps=run["max_steps"],
                            check_every=run["check_every"], plateau_window=run["plateau_window"],
                            stop_on_plateau=run["stop_on_plateau"])

    frame = report.to_frame()
    field_io.write_csv(ctx.path("energy.csv"), frame)
    field_io.write_gnuplot(ctx.path("energy.dat"), frame, ["tau", "E_mf"], comment="imaginary-time energy")
    keep = report.final_state if report.final_state is not None else report.plateau_state
    if keep is not None:
        if run["engine"] == "variational":
            field_io.write_text(ctx.path("state.txt"), variational.dump_state(keep))
        else:
            field_io.write_field(ctx.path("field.bin"), keep, ctx.params.na, ctx.params.nadd)
    ctx.outcome = report.outcome
    ctx.extra["plateaus"] = [p.__dict__ for p in report.plateaus]
    log.info(f"relax: {report.outcome} after {report.steps} steps, E_mf={report.final_energy:.10g}")
    return RELAX_EXIT_CODES[report.outcome]


def cmd_fixedpoint(ctx: RunContext) -> int:
    fp = stationary.find_fixed_point(_load_variational_seed(ctx), ctx.params, ctx.settings)
    field_io.write_text(ctx.path("state.txt"), variational.dump_state(fp.state))
    field_io.write_json(ctx.path("fixedpoint.json"), _fixed_point_json(fp))
    log.info(f"fixedpoint: E_mf={fp.e_mf:.12g} mu={fp.mu:.12g} after {fp.iterations} iterations")
    return ExitCode.OK


def cmd_stability(ctx: RunContext) -> int:
    fp = stationary.find_fixed_point(_load_variational_seed(ctx, required=True), ctx.params, ctx.settings)
    stationary.with_spectrum(fp, ctx.settings)
    lam = fp.spectrum.eigenvalues
    order = np.lexsort((lam.imag, lam.real))
    frame = pd.DataFrame({"re": lam.real[order], "im": lam.imag[order]})
    field_io.write_csv(ctx.path("spectrum.csv"), frame)
    field_io.write_json(ctx.path("fixedpoint.json"), _fixed_point_json(fp))
    ctx.outcome = fp.stability
    log.info(f"stability: {fp.stability}, max|Re Lambda|={fp.spectrum.max_re:.3e}")
    return ExitCode.OK


def cmd_continue(ctx: RunContext) -> int:
    run = ctx.run
    fp = stationary.find_fixed_point(_load_variational_seed(ctx, required=True), ctx.params, ctx.settings)
    branch = sweep.trace_branch(fp, (run["na_min"], run["na_max"]), "B0", ctx.settings,
                                ds=run["ds"], ds_max=run["ds_max"], max_points=run["max_points"])
    if len(branch.points) < 2:
        raise BranchLostError(f"no continuation step possible: {branch.reason}", residual=fp.residual)
    frame = branch.to_frame()
    field_io.write_csv(ctx.path("branch.csv"), frame)
    field_io.write_csv(ctx.path("spectra.csv"), branch.spectra_frame())
    field_io.write_text(ctx.path("events.json"), branch.events_to_json() + "\n")
    field_io.write_gnuplot(ctx.path("branch.dat"), frame, ["Na", "E_mf", "mu"], comment="branch B0")
    ctx.extra["reason"] = branch.reason
    return ExitCode.OK


def cmd_evolve(ctx: RunContext) -> int:
    run = ctx.run
    if run["engine"] == "variational":
        traj = variational.propagate(_load_variational_seed(ctx), ctx.params, run["t_end"], "real_time",
                                     sample_every=run["sample_every"], settings=ctx.settings)
        columns = ["t", "I1", "I2", "I3"]
    else:
        traj = grid.evolve(_load_grid_seed(ctx), ctx.params,
                           RampSchedule.constant(ctx.params.na, ctx.params.nadd),
                           run["t_end"], sample_every=run["sample_every"])
        columns = ["t", "P_left", "P_c", "P_right"]
    frame = traj.to_frame()
    field_io.write_csv(ctx.path("trajectory.csv"), frame)
    field_io.write_gnuplot(ctx.path("trajectory.dat"), frame, columns, comment="real-time populations")
    if traj.collapsed:
        ctx.outcome = "collapsed"
        ctx.extra["collapse_time"] = traj.collapse_time
        return ExitCode.COLLAPSE
    return ExitCode.OK


def cmd_ramp(ctx: RunContext) -> int:
    run = ctx.run
    schedule = RampSchedule(run["na_start"], run["na_end"], run["t_ramp"], ctx.params.nadd)
    t_end = run["t_end"] if "run.t_end" in ctx.explicit else 2.0 * run["t_ramp"]
    result = sweep.ramp_experiment(schedule, ctx.params, run["engine"], grid_spec=ctx.spec, t_end=t_end,
                                   sample_every=run["sample_every"], relax_tol=run["tol"],
                                   settings=ctx.settings)
    field_io.write_csv(ctx.path("ramp.csv"), result.frame)
    center = "P_c" if run["engine"] == "grid" else "I2"
    field_io.write_gnuplot(ctx.path("ramp.dat"), result.frame, ["t", center],
                           comment=f"Na {schedule.na_start:g} -> {schedule.na_end:g}")
    ctx.extra.update({"amplitude_during": result.amplitude_during,
                      "amplitude_after": result.amplitude_after,
                      "ramp_duration_ms": result.duration_ms})
    if result.collapsed:
        ctx.outcome = "collapsed"
        return ExitCode.COLLAPSE
    return ExitCode.OK


def cmd_phasediagram(ctx: RunContext) -> int:
    run = ctx.run
    spec = sweep.SweepSpec(
        na_grid=sweep.grid_values(run["na_min"], run["na_max"], run["na_step"]),
        nadd_grid=sweep.grid_values(run["nadd_min"], run["nadd_max"], run["nadd_step"]),
        grid=ctx.spec, tol=run["tol"], max_steps=run["max_steps"], check_every=run["check_every"],
        plateau_window=run["plateau_window"], init=run["init"], warm_start=run["warm_start"],
    )
    points = sweep.phase_diagram(spec, ctx.params, workers=ctx.config["grid"]["threads"])
    frame = sweep.phase_table_to_frame(points)
    field_io.write_csv(ctx.path("phase.csv"), frame)
    field_io.write_gnuplot(ctx.path("phase.dat"), frame, ["na", "nadd", "one_minus_pc", "steps"],
                           comment="phase diagram")
    ctx.extra["labels"] = frame["label"].value_counts().to_dict()
    return ExitCode.OK


def cmd_cut(ctx: RunContext) -> int:
    run = ctx.run
    overlay = sweep.grid_values(run["na_min"], run["na_max"], run["na_step"]) if ctx.args.overlay else ()
    report = sweep.cut_report(ctx.params.nadd, (run["na_min"], run["na_max"]), ctx.params,
                              settings=ctx.settings, grid_spec=ctx.spec, overlay_na=overlay,
                              ds=run["ds"], ds_max=run["ds_max"], max_points=run["max_points"])
    frame = report.to_frame()
    field_io.write_csv(ctx.path("cut.csv"), frame)
    field_io.write_json(ctx.path("events.json"), report.events())
    for branch_id, part in frame.groupby("branch_id", sort=False):
        field_io.write_gnuplot(ctx.path(f"cut_{branch_id}.dat"), part, ["Na", "E_mf", "mu", "I2"],
                               comment=f"branch {branch_id}")
    if not report.overlay.empty:
        field_io.write_csv(ctx.path("overlay.csv"), report.overlay)
    ctx.extra["branches"] = [b.branch_id for b in report.branches]
    return ExitCode.OK


def cmd_metastable(ctx: RunContext) -> int:
    run = ctx.run
    seed = _load_variational_seed(ctx, required=True) if ctx.args.seed is not None else None
    report = sweep.metastable_study(ctx.params, source=ctx.args.source, grid_spec=ctx.spec,
                                    t_end=run["t_end"], sample_every=run["sample_every"], seed=seed,
                                    seed_kind=run["shape"], settings=ctx.settings)
    for engine, frame in report.frames.items():
        field_io.write_csv(ctx.path(f"metastable_{engine}.csv"), frame)
    field_io.write_csv(ctx.path("metastable_events.csv"), report.events_frame())
    if any(e.collapse_time is not None for e in report.events.values()):
        ctx.outcome = "collapsed"
        return ExitCode.COLLAPSE
    return ExitCode.OK


def cmd_convert(ctx: RunContext) -> int:
    args = ctx.args
    units = UnitSystem.chromium52(l_meters=args.l_um * 1e-6)
    a_meters = CHROMIUM52_SCATTERING_LENGTH_M if args.a_nm is None else args.a_nm * 1e-9
    params, time_unit = convert_units(args.atoms, a_meters, args.add_nm * 1e-9, units,
                                      ctx.params.trap, ctx.params.polarization)
    record = {"N": args.atoms, "Na": params.na, "Na_dd": params.nadd, "time_unit_s": time_unit,
              "t_ramp_ms": units.time_to_seconds(ctx.run["t_ramp"]) * 1e3}
    field_io.write_json(ctx.path("convert.json"), record)
    print(f"Na = {params.na:.6g}  Na_dd = {params.nadd:.6g}  time unit = {time_unit * 1e3:.6g} ms")
    return ExitCode.OK


HANDLERS = {
    "relax": cmd_relax,
    "fixedpoint": cmd_fixedpoint,
    "stability": cmd_stability,
    "continue": cmd_continue,
    "evolve": cmd_evolve,
    "ramp": cmd_ramp,
    "phasediagram": cmd_phasediagram,
    "cut": cmd_cut,
    "metastable": cmd_metastable,
    "convert": cmd_convert,
}


# ============================================================================
# Entry point
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--engine", choices=config.ENGINE_OPTIONS)
    common.add_argument("--threads", type=int, help="FFT workers and sweep processes")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    common.add_argument("--log-file", help="Also log to a rotating file")
    common.add_argument("--seed", help="Starting state (field.bin or state.txt)")
    common.add_argument("--na", type=float)
    common.add_argument("--nadd", type=float)
    common.add_argument("--polarization", choices=config.POLARIZATION_OPTIONS)
    common.add_argument("--init", choices=config.INIT_OPTIONS)
    common.add_argument("--shape", choices=config.SHAPE_OPTIONS)
    common.add_argument("--tol", type=float)
    common.add_argument("--max-steps", type=int)
    common.add_argument("--dt", type=float)
    common.add_argument("--t-end", type=float)
    common.add_argument("--sample-every", type=float)
    common.add_argument("--na-min", type=float)
    common.add_argument("--na-max", type=float)
    common.add_argument("--na-step", type=float)
    common.add_argument("--nadd-min", type=float)
    common.add_argument("--nadd-max", type=float)
    common.add_argument("--nadd-step", type=float)
    common.add_argument("--ds", type=float, help="Continuation step")

    parser = argparse.ArgumentParser(prog="dipwell", description="dipwell - dipolar BEC in a triple well")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "ramp":
            p.add_argument("--na-start", type=float)
            p.add_argument("--na-end", type=float)
            p.add_argument("--t-ramp", type=float)
        elif name == "cut":
            p.add_argument("--overlay", action="store_true", help="Grid ITE dots at every na-step")
        elif name == "metastable":
            p.add_argument("--source", choices=sweep.METASTABLE_SOURCES, default="variational_fixed_point")
        elif name == "convert":
            p.add_argument("--atoms", type=float, required=True)
            p.add_argument("--a-nm", type=float, help="Scattering length in nm (52Cr background if omitted)")
            p.add_argument("--add-nm", type=float, default=0.0, help="Dipolar length in nm")
            p.add_argument("--l-um", type=float, default=1.7, help="Well spacing in micrometers")
    return parser


def resolve_config(args) -> dict:
    cfg = config.load_config(args.config)
    overrides = {key: getattr(args, flag, None) for flag, key in OVERRIDES.items()}
    return config.apply_overrides(cfg, overrides)


def explicit_keys(args) -> set:
    """Dotted keys given in the config file or on the command line."""
    given = {key for flag, key in OVERRIDES.items() if getattr(args, flag, None) is not None}
    return config.explicit_keys(args.config) | given


def run_command(args, argv) -> int:
    """Run one subcommand and write its manifest; returns the exit code."""
    start = time.monotonic()
    try:
        cfg = resolve_config(args)
        ctx = RunContext(args, cfg, explicit_keys(args))
    except (ConfigError, OSError) as e:
        log.error(f"{args.command}: {e}")
        return ExitCode.USAGE

    grid.set_fft_workers(cfg["grid"]["threads"])
    try:
        code = HANDLERS[args.command](ctx)
    except (ConfigError, FieldFormatError, OSError) as e:
        log.error(f"{args.command}: {e}")
        ctx.outcome, code = f"error: {e}", ExitCode.USAGE
    except NewtonError as e:
        log.error(f"{args.command}: {e} (last residual {e.residual})")
        ctx.outcome, code = "newton_failed", ExitCode.NEWTON
        ctx.extra["residual"] = e.residual
    except (IllConditionedAnsatzError, QuadratureError) as e:
        log.error(f"{args.command}: {e}")
        ctx.outcome, code = "solver_failed", ExitCode.NEWTON
    except CollapseError as e:
        log.error(f"{args.command}: {e}")
        ctx.outcome, code = "collapsed", ExitCode.COLLAPSE
    except DipwellError as e:
        log.error(f"{args.command}: {e}")
        ctx.outcome, code = f"error: {e}", ExitCode.USAGE

    try:
        field_io.write_manifest(ctx.out, cfg, argv, args.command, ctx.outcome, int(code),
                                time.monotonic() - start, ctx.artifacts, ctx.extra)
    except OSError as e:
        log.error(f"could not write manifest: {e}")
        return ExitCode.USAGE
    return int(code)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # argparse exits with 2, which is reserved for unconverged relaxations
        sys.exit(ExitCode.USAGE if e.code else ExitCode.OK)
    setup_logging(logging.DEBUG if args.verbose else logging.INFO, args.log_file)
    sys.exit(run_command(args, argv))


if __name__ == "__main__":
    main()
