"""
Experiment harness for dipwell.
Phase diagrams over (Na, Na_dd), cuts through them with branch tracing,
scattering-length ramps and real-time studies of metastable states.
"""
from dataclasses import dataclass, field, replace
from multiprocessing import Pool
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.fft

from core import PhysicalParams, RampSchedule, UnitSystem
from errors import CollapseError, IllConditionedAnsatzError, NewtonError
from grid import GridSpec, GridState, evolve, init_state, observables, relax, set_fft_workers
from logger import log
from relaxation import RelaxOutcome
from stationary import (
    BRANCH_COLUMNS,
    Branch,
    EventKind,
    FixedPoint,
    continue_branch,
    find_fixed_point,
    switch_branch,
    variational_relax,
)
from variational import (
    DEFAULT_SETTINGS,
    INITIAL_SHAPES,
    VariationalSettings,
    VariationalState,
    initial_state,
    mirror_state,
    propagate,
)

ENGINE_OPTIONS = ["grid", "variational"]
METASTABLE_SOURCES = ["variational_fixed_point", "ite_plateau_state"]
M_THRESHOLD = 0.15  # converged with 1 - P_c below this: center-dominated
SPLIT_THRESHOLD = 0.75  # converged with 1 - P_c above this: split state
SYMMETRY_BREAK_THRESHOLD = 0.05
CONSTANCY_TOL = 1e-3
OSCILLATION_TOL = 0.02
PHASE_COLUMNS = ["na", "nadd", "label", "one_minus_pc", "steps", "outcome", "E_mf", "mu"]
OVERLAY_COLUMNS = ["Na", "init", "outcome", "E_mf", "mu", "P_c"]
DEFAULT_NA_GRID = (-0.3, 0.8, 0.01)
DEFAULT_NADD_GRID = (0.0, 0.7, 0.02)


def grid_values(start: float, stop: float, step: float) -> Tuple[float, ...]:
    """Inclusive, evenly spaced values, rounded to suppress float drift."""
    n = int(round((stop - start) / step))
    return tuple(round(start + i * step, 12) for i in range(n + 1))


@dataclass(frozen=True)
class SweepSpec:
    """Axes and solver settings of a phase-diagram sweep."""
    na_grid: Tuple[float, ...] = grid_values(*DEFAULT_NA_GRID)
    nadd_grid: Tuple[float, ...] = grid_values(*DEFAULT_NADD_GRID)
    grid: GridSpec = GridSpec()
    tol: float = 1e-9
    max_steps: int = 200000
    check_every: int = 10
    plateau_window: int = 2000
    init: str = "three_gaussian"
    warm_start: bool = True

    def __post_init__(self):
        for name in ("na_grid", "nadd_grid"):
            values = np.asarray(getattr(self, name), dtype=float)
            if values.size == 0:
                raise ValueError(f"{name} needs at least one point")
            if values.size > 1 and not (np.all(np.diff(values) > 0) or np.all(np.diff(values) < 0)):
                raise ValueError(f"{name} must be strictly monotone")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")

    @property
    def n_points(self) -> int:
        return len(self.na_grid) * len(self.nadd_grid)


@dataclass
class PhasePoint:
    na: float
    nadd: float
    outcome: str
    one_minus_pc: float
    steps: int
    label: str
    e_mf: float = float("nan")
    mu: float = float("nan")

    def to_row(self) -> dict:
        return {"na": self.na, "nadd": self.nadd, "label": self.label,
                "one_minus_pc": self.one_minus_pc, "steps": self.steps,
                "outcome": self.outcome, "E_mf": self.e_mf, "mu": self.mu}


def classify_point(outcome: str, one_minus_pc: float) -> str:
    """
    Phase label of one relaxation.

    Args:
        outcome: RelaxReport outcome (or "failed" for an aborted point)
        one_minus_pc: Population outside the central well

    Returns:
        U unless converged; otherwise M, split or S by 1 - P_c
    """
    if outcome != RelaxOutcome.CONVERGED or not np.isfinite(one_minus_pc):
        return "U"
    if one_minus_pc < M_THRESHOLD:
        return "M"
    if one_minus_pc > SPLIT_THRESHOLD:
        return "split"
    return "S"


# ============================================================================
# Phase diagram
# ============================================================================

def run_row(spec: SweepSpec, params: PhysicalParams, nadd: float) -> List[PhasePoint]:
    """Sweep Na at fixed Na_dd, warm-starting from the last converged state."""
    row = []
    warm: Optional[GridState] = None
    for na in spec.na_grid:
        point_params = replace(params, na=na, nadd=nadd)
        start = warm if (spec.warm_start and warm is not None) else init_state(spec.grid, spec.init,
                                                                                params.trap)
        try:
            report = relax(start, point_params, tol=spec.tol, max_steps=spec.max_steps,
                           check_every=spec.check_every, plateau_window=spec.plateau_window)
        except (CollapseError, ValueError, FloatingPointError) as e:
            log.warning(f"Point (Na={na:g}, Na_dd={nadd:g}) failed: {e}")
            row.append(PhasePoint(na, nadd, "failed", float("nan"), 0, "U"))
            warm = None
            continue

        if report.converged:
            obs = observables(report.final_state, point_params)
            point = PhasePoint(na, nadd, report.outcome, obs.one_minus_pc, report.steps,
                               classify_point(report.outcome, obs.one_minus_pc), obs.e_mf, obs.mu)
            warm = report.final_state
        else:
            point = PhasePoint(na, nadd, report.outcome, float("nan"), report.steps, "U")
            warm = None
        row.append(point)
    log.info(f"Row Na_dd={nadd:g}: " + "".join(p.label[0] for p in row))
    return row


def _row_job(job):
    spec, params, nadd = job
    set_fft_workers(1)
    return run_row(spec, params, nadd)


def phase_diagram(spec: SweepSpec, params: PhysicalParams, workers: int = 1) -> List[PhasePoint]:
    """
    Label every (Na, Na_dd) grid point by grid imaginary-time relaxation.

    Rows of constant Na_dd are independent and run in a process pool when
    workers > 1; the order of the result follows the grids.
    """
    jobs = [(spec, params, nadd) for nadd in spec.nadd_grid]
    log.info(f"Phase diagram: {spec.n_points} points in {len(jobs)} rows, {workers} worker(s)")
    if workers > 1:
        with Pool(workers) as pool:
            rows = pool.map(_row_job, jobs)
    else:
        rows = [run_row(*job) for job in jobs]
    return [point for row in rows for point in row]


def phase_table_to_frame(points: Sequence[PhasePoint]) -> pd.DataFrame:
    return pd.DataFrame([p.to_row() for p in points], columns=PHASE_COLUMNS)


# ============================================================================
# Cuts at fixed Na_dd
# ============================================================================

@dataclass
class CutReport:
    nadd: float
    branches: List[Branch] = field(default_factory=list)
    overlay: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=OVERLAY_COLUMNS))

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for branch in self.branches:
            frame = branch.to_frame()
            frame.insert(0, "branch_id", branch.branch_id)
            frames.append(frame)
        if not frames:
            return pd.DataFrame(columns=["branch_id"] + BRANCH_COLUMNS)
        return pd.concat(frames, ignore_index=True)

    def events(self) -> List[dict]:
        return [e.to_record() for b in self.branches for e in b.events]


def _on_branch(fp: FixedPoint, branch: Branch, tol: float = 1e-3) -> bool:
    """Whether fp lies on a traced branch, judged by E_mf and I2 between neighbors."""
    for a, b in zip(branch.points[:-1], branch.points[1:]):
        lo, hi = sorted((a.na, b.na))
        if not lo <= fp.na <= hi:
            continue
        w = 0.0 if hi == lo else (fp.na - a.na) / (b.na - a.na)
        e = a.e_mf + w * (b.e_mf - a.e_mf)
        pops = a.populations + w * (b.populations - a.populations)
        if abs(e - fp.e_mf) < tol * max(1.0, abs(fp.e_mf)) and np.max(np.abs(pops - fp.populations)) < tol:
            return True
    return False


def _merge(down: Branch, up: Branch, branch_id: str) -> Branch:
    """Join a backward and a forward continuation from the same seed."""
    lead = list(reversed(down.points[1:]))
    merged = Branch(branch_id=branch_id, points=lead + up.points,
                    reason=f"down: {down.reason}; up: {up.reason}")
    offset = len(lead)
    for e in down.events:
        e.branch_id, e.index = branch_id, offset - e.index
        merged.events.append(e)
    for e in up.events:
        e.branch_id, e.index = branch_id, e.index + offset
        merged.events.append(e)
    return merged


def _mirror_branch(branch: Branch, branch_id: str) -> Branch:
    points = [replace(p, state=mirror_state(p.state), populations=p.populations[::-1].copy())
              for p in branch.points]
    return Branch(branch_id=branch_id, points=points, reason=branch.reason)


def trace_branch(fp: FixedPoint, na_range, branch_id: str, settings: VariationalSettings,
                 **continuation) -> Branch:
    down = continue_branch(fp, na_range, direction=-1.0, branch_id=branch_id, settings=settings,
                           **continuation)
    up = continue_branch(fp, na_range, direction=1.0, branch_id=branch_id, settings=settings,
                         **continuation)
    return _merge(down, up, branch_id)


def seed_fixed_points(params: PhysicalParams, seeds_na: Sequence[float], kinds: Sequence[str],
                      tol: float = 1e-8, max_steps: int = 20000,
                      settings: VariationalSettings = DEFAULT_SETTINGS) -> List[FixedPoint]:
    """
    Stationary states found from variational imaginary-time runs.

    Each initial shape is relaxed (the state of the flattest plateau is used
    when the run does not converge) and Newton-refined.
    """
    found: List[FixedPoint] = []
    for na in seeds_na:
        p = params.with_na(na)
        for kind in kinds:
            report = variational_relax(initial_state(p, kind), p, tol=tol, max_steps=max_steps,
                                       settings=settings)
            guess = report.final_state if report.converged else report.plateau_state
            if guess is None:
                log.info(f"Seed {kind} at Na={na:g}: no usable state ({report.outcome})")
                continue
            try:
                fp = find_fixed_point(guess, p, settings)
            except (NewtonError, IllConditionedAnsatzError, np.linalg.LinAlgError) as e:
                log.info(f"Seed {kind} at Na={na:g}: Newton failed ({e})")
                continue
            duplicate = any(
                abs(fp.na - other.na) < 1e-12 and abs(fp.e_mf - other.e_mf) < 1e-7
                and np.max(np.abs(fp.populations - other.populations)) < 1e-5
                for other in found
            )
            if not duplicate:
                found.append(fp)
    return found


def grid_overlay(params: PhysicalParams, spec: GridSpec, na_values: Sequence[float],
                 inits: Sequence[str] = ("three_gaussian", "single_gaussian"),
                 tol: float = 1e-9, max_steps: int = 200000) -> pd.DataFrame:
    """Grid ITE results at selected Na for comparison with the branches."""
    rows = []
    for na in na_values:
        p = params.with_na(na)
        for kind in inits:
            report = relax(init_state(spec, kind, p.trap), p, tol=tol, max_steps=max_steps)
            if report.final_state is not None:
                obs = observables(report.final_state, p)
                rows.append({"Na": na, "init": kind, "outcome": report.outcome,
                             "E_mf": obs.e_mf, "mu": obs.mu, "P_c": obs.p_c})
            else:
                rows.append({"Na": na, "init": kind, "outcome": report.outcome,
                             "E_mf": float("nan"), "mu": float("nan"), "P_c": float("nan")})
    return pd.DataFrame(rows, columns=OVERLAY_COLUMNS)


def cut_report(nadd: float, na_range: Tuple[float, float], params: PhysicalParams,
               seeds_na: Sequence[float] = None, kinds: Sequence[str] = tuple(INITIAL_SHAPES),
               settings: VariationalSettings = DEFAULT_SETTINGS, grid_spec: GridSpec = None,
               overlay_na: Sequence[float] = (), **continuation) -> CutReport:
    """
    All branches of stationary states along Na at fixed Na_dd.

    Args:
        nadd: Dipole strength of the cut
        na_range: (low, high) continuation interval
        params: Trap and polarization (na and nadd are overridden)
        seeds_na: Na values where ITE seeds are started (three points by default)
        kinds: Initial packet shapes tried at every seed
        grid_spec: Grid used for the ITE overlay (skipped if None)
        overlay_na: Na values of the overlay points
        **continuation: Passed on to continue_branch (ds, ds_max, max_points, ...)

    Returns:
        CutReport with traced branches (including symmetry-broken pairs) and the overlay
    """
    params = params.with_nadd(nadd)
    lo, hi = sorted(na_range)
    if seeds_na is None:
        seeds_na = list(np.linspace(lo, hi, 5)[1:-1])
    report = CutReport(nadd=nadd)
    for fp in seed_fixed_points(params, seeds_na, kinds, settings=settings):
        if any(_on_branch(fp, b) for b in report.branches):
            continue
        branch_id = f"B{len(report.branches)}"
        log.info(f"Tracing {branch_id} from Na={fp.na:g}, E_mf={fp.e_mf:.8g}")
        branch = trace_branch(fp, (lo, hi), branch_id, settings, **continuation)
        report.branches.append(branch)

        for n, event in enumerate(e for e in branch.events if e.kind == EventKind.PITCHFORK):
            pair = switch_branch(branch, event, settings=settings)
            event.confirmed = bool(pair)
            if not pair:
                log.warning(f"{branch_id}: pitchfork near Na={event.location:.6f} not confirmed")
                continue
            sb_id = f"{branch_id}-SB{n}"
            if any(_on_branch(pair[0], b) for b in report.branches):
                continue
            broken = trace_branch(pair[0], (lo, hi), f"{sb_id}a", settings, **continuation)
            report.branches.append(broken)
            report.branches.append(_mirror_branch(broken, f"{sb_id}b"))

    if grid_spec is not None and overlay_na:
        report.overlay = grid_overlay(params, grid_spec, overlay_na)
    log.info(f"Cut Na_dd={nadd:g}: {len(report.branches)} branches, {len(report.events())} events")
    return report


# ============================================================================
# Real-time experiments
# ============================================================================

def oscillation_amplitude(t: np.ndarray, series: np.ndarray, t_lo: float, t_hi: float,
                          window: int = 21) -> float:
    """Largest deviation from the centered rolling mean inside [t_lo, t_hi]."""
    s = pd.Series(series)
    trend = s.rolling(window, center=True, min_periods=1).mean()
    mask = (t >= t_lo) & (t <= t_hi)
    if not mask.any():
        return float("nan")
    return float(np.max(np.abs((s - trend).to_numpy()[mask])))


def _center_columns(engine: str) -> Tuple[str, str, str]:
    return ("P_left", "P_c", "P_right") if engine == "grid" else ("I1", "I2", "I3")


@dataclass
class RampResult:
    schedule: RampSchedule
    engine: str
    frame: pd.DataFrame
    amplitude_during: float
    amplitude_after: float
    duration_ms: float
    collapsed: bool = False
    collapse_time: Optional[float] = None


def _relaxed_grid_state(params: PhysicalParams, spec: GridSpec, tol: float) -> GridState:
    report = relax(init_state(spec, "three_gaussian", params.trap), params, tol=tol)
    state = report.final_state if report.final_state is not None else report.plateau_state
    if state is None:
        raise CollapseError(f"no initial state at Na={params.na:g}: {report.message}")
    return state


def _fixed_point_state(params: PhysicalParams, settings: VariationalSettings,
                       kind: str = "symmetric") -> VariationalState:
    report = variational_relax(initial_state(params, kind), params, settings=settings)
    guess = report.final_state if report.final_state is not None else report.plateau_state
    if guess is None:
        raise CollapseError(f"no variational state at Na={params.na:g}: {report.message}")
    return find_fixed_point(guess, params, settings).state


def ramp_experiment(schedule: RampSchedule, params: PhysicalParams, engine: str = "grid",
                    grid_spec: GridSpec = None, t_end: float = None, sample_every: float = 0.5,
                    initial=None, relax_tol: float = 1e-9, units: UnitSystem = None,
                    settings: VariationalSettings = DEFAULT_SETTINGS) -> RampResult:
    """
    Real-time run with Na ramped linearly from na_start to na_end.

    The start is the relaxed (grid) or fixed-point (variational) state at
    na_start unless given. Amplitudes are measured on P_c or I2.
    """
    if engine not in ENGINE_OPTIONS:
        raise ValueError(f"unknown engine {engine!r}, expected one of {ENGINE_OPTIONS}")
    params = replace(params, na=schedule.na_start, nadd=schedule.nadd)
    t_end = 2.0 * schedule.t_ramp if t_end is None else t_end
    units = units or UnitSystem.chromium52()

    if engine == "grid":
        spec = grid_spec or GridSpec()
        start = initial if initial is not None else _relaxed_grid_state(params, spec, relax_tol)
        run = evolve(start, params, schedule, t_end, sample_every=sample_every)
    else:
        start = initial if initial is not None else _fixed_point_state(params, settings)
        run = propagate(start, params, t_end, "real_time", sample_every=sample_every,
                        na_of_t=schedule.na_at, settings=settings)

    frame = run.to_frame()
    t = frame["t"].to_numpy()
    center = frame[_center_columns(engine)[1]].to_numpy()
    window = max(3, int(round(0.1 * schedule.t_ramp / sample_every)) | 1)
    result = RampResult(
        schedule=schedule, engine=engine, frame=frame,
        amplitude_during=oscillation_amplitude(t, center, 0.0, schedule.t_ramp, window),
        amplitude_after=oscillation_amplitude(t, center, schedule.t_ramp, t_end, window),
        duration_ms=units.time_to_seconds(schedule.t_ramp) * 1e3,
        collapsed=run.collapsed, collapse_time=run.collapse_time,
    )
    log.info(f"Ramp {schedule.na_start:g} -> {schedule.na_end:g} ({engine}): amplitude "
             f"{result.amplitude_during:.3g} during, {result.amplitude_after:.3g} after")
    return result


@dataclass
class EngineEvents:
    """Ordered event times of one real-time run (None if not reached)."""
    engine: str
    constancy_end: Optional[float] = None
    oscillation_onset: Optional[float] = None
    symmetry_break: Optional[float] = None
    collapse_time: Optional[float] = None
    frequency: float = float("nan")

    def to_record(self) -> dict:
        return dict(self.__dict__)


def _first_time(t: np.ndarray, mask: np.ndarray) -> Optional[float]:
    hits = np.flatnonzero(mask)
    return float(t[hits[0]]) if hits.size else None


def dominant_frequency(t: np.ndarray, series: np.ndarray) -> float:
    """Frequency (cycles per unit time) of the largest non-constant Fourier mode."""
    if t.size < 4:
        return float("nan")
    dt = float(np.mean(np.diff(t)))
    spectrum = np.abs(scipy.fft.rfft(series - np.mean(series)))
    freqs = scipy.fft.rfftfreq(series.size, dt)
    return float(freqs[1 + np.argmax(spectrum[1:])])


def detect_events(frame: pd.DataFrame, engine: str, collapse_time: Optional[float] = None) -> EngineEvents:
    left, center, right = (frame[c].to_numpy() for c in _center_columns(engine))
    t = frame["t"].to_numpy()
    drift = np.abs(center - center[0])
    events = EngineEvents(
        engine=engine,
        constancy_end=_first_time(t, drift > CONSTANCY_TOL),
        oscillation_onset=_first_time(t, drift > OSCILLATION_TOL),
        symmetry_break=_first_time(t, np.abs(left - right) > SYMMETRY_BREAK_THRESHOLD),
        collapse_time=collapse_time,
    )
    if events.oscillation_onset is not None:
        after = t >= events.oscillation_onset
        if events.symmetry_break is not None:
            after &= t < events.symmetry_break
        events.frequency = dominant_frequency(t[after], center[after])
    return events


@dataclass
class MetastableReport:
    na: float
    nadd: float
    source: str
    frames: Dict[str, pd.DataFrame] = field(default_factory=dict)
    events: Dict[str, EngineEvents] = field(default_factory=dict)

    def events_frame(self) -> pd.DataFrame:
        return pd.DataFrame([e.to_record() for e in self.events.values()])


def metastable_study(params: PhysicalParams, source: str = "variational_fixed_point",
                     grid_spec: GridSpec = None, t_end: float = 100.0, sample_every: float = 0.1,
                     seed: VariationalState = None, seed_kind: str = "split",
                     settings: VariationalSettings = DEFAULT_SETTINGS) -> MetastableReport:
    """
    Propagate a metastable candidate in real time with both engines.

    With source variational_fixed_point the grid run starts from the packet
    state sampled on the grid; with ite_plateau_state each engine starts
    from the flattest plateau of its own imaginary-time run.
    """
    if source not in METASTABLE_SOURCES:
        raise ValueError(f"unknown source {source!r}, expected one of {METASTABLE_SOURCES}")
    spec = grid_spec or GridSpec()
    if source == "variational_fixed_point":
        packets = seed if seed is not None else _fixed_point_state(params, settings, seed_kind)
        grid_start = init_state(spec, "from_variational", params.trap, variational_state=packets)
    else:
        v_report = variational_relax(initial_state(params, seed_kind), params, stop_on_plateau=True,
                                     settings=settings)
        g_report = relax(init_state(spec, "three_gaussian", params.trap), params, stop_on_plateau=True)
        if v_report.plateau_state is None or g_report.plateau_state is None:
            raise CollapseError("no imaginary-time plateau to start from")
        packets, grid_start = v_report.plateau_state, g_report.plateau_state

    report = MetastableReport(na=params.na, nadd=params.nadd, source=source)
    v_run = propagate(packets, params, t_end, "real_time", sample_every=sample_every, settings=settings)
    g_run = evolve(grid_start, params, RampSchedule.constant(params.na, params.nadd), t_end,
                   sample_every=sample_every)
    for engine, run in (("variational", v_run), ("grid", g_run)):
        report.frames[engine] = run.to_frame()
        report.events[engine] = detect_events(report.frames[engine], engine, run.collapse_time)
        log.info(f"Metastable {engine}: {report.events[engine].to_record()}")
    return report
