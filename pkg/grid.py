"""
Grid solver for dipwell.
Split-operator propagation of the dipolar Gross-Pitaevskii equation on a
3-D box, imaginary-time relaxation and observables.

Arrays have shape (nx, ny, nz), so the last (z) index runs fastest in memory.
"""
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional

import numpy as np
import pandas as pd
import scipy.fft

from core import (
    PhysicalParams,
    RampSchedule,
    TrapParams,
    contact_potential,
    dipole_kernel_xyz,
    trap_potential_xyz,
)
from errors import CollapseError
from logger import log
from relaxation import (
    COLLAPSE_CELL_FRACTION,
    COLLAPSE_ENERGY_FACTOR,
    COLLAPSE_PEAK_FACTOR,
    EnergyMonitor,
    RelaxOutcome,
    RelaxReport,
)

INIT_KINDS = ["single_gaussian", "three_gaussian", "from_variational", "from_file"]
MODES = ["real_time", "imaginary_time"]
POPULATION_BOUNDARY = 0.5  # wells are separated at x = +-1/2
OBSERVABLE_COLUMNS = ["t", "E_mf", "mu", "P_left", "P_c", "P_right", "peak_density", "norm"]

_fft_workers = 1


def set_fft_workers(workers: int):
    """Number of threads scipy.fft may use per transform (-1 = all cores)."""
    global _fft_workers
    _fft_workers = int(workers)


def _fftn(a):
    return scipy.fft.fftn(a, workers=_fft_workers)


def _ifftn(a):
    return scipy.fft.ifftn(a, workers=_fft_workers)


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GridSpec:
    """
    Point counts, half-extents and step size of the simulation box.

    dipolar_cutoff > 0 truncates the dipolar interaction at that radius;
    0 keeps the plain periodic convolution.
    """
    nx: int = 128
    ny: int = 96
    nz: int = 64
    lx: float = 4.0
    ly: float = 6.0
    lz: float = 3.0
    dt: float = 1.0e-3
    dipolar_cutoff: float = 0.0

    def __post_init__(self):
        if not self.dipolar_cutoff >= 0:
            raise ValueError(f"dipolar_cutoff must be >= 0, got {self.dipolar_cutoff}")
        for name in ("nx", "ny", "nz"):
            n = getattr(self, name)
            if n < 8:
                raise ValueError(f"{name} must be >= 8, got {n}")
            if not _is_power_of_two(n) and not _is_power_of_two(n // 3 if n % 3 == 0 else 0):
                raise ValueError(f"{name} must be a power of two (or 3 * 2^k), got {n}")
        for name in ("lx", "ly", "lz", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def box(self):
        return (self.lx, self.ly, self.lz)

    @property
    def spacing(self) -> np.ndarray:
        return 2.0 * np.array(self.box) / np.array(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def dt_limit(self) -> float:
        """Default stability guard h_min^2 / pi."""
        return float(np.min(self.spacing) ** 2 / np.pi)

    @property
    def collapse_peak(self) -> float:
        """Peak density of a unit norm piled into a few cells."""
        return COLLAPSE_CELL_FRACTION / self.cell_volume

    def axes(self):
        """Sample coordinates per axis, x_i = -L + h i."""
        return tuple(-L + h * np.arange(n) for L, h, n in zip(self.box, self.spacing, self.shape))

    def wavenumbers(self):
        return tuple(2.0 * np.pi * scipy.fft.fftfreq(n, d=h) for n, h in zip(self.shape, self.spacing))

    def mesh(self):
        """Sparse broadcastable coordinate arrays."""
        return np.meshgrid(*self.axes(), indexing="ij", sparse=True)


@dataclass
class GridState:
    """Wave function samples on a GridSpec."""
    psi: np.ndarray
    spec: GridSpec
    norm: float = 1.0
    time: float = 0.0

    def __post_init__(self):
        if self.psi.shape != self.spec.shape:
            raise ValueError(f"psi shape {self.psi.shape} does not match grid {self.spec.shape}")
        self.psi = np.asarray(self.psi, dtype=np.complex128)
        self.norm = compute_norm(self.psi, self.spec)

    def density(self) -> np.ndarray:
        return np.abs(self.psi) ** 2

    def normalize(self) -> "GridState":
        self.psi /= np.sqrt(self.norm)
        self.norm = compute_norm(self.psi, self.spec)
        return self

    def copy(self) -> "GridState":
        return GridState(psi=self.psi.copy(), spec=self.spec, time=self.time)

    def mirrored(self) -> "GridState":
        """State reflected at x = 0 (index i maps to n - i on the periodic grid)."""
        psi = np.roll(self.psi[::-1, :, :], 1, axis=0)
        return GridState(psi=psi, spec=self.spec, time=self.time)


def compute_norm(psi: np.ndarray, spec: GridSpec) -> float:
    return float(np.sum(np.abs(psi) ** 2) * spec.cell_volume)


@dataclass(frozen=True)
class GridOperators:
    """Arrays reused by every step: kinetic symbol, dipole kernel and trap."""
    k2: np.ndarray
    kernel: np.ndarray
    trap: np.ndarray


@lru_cache(maxsize=8)
def _cached_operators(spec: GridSpec, trap: TrapParams, polarization: str,
                      include_trap: bool) -> GridOperators:
    kx, ky, kz = np.meshgrid(*spec.wavenumbers(), indexing="ij", sparse=True)
    k2 = kx ** 2 + ky ** 2 + kz ** 2
    kernel = dipole_kernel_xyz(kx, ky, kz, polarization, spec.dipolar_cutoff)
    if include_trap:
        x, y, z = spec.mesh()
        v_trap = trap_potential_xyz(x, y, z, trap)
    else:
        v_trap = np.zeros(spec.shape)
    return GridOperators(k2=k2, kernel=kernel, trap=v_trap)


def build_operators(spec: GridSpec, params: PhysicalParams, include_trap: bool = True) -> GridOperators:
    return _cached_operators(spec, params.trap, params.polarization, include_trap)


@dataclass
class Observables:
    """Energies and well populations of one state."""
    t: float
    e_mf: float
    mu: float
    p_left: float
    p_c: float
    p_right: float
    peak_density: float
    norm: float
    kinetic: float = 0.0
    trap: float = 0.0
    contact: float = 0.0
    dipolar: float = 0.0

    @property
    def one_minus_pc(self) -> float:
        return 1.0 - self.p_c

    def to_row(self) -> dict:
        return {
            "t": self.t, "E_mf": self.e_mf, "mu": self.mu,
            "P_left": self.p_left, "P_c": self.p_c, "P_right": self.p_right,
            "peak_density": self.peak_density, "norm": self.norm,
        }


@dataclass
class Trajectory:
    """Observable samples of a real-time run."""
    samples: List[Observables] = field(default_factory=list)
    collapsed: bool = False
    collapse_time: Optional[float] = None
    final_state: Optional[GridState] = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([s.to_row() for s in self.samples], columns=OBSERVABLE_COLUMNS)

    def column(self, name: str) -> np.ndarray:
        return self.to_frame()[name].to_numpy()


# ============================================================================
# Initial states
# ============================================================================

def _gaussian(spec: GridSpec, center, sigma) -> np.ndarray:
    x, y, z = spec.mesh()
    return np.exp(-(x - center[0]) ** 2 / (2 * sigma[0] ** 2)
                  - (y - center[1]) ** 2 / (2 * sigma[1] ** 2)
                  - (z - center[2]) ** 2 / (2 * sigma[2] ** 2)).astype(np.complex128)


def init_state(spec: GridSpec, kind: str = "three_gaussian", trap: TrapParams = None,
               variational_state=None, path: str = None) -> GridState:
    """
    Build a normalized starting wave function.

    Args:
        spec: Grid specification
        kind: single_gaussian, three_gaussian, from_variational or from_file
        trap: Trap parameters used to size the Gaussians (defaults if None)
        variational_state: Packet state for from_variational
        path: Binary field dump for from_file

    Returns:
        Normalized GridState
    """
    trap = trap if trap is not None else TrapParams()
    if kind == "single_gaussian":
        # One broad Gaussian covering all wells
        span = max(abs(c) for c in trap.centers) if trap.centers else 1.0
        psi = _gaussian(spec, (0.0, 0.0, 0.0), (max(span, trap.wx), trap.wy / 2, trap.wz / 2))
    elif kind == "three_gaussian":
        sigma = (trap.wx / 2, trap.wy / 2, trap.wz / 2)
        psi = sum(_gaussian(spec, (q, 0.0, 0.0), sigma) for q in trap.centers)
    elif kind == "from_variational":
        if variational_state is None:
            raise ValueError("from_variational needs a variational state")
        from variational import sample_on_grid
        psi = sample_on_grid(variational_state, spec)
    elif kind == "from_file":
        if path is None:
            raise ValueError("from_file needs a path")
        from field_io import read_field
        state, _ = read_field(path)
        if state.spec.shape != spec.shape or not np.allclose(state.spec.box, spec.box):
            from errors import FieldFormatError
            raise FieldFormatError(
                f"field in {path} has grid {state.spec.shape} over {state.spec.box}, "
                f"expected {spec.shape} over {spec.box}"
            )
        psi = state.psi
    else:
        raise ValueError(f"unknown initial state kind {kind!r}, expected one of {INIT_KINDS}")
    return GridState(psi=psi, spec=spec).normalize()


# ============================================================================
# Potentials and propagation
# ============================================================================

def _convolve_dipolar(density: np.ndarray, kernel: np.ndarray, nadd: float) -> np.ndarray:
    return 3.0 * nadd * _ifftn(kernel * _fftn(density)).real


def dipole_potential(state: GridState, nadd: float, polarization: str = "z") -> np.ndarray:
    """
    Dipolar mean-field potential 3 Na_dd (K * |psi|^2) by the convolution theorem.

    The k = 0 component of the kernel is zero. Periodic images are only
    removed when the grid carries a dipolar cutoff.
    """
    if nadd == 0:
        return np.zeros(state.spec.shape)
    x_k, y_k, z_k = np.meshgrid(*state.spec.wavenumbers(), indexing="ij", sparse=True)
    kernel = dipole_kernel_xyz(x_k, y_k, z_k, polarization, state.spec.dipolar_cutoff)
    return _convolve_dipolar(state.density(), kernel, nadd)


def _mean_field(psi, ops: GridOperators, na: float, nadd: float) -> np.ndarray:
    density = np.abs(psi) ** 2
    v = ops.trap + contact_potential(density, na)
    if nadd != 0:
        v = v + _convolve_dipolar(density, ops.kernel, nadd)
    return v


def _strang_step(psi: np.ndarray, ops: GridOperators, na: float, nadd: float, tau: complex):
    """
    One Strang step psi -> exp(-tau T/2) exp(-tau V) exp(-tau T/2) psi.

    tau = i dt in real time, tau = dt in imaginary time.
    """
    half_kinetic = np.exp(-0.25 * tau * ops.k2)
    psi = _ifftn(half_kinetic * _fftn(psi))
    psi = psi * np.exp(-tau * _mean_field(psi, ops, na, nadd))
    return _ifftn(half_kinetic * _fftn(psi))


def step(state: GridState, params: PhysicalParams, dt=None, mode: str = "real_time",
         include_trap: bool = True, check_dt: bool = True) -> GridState:
    """
    Advance the state by one split-operator step.

    Args:
        state: Current state
        params: Interaction strengths, trap and dipole axis
        dt: Step size (defaults to spec.dt); complex values are honored in real_time mode
        mode: real_time or imaginary_time
        include_trap: Switch the triple-well potential off for free propagation
        check_dt: Enforce |dt| <= h_min^2 / pi

    Returns:
        New GridState (renormalized in imaginary time)
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    dt = state.spec.dt if dt is None else dt
    if check_dt and abs(dt) > state.spec.dt_limit:
        raise ValueError(f"|dt|={abs(dt):.3g} exceeds the stability guard {state.spec.dt_limit:.3g}")
    ops = build_operators(state.spec, params, include_trap)
    tau = 1j * dt if mode == "real_time" else abs(dt)
    psi = _strang_step(state.psi, ops, params.na, params.nadd, tau)
    new = GridState(psi=psi, spec=state.spec, time=state.time + abs(dt))
    if not np.isfinite(new.norm):
        raise CollapseError(f"wave function diverged at t={new.time:.6g}", time=new.time)
    if mode == "imaginary_time":
        new.normalize()
    return new


def observables(state: GridState, params: PhysicalParams, include_trap: bool = True) -> Observables:
    """
    Mean-field energy, chemical potential and well populations.

    E_mf weighs the interaction terms by 1/2, mu by 1. Expectation values are
    divided by the norm, interaction terms by its square.
    """
    spec = state.spec
    ops = build_operators(spec, params, include_trap)
    dv = spec.cell_volume
    density = state.density()
    norm = float(np.sum(density) * dv)

    psi_k = _fftn(state.psi)
    kinetic = float(0.5 * np.sum(ops.k2 * np.abs(psi_k) ** 2) * dv / psi_k.size) / norm
    trap = float(np.sum(ops.trap * density) * dv) / norm
    contact = float(np.sum(contact_potential(density, params.na) * density) * dv) / norm**2
    if params.nadd != 0:
        dipolar = float(np.sum(_convolve_dipolar(density, ops.kernel, params.nadd) * density) * dv) / norm**2
    else:
        dipolar = 0.0

    x = spec.axes()[0]
    profile = density.sum(axis=(1, 2)) * dv
    p_left = float(profile[x < -POPULATION_BOUNDARY].sum()) / norm
    p_right = float(profile[x > POPULATION_BOUNDARY].sum()) / norm
    p_c = float(profile[np.abs(x) <= POPULATION_BOUNDARY].sum()) / norm

    return Observables(
        t=state.time,
        e_mf=kinetic + trap + 0.5 * contact + 0.5 * dipolar,
        mu=kinetic + trap + contact + dipolar,
        p_left=p_left, p_c=p_c, p_right=p_right,
        peak_density=float(density.max()),
        norm=norm,
        kinetic=kinetic, trap=trap, contact=contact, dipolar=dipolar,
    )


def relax(state: GridState, params: PhysicalParams, tol: float = 1e-9, max_steps: int = 200000,
          check_every: int = 10, plateau_window: int = 2000, stop_on_plateau: bool = False,
          dt: float = None) -> RelaxReport:
    """
    Imaginary-time relaxation with convergence, plateau and collapse detection.

    Args:
        state: Starting state (not modified)
        params: Physical parameters
        tol: Converged once |dE| / (|E| dtau) < tol
        max_steps: Step budget
        check_every: Steps between energy evaluations
        plateau_window: Minimum plateau length in steps
        stop_on_plateau: Return outcome plateau when leaving the first plateau

    Returns:
        RelaxReport with the energy trace, final state and any plateaus
    """
    if not tol > 0:
        raise ValueError(f"relaxation tolerance must be positive, got {tol}")
    dt = state.spec.dt if dt is None else dt
    current = state.copy().normalize()
    current.time = 0.0
    obs = observables(current, params)
    monitor = EnergyMonitor(tol, params.trap.v0, initial_peak=obs.peak_density,
                            window_steps=plateau_window, stop_on_plateau=stop_on_plateau,
                            peak_cap=current.spec.collapse_peak)
    start = monitor.update(0, 0.0, obs.e_mf, obs.peak_density)

    ops = build_operators(current.spec, params)
    psi = current.psi
    outcome = RelaxOutcome.MAX_STEPS if start is None else start
    steps = 0
    dv = current.spec.cell_volume
    while start is None and steps < max_steps:
        psi = _strang_step(psi, ops, params.na, params.nadd, dt)
        n = float(np.sum(np.abs(psi) ** 2) * dv)
        steps += 1
        if not np.isfinite(n) or n == 0.0:
            monitor.update(steps, steps * dt, float("nan"))
            monitor.reason = f"wave function diverged after {steps} steps"
            outcome = RelaxOutcome.COLLAPSED
            break
        psi /= np.sqrt(n)
        if steps % check_every and steps != max_steps:
            continue
        current = GridState(psi=psi, spec=current.spec, time=steps * dt)
        obs = observables(current, params)
        result = monitor.update(steps, current.time, obs.e_mf, obs.peak_density,
                                snapshot=current.copy)
        if steps % (100 * check_every) == 0:
            log.debug(f"ITE step {steps}: E_mf={obs.e_mf:.12g} mu={obs.mu:.12g} P_c={obs.p_c:.6f}")
        if result is not None:
            outcome = result
            break

    final = None
    if outcome != RelaxOutcome.COLLAPSED:
        final = GridState(psi=psi, spec=current.spec, time=steps * dt)
    if outcome == RelaxOutcome.PLATEAU and monitor.plateau_state is not None:
        final = monitor.plateau_state
    log.info(f"ITE finished: {outcome} after {steps} steps ({monitor.reason})")
    return monitor.report(outcome, steps, final)


def evolve(state: GridState, params: PhysicalParams, schedule: RampSchedule, t_end: float,
           sample_every: float = 0.1, dt: float = None) -> Trajectory:
    """
    Real-time propagation with the scattering length following a ramp.

    Na(t) is taken at the midpoint of each step; Na_dd comes from the schedule.
    A collapse ends the run early and flags the trajectory.
    """
    if not t_end > 0:
        raise ValueError(f"t_end must be positive, got {t_end}")
    dt = state.spec.dt if dt is None else dt
    if dt > state.spec.dt_limit:
        raise ValueError(f"dt={dt:.3g} exceeds the stability guard {state.spec.dt_limit:.3g}")
    n_steps = int(round(t_end / dt))
    stride = max(1, int(round(sample_every / dt)))
    base = params.with_nadd(schedule.nadd)
    ops = build_operators(state.spec, base)

    current = state.copy()
    current.time = 0.0
    first = observables(current, base.with_na(schedule.na_at(0.0)))
    trajectory = Trajectory(samples=[first])
    peak_limit = min(COLLAPSE_PEAK_FACTOR * first.peak_density, state.spec.collapse_peak)
    energy_floor = -COLLAPSE_ENERGY_FACTOR * base.trap.v0

    psi = current.psi
    for n in range(1, n_steps + 1):
        na = schedule.na_at((n - 0.5) * dt)
        psi = _strang_step(psi, ops, na, schedule.nadd, 1j * dt)
        if n % stride and n != n_steps:
            continue
        current = GridState(psi=psi, spec=state.spec, time=n * dt)
        if not np.isfinite(current.norm):
            trajectory.collapsed, trajectory.collapse_time = True, current.time
            break
        obs = observables(current, base.with_na(schedule.na_at(current.time)))
        trajectory.samples.append(obs)
        if obs.peak_density > peak_limit or obs.e_mf < energy_floor:
            trajectory.collapsed, trajectory.collapse_time = True, current.time
            break

    if trajectory.collapsed:
        log.warning(f"Real-time run collapsed at t={trajectory.collapse_time:.6g}")
    else:
        trajectory.final_state = current
    return trajectory
