"""
Imaginary-time relaxation bookkeeping for dipwell.
Convergence, plateau and collapse detection shared by the grid and the
variational solvers.
"""
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional, Tuple

import numpy as np
import pandas as pd

from logger import log

PLATEAU_WINDOW_STEPS = 2000
PLATEAU_SLOPE_FACTOR = 10.0
COLLAPSE_ENERGY_FACTOR = 10.0  # collapsed once E_mf < -10 * V0
COLLAPSE_PEAK_FACTOR = 1.0e3  # collapsed once peak density > 1e3 * initial
COLLAPSE_CELL_FRACTION = 0.5  # grid collapse once one cell holds half the norm


class RelaxOutcome:
    """Terminal states of an imaginary-time run."""
    CONVERGED = "converged"
    PLATEAU = "plateau"
    COLLAPSED = "collapsed"
    MAX_STEPS = "max_steps"


@dataclass
class Plateau:
    tau_start: float
    tau_end: float
    energy: float
    min_slope: float

    @property
    def length(self) -> float:
        return self.tau_end - self.tau_start


@dataclass
class RelaxReport:
    """Result of an imaginary-time relaxation."""
    outcome: str
    steps: int
    energy_trace: List[Tuple[float, float]]
    final_state: Any = None
    plateaus: List[Plateau] = field(default_factory=list)
    plateau_state: Any = None
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.outcome == RelaxOutcome.CONVERGED

    @property
    def final_energy(self) -> float:
        return self.energy_trace[-1][1]

    @property
    def survival_time(self) -> float:
        """Imaginary time reached before the run stopped."""
        return self.energy_trace[-1][0]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.energy_trace, columns=["tau", "E_mf"])


def relative_slope(e_prev: float, e_now: float, dtau: float) -> float:
    """|dE| / (|E| dtau), falling back to an absolute slope when E is zero."""
    scale = abs(e_now) if e_now != 0.0 else 1.0
    return abs(e_now - e_prev) / (scale * dtau)


class EnergyMonitor:
    """
    Watches the mean-field energy during imaginary-time propagation.

    Call update() at every energy check; it returns an outcome string once
    the run should stop, else None. peak_cap is an absolute density bound,
    set by the grid solver to the density of a collapse into a few cells.
    """

    def __init__(self, tol: float, v0: float, initial_peak: Optional[float] = None,
                 window_steps: int = PLATEAU_WINDOW_STEPS, stop_on_plateau: bool = False,
                 peak_cap: Optional[float] = None):
        if not tol > 0:
            raise ValueError(f"relaxation tolerance must be positive, got {tol}")
        self.tol = tol
        self.plateau_slope = PLATEAU_SLOPE_FACTOR * tol
        self.energy_floor = -COLLAPSE_ENERGY_FACTOR * v0
        self.peak_limit = None if initial_peak is None else COLLAPSE_PEAK_FACTOR * initial_peak
        if peak_cap is not None:
            self.peak_limit = peak_cap if self.peak_limit is None else min(self.peak_limit, peak_cap)
        self.window_steps = window_steps
        self.stop_on_plateau = stop_on_plateau

        self.trace: List[Tuple[float, float]] = []
        self.plateaus: List[Plateau] = []
        self.plateau_state = None
        self.reason = ""
        self._best_slope = np.inf
        self._prev = None  # (step, tau, energy)
        self._band = None  # [start_step, start_tau, min_slope, energy, snapshot]

    def update(self, step: int, tau: float, energy: float, peak: Optional[float] = None,
               snapshot: Optional[Callable[[], Any]] = None) -> Optional[str]:
        self.trace.append((tau, energy))
        collapse = None
        if not np.isfinite(energy) or (peak is not None and not np.isfinite(peak)):
            collapse = f"non-finite energy at tau={tau:.6g}"
        elif energy < self.energy_floor:
            collapse = f"energy {energy:.6g} below {self.energy_floor:.6g}"
        elif peak is not None and self.peak_limit is not None and peak > self.peak_limit:
            collapse = f"peak density {peak:.6g} exceeds {self.peak_limit:.6g}"
        if collapse is not None:
            self.reason = collapse
            if self._prev is not None:
                self._close_band(self._prev[0], self._prev[1])
            return RelaxOutcome.COLLAPSED

        prev, self._prev = self._prev, (step, tau, energy)
        if prev is None:
            return None
        slope = relative_slope(prev[2], energy, tau - prev[1])
        if slope < self.tol:
            self.reason = f"slope {slope:.3g} below tol"
            return RelaxOutcome.CONVERGED

        if slope < self.plateau_slope:
            if self._band is None:
                self._band = [prev[0], prev[1], np.inf, energy, None]
            if slope < self._band[2]:
                self._band[2] = slope
                self._band[3] = energy
                self._band[4] = snapshot() if snapshot is not None else None
            return None

        if self._close_band(prev[0], prev[1]) and self.stop_on_plateau:
            self.reason = "left a plateau"
            return RelaxOutcome.PLATEAU
        return None

    def _close_band(self, end_step: int, end_tau: float) -> bool:
        """End the current low-slope band; True if it was long enough to count as a plateau."""
        if self._band is None:
            return False
        band, self._band = self._band, None
        if end_step - band[0] < self.window_steps:
            return False
        plateau = Plateau(tau_start=band[1], tau_end=end_tau, energy=band[3], min_slope=band[2])
        self.plateaus.append(plateau)
        log.info(f"ITE plateau at E={plateau.energy:.8g} for tau in "
                 f"[{plateau.tau_start:.4g}, {plateau.tau_end:.4g}]")
        if band[2] < self._best_slope:
            self._best_slope = band[2]
            self.plateau_state = band[4]
        return True

    def report(self, outcome: str, steps: int, final_state=None) -> RelaxReport:
        if outcome == RelaxOutcome.MAX_STEPS and self._prev is not None:
            self._close_band(self._prev[0], self._prev[1])
        return RelaxReport(
            outcome=outcome,
            steps=steps,
            energy_trace=list(self.trace),
            final_state=final_state,
            plateaus=list(self.plateaus),
            plateau_state=self.plateau_state,
            message=self.reason,
        )
