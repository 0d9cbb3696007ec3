"""
Tests for relaxation.py - Convergence, plateau and collapse detection.
"""
import pytest
import numpy as np
import sys
import os

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from relaxation import EnergyMonitor, RelaxOutcome, relative_slope


def _feed(monitor, energies, dtau=0.01):
    for i, e in enumerate(energies):
        result = monitor.update(i, i * dtau, e, snapshot=lambda i=i: f"state{i}")
        if result is not None:
            return i, result
    return len(energies) - 1, None


class TestRelativeSlope:
    """Tests for the relative energy slope."""

    def test_relative(self):
        """|dE| / (|E| dtau)."""
        assert relative_slope(-10.0, -10.1, 0.5) == pytest.approx(0.1 / (10.1 * 0.5))

    def test_zero_energy_falls_back_to_absolute(self):
        """E = 0 uses the absolute slope."""
        assert relative_slope(1.0, 0.0, 0.5) == pytest.approx(2.0)


class TestEnergyMonitor:
    """Tests for EnergyMonitor outcomes."""

    def test_rejects_non_positive_tol(self):
        """tol must be positive."""
        with pytest.raises(ValueError, match="tolerance"):
            EnergyMonitor(tol=0.0, v0=80.0)

    def test_converges(self):
        """A vanishing slope ends the run as converged."""
        monitor = EnergyMonitor(tol=1e-6, v0=80.0)
        step, result = _feed(monitor, [-40.0, -41.0, -41.0])
        assert result == RelaxOutcome.CONVERGED
        assert step == 2

    def test_nan_is_collapse(self):
        """A non-finite energy is a collapse and still lands in the trace."""
        monitor = EnergyMonitor(tol=1e-6, v0=80.0)
        _, result = _feed(monitor, [-40.0, float("nan")])
        assert result == RelaxOutcome.COLLAPSED
        assert len(monitor.trace) == 2

    def test_energy_floor(self):
        """E_mf below -10 V0 counts as collapse."""
        monitor = EnergyMonitor(tol=1e-6, v0=80.0)
        _, result = _feed(monitor, [-40.0, -900.0])
        assert result == RelaxOutcome.COLLAPSED
        assert "below" in monitor.reason

    def test_peak_density(self):
        """A peak density above 1e3 times the initial one counts as collapse."""
        monitor = EnergyMonitor(tol=1e-6, v0=80.0, initial_peak=1.0)
        assert monitor.update(0, 0.0, -40.0, peak=1.0) is None
        assert monitor.update(1, 0.01, -41.0, peak=2000.0) == RelaxOutcome.COLLAPSED

    def test_peak_cap_bounds_the_limit(self):
        """An absolute peak cap below 1e3 times the initial peak wins."""
        monitor = EnergyMonitor(tol=1e-6, v0=80.0, initial_peak=1.0, peak_cap=50.0)
        assert monitor.peak_limit == pytest.approx(50.0)
        assert monitor.update(0, 0.0, -40.0, peak=1.0) is None
        assert monitor.update(1, 0.01, -41.0, peak=60.0) == RelaxOutcome.COLLAPSED
        assert "exceeds" in monitor.reason

    def test_peak_cap_without_initial_peak(self):
        """The cap alone is enough to flag a collapse."""
        monitor = EnergyMonitor(tol=1e-6, v0=80.0, peak_cap=10.0)
        assert monitor.update(0, 0.0, -40.0, peak=11.0) == RelaxOutcome.COLLAPSED

    def test_collapse_closes_an_open_plateau(self):
        """A plateau still open when the run collapses is recorded."""
        tol = 1e-6
        monitor = EnergyMonitor(tol=tol, v0=80.0, window_steps=20)
        energies = [-10.0 * (1 + 5 * tol * 0.01) ** i for i in range(40)] + [-900.0]
        _, result = _feed(monitor, energies)
        assert result == RelaxOutcome.COLLAPSED
        assert len(monitor.plateaus) == 1
        assert monitor.plateau_state is not None

    def test_max_steps_closes_an_open_plateau(self):
        """report(max_steps) records a plateau that lasted to the end of the budget."""
        tol = 1e-6
        monitor = EnergyMonitor(tol=tol, v0=80.0, window_steps=20)
        _feed(monitor, [-10.0 * (1 + 5 * tol * 0.01) ** i for i in range(40)])
        report = monitor.report(RelaxOutcome.MAX_STEPS, 40)
        assert len(report.plateaus) == 1

    def test_plateau_recorded(self):
        """A long band of small slopes followed by a drop is recorded as a plateau."""
        tol = 1e-6
        monitor = EnergyMonitor(tol=tol, v0=80.0, window_steps=20)
        # slope ~ 5 tol for 40 checks, then a steep descent
        energies = [-10.0 * (1 + 5 * tol * 0.01) ** i for i in range(40)]
        energies += [energies[-1] - 1.0 * k for k in range(1, 4)]
        _, result = _feed(monitor, energies)
        assert result is None
        assert len(monitor.plateaus) == 1
        plateau = monitor.plateaus[0]
        assert plateau.length >= 0.2
        assert monitor.plateau_state is not None

    def test_stop_on_plateau(self):
        """stop_on_plateau ends the run when the plateau is left."""
        tol = 1e-6
        monitor = EnergyMonitor(tol=tol, v0=80.0, window_steps=20, stop_on_plateau=True)
        energies = [-10.0 * (1 + 5 * tol * 0.01) ** i for i in range(40)] + [-20.0]
        _, result = _feed(monitor, energies)
        assert result == RelaxOutcome.PLATEAU

    def test_short_band_is_not_a_plateau(self):
        """Bands shorter than the window are ignored."""
        tol = 1e-6
        monitor = EnergyMonitor(tol=tol, v0=80.0, window_steps=100)
        energies = [-10.0 * (1 + 5 * tol * 0.01) ** i for i in range(10)] + [-20.0]
        _feed(monitor, energies)
        assert monitor.plateaus == []

    def test_report(self):
        """report() carries trace, outcome and the final state."""
        monitor = EnergyMonitor(tol=1e-6, v0=80.0)
        _feed(monitor, [-40.0, -41.0])
        report = monitor.report(RelaxOutcome.MAX_STEPS, 2, final_state="psi")
        assert report.final_energy == -41.0
        assert report.survival_time == pytest.approx(0.01)
        assert list(report.to_frame().columns) == ["tau", "E_mf"]
        assert not report.converged
