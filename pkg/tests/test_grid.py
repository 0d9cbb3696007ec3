"""
Tests for grid.py - Split-operator propagation and grid observables.
"""
import pytest
import numpy as np
from scipy.integrate import quad
from scipy.special import spherical_jn
import sys
import os

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import grid
from core import PhysicalParams, RampSchedule, TrapParams
from errors import CollapseError
from grid import GridSpec, GridState
from relaxation import RelaxOutcome


def _gaussian_state(spec, center=(0.0, 0.0, 0.0), sigma=(0.4, 0.4, 0.4)):
    x, y, z = spec.mesh()
    psi = np.exp(-(x - center[0]) ** 2 / (2 * sigma[0] ** 2)
                 - (y - center[1]) ** 2 / (2 * sigma[1] ** 2)
                 - (z - center[2]) ** 2 / (2 * sigma[2] ** 2))
    return GridState(psi=psi.astype(complex), spec=spec).normalize()


class TestGridSpec:
    """Tests for grid geometry."""

    def test_default_grid(self):
        """Default grid is 128 x 96 x 64 over [-4,4) x [-6,6) x [-3,3)."""
        spec = GridSpec()
        assert spec.shape == (128, 96, 64)
        np.testing.assert_allclose(spec.spacing, [8 / 128, 12 / 96, 6 / 64])

    def test_rejects_odd_sizes(self):
        """Sizes must be powers of two or three times a power of two."""
        with pytest.raises(ValueError, match="nx"):
            GridSpec(nx=100)

    def test_accepts_three_times_power_of_two(self):
        """48 = 3 * 16 is allowed."""
        assert GridSpec(ny=48).ny == 48

    def test_axes_contain_origin(self):
        """x_i = -L + h i puts x = 0 at index n / 2."""
        x = GridSpec(nx=32, ny=32, nz=32).axes()[0]
        assert x[16] == pytest.approx(0.0)
        assert x[0] == pytest.approx(-4.0)

    def test_dt_limit(self):
        """The stability guard is h_min^2 / pi."""
        spec = GridSpec(nx=32, ny=32, nz=32)
        assert spec.dt_limit == pytest.approx((6 / 32) ** 2 / np.pi)

    def test_collapse_peak(self):
        """Half the norm in one cell sets the grid collapse density."""
        spec = GridSpec(nx=64, ny=48, nz=32)
        assert spec.cell_volume == pytest.approx(0.125 * 0.25 * 0.1875)
        assert spec.collapse_peak == pytest.approx(0.5 / spec.cell_volume)


class TestInitialStates:
    """Tests for starting wave functions."""

    @pytest.mark.parametrize("kind", ["single_gaussian", "three_gaussian"])
    def test_normalized(self, small_spec, kind):
        """Initial states carry unit norm."""
        state = grid.init_state(small_spec, kind)
        assert state.norm == pytest.approx(1.0, abs=1e-12)

    def test_three_gaussian_is_symmetric(self, small_spec, free_params):
        """Equal Gaussians give equal outer populations."""
        obs = grid.observables(grid.init_state(small_spec, "three_gaussian"), free_params)
        assert obs.p_left == pytest.approx(obs.p_right, abs=1e-12)
        assert obs.p_left + obs.p_c + obs.p_right == pytest.approx(1.0)

    def test_unknown_kind(self, small_spec):
        """Unknown kinds are rejected."""
        with pytest.raises(ValueError, match="unknown initial state"):
            grid.init_state(small_spec, "donut")

    def test_from_file_needs_path(self, small_spec):
        """from_file without a path is an error."""
        with pytest.raises(ValueError):
            grid.init_state(small_spec, "from_file")

    def test_mirrored_swaps_outer_wells(self, small_spec, free_params):
        """Reflection at x = 0 exchanges P_left and P_right."""
        state = _gaussian_state(small_spec, center=(1.0, 0.0, 0.0), sigma=(0.3, 1.0, 0.3))
        before = grid.observables(state, free_params)
        after = grid.observables(state.mirrored(), free_params)
        assert after.p_left == pytest.approx(before.p_right, abs=1e-12)
        assert after.p_right == pytest.approx(before.p_left, abs=1e-12)


class TestDipolePotential:
    """Tests for the FFT dipolar convolution."""

    def test_zero_for_nadd_zero(self, small_spec):
        """No dipoles, no potential."""
        state = _gaussian_state(small_spec)
        assert not np.any(grid.dipole_potential(state, 0.0))

    def test_isotropic_cloud_center(self):
        """A cubic-symmetric cloud feels no dipolar potential at its center."""
        spec = GridSpec(nx=32, ny=32, nz=32, lx=4.0, ly=4.0, lz=4.0)
        state = _gaussian_state(spec, sigma=(0.5, 0.5, 0.5))
        v = grid.dipole_potential(state, 1.0)
        assert abs(v[16, 16, 16]) < 1e-10 * np.max(np.abs(v))

    def test_sign_follows_elongation(self):
        """A cloud stretched along the dipoles attracts itself at the center; stretched across, it repels."""
        spec = GridSpec(nx=32, ny=32, nz=32, lx=4.0, ly=4.0, lz=4.0)
        along = grid.dipole_potential(_gaussian_state(spec, sigma=(0.3, 0.3, 0.9)), 1.0)
        across = grid.dipole_potential(_gaussian_state(spec, sigma=(0.9, 0.3, 0.3)), 1.0)
        assert along[16, 16, 16] < 0
        assert across[16, 16, 16] > 0


def _isotropic_reference(r, cos_theta, sigma, nadd):
    """Free-space dipolar potential of a normalized isotropic Gaussian density of width sigma."""
    def radial(rr):
        if rr == 0.0:
            return 0.0
        integrand = lambda k: k ** 2 * spherical_jn(2, k * rr) * np.exp(-0.5 * (k * sigma) ** 2)
        return quad(integrand, 0.0, 12.0 / sigma, limit=400, epsabs=1e-13, epsrel=1e-11)[0]
    p2 = 0.5 * (3.0 * cos_theta ** 2 - 1.0)
    return -(4.0 * nadd / np.pi) * p2 * np.array([radial(rr) for rr in r])


class TestDipoleOracle:
    """FFT dipolar potential against a direct radial quadrature."""

    @pytest.mark.parametrize("polarization", ["z", "x"])
    def test_matches_quadrature_on_32_cube(self, polarization):
        """Inside the cloud the truncated-kernel FFT agrees to 1e-4 relative."""
        sigma = 0.5
        spec = GridSpec(nx=32, ny=32, nz=32, lx=4.0, ly=4.0, lz=4.0, dipolar_cutoff=4.5)
        # psi width sqrt(2) sigma gives a density of width sigma
        state = _gaussian_state(spec, sigma=(np.sqrt(2) * sigma,) * 3)
        v = grid.dipole_potential(state, 0.3, polarization)

        x, y, z = np.meshgrid(*spec.axes(), indexing="ij")
        r = np.sqrt(x ** 2 + y ** 2 + z ** 2)
        inside = r <= 1.0
        axis = {"x": x, "z": z}[polarization]
        cos_theta = np.where(r > 0, axis / np.where(r > 0, r, 1.0), 0.0)
        reference = _isotropic_reference(r[inside], cos_theta[inside], sigma, 0.3)
        error = np.max(np.abs(v[inside] - reference)) / np.max(np.abs(reference))
        assert error <= 1e-4


class TestStep:
    """Tests for single split-operator steps."""

    def test_real_time_conserves_norm(self, small_spec, dipolar_params):
        """Real-time steps are unitary."""
        state = grid.init_state(small_spec, "three_gaussian")
        for _ in range(50):
            state = grid.step(state, dipolar_params, mode="real_time")
        assert state.norm == pytest.approx(1.0, abs=1e-10)
        assert state.time == pytest.approx(0.05)

    def test_imaginary_time_renormalizes(self, small_spec, dipolar_params):
        """Imaginary-time steps return unit norm."""
        state = grid.step(grid.init_state(small_spec, "single_gaussian"), dipolar_params,
                          mode="imaginary_time")
        assert state.norm == pytest.approx(1.0, abs=1e-12)

    def test_dt_guard(self, small_spec, free_params):
        """Steps above the guard are refused unless the check is disabled."""
        state = grid.init_state(small_spec)
        with pytest.raises(ValueError, match="stability guard"):
            grid.step(state, free_params, dt=1.0)
        grid.step(state, free_params, dt=0.02, check_dt=False)

    def test_unknown_mode(self, small_spec, free_params):
        """Only real_time and imaginary_time exist."""
        with pytest.raises(ValueError, match="mode"):
            grid.step(grid.init_state(small_spec), free_params, mode="sideways")

    def test_divergence_raises_collapse(self, small_spec, free_params):
        """A non-finite wave function is reported as a collapse."""
        state = grid.init_state(small_spec)
        state.psi[0, 0, 0] = np.nan
        with pytest.raises(CollapseError):
            grid.step(state, free_params)

    def test_free_gaussian_spreads(self, small_spec):
        """Without trap the packet width grows."""
        params = PhysicalParams()
        state = _gaussian_state(small_spec, sigma=(0.3, 0.3, 0.3))
        x = small_spec.axes()[0]
        width0 = np.sum(x ** 2 * state.density().sum(axis=(1, 2))) * small_spec.cell_volume
        for _ in range(40):
            state = grid.step(state, params, include_trap=False)
        width1 = np.sum(x ** 2 * state.density().sum(axis=(1, 2))) * small_spec.cell_volume
        assert width1 > width0


class TestObservables:
    """Tests for energies and populations."""

    def test_components_add_up(self, small_spec, dipolar_params):
        """E_mf and mu weigh the interaction terms by 1/2 and 1."""
        obs = grid.observables(grid.init_state(small_spec), dipolar_params)
        assert obs.e_mf == pytest.approx(obs.kinetic + obs.trap + 0.5 * (obs.contact + obs.dipolar))
        assert obs.mu == pytest.approx(obs.kinetic + obs.trap + obs.contact + obs.dipolar)

    def test_interaction_terms_scale_with_norm(self, small_spec, dipolar_params):
        """Per-particle interaction energies do not depend on the stored norm."""
        state = grid.init_state(small_spec)
        scaled = GridState(psi=2.0 * state.psi, spec=small_spec)
        a = grid.observables(state, dipolar_params)
        b = grid.observables(scaled, dipolar_params)
        assert b.e_mf == pytest.approx(a.e_mf, rel=1e-12)
        assert b.norm == pytest.approx(4.0)

    def test_one_minus_pc(self, small_spec, free_params):
        """one_minus_pc is the population outside the center well."""
        obs = grid.observables(grid.init_state(small_spec), free_params)
        assert obs.one_minus_pc == pytest.approx(obs.p_left + obs.p_right)


class TestRelax:
    """Tests for imaginary-time relaxation."""

    def test_rejects_non_positive_tol(self, small_spec, free_params):
        """tol must be positive."""
        with pytest.raises(ValueError, match="tolerance"):
            grid.relax(grid.init_state(small_spec), free_params, tol=0.0)

    def test_energy_decreases(self, small_spec, free_params):
        """Imaginary time lowers the energy of a linear problem."""
        report = grid.relax(grid.init_state(small_spec), free_params, tol=1e-12, max_steps=500)
        energies = report.to_frame()["E_mf"].to_numpy()
        assert report.outcome == RelaxOutcome.MAX_STEPS
        assert np.all(np.diff(energies) <= 1e-7)
        assert report.final_state.norm == pytest.approx(1.0)

    def test_converges_with_loose_tol(self, small_spec, free_params):
        """A loose tolerance stops the run early with a final state."""
        report = grid.relax(grid.init_state(small_spec), free_params, tol=1e-1, max_steps=5000)
        assert report.converged
        assert report.steps < 5000
        assert report.final_state is not None

    def test_state_piled_into_one_cell_is_collapse(self, small_spec, free_params):
        """A density concentrated in a single cell is reported as collapsed."""
        psi = np.zeros(small_spec.shape, dtype=complex)
        psi[16, 16, 16] = 1.0
        state = GridState(psi=psi, spec=small_spec).normalize()
        report = grid.relax(state, free_params, tol=1e-9, max_steps=100)
        assert report.outcome == RelaxOutcome.COLLAPSED
        assert report.steps == 0
        assert report.final_state is None
        assert "peak density" in report.message

    def test_smooth_start_is_below_collapse_density(self, small_spec, free_params):
        """Smooth starting states stay well below the grid collapse density."""
        state = grid.init_state(small_spec, "single_gaussian")
        obs = grid.observables(state, free_params)
        assert obs.peak_density < 0.5 * small_spec.collapse_peak


class TestEvolve:
    """Tests for real-time propagation with a ramp."""

    def test_sample_count(self, small_spec, free_params):
        """Samples are taken every sample_every, including t = 0."""
        traj = grid.evolve(grid.init_state(small_spec), free_params, RampSchedule.constant(0.0, 0.0),
                           t_end=0.05, sample_every=0.01)
        frame = traj.to_frame()
        assert len(frame) == 6
        np.testing.assert_allclose(frame["t"], np.linspace(0.0, 0.05, 6), atol=1e-12)
        assert not traj.collapsed

    def test_norm_conserved_during_ramp(self, small_spec):
        """The ramp changes Na but not the norm."""
        params = PhysicalParams(trap=TrapParams())
        ramp = RampSchedule(na_start=0.0, na_end=0.5, t_ramp=0.02, nadd=0.2)
        traj = grid.evolve(grid.init_state(small_spec), params, ramp, t_end=0.04, sample_every=0.01)
        np.testing.assert_allclose(traj.column("norm"), 1.0, atol=1e-10)

    def test_rejects_non_positive_t_end(self, small_spec, free_params):
        """t_end must be positive."""
        with pytest.raises(ValueError):
            grid.evolve(grid.init_state(small_spec), free_params, RampSchedule.constant(0, 0), t_end=0.0)


@pytest.mark.slow
class TestGridCollapse:
    """Collapse that stalls at the grid scale on a coarse box."""

    def test_coarse_grid_attractive_collapse(self):
        """An attractive dipolar cloud on 64 x 48 x 32 is flagged collapsed, not converged."""
        spec = GridSpec(nx=64, ny=48, nz=32)
        params = PhysicalParams(na=-0.2, nadd=0.2)
        report = grid.relax(grid.init_state(spec, "single_gaussian"), params, tol=1e-9)
        assert report.outcome == RelaxOutcome.COLLAPSED
        assert report.final_state is None

    def test_coarse_grid_collapse_is_labelled_unstable(self):
        """The collapsed point lands in the U region."""
        from sweep import classify_point
        spec = GridSpec(nx=64, ny=48, nz=32)
        params = PhysicalParams(na=-0.2, nadd=0.2)
        report = grid.relax(grid.init_state(spec, "single_gaussian"), params, tol=1e-9)
        assert classify_point(report.outcome, float("nan")) == "U"

    def test_split_start_lingers_on_a_plateau(self):
        """A split start plateaus at least ten times longer than the single Gaussian survives."""
        from variational import initial_state
        spec = GridSpec(nx=64, ny=48, nz=32)
        params = PhysicalParams(na=-0.2, nadd=0.2)
        single = grid.relax(grid.init_state(spec, "single_gaussian"), params, tol=1e-9)
        split = grid.init_state(spec, "from_variational", params.trap,
                                variational_state=initial_state(params, "split"))
        report = grid.relax(split, params, tol=1e-9, stop_on_plateau=True)

        assert single.outcome == RelaxOutcome.COLLAPSED
        assert report.plateaus
        assert max(p.length for p in report.plateaus) >= 10 * single.survival_time


@pytest.mark.slow
class TestConservation:
    """Long real-time runs and the order of the splitting."""

    def test_norm_and_energy_drift(self, small_spec, dipolar_params):
        """10^4 real-time steps keep the norm to 1e-10 and the energy to 1e-6."""
        start = grid.relax(grid.init_state(small_spec), dipolar_params, tol=1e-6, max_steps=20000).final_state
        schedule = RampSchedule.constant(dipolar_params.na, dipolar_params.nadd)
        traj = grid.evolve(start, dipolar_params, schedule, t_end=10.0, sample_every=1.0, dt=1e-3)
        assert not traj.collapsed
        norm = traj.column("norm")
        energy = traj.column("E_mf")
        assert np.max(np.abs(norm - norm[0])) <= 1e-10
        assert np.max(np.abs(energy - energy[0])) <= 1e-6 * abs(energy[0])

    def test_strang_is_second_order(self, small_spec):
        """Halving dt cuts the error of a sloshing cloud by about four."""
        params = PhysicalParams(na=0.2, nadd=0.2, trap=TrapParams(v0=10.0))
        start = _gaussian_state(small_spec, center=(0.3, 0.0, 0.0), sigma=(0.5, 0.8, 0.5))
        schedule = RampSchedule.constant(params.na, params.nadd)

        def final(dt):
            return grid.evolve(start, params, schedule, t_end=0.08, sample_every=0.08, dt=dt).final_state.psi

        reference = final(2.5e-4)
        errors = [np.sqrt(np.sum(np.abs(final(dt) - reference) ** 2) * small_spec.cell_volume)
                  for dt in (4e-3, 2e-3)]
        assert 3.2 <= errors[0] / errors[1] <= 4.8
