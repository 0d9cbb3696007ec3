"""
Stationary states for dipwell.
Fixed points of the variational equations of motion, their linear
stability and their continuation in the scattering length Na.

The global phase is removed by fixing Im gamma of the first packet; the
chemical potential mu is an extra unknown, and stationary states rotate as
gamma_dot = i mu for every packet.
"""
import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.optimize
from scipy.integrate import solve_ivp

from core import PhysicalParams
from errors import CollapseError, IllConditionedAnsatzError, NewtonError
from logger import log
from relaxation import EnergyMonitor, RelaxOutcome, RelaxReport
from variational import (
    DEFAULT_SETTINGS,
    N_PARAMS,
    PARAMS_PER_PACKET,
    STATIONARY_RESIDUAL_MAX,
    VariationalSettings,
    VariationalState,
    eom_rhs,
    evaluate_eom,
    mirror_state,
    observables_variational,
    peak_density,
)

IM_GAMMA = [k * PARAMS_PER_PACKET + 13 for k in range(3)]
RE_GAMMA = [k * PARAMS_PER_PACKET + 12 for k in range(3)]
GAUGE_INDEX = IM_GAMMA[0]
N_REDUCED = N_PARAMS - 1
SYMMETRY_TOL = 1e-6  # |I1 - I3| below this counts as mirror symmetric
FOLD_RESOLUTION = 1e-4
ARCLENGTH_STATE_WEIGHT = 1e-2  # weight of state components against Na in the arclength
BRANCH_COLUMNS = ["Na", "E_mf", "mu", "I1", "I2", "I3", "n_unstable", "max_Re_Lambda", "paired", "event"]
SPECTRUM_COLUMNS = ["Na", "re", "im"]


class EventKind:
    TANGENT = "tangent"
    PITCHFORK = "pitchfork"


def pairing_residual(eigenvalues: np.ndarray) -> float:
    """Largest |Lambda_i + Lambda_j| over the best one-to-one matching of the spectrum with its negative."""
    eigenvalues = np.asarray(eigenvalues, dtype=complex)
    if eigenvalues.size == 0:
        return 0.0
    cost = np.abs(eigenvalues[:, None] + eigenvalues[None, :])
    rows, cols = scipy.optimize.linear_sum_assignment(cost)
    return float(np.max(cost[rows, cols]))


@dataclass
class Spectrum:
    """Eigenvalues of the gauge-reduced Jacobian and their classification."""
    eigenvalues: np.ndarray
    n_unstable: int
    max_re: float
    pairing_residual: float
    n_real_unstable: int = 0  # unstable eigenvalues on the real axis
    reliable: bool = True  # +/- pairing within tolerance

    @classmethod
    def classify(cls, eigenvalues, eps_stab: float, pairing_tol: float) -> "Spectrum":
        """|Re Lambda| > eps_stab is unstable; |Im Lambda| <= eps_stab counts as real."""
        eigenvalues = np.asarray(eigenvalues, dtype=complex)
        unstable = np.abs(eigenvalues.real) > eps_stab
        real = np.abs(eigenvalues.imag) <= eps_stab
        pairing = pairing_residual(eigenvalues)
        return cls(
            eigenvalues=eigenvalues,
            n_unstable=int(np.count_nonzero(unstable)),
            max_re=float(np.max(np.abs(eigenvalues.real), initial=0.0)),
            pairing_residual=pairing,
            n_real_unstable=int(np.count_nonzero(unstable & real)),
            reliable=pairing <= pairing_tol,
        )

    @property
    def stable(self) -> bool:
        return self.n_unstable == 0

    @property
    def label(self) -> str:
        return "stable" if self.stable else f"unstable({self.n_unstable})"



@dataclass
class FixedPoint:
    """A stationary variational state."""
    state: VariationalState
    mu: float
    params: PhysicalParams
    residual: float
    iterations: int = 0
    spectrum: Optional[Spectrum] = None
    e_mf: float = float("nan")
    populations: np.ndarray = field(default_factory=lambda: np.full(3, np.nan))

    @property
    def na(self) -> float:
        return self.params.na

    @property
    def stability(self) -> str:
        return self.spectrum.label if self.spectrum is not None else "unknown"

    @property
    def asymmetry(self) -> float:
        return float(self.populations[0] - self.populations[2])


@dataclass
class BifurcationEvent:
    kind: str
    na_low: float
    na_high: float
    branch_id: str
    index: int = -1  # branch point right after the event
    confirmed: Optional[bool] = None  # pitchforks: symmetry-broken partners found

    @property
    def location(self) -> float:
        return 0.5 * (self.na_low + self.na_high)

    def to_record(self) -> dict:
        record = {"kind": self.kind, "Na_low": self.na_low, "Na_high": self.na_high,
                  "branch_id": self.branch_id}
        if self.confirmed is not None:
            record["confirmed"] = self.confirmed
        return record


@dataclass
class Branch:
    """Fixed points ordered along the continuation, with detected events."""
    branch_id: str
    points: List[FixedPoint] = field(default_factory=list)
    events: List[BifurcationEvent] = field(default_factory=list)
    reason: str = ""

    @property
    def na(self) -> np.ndarray:
        return np.array([p.na for p in self.points])

    def to_frame(self) -> pd.DataFrame:
        markers = {e.index: e.kind for e in self.events}
        rows = []
        for i, p in enumerate(self.points):
            spec = p.spectrum
            rows.append({
                "Na": p.na, "E_mf": p.e_mf, "mu": p.mu,
                "I1": p.populations[0], "I2": p.populations[1], "I3": p.populations[2],
                "n_unstable": spec.n_unstable if spec is not None else -1,
                "max_Re_Lambda": spec.max_re if spec is not None else float("nan"),
                "paired": spec.reliable if spec is not None else False,
                "event": markers.get(i, ""),
            })
        return pd.DataFrame(rows, columns=BRANCH_COLUMNS)

    def spectra_frame(self) -> pd.DataFrame:
        """One row per eigenvalue of every point with a spectrum."""
        frames = [pd.DataFrame({"Na": p.na, "re": p.spectrum.eigenvalues.real,
                                "im": p.spectrum.eigenvalues.imag})
                  for p in self.points if p.spectrum is not None]
        if not frames:
            return pd.DataFrame(columns=SPECTRUM_COLUMNS)
        return pd.concat(frames, ignore_index=True)

    def events_to_json(self) -> str:
        return json.dumps([e.to_record() for e in self.events], indent=2)


# ============================================================================
# Residuals and Jacobians
# ============================================================================

def _expand(z_red: np.ndarray, gauge_value: float) -> np.ndarray:
    return np.insert(z_red, GAUGE_INDEX, gauge_value)


def _reduce(z: np.ndarray) -> np.ndarray:
    return np.delete(z, GAUGE_INDEX)


def freeze_rule(state: VariationalState, params: PhysicalParams, settings: VariationalSettings):
    """Dipolar quadrature rule adapted at `state`, reused for nearby evaluations."""
    if params.nadd == 0:
        return None
    return evaluate_eom(state, params, "real_time", dd_rtol=settings.stationary_rtol,
                        pinv_floor=settings.pinv_floor, strict=True).rule


def _central_difference(fun, x: np.ndarray, i: int, h: float) -> np.ndarray:
    xp, xm = x.copy(), x.copy()
    xp[i] += h
    xm[i] -= h
    return (fun(xp) - fun(xm)) / (2.0 * h)


def fd_jacobian(fun, x: np.ndarray, step: float, extrapolate: bool = False) -> np.ndarray:
    """
    Central finite differences with steps scaled by max(1, |x_i|).

    extrapolate combines steps h and h/2 by Richardson's rule, leaving an
    O(h^4) truncation error.
    """
    columns = []
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        column = _central_difference(fun, x, i, h)
        if extrapolate:
            column = (4.0 * _central_difference(fun, x, i, 0.5 * h) - column) / 3.0
        columns.append(column)
    return np.column_stack(columns)



class _StationaryResidual:
    """F(z_red, mu; Na) = [z_dot - mu e_gamma, <Psi|Psi> - 1]."""

    def __init__(self, params: PhysicalParams, gauge_value: float, settings: VariationalSettings, rule=None):
        self.params = params
        self.gauge_value = gauge_value
        self.settings = settings
        self.rule = rule

    def rates(self, z: np.ndarray, params: PhysicalParams = None) -> np.ndarray:
        return eom_rhs(VariationalState.unflatten(z), params or self.params, "real_time",
                       dd_rtol=self.settings.stationary_rtol, dd_rule=self.rule,
                       pinv_floor=self.settings.pinv_floor, strict=True)

    def __call__(self, x: np.ndarray, na: float = None) -> np.ndarray:
        z = _expand(x[:N_REDUCED], self.gauge_value)
        mu = x[N_REDUCED]
        params = self.params if na is None else self.params.with_na(na)
        f = self.rates(z, params)
        f[IM_GAMMA] -= mu
        norm = VariationalState.unflatten(z).norm()
        return np.append(f, norm - 1.0)


def _residual_norm(r: np.ndarray) -> float:
    return float(np.linalg.norm(r))


def _finish(state: VariationalState, mu: float, params: PhysicalParams, residual: float,
            iterations: int, settings: VariationalSettings) -> FixedPoint:
    obs = observables_variational(state, params, settings.stationary_rtol)
    return FixedPoint(state=state, mu=mu, params=params, residual=residual, iterations=iterations,
                      e_mf=obs.e_mf, populations=obs.populations)


def find_fixed_point(guess: VariationalState, params: PhysicalParams,
                     settings: VariationalSettings = DEFAULT_SETTINGS, mu_guess: float = None) -> FixedPoint:
    """
    Damped least-squares Newton search for a stationary state.

    Args:
        guess: Starting state (normalized internally)
        params: Physical parameters
        settings: Tolerances, finite-difference step and iteration limit
        mu_guess: Starting chemical potential (mean-field mu of the guess if None)

    Returns:
        FixedPoint with residual <= settings.newton_tol

    Raises:
        NewtonError: no convergence within the iteration limit or no descent step
        IllConditionedAnsatzError: the TDVP matrix became singular
    """
    state = guess.normalized()
    if mu_guess is None:
        mu_guess = observables_variational(state, params, settings.dd_rtol).mu
    z = state.flatten()
    residual = _StationaryResidual(params, z[GAUGE_INDEX], settings)
    x = np.append(_reduce(z), mu_guess)

    res = np.inf
    for iteration in range(settings.newton_max_iter + 1):
        residual.rule = freeze_rule(VariationalState.unflatten(_expand(x[:N_REDUCED], residual.gauge_value)),
                                    params, settings)
        r = residual(x)
        res = _residual_norm(r)
        log.debug(f"Newton iteration {iteration}: residual {res:.3e}")
        if res <= settings.newton_tol:
            state = VariationalState.unflatten(_expand(x[:N_REDUCED], residual.gauge_value))
            return _finish(state, float(x[N_REDUCED]), params, res, iteration, settings)
        if iteration == settings.newton_max_iter:
            break
        jac = fd_jacobian(residual, x, settings.fd_step)
        dx = np.linalg.lstsq(jac, -r, rcond=None)[0]
        alpha = 1.0
        while alpha >= 1.0 / 1024:
            trial = x + alpha * dx
            try:
                if _residual_norm(residual(trial)) < res:
                    break
            except (IllConditionedAnsatzError, np.linalg.LinAlgError, ValueError):
                pass
            alpha *= 0.5
        else:
            raise NewtonError(f"no descent step at residual {res:.3e}", residual=res, iterations=iteration)
        x = trial
    raise NewtonError(f"Newton did not converge, residual {res:.3e}", residual=res,
                      iterations=settings.newton_max_iter)


def stability_spectrum(fp: FixedPoint, settings: VariationalSettings = DEFAULT_SETTINGS) -> Spectrum:
    """
    Eigenvalues of the Jacobian of the gauge-reduced equations of motion.

    The state is first rotated so that Im gamma of packet 1 vanishes. Columns
    perturb every other parameter; rows use the phase velocities relative to
    packet 1. |Re(Lambda)| > eps_stab counts an unstable direction, and a
    spectrum whose +/- pairing misses pairing_tol is flagged unreliable.

    Raises:
        ValueError: the fixed point residual exceeds 1e-9
    """
    if not fp.residual <= STATIONARY_RESIDUAL_MAX:
        raise ValueError(f"fixed point residual {fp.residual:.3e} too large for a stability analysis")
    state = fp.state.with_phase(-fp.state.flatten()[GAUGE_INDEX])
    z0 = state.flatten()
    rule = freeze_rule(state, fp.params, settings)
    residual = _StationaryResidual(fp.params, 0.0, settings, rule)

    def reduced_rates(z_red):
        f = residual.rates(_expand(z_red, 0.0))
        f[IM_GAMMA[1:]] -= f[GAUGE_INDEX]
        return _reduce(f)

    jac = fd_jacobian(reduced_rates, _reduce(z0), settings.jacobian_step, extrapolate=True)
    spectrum = Spectrum.classify(scipy.linalg.eigvals(jac), settings.eps_stab, settings.pairing_tol)
    if not spectrum.reliable:
        log.warning(f"Eigenvalue pairing residual {spectrum.pairing_residual:.2e} exceeds "
                    f"{settings.pairing_tol:g} at Na={fp.na:.6g}")
    return spectrum


def with_spectrum(fp: FixedPoint, settings: VariationalSettings = DEFAULT_SETTINGS) -> FixedPoint:
    fp.spectrum = stability_spectrum(fp, settings)
    return fp


# ============================================================================
# Imaginary-time relaxation of the packets
# ============================================================================

def variational_relax(guess: VariationalState, params: PhysicalParams, tol: float = 1e-8,
                      max_steps: int = 20000, dtau: float = 0.005, plateau_window: int = 2000,
                      stop_on_plateau: bool = False,
                      settings: VariationalSettings = DEFAULT_SETTINGS) -> RelaxReport:
    """
    Imaginary-time flow of the packet parameters.

    One step is an integration over dtau followed by renormalization; the
    energy is checked after every step with the grid solver's criteria.
    """
    if not tol > 0:
        raise ValueError(f"relaxation tolerance must be positive, got {tol}")
    state = guess.normalized()
    monitor = EnergyMonitor(tol, params.trap.v0, initial_peak=peak_density(state),
                            window_steps=plateau_window, stop_on_plateau=stop_on_plateau)
    obs = observables_variational(state, params, settings.dd_rtol)
    monitor.update(0, 0.0, obs.e_mf, peak_density(state))

    def rhs(t, z):
        return eom_rhs(VariationalState.unflatten(z), params, "imaginary_time",
                       dd_rtol=settings.dd_rtol, pinv_floor=settings.pinv_floor, strict=False)

    outcome = RelaxOutcome.MAX_STEPS
    steps = 0
    while steps < max_steps:
        try:
            sol = solve_ivp(rhs, (0.0, dtau), state.flatten(), method="DOP853",
                            rtol=settings.ode_rtol, atol=settings.ode_atol)
            if not sol.success:
                raise CollapseError(sol.message)
            state = VariationalState.unflatten(sol.y[:, -1]).normalized()
            obs = observables_variational(state, params, settings.dd_rtol)
        except (CollapseError, IllConditionedAnsatzError, np.linalg.LinAlgError, FloatingPointError) as e:
            monitor.reason = f"variational ITE failed: {e}"
            outcome = RelaxOutcome.COLLAPSED
            break
        steps += 1
        result = monitor.update(steps, steps * dtau, obs.e_mf, peak_density(state),
                                snapshot=lambda s=state: s)
        if result is not None:
            outcome = result
            break

    final = None if outcome == RelaxOutcome.COLLAPSED else state
    if outcome == RelaxOutcome.PLATEAU and monitor.plateau_state is not None:
        final = monitor.plateau_state
    log.info(f"Variational ITE finished: {outcome} after {steps} steps ({monitor.reason})")
    return monitor.report(outcome, steps, final)


# ============================================================================
# Continuation
# ============================================================================

class _Continuation:
    """Pseudo-arclength continuation on y = (z_red, mu, Na)."""

    def __init__(self, fp: FixedPoint, settings: VariationalSettings, with_stability: bool):
        self.settings = settings
        self.with_stability = with_stability
        z = fp.state.flatten()
        self.residual = _StationaryResidual(fp.params, z[GAUGE_INDEX], settings)
        self.base_params = fp.params
        self.metric = np.full(N_REDUCED + 2, ARCLENGTH_STATE_WEIGHT)
        self.metric[-1] = 1.0

    def g(self, y):
        return self.residual(y[:-1], na=y[-1])

    def y_of(self, fp: FixedPoint) -> np.ndarray:
        return np.concatenate([_reduce(fp.state.flatten()), [fp.mu, fp.na]])

    def freeze(self, y):
        state = VariationalState.unflatten(_expand(y[:N_REDUCED], self.residual.gauge_value))
        self.residual.rule = freeze_rule(state, self.base_params.with_na(y[-1]), self.settings)

    def tangent(self, y, previous=None, direction: float = 1.0):
        self.freeze(y)
        jac = fd_jacobian(self.g, y, self.settings.fd_step)
        t = scipy.linalg.svd(jac)[2][-1].real
        t /= np.sqrt(np.sum(self.metric * t * t))
        if previous is not None:
            if np.sum(self.metric * t * previous) < 0:
                t = -t
        elif t[-1] * direction < 0:
            t = -t
        return t

    def correct(self, y_pred, t, max_iter: int = 8):
        """Gauss-Newton on [G(y), <t, y - y_pred>] = 0."""
        y = y_pred.copy()

        def augmented(v):
            return np.append(self.g(v), np.sum(self.metric * t * (v - y_pred)))

        for iteration in range(max_iter):
            self.freeze(y)
            r = augmented(y)
            res = _residual_norm(r)
            if res <= self.settings.newton_tol:
                return y, res, iteration
            jac = fd_jacobian(augmented, y, self.settings.fd_step)
            y = y + np.linalg.lstsq(jac, -r, rcond=None)[0]
        self.freeze(y)
        res = _residual_norm(augmented(y))
        if res <= self.settings.newton_tol:
            return y, res, max_iter
        raise NewtonError(f"corrector did not converge, residual {res:.3e}", residual=res)

    def point(self, y, res, iterations) -> FixedPoint:
        state = VariationalState.unflatten(_expand(y[:N_REDUCED], self.residual.gauge_value))
        fp = _finish(state, float(y[N_REDUCED]), self.base_params.with_na(y[-1]), res, iterations,
                     self.settings)
        if self.with_stability:
            with_spectrum(fp, self.settings)
        return fp

    def step_from(self, y, t, ds):
        y_new, res, iterations = self.correct(y + ds * t, t)
        return y_new, self.point(y_new, res, iterations), iterations


def _is_symmetric(fp: FixedPoint) -> bool:
    return abs(fp.asymmetry) < SYMMETRY_TOL


def _real_pair_crossed(previous: FixedPoint, new: FixedPoint) -> bool:
    """A real +/- pair passed through zero between two symmetric points with trusted spectra."""
    a, b = previous.spectrum, new.spectrum
    if a is None or b is None or not (a.reliable and b.reliable):
        return False
    return (a.n_real_unstable != b.n_real_unstable
            and _is_symmetric(previous) and _is_symmetric(new))


def continue_branch(fp: FixedPoint, na_range, ds: float = 0.02, ds_min: float = 1e-5,
                    ds_max: float = 0.05, max_points: int = 400, direction: float = None,
                    branch_id: str = "B0", with_stability: bool = True,
                    settings: VariationalSettings = DEFAULT_SETTINGS) -> Branch:
    """
    Follow a branch of fixed points through Na with pseudo-arclength steps.

    Tangent bifurcations show up as sign changes of dNa/ds; pitchforks as a
    real +/- eigenvalue pair passing through zero on a mirror-symmetric branch
    without a fold. Complex quartets from colliding imaginary pairs are not
    pitchforks.
    Both are bracketed by bisection in arclength until the Na interval is
    below 1e-4.

    Args:
        fp: Starting fixed point
        na_range: (low, high) interval; the run stops once Na leaves it
        ds: Initial arclength step (roughly a step in Na away from folds)
        direction: +1 to start towards larger Na, -1 towards smaller; defaults
                   to the farther end of na_range
        branch_id: Label carried by the branch and its events
    """
    na_lo, na_hi = sorted(na_range)
    if direction is None:
        direction = 1.0 if (na_hi - fp.na) >= (fp.na - na_lo) else -1.0
    cont = _Continuation(fp, settings, with_stability)
    if with_stability and fp.spectrum is None:
        with_spectrum(fp, settings)
    branch = Branch(branch_id=branch_id, points=[fp])

    y = cont.y_of(fp)
    t = cont.tangent(y, direction=direction)
    while len(branch.points) < max_points:
        try:
            y_new, new, iterations = cont.step_from(y, t, ds)
        except (NewtonError, IllConditionedAnsatzError, np.linalg.LinAlgError) as e:
            ds *= 0.5
            if ds < ds_min:
                branch.reason = f"branch lost at Na={y[-1]:.6g}: {e}"
                log.warning(branch.reason)
                break
            continue
        t_new = cont.tangent(y_new, previous=t)
        previous = branch.points[-1]
        branch.points.append(new)

        if np.sign(t_new[-1]) != np.sign(t[-1]) and t[-1] != 0:
            branch.events.append(_refine_fold(cont, y, t, ds, branch_id, len(branch.points) - 1))
        elif with_stability and _real_pair_crossed(previous, new):
            branch.events.append(_refine_pitchfork(cont, y, t, ds, previous, branch_id,
                                                   len(branch.points) - 1))

        y, t = y_new, t_new
        if iterations <= 3:
            ds = min(1.5 * ds, ds_max)
        if not na_lo <= y[-1] <= na_hi:
            branch.reason = f"left Na range at {y[-1]:.6g}"
            break
    else:
        branch.reason = "point limit reached"
    for event in branch.events:
        log.info(f"{branch_id}: {event.kind} bifurcation near Na={event.location:.6f}")
    return branch


def _refine_fold(cont: _Continuation, y, t, ds, branch_id, index) -> BifurcationEvent:
    s_lo, s_hi = 0.0, ds
    na_lo_pt, na_hi_pt = y[-1], None
    sign0 = np.sign(t[-1])
    y_hi, _, _ = cont.correct(y + ds * t, t)
    na_hi_pt = y_hi[-1]
    for _ in range(40):
        if abs(na_hi_pt - na_lo_pt) <= FOLD_RESOLUTION:
            break
        s_mid = 0.5 * (s_lo + s_hi)
        try:
            y_mid, _, _ = cont.correct(y + s_mid * t, t)
        except NewtonError:
            break
        t_mid = cont.tangent(y_mid, previous=t)
        if np.sign(t_mid[-1]) == sign0:
            s_lo, na_lo_pt = s_mid, y_mid[-1]
        else:
            s_hi, na_hi_pt = s_mid, y_mid[-1]
    return BifurcationEvent(EventKind.TANGENT, min(na_lo_pt, na_hi_pt), max(na_lo_pt, na_hi_pt),
                            branch_id, index)


def _refine_pitchfork(cont: _Continuation, y, t, ds, previous: FixedPoint, branch_id, index) -> BifurcationEvent:
    s_lo, s_hi = 0.0, ds
    n_lo = previous.spectrum.n_real_unstable
    na_lo_pt = y[-1]
    na_hi_pt = y[-1] + ds * t[-1]
    saved = cont.with_stability
    cont.with_stability = True
    try:
        for _ in range(40):
            if abs(na_hi_pt - na_lo_pt) <= FOLD_RESOLUTION:
                break
            s_mid = 0.5 * (s_lo + s_hi)
            try:
                y_mid, mid, _ = cont.step_from(y, t, s_mid)
            except NewtonError:
                break
            if mid.spectrum.n_real_unstable == n_lo:
                s_lo, na_lo_pt = s_mid, y_mid[-1]
            else:
                s_hi, na_hi_pt = s_mid, y_mid[-1]
    finally:
        cont.with_stability = saved
    return BifurcationEvent(EventKind.PITCHFORK, min(na_lo_pt, na_hi_pt), max(na_lo_pt, na_hi_pt),
                            branch_id, index)


def switch_branch(branch: Branch, event: BifurcationEvent, offsets=(1e-3, -1e-3),
                  kicks=(1e-3, 1e-2, 5e-2), settings: VariationalSettings = DEFAULT_SETTINGS) -> List[FixedPoint]:
    """
    Land on the symmetry-broken branches emerging at a pitchfork.

    The population imbalance is kicked through Re gamma of the outer packets
    and Newton-refined slightly on either side of the event. A found state
    comes with its mirror image, which has the same energy.
    """
    anchor = min(branch.points, key=lambda p: abs(p.na - event.location))
    for offset in offsets:
        params = anchor.params.with_na(event.location + offset)
        for kick in kicks:
            z = anchor.state.flatten()
            z[RE_GAMMA[0]] += kick
            z[RE_GAMMA[2]] -= kick
            try:
                fp = find_fixed_point(VariationalState.unflatten(z), params, settings, mu_guess=anchor.mu)
            except (NewtonError, IllConditionedAnsatzError, np.linalg.LinAlgError):
                continue
            if abs(fp.asymmetry) > 100 * SYMMETRY_TOL:
                partner = find_fixed_point(mirror_state(fp.state), params, settings, mu_guess=fp.mu)
                log.info(f"Symmetry-broken pair at Na={params.na:.6f}: I1-I3={fp.asymmetry:.4g}")
                return [fp, partner]
    log.warning(f"No symmetry-broken state found near Na={event.location:.6f}")
    return []
