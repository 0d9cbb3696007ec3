"""
Coupled Gaussian wave packets for dipwell.

The condensate is a superposition of three packets, one per well,
    g(r) = exp(-[(r-q)^T A (r-q) - i p^T (r-q) + gamma]),
with A_xz = A_yz = q_z = p_z = 0. Parameter velocities follow from the
McLachlan variational principle, assembled from closed-form Gaussian
integrals and a quadrature-backed dipolar term.

Internally each packet is also written in linear form
exp(-(r^T A r + b^T r + c)), b = -2 A q - i p, c = q^T A q + i p^T q + gamma,
whose complex coefficients (A_xx, A_yy, A_zz, A_xy, b_x, b_y, c) enter the
wave function through the weights -(x^2, y^2, z^2, 2xy, x, y, 1).
"""
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import solve_ivp

from core import AXIS_INDEX, PhysicalParams, TrapParams
from errors import CollapseError, FieldFormatError, IllConditionedAnsatzError
from gaussian_integrals import (
    dipolar_convolution,
    gaussian_moments,
    moment_tensors,
    poly_expectation,
    poly_product_expectation,
)
from logger import log

N_PACKETS = 3
PARAMS_PER_PACKET = 14
N_PARAMS = N_PACKETS * PARAMS_PER_PACKET
N_BASIS = 7  # complex linear coefficients per packet
CONSTANT_WEIGHT = 6  # index of the weight 1 in the basis
INITIAL_SHAPES = {
    # well populations (left, center, right) of the starting guesses
    "symmetric": (1.0, 1.0, 1.0),
    "center": (0.1, 0.8, 0.1),
    "split": (0.45, 0.1, 0.45),
    "broken": (0.6, 0.3, 0.1),
}
STATE_HEADER = "# dipwell variational state v1"
TRAJECTORY_COLUMNS = ["t", "E_mf", "mu", "I1", "I2", "I3", "norm"]
STATIONARY_RESIDUAL_MAX = 1e-9  # largest residual a fixed point may carry


@dataclass(frozen=True)
class VariationalSettings:
    """Numerical controls of the variational engine."""
    dd_rtol: float = 1e-9  # dipolar quadrature during propagation
    stationary_rtol: float = 1e-12  # dipolar quadrature for Newton and Jacobians
    ode_rtol: float = 1e-9
    ode_atol: float = 1e-11
    pinv_floor: float = 1e-10
    fd_step: float = 1e-6  # Newton and continuation Jacobians
    jacobian_step: float = 1e-4  # stability Jacobian, Richardson-extrapolated
    eps_stab: float = 1e-5
    pairing_tol: float = 1e-6
    newton_tol: float = 1e-9
    newton_max_iter: int = 30

    def __post_init__(self):
        for name in ("dd_rtol", "stationary_rtol", "ode_rtol", "ode_atol", "pinv_floor", "fd_step",
                     "jacobian_step", "eps_stab", "pairing_tol", "newton_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.newton_tol > STATIONARY_RESIDUAL_MAX:
            raise ValueError(f"newton_tol must be <= {STATIONARY_RESIDUAL_MAX:g}, got {self.newton_tol}")
        if self.newton_max_iter < 1:
            raise ValueError(f"newton_max_iter must be >= 1, got {self.newton_max_iter}")


DEFAULT_SETTINGS = VariationalSettings()


def _weight_basis():
    q = np.zeros((N_BASIS, 3, 3))
    l = np.zeros((N_BASIS, 3))
    k = np.zeros(N_BASIS)
    q[0, 0, 0] = q[1, 1, 1] = q[2, 2, 2] = 1.0
    q[3, 0, 1] = q[3, 1, 0] = 1.0
    l[4, 0] = l[5, 1] = 1.0
    k[6] = 1.0
    return q, l, k


WEIGHTS = _weight_basis()


# ============================================================================
# Packets and states
# ============================================================================

@dataclass
class GaussianPacket:
    """One Gaussian wave packet in the frozen-z gauge."""
    A: np.ndarray
    q: np.ndarray
    p: np.ndarray
    gamma: complex = 0.0

    def __post_init__(self):
        self.A = np.array(self.A, dtype=np.complex128).reshape(3, 3)
        self.q = np.array(self.q, dtype=float).reshape(3)
        self.p = np.array(self.p, dtype=float).reshape(3)
        self.gamma = complex(self.gamma)

    @classmethod
    def diagonal(cls, axx, ayy, azz, qx=0.0, qy=0.0, gamma=0.0, axy=0.0, px=0.0, py=0.0):
        a = np.diag([axx, ayy, azz]).astype(complex)
        a[0, 1] = a[1, 0] = axy
        return cls(A=a, q=[qx, qy, 0.0], p=[px, py, 0.0], gamma=gamma)

    def validate(self):
        """Raise ValueError unless symmetric, normalizable and in the frozen-z gauge."""
        if not np.allclose(self.A, self.A.T, rtol=0.0, atol=1e-14):
            raise ValueError("width matrix A must be symmetric")
        if self.A[0, 2] != 0 or self.A[1, 2] != 0 or self.q[2] != 0 or self.p[2] != 0:
            raise ValueError("packet violates the frozen-z gauge (A_xz = A_yz = q_z = p_z = 0)")
        if np.min(np.linalg.eigvalsh(self.A.real)) <= 0:
            raise ValueError("Re A must be positive definite")
        return self

    def linear_form(self):
        b = -2.0 * self.A @ self.q - 1j * self.p
        c = self.q @ self.A @ self.q + 1j * (self.p @ self.q) + self.gamma
        return self.A, b, c

    @classmethod
    def from_linear(cls, a, b, c):
        """Invert the linear form (b, c) back to (q, p, gamma)."""
        a = np.asarray(a, dtype=complex)
        b = np.asarray(b, dtype=complex)
        q = np.zeros(3)
        q[:2] = -0.5 * np.linalg.solve(a.real[:2, :2], b.real[:2])
        p = np.zeros(3)
        p[:2] = -b.imag[:2] - 2.0 * a.imag[:2, :2] @ q[:2]
        gamma = c - q @ a @ q - 1j * (p @ q)
        return cls(A=a, q=q, p=p, gamma=gamma)

    def evaluate(self, r):
        r = np.asarray(r, dtype=float)
        d = r - self.q
        exponent = np.einsum("...a,ab,...b->...", d, self.A, d) - 1j * (d @ self.p) + self.gamma
        return np.exp(-exponent)


@dataclass
class VariationalState:
    """Three coupled packets, left, center and right."""
    packets: Tuple[GaussianPacket, ...]

    def __post_init__(self):
        self.packets = tuple(self.packets)
        if len(self.packets) != N_PACKETS:
            raise ValueError(f"expected {N_PACKETS} packets, got {len(self.packets)}")

    def flatten(self) -> np.ndarray:
        """Real parameter vector, 14 entries per packet."""
        z = np.empty(N_PARAMS)
        for k, g in enumerate(self.packets):
            a = g.A
            entries = [a[0, 0], a[1, 1], a[2, 2], a[0, 1]]
            z[k * PARAMS_PER_PACKET:(k + 1) * PARAMS_PER_PACKET] = (
                [e.real for e in entries] + [e.imag for e in entries]
                + [g.q[0], g.q[1], g.p[0], g.p[1], g.gamma.real, g.gamma.imag]
            )
        return z

    @classmethod
    def unflatten(cls, z) -> "VariationalState":
        z = np.asarray(z, dtype=float)
        if z.shape != (N_PARAMS,):
            raise ValueError(f"expected {N_PARAMS} parameters, got shape {z.shape}")
        packets = []
        for k in range(N_PACKETS):
            v = z[k * PARAMS_PER_PACKET:(k + 1) * PARAMS_PER_PACKET]
            axx, ayy, azz, axy = v[0:4] + 1j * v[4:8]
            packets.append(GaussianPacket.diagonal(axx, ayy, azz, qx=v[8], qy=v[9], axy=axy,
                                                   px=v[10], py=v[11], gamma=v[12] + 1j * v[13]))
        return cls(packets=tuple(packets))

    def linear_arrays(self):
        forms = [g.linear_form() for g in self.packets]
        a = np.array([f[0] for f in forms])
        b = np.array([f[1] for f in forms])
        c = np.array([f[2] for f in forms])
        return a, b, c

    def overlap_matrix(self) -> np.ndarray:
        a, b, c = self.linear_arrays()
        norm, _, _ = gaussian_moments(*_pair_products(a, b, c))
        return norm

    def norm(self) -> float:
        return float(np.sum(self.overlap_matrix()).real)

    def populations(self) -> np.ndarray:
        """I^k = <g^k|g^k> of the normalized state."""
        s = self.overlap_matrix()
        return np.real(np.diag(s)) / float(np.sum(s).real)

    def normalized(self) -> "VariationalState":
        shift = 0.5 * np.log(self.norm())
        return VariationalState(tuple(replace(g, gamma=g.gamma + shift) for g in self.packets))

    def with_phase(self, theta: float) -> "VariationalState":
        """Global phase exp(-i theta) applied through every gamma."""
        return VariationalState(tuple(replace(g, gamma=g.gamma + 1j * theta) for g in self.packets))

    def validate(self) -> "VariationalState":
        for g in self.packets:
            g.validate()
        return self


def mirror_state(state: VariationalState) -> VariationalState:
    """Reflect x -> -x: packets 1 and 3 swap, q_x, p_x and A_xy change sign."""
    flip = np.diag([-1.0, 1.0, 1.0])
    packets = []
    for g in reversed(state.packets):
        packets.append(GaussianPacket(A=flip @ g.A @ flip, q=flip @ g.q, p=flip @ g.p, gamma=g.gamma))
    return VariationalState(tuple(packets))


def initial_state(params: PhysicalParams, kind: str = "symmetric", width_scale: float = 1.0) -> VariationalState:
    """
    Three-packet starting guess with harmonic ground-state widths.

    Args:
        params: Physical parameters (trap must have three wells)
        kind: symmetric, center, split or broken
        width_scale: Multiplies every A (values > 1 squeeze the packets)
    """
    trap = params.trap
    if len(trap.centers) != N_PACKETS:
        raise ValueError(f"the variational ansatz needs {N_PACKETS} wells, trap has {len(trap.centers)}")
    if kind not in INITIAL_SHAPES:
        raise ValueError(f"unknown initial shape {kind!r}, expected one of {list(INITIAL_SHAPES)}")
    a = 0.5 * trap.harmonic_frequencies() * width_scale
    packets = []
    for center, population in zip(sorted(trap.centers), INITIAL_SHAPES[kind]):
        packets.append(GaussianPacket.diagonal(a[0], a[1], a[2], qx=center,
                                               gamma=-0.5 * np.log(population)))
    return VariationalState(tuple(packets)).normalized()


def eval_wavefunction(state: VariationalState, r):
    """Psi(r) = sum_k g^k(r) for positions r of shape (..., 3)."""
    return sum(g.evaluate(r) for g in state.packets)


def packet_on_grid(g: GaussianPacket, spec) -> np.ndarray:
    """One packet evaluated on a GridSpec."""
    x, y, z = spec.mesh()
    dx, dy = x - g.q[0], y - g.q[1]
    a = g.A
    exponent = (a[0, 0] * dx ** 2 + a[1, 1] * dy ** 2 + a[2, 2] * z ** 2
                + 2.0 * a[0, 1] * dx * dy
                - 1j * (g.p[0] * dx + g.p[1] * dy) + g.gamma)
    return np.exp(-exponent)


def sample_on_grid(state: VariationalState, spec) -> np.ndarray:
    """Evaluate the packets on a GridSpec without materializing coordinate triples."""
    psi = np.zeros(spec.shape, dtype=np.complex128)
    for g in state.packets:
        psi += packet_on_grid(g, spec)
    return psi


def pair_overlap(gi: GaussianPacket, gj: GaussianPacket) -> complex:
    """Closed-form <g_i|g_j>."""
    m = np.conj(gi.A) + gj.A
    if np.min(np.linalg.eigvalsh(m.real)) <= 0:
        raise ValueError("packet pair is not normalizable (Re(A_i* + A_j) not positive definite)")
    ai, bi, ci = gi.linear_form()
    aj, bj, cj = gj.linear_form()
    norm, _, _ = gaussian_moments(m, np.conj(bi) + bj, np.conj(ci) + cj)
    return complex(norm)


# ============================================================================
# Matrix elements
# ============================================================================

def _pair_products(a, b, c):
    """Exponent of conj(g_k) g_l for all packet pairs (k, l)."""
    m = np.conj(a)[:, None] + a[None, :]
    beta = np.conj(b)[:, None] + b[None, :]
    const = np.conj(c)[:, None] + c[None, :]
    return m, beta, const


@dataclass
class ElementTensors:
    """
    Weighted matrix elements X[k, l, j] = int w_j conj(g_k) (O g_l) per operator O.

    The weight index j = 6 (w = 1) holds the plain matrix elements.
    """
    overlap: np.ndarray
    weighted_overlap: np.ndarray
    kinetic: np.ndarray
    trap: np.ndarray
    contact: np.ndarray
    dipolar: np.ndarray
    gram: Optional[np.ndarray] = None

    @property
    def hamiltonian(self) -> np.ndarray:
        return self.kinetic + self.trap + self.contact + self.dipolar


@dataclass
class HamiltonianElements:
    """Packet-basis matrices S, T, Vtrap, Vsc, Vdd (all conjugate-symmetric)."""
    S: np.ndarray
    T: np.ndarray
    Vtrap: np.ndarray
    Vsc: np.ndarray
    Vdd: np.ndarray


def _trap_elements(m, beta, const, trap: TrapParams):
    weights = np.diag(2.0 / trap.widths ** 2)
    centers = np.array([[q, 0.0, 0.0] for q in trap.centers])
    mt = m[:, :, None] + weights
    bt = beta[:, :, None] - 2.0 * centers @ weights
    ct = const[:, :, None] + np.einsum("ia,ab,ib->i", centers, weights, centers)
    norm, mean, cov = gaussian_moments(mt, bt, ct)
    e1, e2, _, _ = moment_tensors(mean, cov, order=2)
    ew = poly_expectation(WEIGHTS, e1[..., None, :], e2[..., None, :, :])
    return -trap.v0 * np.sum(norm[..., None] * ew, axis=2)


def _contact_elements(m, beta, const, na):
    m4 = m[:, :, None, None] + m[None, None]
    b4 = beta[:, :, None, None] + beta[None, None]
    c4 = const[:, :, None, None] + const[None, None]
    norm, mean, cov = gaussian_moments(m4, b4, c4)
    e1, e2, _, _ = moment_tensors(mean, cov, order=2)
    ew = poly_expectation(WEIGHTS, e1[..., None, :], e2[..., None, :, :])
    return 4.0 * np.pi * na * np.sum(norm[..., None] * ew, axis=(2, 3))


def _dipolar_elements(norm, mean, cov, params: PhysicalParams, rtol, rule):
    d = mean[:, :, None, None] - mean[None, None]
    s = cov[:, :, None, None] + cov[None, None]
    (u, grad, hess), used = dipolar_convolution(d, s, AXIS_INDEX[params.polarization], rtol=rtol,
                                                rule=rule, return_rule=True)
    u_bar = np.einsum("cd,klcd->kl", norm, u)
    g_bar = np.einsum("cd,klcda->kla", norm, grad)
    h_bar = np.einsum("cd,klcdab->klab", norm, hess)
    sg = np.einsum("klab,klb->kla", cov, g_bar)
    e1 = mean * u_bar[..., None] + sg
    e2 = ((np.einsum("kla,klb->klab", mean, mean) + cov) * u_bar[..., None, None]
          + np.einsum("kla,klb->klab", mean, sg) + np.einsum("kla,klb->klab", sg, mean)
          + np.einsum("klab,klbc,klcd->klad", cov, h_bar, cov))
    q, l, k = WEIGHTS
    ew = (np.einsum("jab,klab->klj", q, e2) + np.einsum("ja,kla->klj", l, e1)
          + k * u_bar[..., None])
    return 3.0 * params.nadd * norm[..., None] * ew, used


def assemble_elements(state: VariationalState, params: PhysicalParams, dd_rtol: float = 1e-9,
                      dd_rule=None, with_gram: bool = True):
    """
    All weighted matrix elements of the Gross-Pitaevskii operator.

    Returns:
        Tuple of (ElementTensors, dipolar quadrature rule or None)
    """
    a, b, c = state.linear_arrays()
    m, beta, const = _pair_products(a, b, c)
    norm, mean, cov = gaussian_moments(m, beta, const)
    moments = moment_tensors(mean, cov)
    e1, e2 = moments[0], moments[1]
    weighted_overlap = norm[..., None] * poly_expectation(WEIGHTS, e1[..., None, :], e2[..., None, :, :])

    # -1/2 Laplacian of g_l is tau_l(r) g_l with a quadratic tau_l
    tau = (
        (-2.0 * np.einsum("lab,lbc->lac", a, a))[None, :, None],
        (-2.0 * np.einsum("lab,lb->la", a, b))[None, :, None],
        (-0.5 * np.einsum("la,la->l", b, b) + np.einsum("laa->l", a))[None, :, None],
    )
    moments_b = (moments[0][..., None, :], moments[1][..., None, :, :],
                 moments[2][..., None, :, :, :], moments[3][..., None, :, :, :, :])
    kinetic = norm[..., None] * poly_product_expectation(WEIGHTS, tau, moments_b)

    trap = _trap_elements(m, beta, const, params.trap)
    if params.na != 0:
        contact = _contact_elements(m, beta, const, params.na)
    else:
        contact = np.zeros_like(kinetic)
    rule = None
    if params.nadd != 0:
        dipolar, rule = _dipolar_elements(norm, mean, cov, params, dd_rtol, dd_rule)
    else:
        dipolar = np.zeros_like(kinetic)

    gram = None
    if with_gram:
        q, l, k = WEIGHTS
        left = (q[:, None], l[:, None], k[:, None])
        right = (q[None], l[None], k[None])
        moments_g = (moments[0][..., None, None, :], moments[1][..., None, None, :, :],
                     moments[2][..., None, None, :, :, :], moments[3][..., None, None, :, :, :, :])
        pair = norm[..., None, None] * poly_product_expectation(left, right, moments_g)
        gram = pair.transpose(0, 2, 1, 3).reshape(N_PACKETS * N_BASIS, N_PACKETS * N_BASIS)

    return ElementTensors(overlap=norm, weighted_overlap=weighted_overlap, kinetic=kinetic,
                          trap=trap, contact=contact, dipolar=dipolar, gram=gram), rule


def hamiltonian_elements(state: VariationalState, params: PhysicalParams,
                         dd_rtol: float = 1e-9) -> HamiltonianElements:
    """Packet-basis matrices of the overlap and of every energy term."""
    tensors, _ = assemble_elements(state, params, dd_rtol=dd_rtol, with_gram=False)
    j = CONSTANT_WEIGHT
    return HamiltonianElements(S=tensors.overlap, T=tensors.kinetic[..., j], Vtrap=tensors.trap[..., j],
                               Vsc=tensors.contact[..., j], Vdd=tensors.dipolar[..., j])


@dataclass
class VariationalObservables:
    e_mf: float
    mu: float
    populations: np.ndarray
    norm: float

    @property
    def asymmetry(self) -> float:
        return float(self.populations[0] - self.populations[2])


def _observables_from_elements(tensors: ElementTensors) -> VariationalObservables:
    j = CONSTANT_WEIGHT
    n = float(np.sum(tensors.overlap).real)
    single = np.sum(tensors.kinetic[..., j] + tensors.trap[..., j]).real / n
    pair = np.sum(tensors.contact[..., j] + tensors.dipolar[..., j]).real / n ** 2
    populations = np.real(np.diag(tensors.overlap)) / n
    return VariationalObservables(e_mf=single + 0.5 * pair, mu=single + pair,
                                  populations=populations, norm=n)


def observables_variational(state: VariationalState, params: PhysicalParams,
                            dd_rtol: float = 1e-9) -> VariationalObservables:
    """E_mf, mu and packet populations I^k with the grid's 1/2 weights."""
    tensors, _ = assemble_elements(state, params, dd_rtol=dd_rtol, with_gram=False)
    return _observables_from_elements(tensors)


# ============================================================================
# Equations of motion
# ============================================================================

@dataclass
class TdvpSystem:
    """Linear system K lambda_dot = rhs of the McLachlan principle."""
    K: np.ndarray
    h: np.ndarray
    s: np.ndarray
    conditioning: float = np.nan
    truncated: int = 0

    def solve(self, rhs: np.ndarray, pinv_floor: float = 1e-10, strict: bool = True) -> np.ndarray:
        """Pseudo-inverse solve with singular values below pinv_floor * sigma_max dropped."""
        w, v = np.linalg.eigh(0.5 * (self.K + self.K.conj().T))
        keep = w > pinv_floor * w.max()
        self.truncated = int(np.count_nonzero(~keep))
        self.conditioning = float(w[keep].min())
        if self.truncated:
            message = (f"TDVP matrix has {self.truncated} singular directions "
                       f"below {pinv_floor:g} * sigma_max")
            if strict:
                raise IllConditionedAnsatzError(message, conditioning=float(w.min()))
            log.debug(message + ", using the pseudo-inverse")
        vk = v[:, keep]
        return vk @ ((vk.conj().T @ rhs) / w[keep])


def tdvp_system(tensors: ElementTensors) -> TdvpSystem:
    h = -np.sum(tensors.hamiltonian, axis=1).reshape(-1)
    s = -np.sum(tensors.weighted_overlap, axis=1).reshape(-1)
    return TdvpSystem(K=tensors.gram, h=h, s=s)


def _parameter_rates(state: VariationalState, lam_dot: np.ndarray) -> np.ndarray:
    """Map linear-coefficient rates back to the real parameter vector."""
    zdot = np.empty(N_PARAMS)
    for k, g in enumerate(state.packets):
        axx, ayy, azz, axy, bx, by, cdot = lam_dot[k * N_BASIS:(k + 1) * N_BASIS]
        a2 = g.A[:2, :2]
        q2, p2 = g.q[:2], g.p[:2]
        adot2 = np.array([[axx, axy], [axy, ayy]])
        v = np.array([bx, by]) + 2.0 * adot2 @ q2
        qdot = -0.5 * np.linalg.solve(a2.real, v.real)
        pdot = -v.imag - 2.0 * a2.imag @ qdot
        gdot = (cdot - 2.0 * qdot @ a2 @ q2 - q2 @ adot2 @ q2
                - 1j * (pdot @ q2) - 1j * (p2 @ qdot))
        entries = np.array([axx, ayy, azz, axy])
        zdot[k * PARAMS_PER_PACKET:(k + 1) * PARAMS_PER_PACKET] = np.concatenate(
            [entries.real, entries.imag, qdot, pdot, [gdot.real, gdot.imag]])
    return zdot


@dataclass
class EomResult:
    zdot: np.ndarray
    mu: float
    system: TdvpSystem
    tensors: ElementTensors
    rule: object = None


def evaluate_eom(state: VariationalState, params: PhysicalParams, mode: str = "real_time",
                 dd_rtol: float = 1e-9, dd_rule=None, pinv_floor: float = 1e-10,
                 strict: bool = True) -> EomResult:
    """Equations of motion with the intermediate TDVP quantities."""
    tensors, rule = assemble_elements(state, params, dd_rtol=dd_rtol, dd_rule=dd_rule)
    system = tdvp_system(tensors)
    if mode == "real_time":
        lam_dot = -1j * system.solve(system.h, pinv_floor, strict)
        mu = float("nan")
    elif mode == "imaginary_time":
        x_h = system.solve(system.h, pinv_floor, strict)
        x_s = system.solve(system.s, pinv_floor, strict)
        # mu keeps <Psi|Psi> constant along the flow
        mu = float(np.real(np.vdot(system.s, x_h)) / np.real(np.vdot(system.s, x_s)))
        lam_dot = -(x_h - mu * x_s)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return EomResult(zdot=_parameter_rates(state, lam_dot), mu=mu, system=system,
                     tensors=tensors, rule=rule)


def eom_rhs(state: VariationalState, params: PhysicalParams, mode: str = "real_time",
            dd_rtol: float = 1e-9, dd_rule=None, pinv_floor: float = 1e-10,
            strict: bool = True) -> np.ndarray:
    """
    Parameter velocity z_dot of the variational equations of motion.

    Real time solves i K lambda_dot = h; imaginary time solves the
    norm-conserving gradient flow K lambda_dot = -(h - mu s).

    Raises:
        IllConditionedAnsatzError: K is singular beyond the pseudo-inverse floor and strict is set
    """
    return evaluate_eom(state, params, mode, dd_rtol, dd_rule, pinv_floor, strict).zdot


# ============================================================================
# Propagation
# ============================================================================

@dataclass
class VariationalTrajectory:
    """Samples of a variational run."""
    rows: List[dict] = field(default_factory=list)
    collapsed: bool = False
    collapse_time: Optional[float] = None
    final_state: Optional[VariationalState] = None
    message: str = ""

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=TRAJECTORY_COLUMNS)

    def column(self, name: str) -> np.ndarray:
        return self.to_frame()[name].to_numpy()


def _sample(t: float, state: VariationalState, obs: VariationalObservables) -> dict:
    return {"t": t, "E_mf": obs.e_mf, "mu": obs.mu, "I1": obs.populations[0],
            "I2": obs.populations[1], "I3": obs.populations[2], "norm": obs.norm}


def peak_density(state: VariationalState) -> float:
    """Largest |Psi|^2 among the packet centers."""
    centers = np.array([g.q for g in state.packets])
    return float(np.max(np.abs(eval_wavefunction(state, centers)) ** 2))


def propagate(state: VariationalState, params: PhysicalParams, t_end: float, mode: str = "real_time",
              sample_every: float = 0.1, na_of_t: Optional[Callable[[float], float]] = None,
              settings: VariationalSettings = DEFAULT_SETTINGS, strict: bool = True) -> VariationalTrajectory:
    """
    Integrate the equations of motion with an embedded Runge-Kutta pair (DOP853).

    The run is split at the sampling times; in imaginary time the state is
    renormalized at each sample. A failing integrator, an ill-conditioned
    ansatz or a runaway density ends the run and flags it collapsed.
    """
    if not t_end > 0:
        raise ValueError(f"t_end must be positive, got {t_end}")
    times = np.arange(0.0, t_end + 0.5 * sample_every, sample_every)

    def params_at(t):
        return params if na_of_t is None else params.with_na(na_of_t(t))

    def rhs(t, z):
        return eom_rhs(VariationalState.unflatten(z), params_at(t), mode,
                       dd_rtol=settings.dd_rtol, pinv_floor=settings.pinv_floor, strict=strict)

    current = state.normalized() if mode == "imaginary_time" else state
    obs = observables_variational(current, params_at(0.0), settings.dd_rtol)
    trajectory = VariationalTrajectory(rows=[_sample(0.0, current, obs)])
    peak_limit = 1.0e3 * peak_density(current)
    energy_floor = -10.0 * params.trap.v0
    z = current.flatten()

    for t0, t1 in zip(times[:-1], times[1:]):
        try:
            sol = solve_ivp(rhs, (t0, t1), z, method="DOP853",
                            rtol=settings.ode_rtol, atol=settings.ode_atol)
            if not sol.success:
                raise CollapseError(sol.message, time=t0)
            current = VariationalState.unflatten(sol.y[:, -1])
            if mode == "imaginary_time":
                current = current.normalized()
            obs = observables_variational(current, params_at(t1), settings.dd_rtol)
        except (CollapseError, IllConditionedAnsatzError, np.linalg.LinAlgError) as e:
            trajectory.collapsed, trajectory.collapse_time = True, float(t0)
            trajectory.message = str(e)
            break
        trajectory.rows.append(_sample(float(t1), current, obs))
        if (not np.isfinite(obs.e_mf) or obs.e_mf < energy_floor
                or peak_density(current) > peak_limit):
            trajectory.collapsed, trajectory.collapse_time = True, float(t1)
            trajectory.message = "runaway density"
            break
        z = current.flatten()

    if trajectory.collapsed:
        log.warning(f"Variational run collapsed at t={trajectory.collapse_time:.6g}: {trajectory.message}")
    else:
        trajectory.final_state = current
    return trajectory


# ============================================================================
# Serialization
# ============================================================================

def _fmt(x: float) -> str:
    return f"{x:.17g}"


def dump_state(state: VariationalState) -> str:
    """Text record with 17 significant digits per value."""
    lines = [STATE_HEADER]
    for k, g in enumerate(state.packets, start=1):
        a = g.A
        entries = [a[0, 0], a[1, 1], a[2, 2], a[0, 1]]
        lines.append(f"packet {k}")
        lines.append("A_re " + " ".join(_fmt(e.real) for e in entries))
        lines.append("A_im " + " ".join(_fmt(e.imag) for e in entries))
        lines.append(f"q {_fmt(g.q[0])} {_fmt(g.q[1])}")
        lines.append(f"p {_fmt(g.p[0])} {_fmt(g.p[1])}")
        lines.append(f"gamma {_fmt(g.gamma.real)} {_fmt(g.gamma.imag)}")
    return "\n".join(lines) + "\n"


def load_state(text: str) -> VariationalState:
    """Parse a record written by dump_state."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != STATE_HEADER:
        raise FieldFormatError("not a dipwell variational state record")
    expected = {"A_re": 4, "A_im": 4, "q": 2, "p": 2, "gamma": 2}
    z = []
    body = lines[1:]
    if len(body) != N_PACKETS * (1 + len(expected)):
        raise FieldFormatError(f"expected {N_PACKETS} packets of {len(expected)} records")
    for k in range(N_PACKETS):
        block = body[k * 6:(k + 1) * 6]
        if block[0] != f"packet {k + 1}":
            raise FieldFormatError(f"missing 'packet {k + 1}' marker")
        for line, (key, count) in zip(block[1:], expected.items()):
            parts = line.split()
            if parts[0] != key or len(parts) != count + 1:
                raise FieldFormatError(f"malformed record {line!r} (expected {key} with {count} values)")
            try:
                z.extend(float(v) for v in parts[1:])
            except ValueError as e:
                raise FieldFormatError(f"non-numeric value in {line!r}") from e
    return VariationalState.unflatten(np.array(z))
