"""
Closed-form Gaussian integrals for dipwell.

A (complex) Gaussian is written exp(-r^T M r - beta^T r - c) with Re M
positive definite. Its integral, mean and covariance follow from completing
the square; polynomial weights reduce to moment tensors (Wick's theorem).
The dipolar kernel (1 - 3cos^2)/r^3 convolved with a Gaussian pair is a
one-dimensional integral over an auxiliary width parameter t.

All functions are batched over leading array dimensions.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import quad_vec

from errors import QuadratureError

PI32 = np.pi ** 1.5
FOUR_PI = 4.0 * np.pi
RULE_ORDER = 20  # Gauss-Legendre points per frozen subinterval


def sqrt_det(m: np.ndarray) -> np.ndarray:
    """
    det(M)^(1/2) on the branch continuous from Re M.

    Every eigenvalue of a complex symmetric M with Re M > 0 has a positive
    real part, so the product of principal square roots is the right branch.
    """
    return np.prod(np.sqrt(np.linalg.eigvals(m)), axis=-1)


def gaussian_moments(m: np.ndarray, beta: np.ndarray, c: np.ndarray):
    """
    Integral, mean and covariance of exp(-r^T M r - beta^T r - c).

    Returns:
        Tuple (norm, mean, cov) with shapes (...), (..., 3), (..., 3, 3)
    """
    inv = np.linalg.inv(m)
    cov = 0.5 * inv
    mean = -np.einsum("...ab,...b->...a", cov, beta)
    exponent = 0.5 * np.einsum("...a,...ab,...b->...", beta, cov, beta) - c
    norm = PI32 / sqrt_det(m) * np.exp(exponent)
    return norm, mean, cov


def moment_tensors(mean: np.ndarray, cov: np.ndarray, order: int = 4):
    """Raw moments E[r], E[rr], E[rrr], E[rrrr] of a Gaussian (up to `order`)."""
    m = mean
    e1 = m
    e2 = cov + np.einsum("...a,...b->...ab", m, m)
    if order < 3:
        return e1, e2, None, None
    mmm = np.einsum("...a,...b,...c->...abc", m, m, m)
    e3 = (mmm + np.einsum("...a,...bc->...abc", m, cov)
          + np.einsum("...b,...ac->...abc", m, cov)
          + np.einsum("...c,...ab->...abc", m, cov))
    if order < 4:
        return e1, e2, e3, None
    mm = np.einsum("...a,...b->...ab", m, m)
    e4 = (np.einsum("...ab,...cd->...abcd", mm, mm)
          + np.einsum("...ab,...cd->...abcd", mm, cov)
          + np.einsum("...ac,...bd->...abcd", mm, cov)
          + np.einsum("...ad,...bc->...abcd", mm, cov)
          + np.einsum("...bc,...ad->...abcd", mm, cov)
          + np.einsum("...bd,...ac->...abcd", mm, cov)
          + np.einsum("...cd,...ab->...abcd", mm, cov)
          + np.einsum("...ab,...cd->...abcd", cov, cov)
          + np.einsum("...ac,...bd->...abcd", cov, cov)
          + np.einsum("...ad,...bc->...abcd", cov, cov))
    return e1, e2, e3, e4


def poly_expectation(poly, e1, e2):
    """E[r^T Q r + L^T r + k] for a quadratic polynomial (Q, L, k)."""
    q, l, k = poly
    return np.einsum("...ab,...ab->...", q, e2) + np.einsum("...a,...a->...", l, e1) + k


def poly_product_expectation(poly1, poly2, moments):
    """E[p1(r) p2(r)] for two quadratic polynomials given moments up to order four."""
    q1, l1, k1 = poly1
    q2, l2, k2 = poly2
    e1, e2, e3, e4 = moments
    total = np.einsum("...ab,...cd,...abcd->...", q1, q2, e4)
    total = total + np.einsum("...ab,...c,...abc->...", q1, l2, e3)
    total = total + np.einsum("...a,...cd,...acd->...", l1, q2, e3)
    total = total + np.einsum("...ab,...ab->...", q1, e2) * k2
    total = total + k1 * np.einsum("...cd,...cd->...", q2, e2)
    total = total + np.einsum("...a,...c,...ac->...", l1, l2, e2)
    total = total + np.einsum("...a,...a->...", l1, e1) * k2
    total = total + k1 * np.einsum("...c,...c->...", l2, e1)
    return total + k1 * k2


# ============================================================================
# Dipolar convolution of Gaussians
# ============================================================================

@dataclass(frozen=True)
class QuadratureRule:
    """Fixed nodes and weights on u in (0, 1) for the dipolar t-integral."""
    nodes: np.ndarray
    weights: np.ndarray
    scale: float

    @classmethod
    def from_intervals(cls, intervals: np.ndarray, scale: float, order: int = RULE_ORDER):
        x, w = leggauss(order)
        a = intervals[:, :1]
        b = intervals[:, 1:]
        nodes = (0.5 * (b - a) * x + 0.5 * (b + a)).ravel()
        weights = (0.5 * (b - a) * w).ravel()
        return cls(nodes=nodes, weights=weights, scale=scale)


def _gaussian_density(d, p, sd):
    """Normalized Gaussian with precision P at offset d, plus y = P d."""
    y = np.einsum("...ab,...b->...a", p, d)
    phi = np.exp(-0.5 * np.einsum("...a,...a->...", d, y)) / ((2 * np.pi) ** 1.5 * sd)
    return phi, y


def _kernel_terms(d, p, sd, axis):
    """
    -d_n^2 of a normalized Gaussian and its gradient/Hessian in d.

    Returns J, grad J, Hess J for precision P and polarization axis n.
    """
    phi, y = _gaussian_density(d, p, sd)
    ny = y[..., axis]
    npn = p[..., axis, axis]
    pn = p[..., :, axis]
    ny2 = ny ** 2
    j = (npn - ny2) * phi
    grad = ((ny2 - npn)[..., None] * y - 2.0 * ny[..., None] * pn) * phi[..., None]
    yy = np.einsum("...a,...b->...ab", y, y)
    cross = np.einsum("...a,...b->...ab", pn, y)
    hess = -(
        (ny2 - npn)[..., None, None] * yy
        - 2.0 * ny[..., None, None] * (cross + np.swapaxes(cross, -1, -2))
        + (npn - ny2)[..., None, None] * p
        + 2.0 * np.einsum("...a,...b->...ab", pn, pn)
    ) * phi[..., None, None]
    return j, grad, hess


def _pack(j, grad, hess):
    values = np.concatenate([j[..., None], grad, hess.reshape(hess.shape[:-2] + (9,))], axis=-1)
    return values


def _unpack(values):
    u = values[..., 0]
    grad = values[..., 1:4]
    hess = values[..., 4:13].reshape(values.shape[:-1] + (3, 3))
    return u, grad, hess


class _TIntegrand:
    """Integrand over u in (0,1) with t = s0 u / (1 - u)."""

    def __init__(self, d, s, axis, scale):
        self.d = d
        self.s = s
        self.axis = axis
        self.scale = scale
        self.eig = np.linalg.eigvals(s)
        self.shape = d.shape[:-1] + (13,)
        self.eye = np.eye(3)

    def values(self, u):
        """Complex integrand at an array of u nodes, shape (len(u),) + shape."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        t = self.scale * u / (1.0 - u)
        jac = self.scale / (1.0 - u) ** 2
        tt = t.reshape((-1,) + (1,) * (self.d.ndim - 1))
        st = self.s[None] + 2.0 * tt[..., None, None] * self.eye
        p = np.linalg.inv(st)
        sd = np.prod(np.sqrt(self.eig[None] + 2.0 * tt[..., None]), axis=-1)
        j, grad, hess = _kernel_terms(self.d[None], p, sd, self.axis)
        return _pack(j, grad, hess) * jac.reshape((-1,) + (1,) * len(self.shape))

    def __call__(self, u):
        v = self.values(u)[0]
        return np.concatenate([v.real.ravel(), v.imag.ravel()])


def dipolar_convolution(d, s, axis: int = 2, rtol: float = 1e-9,
                        rule: Optional[QuadratureRule] = None, return_rule: bool = False):
    """
    Dipolar kernel convolved with a normalized Gaussian of covariance S.

    U(d) = int K(d - s') phi_S(s') ds' with K = (1 - 3cos^2)/r^3 about `axis`,
    computed as 4 pi int_0^inf J(t) dt - (4 pi/3) phi_S(d), where J is -d_n^2 of
    the Gaussian of covariance S + 2tI. Gradient and Hessian in d are returned
    for the Stein identities of polynomial-weighted elements.

    Args:
        d: Offsets, shape (..., 3), complex allowed
        s: Covariances, shape (..., 3, 3), complex symmetric with Re S > 0
        axis: Polarization axis index
        rtol: Relative tolerance of the adaptive quadrature
        rule: Fixed rule replacing the adaptive quadrature
        return_rule: Also return a fixed rule reproducing this evaluation

    Returns:
        (U, grad U, Hess U), or ((U, grad U, Hess U), rule) when return_rule
    """
    d = np.asarray(d, dtype=complex)
    s = np.asarray(s, dtype=complex)
    scale = rule.scale if rule is not None else float(np.mean(np.real(np.einsum("...aa->...a", s))))
    integrand = _TIntegrand(d, s, axis, scale)

    if rule is None:
        result, _, info = quad_vec(integrand, 0.0, 1.0, epsrel=rtol, norm="max", full_output=True)
        if not info.success:
            raise QuadratureError(f"dipolar quadrature failed: {info.message}",
                                  pair=_worst_component(integrand, rtol))
        half = result.size // 2
        integral = (result[:half] + 1j * result[half:]).reshape(integrand.shape)
        intervals = np.asarray(info.intervals)
        used = QuadratureRule.from_intervals(intervals[np.argsort(intervals[:, 0])], scale)
    else:
        values = integrand.values(rule.nodes)
        integral = np.tensordot(rule.weights, values, axes=(0, 0))
        used = rule

    u, grad, hess = _unpack(integral)
    p0 = np.linalg.inv(s)
    phi0, y0 = _gaussian_density(d, p0, sqrt_det(s))
    u = FOUR_PI * u - (FOUR_PI / 3.0) * phi0
    grad = FOUR_PI * grad + (FOUR_PI / 3.0) * y0 * phi0[..., None]
    hess = FOUR_PI * hess - (FOUR_PI / 3.0) * (
        np.einsum("...a,...b->...ab", y0, y0) - p0) * phi0[..., None, None]
    if return_rule:
        return (u, grad, hess), used
    return u, grad, hess


def _worst_component(integrand: _TIntegrand, rtol: float):
    """Index of the first combination whose own quadrature fails."""
    flat_d = integrand.d.reshape(-1, 3)
    flat_s = integrand.s.reshape(-1, 3, 3)
    for index in range(flat_d.shape[0]):
        single = _TIntegrand(flat_d[index:index + 1], flat_s[index:index + 1],
                             integrand.axis, integrand.scale)
        _, _, info = quad_vec(single, 0.0, 1.0, epsrel=rtol, norm="max", full_output=True)
        if not info.success:
            return np.unravel_index(index, integrand.d.shape[:-1])
    return None


def isotropic_dipolar_reference(d, sigma2: float, axis: int = 2) -> float:
    """
    Closed form of U for S = sigma2 * I, used as an oracle.

    U = -d_n^2 [erf(r / sqrt(2 sigma2)) / r] - (4 pi / 3) phi(d).
    """
    from scipy.special import erf

    d = np.asarray(d, dtype=float)
    r = float(np.linalg.norm(d))
    a = 1.0 / np.sqrt(2.0 * sigma2)
    phi = np.exp(-r ** 2 / (2.0 * sigma2)) / (2.0 * np.pi * sigma2) ** 1.5
    g = erf(a * r)
    g1 = 2.0 * a / np.sqrt(np.pi) * np.exp(-(a * r) ** 2)
    g2 = -2.0 * a ** 2 * r * g1
    f1 = g1 / r - g / r ** 2
    f2 = g2 / r - 2.0 * g1 / r ** 2 + 2.0 * g / r ** 3
    cos2 = (d[axis] / r) ** 2
    second = f2 * cos2 + f1 * (1.0 - cos2) / r
    return -second - (4.0 * np.pi / 3.0) * phi
