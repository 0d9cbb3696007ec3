"""
Tests for gaussian_integrals.py - Gaussian moments and the dipolar convolution.
"""
import pytest
import numpy as np
import sys
import os

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import gaussian_integrals as gi


class TestMoments:
    """Tests for closed-form Gaussian integrals."""

    def test_sqrt_det_diagonal(self):
        """sqrt(det) of a diagonal matrix."""
        assert gi.sqrt_det(np.diag([4.0, 9.0, 1.0]).astype(complex)) == pytest.approx(6.0)

    def test_centered_gaussian(self):
        """Norm pi^(3/2)/sqrt(det M), zero mean, covariance M^-1 / 2."""
        m = np.diag([1.0, 2.0, 3.0]).astype(complex)
        norm, mean, cov = gi.gaussian_moments(m, np.zeros(3, complex), np.array(0j))
        assert norm == pytest.approx(np.pi ** 1.5 / np.sqrt(6.0))
        np.testing.assert_allclose(mean, 0.0, atol=1e-15)
        np.testing.assert_allclose(cov, np.diag([0.5, 0.25, 1 / 6]))

    def test_shifted_gaussian(self):
        """Completing the square recovers the center and keeps the norm."""
        a = np.array([[2.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 4.0]], dtype=complex)
        q = np.array([0.5, -0.2, 0.1])
        beta = -2.0 * a @ q
        c = q @ a @ q
        norm, mean, _ = gi.gaussian_moments(a, beta, np.array(c))
        norm0, _, _ = gi.gaussian_moments(a, np.zeros(3, complex), np.array(0j))
        np.testing.assert_allclose(mean, q, atol=1e-14)
        assert norm == pytest.approx(norm0)

    def test_fourth_moment(self):
        """E[x^4] = 3 sigma^4 for a centered Gaussian."""
        cov = np.diag([0.7, 1.0, 1.0])
        _, _, _, e4 = gi.moment_tensors(np.zeros(3), cov)
        assert e4[0, 0, 0, 0] == pytest.approx(3 * 0.7 ** 2)
        assert e4[0, 0, 1, 1] == pytest.approx(0.7)

    def test_poly_product(self):
        """E[x^2 * (y + 1)] with a shifted mean."""
        mean = np.array([0.0, 0.5, 0.0])
        cov = np.diag([0.3, 0.2, 0.1])
        moments = gi.moment_tensors(mean, cov)
        q1 = np.zeros((3, 3))
        q1[0, 0] = 1.0
        poly1 = (q1, np.zeros(3), 0.0)
        poly2 = (np.zeros((3, 3)), np.array([0.0, 1.0, 0.0]), 1.0)
        assert gi.poly_product_expectation(poly1, poly2, moments) == pytest.approx(0.3 * 1.5)

    def test_poly_expectation(self):
        """E[r^T Q r + L^T r + k]."""
        mean = np.array([1.0, 0.0, 0.0])
        cov = np.eye(3) * 0.5
        e1, e2, _, _ = gi.moment_tensors(mean, cov, order=2)
        value = gi.poly_expectation((np.eye(3), np.array([2.0, 0, 0]), 1.0), e1, e2)
        assert value == pytest.approx(1.0 + 1.5 + 2.0 + 1.0)


class TestDipolarConvolution:
    """Tests for the Gaussian-smeared dipolar kernel."""

    @pytest.mark.parametrize("d", [[0.3, 0.2, 0.7], [1.0, 0.0, 0.0], [0.0, 0.0, 1.2], [0.4, -0.5, 0.1]])
    def test_matches_isotropic_closed_form(self, d):
        """Isotropic covariance agrees with the erf closed form."""
        sigma2 = 0.15
        u, _, _ = gi.dipolar_convolution(np.array(d), sigma2 * np.eye(3), rtol=1e-11)
        assert u.real == pytest.approx(gi.isotropic_dipolar_reference(d, sigma2), rel=1e-7, abs=1e-10)
        assert abs(u.imag) < 1e-12

    def test_polarization_axis(self):
        """Rotating offset and axis together leaves U unchanged."""
        s = np.diag([0.2, 0.2, 0.2])
        uz, _, _ = gi.dipolar_convolution(np.array([0.1, 0.2, 0.6]), s, axis=2)
        ux, _, _ = gi.dipolar_convolution(np.array([0.6, 0.2, 0.1]), s, axis=0)
        assert ux.real == pytest.approx(uz.real, rel=1e-8)

    def test_even_in_offset(self):
        """U(d) = U(-d)."""
        s = np.array([[0.3, 0.05, 0.0], [0.05, 0.5, 0.0], [0.0, 0.0, 0.2]])
        d = np.array([0.3, -0.4, 0.25])
        u1, g1, _ = gi.dipolar_convolution(d, s)
        u2, g2, _ = gi.dipolar_convolution(-d, s)
        assert u1.real == pytest.approx(u2.real, rel=1e-9)
        np.testing.assert_allclose(g1, -g2, rtol=1e-7, atol=1e-10)

    def test_gradient_matches_finite_differences(self):
        """The returned gradient is the derivative of U in d."""
        s = np.array([[0.3, 0.05, 0.0], [0.05, 0.5, 0.0], [0.0, 0.0, 0.2]])
        d = np.array([0.3, -0.4, 0.25])
        _, grad, hess = gi.dipolar_convolution(d, s, rtol=1e-12)
        h = 1e-5
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            up, gp, _ = gi.dipolar_convolution(d + e, s, rtol=1e-12)
            um, gm, _ = gi.dipolar_convolution(d - e, s, rtol=1e-12)
            assert grad[a].real == pytest.approx(((up - um) / (2 * h)).real, rel=1e-5, abs=1e-7)
            np.testing.assert_allclose(hess[a].real, ((gp - gm) / (2 * h)).real, rtol=1e-4, atol=1e-6)

    def test_frozen_rule_reproduces_adaptive_result(self):
        """A rule frozen from the adaptive run gives the same elements."""
        s = np.diag([0.2, 0.6, 0.25]).astype(complex)
        d = np.array([0.5, 0.1, -0.2])
        (u, grad, _), rule = gi.dipolar_convolution(d, s, rtol=1e-12, return_rule=True)
        u2, grad2, _ = gi.dipolar_convolution(d, s, rule=rule)
        assert u2 == pytest.approx(u, rel=1e-10)
        np.testing.assert_allclose(grad2, grad, rtol=1e-9, atol=1e-12)

    def test_batched_evaluation(self):
        """Leading dimensions are evaluated together."""
        d = np.array([[0.3, 0.2, 0.7], [1.0, 0.0, 0.0]])
        s = np.broadcast_to(0.15 * np.eye(3), (2, 3, 3)).copy()
        u, grad, hess = gi.dipolar_convolution(d, s, rtol=1e-11)
        assert u.shape == (2,) and grad.shape == (2, 3) and hess.shape == (2, 3, 3)
        for k in range(2):
            assert u[k].real == pytest.approx(gi.isotropic_dipolar_reference(d[k], 0.15), rel=1e-7)
