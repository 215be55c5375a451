from math import pi, sqrt

import numpy as np
import pytest

from nimc.activations import (alpha_sigma, beta_sigma, gamma_sigma, gaussian_expectation, hermite_rule,
                              moment_table, phi, phi_prime, phi_second, quadrature_drift, sigma_moments,
                              tensor_weight)
from nimc.core import ActivationKind, InvalidArgumentError, UnsupportedActivationError

SMOOTH = [ActivationKind.SIGMOID, ActivationKind.TANH]


def test_phi_values():
    assert phi('sigmoid', 0.0) == 0.5
    assert phi('tanh', 0.0) == 0.0
    assert phi('relu', -2.0) == 0.0
    assert phi('relu', 2.0) == 2.0
    assert phi('linear', -1.5) == -1.5
    assert isinstance(phi('sigmoid', 1.0), float)
    assert phi('sigmoid', np.zeros((2, 3))).shape == (2, 3)


def test_sigmoid_saturates_without_overflow():
    values = phi('sigmoid', np.array([-800.0, 800.0]))
    assert np.array_equal(values, [0.0, 1.0])
    assert np.all(np.isfinite(phi_prime('sigmoid', np.array([-800.0, 800.0]))))


def test_relu_derivative_at_zero_is_zero():
    assert phi_prime('relu', 0.0) == 0.0
    assert phi_prime('relu', 1e-300) == 1.0
    assert phi_second('relu', 3.0) == 0.0


@pytest.mark.parametrize('kind', SMOOTH)
def test_derivatives_match_finite_differences(kind):
    z = np.linspace(-4.0, 4.0, 41)
    step = 1e-6
    first = (phi(kind, z + step) - phi(kind, z - step)) / (2 * step)
    second = (phi_prime(kind, z + step) - phi_prime(kind, z - step)) / (2 * step)
    assert np.allclose(phi_prime(kind, z), first, atol=1e-8)
    assert np.allclose(phi_second(kind, z), second, atol=1e-8)


def test_hermite_rule_integrates_gaussian_moments():
    z, w = hermite_rule(64)
    assert np.sum(w) == pytest.approx(1.0, abs=1e-14)
    assert gaussian_expectation(lambda x: x ** 2, 64) == pytest.approx(1.0, abs=1e-12)
    assert gaussian_expectation(lambda x: x ** 4, 64) == pytest.approx(3.0, abs=1e-12)
    assert gaussian_expectation(lambda x: x ** 3, 64) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InvalidArgumentError):
        hermite_rule(0)


def test_sigmoid_rho():
    table = moment_table('sigmoid')
    assert table.rho == pytest.approx(0.000658, abs=1e-5)
    assert table.rho > 0
    assert table.alpha10 == pytest.approx(0.5, abs=1e-14)


def test_tanh_rho():
    table = moment_table('tanh')
    assert table.rho == pytest.approx(0.0095, abs=2e-4)
    assert table.alpha10 == pytest.approx(0.0, abs=1e-14)


@pytest.mark.parametrize('kind', SMOOTH)
def test_stein_identity(kind):
    # E[phi(z) z] = E[phi'(z)] for z ~ N(0, 1)
    table = moment_table(kind)
    assert table.alpha11 == pytest.approx(table.beta10, abs=1e-12)


def test_rho_matches_its_formula():
    table = moment_table('sigmoid')
    first = (table.alpha20 * table.beta20 - table.alpha10 ** 2 * table.beta10 ** 2
             - table.beta10 ** 2 * table.alpha11 ** 2)
    second = table.alpha20 * table.beta22 - table.alpha10 ** 2 * table.beta12 ** 2 - table.gamma_cross ** 2
    assert table.rho == min(first, second)


def test_relu_table_is_closed_form():
    table = moment_table('relu')
    assert table.alpha10 == pytest.approx(1.0 / sqrt(2.0 * pi), abs=1e-15)
    assert table.beta11 == pytest.approx(1.0 / sqrt(2.0 * pi), abs=1e-15)
    for name in ('alpha11', 'alpha20', 'beta10', 'beta12', 'beta20', 'beta22', 'gamma_cross'):
        assert getattr(table, name) == pytest.approx(0.5, abs=1e-15)
    assert table.rho == pytest.approx(-1.0 / (8.0 * pi), abs=1e-15)


def test_rounded_relu_table():
    table = moment_table('relu', convention='rounded')
    for name in ('alpha10', 'alpha11', 'alpha20', 'beta10', 'beta11', 'beta12', 'beta20', 'beta22',
                 'gamma_cross'):
        assert getattr(table, name) == 0.5
    assert table.rho == -0.0625
    assert moment_table('sigmoid', convention='rounded') == moment_table('sigmoid')
    with pytest.raises(InvalidArgumentError):
        moment_table('relu', convention='approximate')


def test_linear_table_needs_opt_in():
    with pytest.raises(UnsupportedActivationError):
        moment_table('linear')
    assert moment_table('linear', allow_linear=True).rho == 0.0


@pytest.mark.parametrize('kind', SMOOTH)
def test_quadrature_has_converged(kind):
    assert quadrature_drift(kind) < 1e-8


def test_gamma_zero_values():
    for sigma in (0.3, 1.0, 2.5):
        assert gamma_sigma('sigmoid', 0, sigma) == pytest.approx(0.5, abs=1e-12)
        assert gamma_sigma('tanh', 0, sigma) == pytest.approx(0.0, abs=1e-12)


def test_relu_tensor_coefficient_vanishes():
    for sigma in (0.1, 1.0, 7.0):
        coefficient = gamma_sigma('relu', 3, sigma) - 3.0 * gamma_sigma('relu', 1, sigma)
        assert coefficient == pytest.approx(0.0, abs=1e-10)
        assert tensor_weight('relu', sigma, 1.0) == pytest.approx(0.0, abs=1e-10)


def test_sigma_moments_agree_with_unscaled_table():
    table = moment_table('sigmoid')
    assert alpha_sigma('sigmoid', 0, 1.0) == pytest.approx(table.beta10, abs=1e-14)
    assert beta_sigma('sigmoid', 0, 1.0) == pytest.approx(table.beta20, abs=1e-14)
    assert beta_sigma('sigmoid', 2, 1.0) == pytest.approx(table.beta22, abs=1e-14)
    assert gamma_sigma('sigmoid', 1, 1.0) == pytest.approx(table.alpha11, abs=1e-14)


def test_sigma_moment_arguments_are_checked():
    with pytest.raises(InvalidArgumentError):
        gamma_sigma('sigmoid', 5, 1.0)
    with pytest.raises(InvalidArgumentError):
        beta_sigma('sigmoid', 1, 1.0)
    with pytest.raises(InvalidArgumentError):
        alpha_sigma('sigmoid', 0, 0.0)


def test_sigma_moments_list():
    moments = sigma_moments('tanh', 1.5)
    assert [moment.q for moment in moments] == [0, 1, 2, 3, 4]
    assert all(moment.sigma == 1.5 and moment.activation == 'tanh' for moment in moments)
    # odd integrands vanish for an odd activation
    assert moments[0].value == pytest.approx(0.0, abs=1e-12)
    assert moments[2].value == pytest.approx(0.0, abs=1e-12)


def test_sigmoid_tensor_weight_is_negative():
    assert tensor_weight('sigmoid', 1.0, 1.0) < 0
