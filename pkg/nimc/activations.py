import functools
import logging
from dataclasses import asdict, dataclass
from math import factorial, pi, sqrt
from typing import Callable, List, Union

import numpy as np
from scipy.special import expit, roots_hermite

from nimc.core import ActivationKind, InvalidArgumentError, UnsupportedActivationError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

# Gauss-Hermite node count for unscaled moments
DEFAULT_NODES = 128

# exact integrates every constant; rounded sets every ReLU constant to 1/2
MOMENT_CONVENTIONS = ('exact', 'rounded')


def _as_output(z: np.ndarray, value: np.ndarray) -> ArrayLike:
    return float(value) if np.ndim(z) == 0 else value


def phi(kind: ActivationKind, z: ArrayLike) -> ArrayLike:
    """Evaluates the activation elementwise.
    :param kind: the activation.
    :param z: a scalar or an array of pre-activations.
    :return: the activation with the shape of z (a float for scalar input).
    """
    kind = ActivationKind.parse(kind)
    z_array = np.asarray(z, dtype=np.float64)
    if kind is ActivationKind.SIGMOID:
        value = expit(z_array)
    elif kind is ActivationKind.TANH:
        value = np.tanh(z_array)
    elif kind is ActivationKind.RELU:
        value = np.maximum(z_array, 0.0)
    else:
        value = z_array.copy()
    return _as_output(z, value)


def phi_prime(kind: ActivationKind, z: ArrayLike) -> ArrayLike:
    """First derivative of the activation; for ReLU the derivative at 0 is fixed to 0."""
    kind = ActivationKind.parse(kind)
    z_array = np.asarray(z, dtype=np.float64)
    if kind is ActivationKind.SIGMOID:
        s = expit(z_array)
        value = s * (1.0 - s)
    elif kind is ActivationKind.TANH:
        value = 1.0 - np.tanh(z_array) ** 2
    elif kind is ActivationKind.RELU:
        value = (z_array > 0).astype(np.float64)
    else:
        value = np.ones_like(z_array)
    return _as_output(z, value)


def phi_second(kind: ActivationKind, z: ArrayLike) -> ArrayLike:
    """Second derivative of the activation; zero everywhere for ReLU and Linear."""
    kind = ActivationKind.parse(kind)
    z_array = np.asarray(z, dtype=np.float64)
    if kind is ActivationKind.SIGMOID:
        s = expit(z_array)
        value = s * (1.0 - s) * (1.0 - 2.0 * s)
    elif kind is ActivationKind.TANH:
        t = np.tanh(z_array)
        value = -2.0 * t * (1.0 - t ** 2)
    else:
        value = np.zeros_like(z_array)
    return _as_output(z, value)


@functools.lru_cache(maxsize=None)
def hermite_rule(nodes: int):
    """Gauss-Hermite nodes and weights transformed to integrate against the standard normal density.
    :param nodes: the number of nodes.
    :return: a (nodes, weights) pair of read-only arrays with sum(weights) == 1.
    """
    if nodes < 1:
        raise InvalidArgumentError(f'node count must be positive, got {nodes}')
    x, w = roots_hermite(nodes)
    # change of variables z = sqrt(2) x turns the e^{-x^2} weight into the N(0, 1) density
    z = np.sqrt(2.0) * x
    w = w / np.sqrt(np.pi)
    z.setflags(write=False)
    w.setflags(write=False)
    return z, w


def gaussian_expectation(func: Callable[[np.ndarray], np.ndarray], nodes: int = DEFAULT_NODES) -> float:
    """E_{z ~ N(0,1)}[func(z)] by Gauss-Hermite quadrature."""
    z, w = hermite_rule(nodes)
    return float(np.dot(w, func(z)))


def _normal_moment(p: int) -> float:
    # E[z^p] = (p-1)!! for even p
    if p % 2:
        return 0.0
    return float(np.prod(np.arange(p - 1, 0, -2))) if p else 1.0


def _half_moment(p: int) -> float:
    # E[z^p 1{z > 0}] for the standard normal
    if p % 2 == 0:
        return _normal_moment(p) / 2.0
    half = (p - 1) // 2
    return 2 ** half * factorial(half) / sqrt(2.0 * pi)


@dataclass(frozen=True)
class MomentTable:
    """Unscaled Gaussian moments of an activation:
    alpha_{i,j} = E[phi(z)^i z^j], beta_{i,j} = E[phi'(z)^i z^j], gamma_cross = E[phi(z) phi'(z) z].
    rho is the orthogonal-case lower bound on the population Hessian spectrum.
    """
    activation: str
    alpha10: float
    alpha11: float
    alpha20: float
    beta10: float
    beta11: float
    beta12: float
    beta20: float
    beta22: float
    gamma_cross: float
    rho: float

    @staticmethod
    def rho_of(alpha10, alpha11, alpha20, beta10, beta12, beta20, beta22, gamma_cross) -> float:
        first = alpha20 * beta20 - alpha10 ** 2 * beta10 ** 2 - beta10 ** 2 * alpha11 ** 2
        second = alpha20 * beta22 - alpha10 ** 2 * beta12 ** 2 - gamma_cross ** 2
        return min(first, second)

    def as_dict(self) -> dict:
        return asdict(self)


def _build_table(kind: ActivationKind, alpha10, alpha11, alpha20, beta10, beta11, beta12, beta20, beta22,
                 gamma_cross) -> MomentTable:
    rho = MomentTable.rho_of(alpha10, alpha11, alpha20, beta10, beta12, beta20, beta22, gamma_cross)
    return MomentTable(kind.value, alpha10, alpha11, alpha20, beta10, beta11, beta12, beta20, beta22,
                       gamma_cross, rho)


def moment_table(kind: ActivationKind, nodes: int = DEFAULT_NODES, allow_linear: bool = False,
                 convention: str = 'exact') -> MomentTable:
    """Computes the moment constants of an activation.
    :param kind: the activation. Sigmoid and tanh are integrated by Gauss-Hermite quadrature; ReLU and Linear are
    closed-form.
    :param nodes: the quadrature node count.
    :param allow_linear: the Linear table only exists for degeneracy tests and must be asked for explicitly.
    :param convention: 'exact' or 'rounded'. Under 'rounded' the ReLU table has every constant equal to 1/2
    (alpha10 and beta11 included, so rho = -1/16); the other activations are the same under both.
    :return: the MomentTable.
    """
    kind = ActivationKind.parse(kind)
    if convention not in MOMENT_CONVENTIONS:
        raise InvalidArgumentError(f'convention must be one of {MOMENT_CONVENTIONS}, got {convention!r}')
    if kind is ActivationKind.LINEAR:
        if not allow_linear:
            raise UnsupportedActivationError('the Linear moment table is only available with allow_linear=True')
        return _build_table(kind, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0)

    if kind is ActivationKind.RELU:
        if convention == 'rounded':
            return _build_table(kind, *([0.5] * 9))
        # phi' is the indicator of z > 0, so every moment is a half-Gaussian moment
        return _build_table(kind,
                            alpha10=_half_moment(1), alpha11=_half_moment(2), alpha20=_half_moment(2),
                            beta10=_half_moment(0), beta11=_half_moment(1), beta12=_half_moment(2),
                            beta20=_half_moment(0), beta22=_half_moment(2), gamma_cross=_half_moment(2))

    def moment(func):
        return gaussian_expectation(func, nodes)

    f = functools.partial(phi, kind)
    df = functools.partial(phi_prime, kind)
    return _build_table(kind,
                        alpha10=moment(lambda z: f(z)),
                        alpha11=moment(lambda z: f(z) * z),
                        alpha20=moment(lambda z: f(z) ** 2),
                        beta10=moment(lambda z: df(z)),
                        beta11=moment(lambda z: df(z) * z),
                        beta12=moment(lambda z: df(z) * z ** 2),
                        beta20=moment(lambda z: df(z) ** 2),
                        beta22=moment(lambda z: df(z) ** 2 * z ** 2),
                        gamma_cross=moment(lambda z: f(z) * df(z) * z))


def quadrature_drift(kind: ActivationKind, nodes: int = DEFAULT_NODES) -> float:
    """Largest absolute change of any moment constant when the node count doubles."""
    coarse = moment_table(kind, nodes).as_dict()
    fine = moment_table(kind, 2 * nodes).as_dict()
    return max(abs(coarse[key] - fine[key]) for key in coarse if key != 'activation')


def _check_sigma(q: int, sigma: float, orders) -> None:
    if q not in orders:
        raise InvalidArgumentError(f'order q={q} must be one of {tuple(orders)}')
    if not sigma > 0:
        raise InvalidArgumentError(f'sigma must be positive, got {sigma}')


def _scaled_nodes(nodes: int, sigma: float) -> int:
    # the integrand phi(sigma z) has poles at distance ~pi/sigma from the real axis, so the node count grows with
    # sigma^2 to keep the quadrature error constant
    return nodes * max(1, int(np.ceil(sigma ** 2)))


def gamma_sigma(kind: ActivationKind, q: int, sigma: float, nodes: int = DEFAULT_NODES) -> float:
    """gamma_q(sigma) = E_{z ~ N(0,1)}[phi(sigma z) z^q] for q in {0, ..., 4}.
    :param kind: the activation.
    :param q: the order.
    :param sigma: the positive scale.
    :param nodes: the base quadrature node count (smooth activations only).
    :return: the moment.
    """
    kind = ActivationKind.parse(kind)
    _check_sigma(q, sigma, range(5))
    if kind is ActivationKind.RELU:
        return sigma * _half_moment(q + 1)
    if kind is ActivationKind.LINEAR:
        return sigma * _normal_moment(q + 1)
    return gaussian_expectation(lambda z: phi(kind, sigma * z) * z ** q, _scaled_nodes(nodes, sigma))


def alpha_sigma(kind: ActivationKind, q: int, sigma: float, nodes: int = DEFAULT_NODES) -> float:
    """alpha_q(sigma) = E[phi'(sigma z) z^q] for q in {0, 1, 2}."""
    kind = ActivationKind.parse(kind)
    _check_sigma(q, sigma, range(3))
    if kind is ActivationKind.RELU:
        return _half_moment(q)
    if kind is ActivationKind.LINEAR:
        return _normal_moment(q)
    return gaussian_expectation(lambda z: phi_prime(kind, sigma * z) * z ** q, _scaled_nodes(nodes, sigma))


def beta_sigma(kind: ActivationKind, q: int, sigma: float, nodes: int = DEFAULT_NODES) -> float:
    """beta_q(sigma) = E[phi'(sigma z)^2 z^q] for q in {0, 2}."""
    kind = ActivationKind.parse(kind)
    _check_sigma(q, sigma, (0, 2))
    if kind is ActivationKind.RELU:
        return _half_moment(q)
    if kind is ActivationKind.LINEAR:
        return _normal_moment(q)
    return gaussian_expectation(lambda z: phi_prime(kind, sigma * z) ** 2 * z ** q, _scaled_nodes(nodes, sigma))


@dataclass(frozen=True)
class SigmaMoments:
    activation: str
    q: int
    sigma: float
    value: float


def sigma_moments(kind: ActivationKind, sigma: float, nodes: int = DEFAULT_NODES) -> List[SigmaMoments]:
    kind = ActivationKind.parse(kind)
    return [SigmaMoments(kind.value, q, sigma, gamma_sigma(kind, q, sigma, nodes)) for q in range(5)]


def tensor_weight(kind: ActivationKind, sigma_u: float, sigma_v: float, nodes: int = DEFAULT_NODES) -> float:
    """Weight of one component in the third-moment tensor: gamma_0(|v|) (gamma_3(|u|) - 3 gamma_1(|u|))."""
    return gamma_sigma(kind, 0, sigma_v, nodes) * (gamma_sigma(kind, 3, sigma_u, nodes)
                                                   - 3.0 * gamma_sigma(kind, 1, sigma_u, nodes))
