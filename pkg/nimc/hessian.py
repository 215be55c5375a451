import enum
import logging
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
from scipy.linalg import eigh, svdvals

from nimc.activations import moment_table, phi, phi_prime, phi_second
from nimc.core import (ActivationKind, FactorPair, FeatureSet, InvalidArgumentError, NumericError, ObservationSet,
                       RankDeficientError, RngSeed, UnsupportedActivationError)
from nimc.model import ObservedTerms, ReluFixedRow, predict_rows

logger = logging.getLogger(__name__)

# constant of the ReLU fixed-row bound, (1 / 200) / (lambda(U) lambda(V)), which the headline statement hides
RELU_BOUND_CONSTANT = 1.0 / 200.0

# rows of the Jacobian materialized at once during assembly
_CHUNK = 20000


@dataclass(frozen=True, eq=False)
class HessianMatrix:
    """A symmetric Hessian over the parameters laid out as k blocks u_1..u_k (d1 each) then k blocks v_1..v_k.
    :param H: the symmetric matrix.
    :param activation: the activation of the model it was assembled for.
    :param n_obs: the number of observations (or Monte-Carlo samples) averaged.
    :param at_ground_truth: whether it was evaluated at the generating parameters.
    :param asymmetry: max |H - H^T| before symmetrization.
    :param standard_error: per-entry Monte-Carlo standard errors, for sampled Hessians.
    :param spectral_slack: Frobenius norm of standard_error, an upper bound on the eigenvalue standard error.
    """
    H: np.ndarray
    activation: ActivationKind
    n_obs: int
    at_ground_truth: bool
    asymmetry: float = 0.0
    standard_error: np.ndarray = None
    spectral_slack: float = None

    @property
    def size(self) -> int:
        return self.H.shape[0]


@dataclass(frozen=True)
class ConditionReport:
    lambda_U: float
    lambda_V: float
    kappa_U: float
    kappa_V: float

    @property
    def lambda_max_pair(self) -> float:
        return max(self.lambda_U, self.lambda_V)

    @property
    def kappa_max_pair(self) -> float:
        return max(self.kappa_U, self.kappa_V)

    def as_dict(self) -> dict:
        return {'lambda_U': self.lambda_U, 'lambda_V': self.lambda_V, 'kappa_U': self.kappa_U,
                'kappa_V': self.kappa_V, 'lambda_max_pair': self.lambda_max_pair,
                'kappa_max_pair': self.kappa_max_pair}


class SpectrumMethod(enum.Enum):
    DENSE_EIG = 'dense_eig'


@dataclass(frozen=True)
class SpectrumProbe:
    lambda_min: float
    lambda_max: float
    method: SpectrumMethod = SpectrumMethod.DENSE_EIG
    theoretical_lower_bound: float = None

    def as_dict(self) -> dict:
        return {'lambda_min': self.lambda_min, 'lambda_max': self.lambda_max, 'method': self.method.value,
                'theoretical_lower_bound': self.theoretical_lower_bound}


@dataclass(frozen=True)
class QuadraticFormProbe:
    value: float
    standard_error: float


def flatten_direction(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Stacks the columns a_1..a_k of A and then b_1..b_k of B into one vector."""
    return np.concatenate([np.asarray(A, dtype=np.float64).T.ravel(), np.asarray(B, dtype=np.float64).T.ravel()])


def unflatten_direction(t: np.ndarray, d1: int, d2: int, k: int) -> Tuple[np.ndarray, np.ndarray]:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if len(t) != (d1 + d2) * k:
        raise InvalidArgumentError(f'direction has {len(t)} entries, expected {(d1 + d2) * k}')
    return t[:d1 * k].reshape(k, d1).T.copy(), t[d1 * k:].reshape(k, d2).T.copy()


def _jacobian(kind: ActivationKind, X: np.ndarray, Y: np.ndarray, P: np.ndarray, Q: np.ndarray,
              phi_P: np.ndarray, phi_Q: np.ndarray) -> np.ndarray:
    # row t holds d prediction(x_t, y_t) / d(u_1..u_k, v_1..v_k)
    m = len(X)
    Ju = (phi_prime(kind, P) * phi_Q)[:, :, None] * X[:, None, :]
    Jv = (phi_prime(kind, Q) * phi_P)[:, :, None] * Y[:, None, :]
    return np.concatenate([Ju.reshape(m, -1), Jv.reshape(m, -1)], axis=1)


def _gauss_newton(kind: ActivationKind, X, Y, P, Q, phi_P, phi_Q) -> np.ndarray:
    size = (X.shape[1] + Y.shape[1]) * P.shape[1]
    total = np.zeros((size, size))
    for start in range(0, len(X), _CHUNK):
        chunk = slice(start, start + _CHUNK)
        J = _jacobian(kind, X[chunk], Y[chunk], P[chunk], Q[chunk], phi_P[chunk], phi_Q[chunk])
        total += J.T @ J
    return total / len(X)


def _add_residual_terms(H: np.ndarray, kind: ActivationKind, terms: ObservedTerms, h: np.ndarray) -> None:
    d1 = terms.X.shape[1]
    d2 = terms.Y.shape[1]
    k = terms.P.shape[1]
    offset = d1 * k
    weight = h / terms.count
    d_P = phi_prime(kind, terms.P)
    d_Q = phi_prime(kind, terms.Q)
    dd_P = phi_second(kind, terms.P)
    dd_Q = phi_second(kind, terms.Q)
    for i in range(k):
        u = slice(i * d1, (i + 1) * d1)
        v = slice(offset + i * d2, offset + (i + 1) * d2)
        # the delta_ij terms only touch the i-th diagonal blocks
        H[u, u] += terms.X.T @ ((weight * dd_P[:, i] * terms.phi_Q[:, i])[:, None] * terms.X)
        H[v, v] += terms.Y.T @ ((weight * dd_Q[:, i] * terms.phi_P[:, i])[:, None] * terms.Y)
        cross = terms.X.T @ ((weight * d_P[:, i] * d_Q[:, i])[:, None] * terms.Y)
        H[u, v] += cross
        H[v, u] += cross.T


def _symmetrized(H: np.ndarray) -> Tuple[np.ndarray, float]:
    asymmetry = float(np.max(np.abs(H - H.T))) if H.size else 0.0
    logger.debug('Hessian asymmetry before symmetrization: %.3g', asymmetry)
    return 0.5 * (H + H.T), asymmetry


def assemble_empirical_hessian(fp: FactorPair, truth: FactorPair, fs: FeatureSet, obs: ObservationSet,
                               include_residual_terms: bool = True) -> HessianMatrix:
    """Assembles the exact Hessian of the empirical loss at fp.
    :param fp: the parameters to evaluate at.
    :param truth: the ground truth used for the residuals h; when None the residuals are taken against the observed
    ratings, which makes the result the Hessian of loss itself.
    :param fs: the features.
    :param obs: the observations.
    :param include_residual_terms: set to False to drop the h-weighted second-order terms.
    :return: the HessianMatrix.
    """
    kind = fp.activation
    if kind is ActivationKind.LINEAR:
        raise UnsupportedActivationError('Hessian assembly is not defined for the Linear activation; '
                                         'probe degeneracies with quadratic forms instead')
    terms = ObservedTerms(fp, fs, obs)

    # the Gauss-Newton part, a sum of outer products
    H = _gauss_newton(kind, terms.X, terms.Y, terms.P, terms.Q, terms.phi_P, terms.phi_Q)

    if include_residual_terms:
        if truth is None:
            h = terms.residual
        else:
            if truth.d1 != fp.d1 or truth.d2 != fp.d2 or truth.k != fp.k:
                raise InvalidArgumentError('truth and parameters have different shapes')
            h = terms.prediction - predict_rows(truth, terms.X, terms.Y)
        _add_residual_terms(H, kind, terms, h)

    H, asymmetry = _symmetrized(H)
    return HessianMatrix(H, kind, len(obs), truth is not None and fp.same_as(truth), asymmetry)


def assemble_relu_fixed_hessian(rf: ReluFixedRow, truth: Union[FactorPair, ReluFixedRow], fs: FeatureSet,
                                obs: ObservationSet) -> HessianMatrix:
    """Hessian over the free parameters (W, V) of the fixed-row ReLU objective, of size ((d1 - 1) + d2) k."""
    if isinstance(truth, ReluFixedRow):
        truth = truth.embed()
    fp = rf.embed()
    full = assemble_empirical_hessian(fp, truth, fs, obs)

    # drop the coordinates of the pinned first row, entry 0 of every u_i block
    pinned = [i * fp.d1 for i in range(fp.k)]
    keep = np.setdiff1d(np.arange(full.size), pinned)
    H = full.H[np.ix_(keep, keep)]
    return HessianMatrix(H, full.activation, full.n_obs, full.at_ground_truth, full.asymmetry)


def population_hessian_mc(truth: FactorPair, n_mc: int, rng: RngSeed) -> HessianMatrix:
    """Monte-Carlo estimate of the population Hessian at the ground truth, E[J J^T] over Gaussian (x, y).
    :param truth: the ground-truth parameters.
    :param n_mc: the number of sampled (x, y) pairs.
    :param rng: the random stream.
    :return: the HessianMatrix with per-entry standard errors and the spectral slack attached.
    """
    if n_mc < 1:
        raise InvalidArgumentError(f'n_mc must be at least 1, got {n_mc}')
    kind = truth.activation
    generator = rng.generator()
    size = (truth.d1 + truth.d2) * truth.k
    first = np.zeros((size, size))
    second = np.zeros((size, size))

    for start in range(0, n_mc, _CHUNK):
        count = min(_CHUNK, n_mc - start)
        X = generator.standard_normal((count, truth.d1))
        Y = generator.standard_normal((count, truth.d2))
        P = X @ truth.U
        Q = Y @ truth.V
        J = _jacobian(kind, X, Y, P, Q, phi(kind, P), phi(kind, Q))
        first += J.T @ J
        squared = J ** 2
        second += squared.T @ squared

    mean = first / n_mc
    variance = np.maximum(second / n_mc - mean ** 2, 0.0)
    standard_error = np.sqrt(variance / n_mc)
    H, asymmetry = _symmetrized(mean)
    return HessianMatrix(H, kind, n_mc, True, asymmetry, standard_error,
                         float(np.linalg.norm(standard_error)))


def _as_matrix(H: Union[HessianMatrix, np.ndarray]) -> np.ndarray:
    matrix = H.H if isinstance(H, HessianMatrix) else np.asarray(H, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise InvalidArgumentError(f'expected a square matrix, got shape {matrix.shape}')
    if not np.all(np.isfinite(matrix)):
        raise NumericError('matrix has non-finite entries')
    return matrix


def spectrum(H: Union[HessianMatrix, np.ndarray], theoretical_lower_bound: float = None) -> SpectrumProbe:
    """Extreme eigenvalues of a symmetric matrix by a dense symmetric eigensolver.
    :param H: a HessianMatrix or a symmetric array.
    :param theoretical_lower_bound: optional bound to carry along in the probe.
    :return: the SpectrumProbe.
    """
    matrix = _as_matrix(H)
    scale = max(1.0, float(np.max(np.abs(matrix))))
    if np.max(np.abs(matrix - matrix.T)) > 1e-10 * scale:
        raise InvalidArgumentError('matrix is not symmetric')
    eigenvalues = eigh(matrix, eigvals_only=True)
    return SpectrumProbe(float(eigenvalues[0]), float(eigenvalues[-1]), SpectrumMethod.DENSE_EIG,
                         theoretical_lower_bound)


def lambda_max_power(H: Union[HessianMatrix, np.ndarray], rng: RngSeed, iters: int = 100,
                     tol: float = 1e-10) -> float:
    """Largest-magnitude eigenvalue of a symmetric matrix by power iteration."""
    matrix = _as_matrix(H)
    vector = rng.generator().standard_normal(matrix.shape[0])
    vector /= np.linalg.norm(vector)
    estimate = 0.0
    for _ in range(iters):
        image = matrix @ vector
        norm = np.linalg.norm(image)
        if norm == 0:
            return 0.0
        updated = float(vector @ image)
        vector = image / norm
        if abs(updated - estimate) <= tol * max(1.0, abs(updated)):
            return abs(updated)
        estimate = updated
    return abs(estimate)


def _factor_conditioning(A: np.ndarray, name: str) -> Tuple[float, float, np.ndarray]:
    singular_values = svdvals(A)
    tolerance = max(A.shape) * np.finfo(np.float64).eps * singular_values[0]
    if singular_values[-1] <= tolerance:
        raise RankDeficientError(name, singular_values)
    k = len(singular_values)
    # sigma_1^k / prod sigma_i, in logs to avoid overflow
    volume = float(np.exp(k * np.log(singular_values[0]) - np.sum(np.log(singular_values))))
    return volume, float(singular_values[0] / singular_values[-1]), singular_values


def condition_numbers(fp: FactorPair) -> ConditionReport:
    """lambda(.) = sigma_1^k / prod(sigma_i) and kappa(.) = sigma_1 / sigma_k for both factors."""
    lambda_U, kappa_U, _ = _factor_conditioning(fp.U, 'U')
    lambda_V, kappa_V, _ = _factor_conditioning(fp.V, 'V')
    return ConditionReport(lambda_U, lambda_V, kappa_U, kappa_V)


def _check_normalized(truth: FactorPair) -> None:
    for name, factor in (('U', truth.U), ('V', truth.V)):
        smallest = svdvals(factor)[-1]
        if abs(smallest - 1.0) > 1e-8:
            logger.warning('sigma_k(%s) = %.6g; the bound assumes the factors are normalized to sigma_k = 1',
                           name, smallest)


def _relu_row_term(truth: FactorPair) -> float:
    first_row = truth.U[0]
    if np.any(first_row == 0):
        raise InvalidArgumentError('the ReLU bound needs a first row of U without zero entries')
    spectral = max(svdvals(truth.U)[0], svdvals(truth.V)[0])
    return float(np.min(np.abs(first_row)) / ((1.0 + np.linalg.norm(first_row)) * spectral))


def theoretical_lambda_min_bound(truth: FactorPair, kind: ActivationKind = None) -> float:
    """Closed-form lower bound on the smallest eigenvalue of the population Hessian at the ground truth.
    Sigmoid and tanh: rho / (lambda(U) lambda(V) max(kappa(U), kappa(V))).
    ReLU (fixed first row): (1/200) / (lambda(U) lambda(V)) * (min|u_1i| / ((1 + |u^(1)|) max(|U|, |V|)))^2.
    :param truth: the ground-truth parameters.
    :param kind: the activation, defaulting to the truth's.
    :return: the bound.
    """
    kind = ActivationKind.parse(kind or truth.activation)
    report = condition_numbers(truth)
    if kind is ActivationKind.RELU:
        return RELU_BOUND_CONSTANT / (report.lambda_U * report.lambda_V) * _relu_row_term(truth) ** 2
    if kind is ActivationKind.LINEAR:
        raise UnsupportedActivationError('no Hessian lower bound exists for the Linear activation')
    _check_normalized(truth)
    rho = moment_table(kind).rho
    return rho / (report.lambda_U * report.lambda_V * report.kappa_max_pair)


def bound_report(truth: FactorPair, kind: ActivationKind = None) -> dict:
    """Both forms of the bound: per-factor ('appendix') and with the pairwise maxima ('max_pair').
    The ReLU 'max_pair' entry is the scaling u0^2 / (lambda^2 kappa^4) without its hidden constant.
    """
    kind = ActivationKind.parse(kind or truth.activation)
    report = condition_numbers(truth)
    lam = report.lambda_max_pair
    kappa = report.kappa_max_pair
    if kind is ActivationKind.RELU:
        u0 = float(np.min(np.abs(truth.U[0])))
        max_pair = u0 ** 2 / (lam ** 2 * kappa ** 4)
    else:
        max_pair = moment_table(kind).rho / (lam ** 2 * kappa)
    result = {'activation': kind.value, 'appendix': theoretical_lambda_min_bound(truth, kind),
              'max_pair': max_pair}
    result.update(report.as_dict())
    return result


def min_eig_quadratic_form(truth: FactorPair, direction: Union[Sequence[np.ndarray], np.ndarray], n_mc: int,
                           rng: RngSeed) -> QuadraticFormProbe:
    """Monte-Carlo estimate of t^T H* t = E[(sum_i phi'(u_i^T x) phi(v_i^T y) x^T a_i + phi'(v_i^T y) phi(u_i^T x)
    y^T b_i)^2] for a unit direction t = (a_1..a_k, b_1..b_k).
    :param truth: the ground-truth parameters.
    :param direction: an (A, B) pair of d1 x k and d2 x k matrices, or the flattened vector.
    :param n_mc: the number of sampled (x, y) pairs.
    :param rng: the random stream.
    :return: the estimate with its standard error.
    """
    if n_mc < 1:
        raise InvalidArgumentError(f'n_mc must be at least 1, got {n_mc}')
    if isinstance(direction, np.ndarray) and direction.ndim == 1:
        t = direction.astype(np.float64)
    else:
        A, B = direction
        t = flatten_direction(A, B)
    if len(t) != (truth.d1 + truth.d2) * truth.k:
        raise InvalidArgumentError(f'direction has {len(t)} entries, expected {(truth.d1 + truth.d2) * truth.k}')
    if abs(float(t @ t) - 1.0) > 1e-12:
        raise InvalidArgumentError(f'direction must have unit norm, got squared norm {float(t @ t)!r}')

    kind = truth.activation
    generator = rng.generator()
    total = 0.0
    total_squares = 0.0
    for start in range(0, n_mc, _CHUNK):
        count = min(_CHUNK, n_mc - start)
        X = generator.standard_normal((count, truth.d1))
        Y = generator.standard_normal((count, truth.d2))
        P = X @ truth.U
        Q = Y @ truth.V
        samples = (_jacobian(kind, X, Y, P, Q, phi(kind, P), phi(kind, Q)) @ t) ** 2
        total += float(np.sum(samples))
        total_squares += float(np.sum(samples ** 2))

    mean = total / n_mc
    variance = max(total_squares / n_mc - mean ** 2, 0.0)
    return QuadraticFormProbe(mean, float(np.sqrt(variance / n_mc)))
