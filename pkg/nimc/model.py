import enum
import logging
from dataclasses import dataclass

import numpy as np

from nimc.activations import phi, phi_prime
from nimc.core import (ActivationKind, FactorPair, FeatureSet, InvalidArgumentError, ObservationSet,
                       ResourceLimitError, UnsupportedActivationError)

logger = logging.getLogger(__name__)

# largest n1 * n2 grid the positive-unlabeled objective will materialize
DEFAULT_CELL_BUDGET = 10 ** 7


class Normalization(enum.Enum):
    # (1 / (2 |Omega|)) * sum of squared residuals
    MEAN_HALF = 'mean_half'
    # (1 / 2) * weighted sum over the whole grid, used by the positive-unlabeled objective
    HALF_SUM = 'half_sum'


@dataclass(frozen=True)
class LossValue:
    value: float
    normalization: Normalization = Normalization.MEAN_HALF

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True, eq=False)
class GradientPair:
    gU: np.ndarray
    gV: np.ndarray

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.gU ** 2) + np.sum(self.gV ** 2)))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.gU)) and np.all(np.isfinite(self.gV)))


@dataclass(frozen=True, eq=False)
class ReluFixedRow:
    """ReLU parameters with the first row of U pinned to a fixed non-zero vector.
    W holds the remaining (d1 - 1) rows of U.
    """
    W: np.ndarray
    fixed_row: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64, copy=True)
        fixed_row = np.array(self.fixed_row, dtype=np.float64, copy=True).reshape(-1)
        V = np.array(self.V, dtype=np.float64, copy=True)
        if W.ndim != 2 or V.ndim != 2 or W.shape[1] != len(fixed_row) or V.shape[1] != len(fixed_row):
            raise InvalidArgumentError('W, fixed_row and V must agree on the rank k')
        if np.any(fixed_row == 0):
            raise InvalidArgumentError('every entry of the fixed row must be non-zero')
        for array in (W, fixed_row, V):
            array.setflags(write=False)
        object.__setattr__(self, 'W', W)
        object.__setattr__(self, 'fixed_row', fixed_row)
        object.__setattr__(self, 'V', V)

    @property
    def u0(self) -> float:
        return float(np.min(np.abs(self.fixed_row)))

    def embed(self) -> FactorPair:
        return FactorPair(np.vstack([self.fixed_row[None, :], self.W]), self.V, ActivationKind.RELU)

    @classmethod
    def from_factor_pair(cls, fp: FactorPair) -> 'ReluFixedRow':
        if fp.activation is not ActivationKind.RELU:
            raise UnsupportedActivationError('the fixed-row parameterization is defined for ReLU only')
        return cls(fp.U[1:], fp.U[0], fp.V)


def _check_vectors(fp: FactorPair, x: np.ndarray, y: np.ndarray) -> None:
    if x.shape[-1] != fp.d1 or y.shape[-1] != fp.d2:
        raise InvalidArgumentError(f'feature shapes {x.shape}, {y.shape} do not match factors ({fp.d1}, {fp.d2})')


def predict_rows(fp: FactorPair, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Predicts the rating for each aligned pair of rows (X[t], Y[t]).
    :param fp: the parameters.
    :param X: user features, given as an array of dimensions m x d1.
    :param Y: item features, given as an array of dimensions m x d2.
    :return: an array of m predictions.
    """
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    _check_vectors(fp, X, Y)
    return np.sum(phi(fp.activation, X @ fp.U) * phi(fp.activation, Y @ fp.V), axis=1)


def predict(fp: FactorPair, x: np.ndarray, y: np.ndarray) -> float:
    """A(x, y) = sum_i phi(u_i^T x) phi(v_i^T y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise InvalidArgumentError('predict takes a single feature vector per side')
    return float(predict_rows(fp, x[None, :], y[None, :])[0])


def residual_h(fp: FactorPair, truth: FactorPair, x: np.ndarray, y: np.ndarray) -> float:
    """h_{x,y}(U, V): the current prediction minus the ground-truth prediction."""
    return predict(fp, x, y) - predict(truth, x, y)


def predict_matrix(fp: FactorPair, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """The full n1 x n2 score matrix phi(XU) phi(YV)^T."""
    _check_vectors(fp, X, Y)
    return phi(fp.activation, X @ fp.U) @ phi(fp.activation, Y @ fp.V).T


class ObservedTerms:
    """Pre-activations and activations at the observed rows, shared by loss, gradient and Hessian code."""

    def __init__(self, fp: FactorPair, fs: FeatureSet, obs: ObservationSet):
        if fs.d1 != fp.d1 or fs.d2 != fp.d2:
            raise InvalidArgumentError(f'features ({fs.d1}, {fs.d2}) do not match factors ({fp.d1}, {fp.d2})')
        obs.check_against(fs)
        kind = fp.activation
        self.X = fs.X[obs.rows]
        self.Y = fs.Y[obs.cols]
        self.P = self.X @ fp.U
        self.Q = self.Y @ fp.V
        self.phi_P = phi(kind, self.P)
        self.phi_Q = phi(kind, self.Q)
        self.prediction = np.sum(self.phi_P * self.phi_Q, axis=1)
        self.residual = self.prediction - obs.ratings
        self.count = len(obs)


def loss(fp: FactorPair, fs: FeatureSet, obs: ObservationSet) -> LossValue:
    """The empirical squared loss (1 / (2|Omega|)) sum (prediction - rating)^2, duplicates counted with multiplicity.
    :param fp: the parameters.
    :param fs: the features indexed by obs.
    :param obs: the observations.
    :return: the LossValue.
    """
    terms = ObservedTerms(fp, fs, obs)
    return LossValue(float(np.sum(terms.residual ** 2) / (2.0 * terms.count)))


def _gradient_from_terms(fp: FactorPair, terms: ObservedTerms) -> GradientPair:
    kind = fp.activation
    weights = terms.residual[:, None] / terms.count
    # d/du_i: residual * phi'(u_i^T x) * phi(v_i^T y) * x, averaged over observations
    gU = terms.X.T @ (weights * phi_prime(kind, terms.P) * terms.phi_Q)
    gV = terms.Y.T @ (weights * phi_prime(kind, terms.Q) * terms.phi_P)
    return GradientPair(gU, gV)


def gradient(fp: FactorPair, fs: FeatureSet, obs: ObservationSet) -> GradientPair:
    """Analytic gradient of loss with respect to (U, V)."""
    return _gradient_from_terms(fp, ObservedTerms(fp, fs, obs))


def loss_and_gradient(fp: FactorPair, fs: FeatureSet, obs: ObservationSet):
    terms = ObservedTerms(fp, fs, obs)
    return LossValue(float(np.sum(terms.residual ** 2) / (2.0 * terms.count))), _gradient_from_terms(fp, terms)


def gradient_tied(W: np.ndarray, kind: ActivationKind, fs: FeatureSet, obs: ObservationSet) -> np.ndarray:
    """Gradient of f(W, W) when users and items share one feature matrix and one parameter.
    :return: the sum of the U- and V-partials, given as an array of dimensions d x k.
    """
    if fs.d1 != fs.d2:
        raise InvalidArgumentError('tied parameters need equal user and item feature dimensions')
    g = gradient(FactorPair(W, W, kind), fs, obs)
    return g.gU + g.gV


def _pu_terms(fp: FactorPair, fs: FeatureSet, obs: ObservationSet, beta: float, cell_budget: int):
    if beta < 0:
        raise InvalidArgumentError(f'beta must be non-negative, got {beta}')
    if fs.n1 * fs.n2 > cell_budget:
        raise ResourceLimitError(f'{fs.n1} x {fs.n2} grid exceeds the cell budget of {cell_budget}')
    if fs.d1 != fp.d1 or fs.d2 != fp.d2:
        raise InvalidArgumentError(f'features ({fs.d1}, {fs.d2}) do not match factors ({fp.d1}, {fp.d2})')
    obs.check_against(fs)

    kind = fp.activation
    P = fs.X @ fp.U
    Q = fs.Y @ fp.V
    A = phi(kind, P)
    B = phi(kind, Q)
    scores = A @ B.T

    # mark the distinct observed cells; everything else is the unlabeled complement
    observed = np.zeros(scores.shape, dtype=bool)
    observed[obs.rows, obs.cols] = True
    weighted = np.where(observed, 0.0, beta * scores)
    complement_loss = 0.5 * beta * float(np.sum(scores[~observed] ** 2))

    observed_residual = scores[obs.rows, obs.cols] - obs.ratings
    observed_loss = 0.5 * float(np.sum(observed_residual ** 2))
    # duplicates accumulate, matching the multiset sum over Omega
    np.add.at(weighted, (obs.rows, obs.cols), observed_residual)
    return observed_loss + complement_loss, weighted, P, Q, A, B


def loss_pu(fp: FactorPair, fs: FeatureSet, obs: ObservationSet, beta: float,
            cell_budget: int = DEFAULT_CELL_BUDGET) -> LossValue:
    """Positive-unlabeled objective (1/2)(sum_Omega (pred - a)^2 + beta * sum_{Omega^c} pred^2).
    :param beta: the penalty weight on unobserved cells.
    :param cell_budget: the largest n1 * n2 grid allowed.
    """
    value = _pu_terms(fp, fs, obs, beta, cell_budget)[0]
    return LossValue(value, Normalization.HALF_SUM)


def gradient_pu(fp: FactorPair, fs: FeatureSet, obs: ObservationSet, beta: float,
                cell_budget: int = DEFAULT_CELL_BUDGET) -> GradientPair:
    _, weighted, P, Q, A, B = _pu_terms(fp, fs, obs, beta, cell_budget)
    kind = fp.activation
    gU = fs.X.T @ ((weighted @ B) * phi_prime(kind, P))
    gV = fs.Y.T @ ((weighted.T @ A) * phi_prime(kind, Q))
    return GradientPair(gU, gV)


def loss_relu_fixed(rf: ReluFixedRow, fs: FeatureSet, obs: ObservationSet) -> LossValue:
    """Loss of the ReLU objective over the free parameters (W, V) with the first row of U pinned."""
    return loss(rf.embed(), fs, obs)


def gradient_relu_fixed(rf: ReluFixedRow, fs: FeatureSet, obs: ObservationSet) -> GradientPair:
    """Gradient over (W, V); the pinned row has no gradient component."""
    g = gradient(rf.embed(), fs, obs)
    return GradientPair(g.gU[1:], g.gV)
