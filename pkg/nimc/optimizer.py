import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
import pandas as pd

from nimc.activations import phi
from nimc.core import (ActivationKind, FactorPair, FeatureSet, InsufficientDataError, InvalidArgumentError,
                       NumericError, ObservationSet, PathLike, RngSeed, sample_observations)
from nimc.hessian import assemble_empirical_hessian, lambda_max_power
from nimc.model import (GradientPair, gradient_pu, gradient_tied, loss, loss_and_gradient, loss_pu)

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ['iter', 'loss', 'param_error', 'test_error', 'grad_norm']

# substreams of the training seed
_TEST_STREAM = 0
_PROBE_STREAM = 1
_RESAMPLE_STREAM = 2


@dataclass(frozen=True)
class FreshPerIter:
    """Draw a new observation multiset of size m from the full grid at every iteration."""
    m: int

    def __post_init__(self):
        if self.m < 1:
            raise InvalidArgumentError(f'fresh sample size must be at least 1, got {self.m}')


def parse_resample(text: Optional[str]) -> Optional[FreshPerIter]:
    """Parses 'none' or 'fresh:<m>'."""
    if text is None or text.strip().lower() == 'none':
        return None
    mode, _, size = text.partition(':')
    if mode.strip().lower() != 'fresh' or not size.strip().isdigit():
        raise InvalidArgumentError(f"resample must be 'none' or 'fresh:<m>', got {text!r}")
    return FreshPerIter(int(size))


@dataclass(frozen=True)
class TrainConfig:
    """Gradient descent settings.
    :param step_size: eta; None picks 1 / (2 lambda_max) of the Hessian at the initial point.
    :param max_iters: the iteration cap.
    :param resample: None to reuse the given observations, or FreshPerIter.
    :param tolerance: stop once the relative test error is at most this (needs the ground truth).
    :param n_test: the number of fresh test users and items for the test error.
    :param grad_tolerance: stop once the gradient norm is at most this.
    :param seed: used when train is not handed a random stream.
    """
    step_size: Optional[float] = None
    max_iters: int = 1000
    resample: Optional[FreshPerIter] = None
    tolerance: float = 1e-3
    n_test: int = 100
    grad_tolerance: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.step_size is not None and not self.step_size > 0:
            raise InvalidArgumentError(f'step_size must be positive, got {self.step_size}')
        if not self.tolerance > 0:
            raise InvalidArgumentError(f'tolerance must be positive, got {self.tolerance}')
        if self.max_iters < 0:
            raise InvalidArgumentError(f'max_iters must be non-negative, got {self.max_iters}')
        if self.n_test < 1:
            raise InvalidArgumentError(f'n_test must be at least 1, got {self.n_test}')


@dataclass(frozen=True)
class TrainRecord:
    iter: int
    loss: float
    param_error: Optional[float]
    test_error: Optional[float]
    grad_norm: float


@dataclass
class TrainTrace:
    records: List[TrainRecord] = field(default_factory=list)
    step_size: Optional[float] = None
    # multiset digest of the observations used at each iteration
    digests: List[str] = field(default_factory=list)

    def append(self, record: TrainRecord) -> None:
        if self.records and record.iter <= self.records[-1].iter:
            raise InvalidArgumentError('trace records must have increasing iteration numbers')
        values = [record.loss, record.grad_norm, record.param_error, record.test_error]
        if not all(np.isfinite(value) for value in values if value is not None):
            raise NumericError(f'non-finite value in training record {record}')
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def last(self) -> TrainRecord:
        return self.records[-1]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([[getattr(record, column) for column in TRACE_COLUMNS] for record in self.records],
                            columns=TRACE_COLUMNS)

    def write_csv(self, path: PathLike) -> None:
        self.to_frame().to_csv(path, index=False, float_format='%.17g')


@dataclass(frozen=True, eq=False)
class HeldOutSet:
    """Fresh users X_t and items Y_t drawn once for test-error evaluation."""
    X: np.ndarray
    Y: np.ndarray

    @classmethod
    def draw(cls, d1: int, d2: int, n_test: int, rng: RngSeed) -> 'HeldOutSet':
        if n_test < 1:
            raise InvalidArgumentError(f'n_test must be at least 1, got {n_test}')
        generator = rng.generator()
        return cls(generator.standard_normal((n_test, d1)), generator.standard_normal((n_test, d2)))

    def relative_error(self, fp: FactorPair, truth: FactorPair) -> float:
        kind = truth.activation
        target = phi(kind, self.X @ truth.U) @ phi(kind, self.Y @ truth.V).T
        estimate = phi(fp.activation, self.X @ fp.U) @ phi(fp.activation, self.Y @ fp.V).T
        denominator = np.linalg.norm(target)
        if denominator == 0:
            raise NumericError('the ground-truth test matrix is zero, relative error is undefined')
        return float(np.linalg.norm(estimate - target) / denominator)


def relative_test_error(fp: FactorPair, truth: FactorPair, n_test: int, rng: RngSeed) -> float:
    """|phi(X_t U) phi(Y_t V)^T - phi(X_t U*) phi(Y_t V*)^T|_F / |phi(X_t U*) phi(Y_t V*)^T|_F on fresh features.
    :param fp: the estimate.
    :param truth: the ground truth.
    :param n_test: the number of test users and of test items.
    :param rng: the random stream for the test features.
    :return: the relative Frobenius error.
    """
    if fp.d1 != truth.d1 or fp.d2 != truth.d2:
        raise InvalidArgumentError('estimate and truth have different feature dimensions')
    return HeldOutSet.draw(truth.d1, truth.d2, n_test, rng).relative_error(fp, truth)


def symmetric_test_error(U: np.ndarray, U_star: np.ndarray, kind: ActivationKind, n_test: int,
                         rng: RngSeed) -> float:
    """The U-only criterion |phi(X U) phi(X U)^T - phi(X U*) phi(X U*)^T|_F / |phi(X U*) phi(X U*)^T|_F."""
    kind = ActivationKind.parse(kind)
    if n_test < 1:
        raise InvalidArgumentError(f'n_test must be at least 1, got {n_test}')
    X = rng.generator().standard_normal((n_test, U_star.shape[0]))
    A = phi(kind, X @ U)
    A_star = phi(kind, X @ U_star)
    target = A_star @ A_star.T
    denominator = np.linalg.norm(target)
    if denominator == 0:
        raise NumericError('the ground-truth test matrix is zero, relative error is undefined')
    return float(np.linalg.norm(A @ A.T - target) / denominator)


def param_error(fp: FactorPair, truth: FactorPair) -> float:
    """|U - U*|_F^2 + |V - V*|_F^2."""
    return float(np.sum((fp.U - truth.U) ** 2) + np.sum((fp.V - truth.V) ** 2))


def _apply_step(fp: FactorPair, grad: GradientPair, eta: float) -> FactorPair:
    if not grad.is_finite():
        raise NumericError(f'non-finite gradient at |U|_F = {np.linalg.norm(fp.U):.6g}, '
                           f'|V|_F = {np.linalg.norm(fp.V):.6g}')
    return fp.with_factors(fp.U - eta * grad.gU, fp.V - eta * grad.gV)


def gd_step(fp: FactorPair, fs: FeatureSet, obs: ObservationSet, eta: float) -> FactorPair:
    """One full-batch gradient step (U, V) - eta * grad f_Omega(U, V)."""
    if eta < 0:
        raise InvalidArgumentError(f'step size must be non-negative, got {eta}')
    _, grad = loss_and_gradient(fp, fs, obs)
    return _apply_step(fp, grad, eta)


def probe_step_size(fp: FactorPair, fs: FeatureSet, obs: ObservationSet, rng: RngSeed) -> float:
    """eta = 1 / (2 lambda_max) with lambda_max from power iteration on the empirical Hessian at fp."""
    if fp.activation is ActivationKind.LINEAR:
        raise InvalidArgumentError('the Linear activation needs an explicit step size')
    hessian = assemble_empirical_hessian(fp, None, fs, obs)
    largest = lambda_max_power(hessian, rng)
    if not largest > 0:
        raise NumericError(f'cannot choose a step size, the Hessian has lambda_max = {largest}')
    return 0.5 / largest


def _gradient_lambda_max(gradient_fn: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, rng: RngSeed,
                         iters: int = 30) -> float:
    # power iteration on central-difference Hessian-vector products
    vector = rng.generator().standard_normal(theta.shape)
    vector /= np.linalg.norm(vector)
    epsilon = 1e-5 * max(1.0, float(np.linalg.norm(theta)))
    estimate = 0.0
    for _ in range(iters):
        image = (gradient_fn(theta + epsilon * vector) - gradient_fn(theta - epsilon * vector)) / (2.0 * epsilon)
        norm = float(np.linalg.norm(image))
        if norm == 0:
            break
        estimate = abs(float(np.sum(vector * image)))
        vector = image / norm
    return estimate


def train(fp0: FactorPair, truth: Optional[FactorPair], fs: FeatureSet, obs: Optional[ObservationSet],
          cfg: TrainConfig, rng: RngSeed = None) -> Tuple[FactorPair, TrainTrace]:
    """Full-batch gradient descent on the empirical loss.
    :param fp0: the initial parameters.
    :param truth: the ground truth, needed for param/test errors, the tolerance stop and fresh resampling.
    :param fs: the features.
    :param obs: the observations; with FreshPerIter it may be None and is only used to probe the step size.
    :param cfg: the TrainConfig.
    :param rng: the random stream; defaults to RngSeed(cfg.seed).
    :return: the final parameters and the trace, one record per visited iterate.
    """
    rng = rng or RngSeed(cfg.seed)
    if cfg.resample is not None and truth is None:
        raise InvalidArgumentError('fresh resampling needs the ground truth to label new observations')
    if obs is None and cfg.resample is None:
        raise InvalidArgumentError('observations are required without fresh resampling')
    if truth is not None and (truth.d1 != fp0.d1 or truth.d2 != fp0.d2 or truth.k != fp0.k):
        raise InvalidArgumentError('initial parameters and truth have different shapes')

    def observations(iteration: int) -> ObservationSet:
        if cfg.resample is None:
            return obs
        return sample_observations(fs, truth, cfg.resample.m, rng.child(_RESAMPLE_STREAM).child(iteration))

    test_set = HeldOutSet.draw(fp0.d1, fp0.d2, cfg.n_test, rng.child(_TEST_STREAM)) if truth is not None else None
    eta = cfg.step_size
    if eta is None:
        eta = probe_step_size(fp0, fs, obs if obs is not None else observations(0), rng.child(_PROBE_STREAM))
    trace = TrainTrace(step_size=eta)
    logger.info('training %s model (d1=%d, d2=%d, k=%d) with eta=%.6g for at most %d iterations',
                fp0.activation.value, fp0.d1, fp0.d2, fp0.k, eta, cfg.max_iters)

    fp = fp0
    for iteration in range(cfg.max_iters + 1):
        current = observations(iteration)
        value, grad = loss_and_gradient(fp, fs, current)
        record = TrainRecord(iteration, value.value,
                             param_error(fp, truth) if truth is not None else None,
                             test_set.relative_error(fp, truth) if truth is not None else None,
                             grad.norm())
        trace.append(record)
        trace.digests.append(current.multiset_digest() if cfg.resample is not None else '')
        logger.debug('iter %d: loss %.6g, grad %.6g, test error %s', iteration, record.loss, record.grad_norm,
                     record.test_error)

        # stopping rules
        if record.test_error is not None and record.test_error <= cfg.tolerance:
            break
        if record.grad_norm <= cfg.grad_tolerance or iteration == cfg.max_iters:
            break
        fp = _apply_step(fp, grad, eta)

    logger.info('training stopped at iteration %d: loss %.6g, test error %s', trace.last.iter, trace.last.loss,
                trace.last.test_error)
    return fp, trace


def train_tied(W0: np.ndarray, kind: ActivationKind, fs: FeatureSet, obs: ObservationSet, cfg: TrainConfig,
               rng: RngSeed = None) -> Tuple[np.ndarray, TrainTrace]:
    """Gradient descent on f(W, W) with one shared parameter for users and items (Y = X).
    :return: the final W and the trace (loss and gradient norm only).
    """
    kind = ActivationKind.parse(kind)
    rng = rng or RngSeed(cfg.seed)
    W = np.array(W0, dtype=np.float64, copy=True)

    def tied_gradient(theta):
        return gradient_tied(theta, kind, fs, obs)

    eta = cfg.step_size
    if eta is None:
        eta = 0.5 / max(_gradient_lambda_max(tied_gradient, W, rng.child(_PROBE_STREAM)), np.finfo(float).tiny)
    trace = TrainTrace(step_size=eta)
    logger.info('tied training (d=%d, k=%d) with eta=%.6g', W.shape[0], W.shape[1], eta)

    for iteration in range(cfg.max_iters + 1):
        grad = tied_gradient(W)
        if not np.all(np.isfinite(grad)):
            raise NumericError(f'non-finite gradient at |W|_F = {np.linalg.norm(W):.6g}')
        value = loss(FactorPair(W, W, kind), fs, obs).value
        trace.append(TrainRecord(iteration, value, None, None, float(np.linalg.norm(grad))))
        logger.debug('iter %d: loss %.6g', iteration, value)
        if trace.last.grad_norm <= cfg.grad_tolerance or iteration == cfg.max_iters:
            break
        W = W - eta * grad
    return W, trace


def train_pu(fp0: FactorPair, fs: FeatureSet, positives: ObservationSet, beta: float, cfg: TrainConfig,
             rng: RngSeed = None) -> Tuple[FactorPair, TrainTrace]:
    """Gradient descent on the positive-unlabeled objective.
    :param fp0: the initial parameters.
    :param fs: the features; the whole n1 x n2 grid enters the objective.
    :param positives: the observed positive cells with their ratings.
    :param beta: the penalty weight on unobserved cells.
    :param cfg: the TrainConfig; only step_size, max_iters, grad_tolerance and seed apply.
    :param rng: the random stream used to probe the step size.
    :return: the final parameters and the trace.
    """
    rng = rng or RngSeed(cfg.seed)
    kind = fp0.activation
    d1k = fp0.d1 * fp0.k

    def unpack(theta):
        return FactorPair(theta[:d1k].reshape(fp0.d1, fp0.k), theta[d1k:].reshape(fp0.d2, fp0.k), kind)

    def flat_gradient(theta):
        grad = gradient_pu(unpack(theta), fs, positives, beta)
        return np.concatenate([grad.gU.ravel(), grad.gV.ravel()])

    eta = cfg.step_size
    if eta is None:
        theta0 = np.concatenate([fp0.U.ravel(), fp0.V.ravel()])
        eta = 0.5 / max(_gradient_lambda_max(flat_gradient, theta0, rng.child(_PROBE_STREAM)), np.finfo(float).tiny)
    trace = TrainTrace(step_size=eta)
    logger.info('positive-unlabeled training with beta=%.6g, eta=%.6g', beta, eta)

    fp = fp0
    for iteration in range(cfg.max_iters + 1):
        grad = gradient_pu(fp, fs, positives, beta)
        value = loss_pu(fp, fs, positives, beta).value
        trace.append(TrainRecord(iteration, value, None, None, grad.norm()))
        logger.debug('iter %d: loss %.6g', iteration, value)
        if trace.last.grad_norm <= cfg.grad_tolerance or iteration == cfg.max_iters:
            break
        fp = _apply_step(fp, grad, eta)
    return fp, trace


def _usable_errors(trace: TrainTrace) -> Tuple[np.ndarray, np.ndarray]:
    pairs = [(record.iter, record.param_error) for record in trace.records
             if record.param_error is not None and record.param_error > 0]
    if not pairs:
        return np.empty(0), np.empty(0)
    iterations, errors = zip(*pairs)
    return np.array(iterations, dtype=np.float64), np.array(errors)


def contraction_rate(trace: TrainTrace) -> float:
    """Per-step contraction factor: exp of the least-squares slope of log(param_error) against iteration."""
    iterations, errors = _usable_errors(trace)
    if len(errors) < 5:
        raise InsufficientDataError(f'need at least 5 records with positive param_error, got {len(errors)}')
    slope = np.polyfit(iterations, np.log(errors), 1)[0]
    return float(np.exp(slope))


def two_point_rate(trace: TrainTrace) -> float:
    """(last / first)^(1 / (iterations between them)) over the records with positive param_error."""
    iterations, errors = _usable_errors(trace)
    if len(errors) < 2:
        raise InsufficientDataError(f'need at least 2 records with positive param_error, got {len(errors)}')
    return float((errors[-1] / errors[0]) ** (1.0 / (iterations[-1] - iterations[0])))
