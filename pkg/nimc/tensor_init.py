import itertools
import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from numpy.polynomial.hermite_e import hermevander
from scipy.linalg import eig, eigh, svd
from scipy.optimize import bisect, least_squares

from nimc.activations import gamma_sigma
from nimc.core import (ActivationKind, DegenerateSpectrumError, FactorPair, FeatureSet, InsufficientDataError,
                       InvalidArgumentError, ObservationSet, OutOfRangeError, RngSeed, UnsupportedActivationError)
from nimc.model import loss

logger = logging.getLogger(__name__)

# observations folded into the third-moment tensor at once
_CHUNK = 20000
# pairings are searched exhaustively up to this rank
_EXHAUSTIVE_PAIRING_RANK = 6
# random slice pairs tried by the simultaneous diagonalization
_SLICE_ATTEMPTS = 10
# smallest column norm the weight inversion returns
_SIGMA_FLOOR = 1e-6
ESTIMATORS = ('regression', 'moment')


@dataclass(frozen=True)
class TensorInitConfig:
    """Settings of the tensor initialization.
    :param estimator: 'regression' fits the ratings on Hermite products of degree <= 3 per distinct user;
    'moment' averages the rating-weighted third-order score directly.
    """
    restarts: int = 50
    iterations: int = 100
    tolerance: float = 1e-10
    sigma_max: float = 10.0
    bisection_tolerance: float = 1e-8
    estimator: str = 'regression'

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise InvalidArgumentError(f'estimator must be one of {ESTIMATORS}, got {self.estimator!r}')


@dataclass(frozen=True, eq=False)
class MomentTensor3:
    T: np.ndarray
    n_used: int

    @property
    def d(self) -> int:
        return self.T.shape[0]


@dataclass(frozen=True, eq=False)
class InitEstimate:
    """One side of the tensor initialization.
    :param directions: unit columns, sign-resolved, given as an array of dimensions d x k.
    :param weights: the estimated tensor weights alpha_i (signed).
    :param norms: the recovered column norms.
    """
    directions: np.ndarray
    weights: np.ndarray
    norms: np.ndarray

    @property
    def U0(self) -> np.ndarray:
        return self.directions * self.norms[None, :]


@dataclass(frozen=True, eq=False)
class TensorInitialization:
    u_side: InitEstimate
    v_side: InitEstimate
    factor_pair: FactorPair


@dataclass(frozen=True, eq=False)
class ColumnAlignment:
    permutation: np.ndarray
    signs: np.ndarray
    cosines: np.ndarray

    @property
    def min_cosine(self) -> float:
        return float(np.min(self.cosines))


def symmetrize(T: np.ndarray) -> np.ndarray:
    """Averages a 3-way array over the six permutations of its indices."""
    return sum(np.transpose(T, axes) for axes in itertools.permutations(range(3))) / 6.0


def _contract_identity(s: np.ndarray) -> np.ndarray:
    # s (x)~ I = sum_j s e_j e_j + e_j s e_j + e_j e_j s
    eye = np.eye(len(s))
    return (np.einsum('a,bc->abc', s, eye) + np.einsum('b,ac->abc', s, eye)
            + np.einsum('c,ab->abc', s, eye))


def _side(fs: FeatureSet, obs: ObservationSet, side: str) -> Tuple[np.ndarray, np.ndarray]:
    # the observed row (or column) indices and the feature table they index
    if len(obs) == 0:
        raise InvalidArgumentError('observation set is empty')
    obs.check_against(fs)
    if side == 'x':
        return obs.rows, fs.X
    if side == 'y':
        return obs.cols, fs.Y
    raise InvalidArgumentError(f"side must be 'x' or 'y', got {side!r}")


def empirical_m3(fs: FeatureSet, obs: ObservationSet, side: str = 'x', center: bool = False) -> MomentTensor3:
    """The empirical third-moment score tensor (1/|Omega|) sum a (x^{(x)3} - x (x)~ I).
    :param fs: the features.
    :param obs: the observations.
    :param side: 'x' for the user-side tensor, 'y' for the mirrored item-side tensor.
    :param center: subtract the mean rating first; constants have zero population score, so only the variance
    changes.
    :return: the symmetrized MomentTensor3.
    """
    index, table = _side(fs, obs, side)
    features = table[index]
    ratings = obs.ratings - np.mean(obs.ratings) if center else obs.ratings
    m, d = features.shape
    T = np.zeros((d, d, d))
    for start in range(0, m, _CHUNK):
        chunk = slice(start, start + _CHUNK)
        weighted = ratings[chunk, None] * features[chunk]
        T += np.einsum('ta,tb,tc->abc', weighted, features[chunk], features[chunk], optimize=True)
    first = ratings @ features
    T = (T - _contract_identity(first)) / m
    return MomentTensor3(symmetrize(T), m)


def hermite_terms(d: int) -> List[Tuple[int, ...]]:
    """Multi-indices of the Hermite products of total degree at most 3, as sorted coordinate tuples."""
    return [term for degree in range(4) for term in itertools.combinations_with_replacement(range(d), degree)]


def hermite_design(features: np.ndarray, terms: List[Tuple[int, ...]]) -> np.ndarray:
    """One column per term: prod_j He_{c_j}(x_j), where c_j counts coordinate j in the term."""
    # He_0 .. He_3 of every coordinate, shape n x d x 4
    values = hermevander(features, 3)
    columns = []
    for term in terms:
        column = np.ones(features.shape[0])
        for coordinate, count in Counter(term).items():
            column = column * values[:, coordinate, count]
        columns.append(column)
    return np.stack(columns, axis=1)


def regressed_m3(fs: FeatureSet, obs: ObservationSet, side: str = 'x') -> MomentTensor3:
    """The third-moment score tensor estimated by least squares on Hermite products.
    The mean rating of every distinct user is regressed, with the user's observation count as weight, on all
    Hermite products of degree <= 3 of its features. Under Gaussian features the coefficient of the product for
    (a, b, c), times the factorials of its coordinate counts, is E[A (x_a x_b x_c - ...)], the same entry that
    empirical_m3 averages, without the variance carried by the linear and quadratic parts of the ratings.
    :param fs: the features.
    :param obs: the observations.
    :param side: 'x' for the user-side tensor, 'y' for the item-side tensor.
    :return: the symmetric MomentTensor3.
    """
    index, table = _side(fs, obs, side)
    d = table.shape[1]
    present, inverse, counts = np.unique(index, return_inverse=True, return_counts=True)
    terms = hermite_terms(d)
    if len(present) <= len(terms):
        raise InsufficientDataError(f'{len(present)} distinct {"users" if side == "x" else "items"} cannot fit '
                                    f'{len(terms)} Hermite coefficients in d={d}')
    means = np.bincount(inverse.ravel(), weights=obs.ratings, minlength=len(present)) / counts
    root = np.sqrt(counts)
    design = hermite_design(table[present], terms) * root[:, None]
    coefficients = np.linalg.lstsq(design, means * root, rcond=None)[0]

    T = np.zeros((d, d, d))
    for term, coefficient in zip(terms, coefficients):
        if len(term) != 3:
            continue
        scale = math.prod(math.factorial(count) for count in Counter(term).values())
        for position in set(itertools.permutations(term)):
            T[position] = coefficient * scale
    return MomentTensor3(T, len(obs))


def reconstruct(directions: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sum_i weights[i] * directions[:, i]^{(x)3}."""
    return np.einsum('i,ai,bi,ci->abc', weights, directions, directions, directions)


def decomposition_residual(T: np.ndarray, directions: np.ndarray, weights: np.ndarray) -> float:
    """Relative Frobenius residual of a rank-k fit."""
    return float(np.linalg.norm(T - reconstruct(directions, weights)) / np.linalg.norm(T))


def _fit_weights(T: np.ndarray, directions: np.ndarray) -> np.ndarray:
    # least-squares weights for fixed directions, over vec(w_i^{(x)3})
    design = np.stack([np.einsum('a,b,c->abc', w, w, w).ravel() for w in directions.T], axis=1)
    return np.linalg.lstsq(design, T.ravel(), rcond=None)[0]


def _positive_weights(directions: np.ndarray, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # an odd-order tensor absorbs a sign flip of w_i into its weight
    signs = np.where(weights < 0, -1.0, 1.0)
    return directions * signs[None, :], weights * signs


def _unit_columns(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=0, keepdims=True)
    return matrix / np.where(norms > 0, norms, 1.0)


def _component_subspace(T: np.ndarray, k: int) -> np.ndarray:
    d = T.shape[0]
    # the top-k left singular subspace of the mode-1 unfolding holds the components
    left, singular_values, _ = svd(T.reshape(d, d * d), full_matrices=False)
    tolerance = max(d, d * d) * np.finfo(np.float64).eps * singular_values[0]
    if singular_values[0] == 0 or np.sum(singular_values > tolerance) < k:
        raise DegenerateSpectrumError(f'tensor unfolding has rank below k={k} '
                                      f'(singular values {singular_values[:k + 1]})')
    return left[:, :k]


def _slice_candidates(core: np.ndarray, generator: np.random.Generator) -> List[np.ndarray]:
    k = core.shape[0]
    # two random slices C diag(<c_i, theta>) C^T share the eigenvectors C; every pair with a real spectrum
    # gives one candidate
    candidates = []
    for _ in range(_SLICE_ATTEMPTS):
        slice_a = np.einsum('ijl,l->ij', core, generator.standard_normal(k))
        slice_b = np.einsum('ijl,l->ij', core, generator.standard_normal(k))
        try:
            ratio = np.linalg.solve(slice_b.T, slice_a.T).T
        except np.linalg.LinAlgError:
            continue
        values, vectors = eig(ratio)
        if np.max(np.abs(values.imag)) > 1e-8 * np.max(np.abs(values)):
            continue
        candidates.append(_unit_columns(np.real(vectors)))
    if not candidates:
        logger.warning('none of %d slice pairs had a real spectrum, falling back to the whitened power method',
                       _SLICE_ATTEMPTS)
    return candidates


def _power_component(T: np.ndarray, rng: RngSeed, config: TensorInitConfig) -> Tuple[np.ndarray, float]:
    k = T.shape[0]
    # one starting vector per restart, each from its own substream
    theta = np.stack([rng.child(restart).generator().standard_normal(k) for restart in range(config.restarts)],
                     axis=1)
    theta /= np.linalg.norm(theta, axis=0, keepdims=True)
    for _ in range(config.iterations):
        updated = np.einsum('abc,bl,cl->al', T, theta, theta)
        updated /= np.maximum(np.linalg.norm(updated, axis=0, keepdims=True), np.finfo(np.float64).tiny)
        change = np.max(np.abs(updated - theta))
        theta = updated
        if change <= config.tolerance:
            break

    # keep the restart with the largest value, then polish it
    values = np.einsum('abc,al,bl,cl->l', T, theta, theta, theta)
    best = theta[:, int(np.argmax(values))]
    for _ in range(config.iterations):
        updated = np.einsum('abc,b,c->a', T, best, best)
        norm = np.linalg.norm(updated)
        if norm == 0:
            break
        updated /= norm
        change = np.max(np.abs(updated - best))
        best = updated
        if change <= config.tolerance:
            break
    return best, float(np.einsum('abc,a,b,c->', T, best, best, best))


def _whitening(second: np.ndarray) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    # W with W^T second W = I and its inverse transpose; None when second is not positive definite
    eigenvalues, eigenvectors = eigh(second)
    if eigenvalues[0] <= len(eigenvalues) * np.finfo(np.float64).eps * max(eigenvalues[-1], 0.0) \
            or eigenvalues[0] <= 0:
        return None
    return eigenvectors / np.sqrt(eigenvalues)[None, :], eigenvectors * np.sqrt(eigenvalues)[None, :]


def _unfolding_second_moment(core: np.ndarray) -> np.ndarray:
    # for orthogonal components the square root of the unfolding Gram matrix is sum_i |w_i| a_i a_i^T
    k = core.shape[0]
    unfolding = core.reshape(k, k * k)
    eigenvalues, eigenvectors = eigh(unfolding @ unfolding.T)
    return (eigenvectors * np.sqrt(np.maximum(eigenvalues, 0.0))[None, :]) @ eigenvectors.T


def _power_candidate(core: np.ndarray, second: np.ndarray, rng: RngSeed,
                     config: TensorInitConfig) -> Optional[np.ndarray]:
    k = core.shape[0]
    whitening = _whitening(second)
    if whitening is None:
        return None
    whiten, unwhiten = whitening
    whitened = np.einsum('abc,ai,bj,cl->ijl', core, whiten, whiten, whiten)
    components = np.empty((k, k))
    for component in range(k):
        vector, value = _power_component(whitened, rng.child(component), config)
        logger.debug('deflated component %d with whitened eigenvalue %.6g', component, value)
        whitened = whitened - value * np.einsum('a,b,c->abc', vector, vector, vector)
        components[:, component] = unwhiten @ vector
    return _unit_columns(components)


def _fit_residual(core: np.ndarray, components: np.ndarray) -> float:
    return float(np.linalg.norm(core - reconstruct(components, _fit_weights(core, components))))


def _least_squares_polish(core: np.ndarray, components: np.ndarray) -> np.ndarray:
    k = core.shape[0]
    # sum_i w_i a_i^{(x)3} = sum_i f_i^{(x)3} with f_i = cbrt(w_i) a_i, so the factors alone parameterize the fit
    start = components * np.cbrt(_fit_weights(core, components))[None, :]
    ones = np.ones(k)

    def residual(flat):
        return (reconstruct(flat.reshape(k, k), ones) - core).ravel()

    fit = least_squares(residual, start.ravel(), method='lm', xtol=1e-12, ftol=1e-12, gtol=1e-12)
    factors = fit.x.reshape(k, k)
    if np.any(np.linalg.norm(factors, axis=0) == 0) or \
            np.linalg.norm(residual(fit.x)) > np.linalg.norm(residual(start.ravel())):
        return components
    return _unit_columns(factors)


def decompose_rank_k(T: MomentTensor3, k: int, rng: RngSeed,
                     config: TensorInitConfig = TensorInitConfig()) -> Tuple[np.ndarray, np.ndarray]:
    """Non-orthogonal rank-k decomposition T ~ sum_i w_i a_i^{(x)3} of a symmetric tensor.
    The tensor is first reduced to its k x k x k core on the top-k singular subspace of its unfolding. Candidate
    components come from simultaneous diagonalization of random slice pairs and from a robust tensor power method
    with restarts and deflation, run under two whitenings: the second moment of the best slice candidate and the
    square root of the unfolding Gram matrix. The candidate with the smallest residual is refined by
    Levenberg-Marquardt on the symmetric fit.
    :param T: the symmetric tensor.
    :param k: the rank.
    :param rng: the random stream.
    :param config: restart, iteration and tolerance settings.
    :return: unit directions (d x k) and their weights, all non-negative, sorted by decreasing weight.
    """
    if isinstance(T, MomentTensor3):
        tensor = T.T
    else:
        tensor = np.asarray(T, dtype=np.float64)
    d = tensor.shape[0]
    if not 1 <= k <= d:
        raise InvalidArgumentError(f'rank k={k} must satisfy 1 <= k <= d={d}')

    basis = _component_subspace(tensor, k)
    core = np.einsum('abc,ai,bj,cl->ijl', tensor, basis, basis, basis)

    candidates = _slice_candidates(core, rng.generator())
    seconds = [_unfolding_second_moment(core)]
    if candidates:
        best_slices = min(candidates, key=lambda components: _fit_residual(core, components))
        components, weights = _positive_weights(best_slices, _fit_weights(core, best_slices))
        seconds.insert(0, (components * weights[None, :]) @ components.T)
    for source, second in enumerate(seconds):
        refined = _power_candidate(core, second, rng.child(k).child(source), config)
        if refined is not None:
            candidates.append(refined)
    if not candidates:
        raise DegenerateSpectrumError(f'no rank-{k} candidate: complex slice spectra and singular whitenings')

    residuals = [_fit_residual(core, components) for components in candidates]
    logger.debug('candidate residuals %s', np.round(residuals, 8))
    components = _least_squares_polish(core, candidates[int(np.argmin(residuals))])

    directions = _unit_columns(basis @ components)
    directions, weights = _positive_weights(directions, _fit_weights(tensor, directions))
    order = np.argsort(-weights, kind='stable')
    return directions[:, order], weights[order]


def sigmoid_forward_map(sigma: float, gamma0_v: float = 0.5) -> float:
    """alpha(sigma) = gamma0_v (gamma_3(sigma) - 3 gamma_1(sigma)) for the sigmoid."""
    return gamma0_v * (gamma_sigma(ActivationKind.SIGMOID, 3, sigma)
                       - 3.0 * gamma_sigma(ActivationKind.SIGMOID, 1, sigma))


def invert_alpha_to_norm(kind: ActivationKind, alpha: float, gamma0_v: float = 0.5,
                         config: TensorInitConfig = TensorInitConfig()) -> float:
    """Recovers a column norm from its tensor weight by bisection on the monotone forward map.
    :param kind: must be the sigmoid.
    :param alpha: the signed weight alpha_i.
    :param gamma0_v: gamma_0 of the other factor's column, 1/2 for the sigmoid.
    :param config: the bracket end sigma_max and the bisection tolerance.
    :return: sigma with forward(sigma) = alpha.
    """
    kind = ActivationKind.parse(kind)
    if kind is not ActivationKind.SIGMOID:
        raise UnsupportedActivationError(f'norm inversion is only defined for the sigmoid, got {kind.value}')
    ceiling = sigmoid_forward_map(config.sigma_max, gamma0_v)
    low, high = sorted((0.0, ceiling))
    # the forward map runs monotonically from 0 at sigma = 0+ to its value at sigma_max
    if alpha == 0 or np.sign(alpha) != np.sign(ceiling) or abs(alpha) > abs(ceiling):
        raise OutOfRangeError(alpha, low, high)
    if abs(alpha) == abs(ceiling):
        return float(config.sigma_max)

    def gap(sigma):
        return abs(sigmoid_forward_map(sigma, gamma0_v)) - abs(alpha)

    floor = _SIGMA_FLOOR
    if gap(floor) >= 0:
        return floor
    return float(bisect(gap, floor, config.sigma_max, xtol=config.bisection_tolerance))


def _side_tensor(fs: FeatureSet, obs: ObservationSet, side: str, config: TensorInitConfig) -> MomentTensor3:
    if config.estimator == 'regression':
        try:
            return regressed_m3(fs, obs, side)
        except InsufficientDataError as error:
            logger.warning('%s; using the averaged moment tensor instead', error)
    return empirical_m3(fs, obs, side, center=True)


def clip_alpha(alpha: np.ndarray, gamma0_v: float = 0.5, config: TensorInitConfig = TensorInitConfig()) -> np.ndarray:
    """Moves estimated weights into the range the forward map attains on (0, sigma_max]: weights beyond the value at
    sigma_max go to it, and zero or wrongly signed weights go to the smallest representable weight of the right sign.
    """
    ceiling = sigmoid_forward_map(config.sigma_max, gamma0_v)
    low, high = sorted((ceiling, np.sign(ceiling) * np.finfo(np.float64).tiny))
    return np.clip(np.asarray(alpha, dtype=np.float64), low, high)


def _initialize_side(fs: FeatureSet, obs: ObservationSet, k: int, side: str, rng: RngSeed,
                     config: TensorInitConfig) -> InitEstimate:
    tensor = _side_tensor(fs, obs, side, config)
    directions, weights = decompose_rank_k(tensor, k, rng, config)
    # the decomposition returns positive weights; the true weights carry the sign of the forward map
    sign = float(np.sign(sigmoid_forward_map(1.0)))
    alphas = sign * weights
    attainable = clip_alpha(alphas, config=config)
    if np.any(attainable != alphas):
        logger.warning('tensor weights %s (%s side) clipped to %s', np.round(alphas, 6), side,
                       np.round(attainable, 6))
    norms = np.array([invert_alpha_to_norm(ActivationKind.SIGMOID, alpha, config=config) for alpha in attainable])
    logger.info('tensor initialization (%s side): weights %s, norms %s', side, np.round(attainable, 6),
                np.round(norms, 4))
    return InitEstimate(sign * directions, attainable, norms)


def pair_components(U0: np.ndarray, V0: np.ndarray, kind: ActivationKind, fs: FeatureSet,
                    obs: ObservationSet) -> np.ndarray:
    """Finds the permutation of V0's columns that best matches U0's, by empirical loss.
    :return: the column permutation to apply to V0.
    """
    k = U0.shape[1]

    def cost(permutation):
        return loss(FactorPair(U0, V0[:, list(permutation)], kind), fs, obs).value

    if k <= _EXHAUSTIVE_PAIRING_RANK:
        return np.array(min(itertools.permutations(range(k)), key=cost))

    # pairwise swaps from the identity until no swap improves the loss
    permutation = list(range(k))
    best = cost(permutation)
    improved = True
    while improved:
        improved = False
        for i, j in itertools.combinations(range(k), 2):
            candidate = list(permutation)
            candidate[i], candidate[j] = candidate[j], candidate[i]
            value = cost(candidate)
            if value < best:
                permutation, best, improved = candidate, value, True
    return np.array(permutation)


def tensor_initialize(fs: FeatureSet, obs: ObservationSet, k: int, kind: ActivationKind, rng: RngSeed,
                      config: TensorInitConfig = TensorInitConfig()) -> TensorInitialization:
    """Initializes (U, V) from the third-moment tensors of the observations.
    :param fs: the features.
    :param obs: the observations.
    :param k: the rank.
    :param kind: must be the sigmoid.
    :param rng: the random stream; the user and item sides use separate substreams.
    :param config: the decomposition settings.
    :return: both sides' estimates and the paired FactorPair.
    """
    kind = ActivationKind.parse(kind)
    if kind is not ActivationKind.SIGMOID:
        raise UnsupportedActivationError(f'tensor initialization is only defined for the sigmoid, got {kind.value}')
    u_side = _initialize_side(fs, obs, k, 'x', rng.child(0), config)
    v_side = _initialize_side(fs, obs, k, 'y', rng.child(1), config)
    permutation = pair_components(u_side.U0, v_side.U0, kind, fs, obs)
    return TensorInitialization(u_side, v_side, FactorPair(u_side.U0, v_side.U0[:, permutation], kind))


def align_columns(U: np.ndarray, U_ref: np.ndarray) -> ColumnAlignment:
    """Greedily matches the columns of U to those of U_ref by largest absolute cosine.
    :return: permutation[i] is the column of U matched to column i of U_ref, with its sign and cosine.
    """
    if U.shape != U_ref.shape:
        raise InvalidArgumentError(f'shapes {U.shape} and {U_ref.shape} differ')
    k = U.shape[1]
    unit = U / np.linalg.norm(U, axis=0, keepdims=True)
    unit_ref = U_ref / np.linalg.norm(U_ref, axis=0, keepdims=True)
    cosines = unit_ref.T @ unit

    permutation = np.full(k, -1)
    signs = np.ones(k)
    matched = np.zeros(k)
    remaining = np.abs(cosines)
    for _ in range(k):
        i, j = np.unravel_index(np.argmax(remaining), remaining.shape)
        permutation[i] = j
        signs[i] = 1.0 if cosines[i, j] >= 0 else -1.0
        matched[i] = abs(cosines[i, j])
        remaining[i, :] = -np.inf
        remaining[:, j] = -np.inf
    return ColumnAlignment(permutation, signs, matched)
