import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.linalg import eigh
from scipy.stats import spearmanr
from sklearn.cluster import KMeans
from sklearn.datasets import make_blobs
from sklearn.metrics import precision_recall_curve
from sklearn.preprocessing import StandardScaler

from nimc.activations import phi
from nimc.core import (ActivationKind, FactorPair, FeatureSet, InvalidArgumentError, NumericError, ObservationSet,
                       PathLike, RngSeed, UnsupportedActivationError, gen_gaussian_features, gen_truth,
                       random_factor_pair, sample_observations)
from nimc.model import ObservedTerms, predict_matrix
from nimc.optimizer import TrainConfig, train, train_pu, train_tied

logger = logging.getLogger(__name__)

# a trial succeeds when the relative test error reaches this
SUCCESS_THRESHOLD = 1e-3


def _seed_int(rng: RngSeed) -> int:
    # scikit-learn takes a 32-bit integer seed
    return int(rng.generator().integers(0, 2 ** 31 - 1))


# ---------------------------------------------------------------------------------------------------------------
# recovery-rate grid


@dataclass(frozen=True, eq=False)
class RecoveryGridResult:
    activation: str
    n_values: List[int]
    m_values: List[int]
    success_rate: np.ndarray
    trials_per_cell: int

    def to_frame(self) -> pd.DataFrame:
        rows = [(n, m, self.success_rate[a, b]) for a, n in enumerate(self.n_values)
                for b, m in enumerate(self.m_values)]
        return pd.DataFrame(rows, columns=['n', 'm', 'success_rate'])

    def write_csv(self, path: PathLike) -> None:
        self.to_frame().to_csv(path, index=False, float_format='%.17g')


def _require_nonlinear(kind: ActivationKind, what: str) -> ActivationKind:
    kind = ActivationKind.parse(kind)
    if kind is ActivationKind.LINEAR:
        raise UnsupportedActivationError(f'{what} is defined for sigmoid, tanh and ReLU, not the Linear activation')
    return kind


def recovery_trial(kind: ActivationKind, d: int, k: int, n: int, m: int, cfg: TrainConfig, rng: RngSeed) -> float:
    """One synthetic recovery attempt from random initialization.
    :return: the relative test error of the trained parameters on the held-out set that also decides when training
    stops (inf when training diverged).
    """
    truth = gen_truth(d, d, k, kind, rng.child(0))
    fs = gen_gaussian_features(n, n, d, d, rng.child(1))
    obs = sample_observations(fs, truth, m, rng.child(2))
    fp0 = random_factor_pair(d, d, k, kind, rng.child(3))
    try:
        _, trace = train(fp0, truth, fs, obs, cfg, rng.child(4))
    except NumericError as error:
        logger.info('trial n=%d m=%d diverged: %s', n, m, error)
        return float('inf')
    return trace.last.test_error


def recovery_grid(kind: ActivationKind, d: int, k: int, n_values: Sequence[int], m_values: Sequence[int],
                  trials: int, cfg: TrainConfig, rng: RngSeed, n_jobs: int = 1) -> RecoveryGridResult:
    """Success rate of recovery from random initialization over a grid of sample sizes.
    :param kind: the activation.
    :param d: the feature dimension of both sides.
    :param k: the rank.
    :param n_values: the numbers of users (= items).
    :param m_values: the numbers of observations.
    :param trials: trials per cell.
    :param cfg: the training settings.
    :param rng: the random stream; every (cell, trial) gets its own substream.
    :param n_jobs: the joblib worker count; the result does not depend on it.
    :return: the RecoveryGridResult.
    """
    kind = _require_nonlinear(kind, 'the recovery grid')
    if trials < 1:
        raise InvalidArgumentError(f'trials must be at least 1, got {trials}')
    if not n_values or not m_values or min(n_values) < 1 or min(m_values) < 1 or d < 1 or k < 1:
        raise InvalidArgumentError('grid sizes, d and k must all be at least 1')

    cells = [(a, b, t) for a in range(len(n_values)) for b in range(len(m_values)) for t in range(trials)]
    errors = Parallel(n_jobs=n_jobs)(
        delayed(recovery_trial)(kind, d, k, n_values[a], m_values[b], cfg,
                                rng.child(a * len(m_values) + b).child(t))
        for a, b, t in cells)

    success = np.zeros((len(n_values), len(m_values)))
    for (a, b, _), error in zip(cells, errors):
        success[a, b] += error <= SUCCESS_THRESHOLD
    success /= trials
    logger.info('recovery grid for %s finished, overall success rate %.3f', kind.value, success.mean())
    return RecoveryGridResult(kind.value, list(n_values), list(m_values), success, trials)


def spearman_monotone(result: RecoveryGridResult) -> Dict[str, float]:
    """Spearman correlation of the success rate with n and with m over all cells (0 when undefined)."""
    n_grid, m_grid = np.meshgrid(result.n_values, result.m_values, indexing='ij')
    rates = result.success_rate.ravel()
    correlations = {}
    for name, axis in (('n', n_grid.ravel()), ('m', m_grid.ravel())):
        if np.all(rates == rates[0]) or np.all(axis == axis[0]):
            correlations[name] = 0.0
        else:
            correlations[name] = float(spearmanr(axis, rates)[0])
    return correlations


def full_recovery_cell(result: RecoveryGridResult) -> Optional[Tuple[int, int]]:
    """The (n, m) cell with rate 1.0 and the smallest n * m (then the smallest n), or None if no cell has it."""
    cells = [(n * m, n, m) for a, n in enumerate(result.n_values) for b, m in enumerate(result.m_values)
             if result.success_rate[a, b] == 1.0]
    if not cells:
        return None
    _, n, m = min(cells)
    return n, m


# ---------------------------------------------------------------------------------------------------------------
# semi-supervised clustering


def clustering_error(pi_star: Sequence, pi: Sequence) -> float:
    """Fraction of the n(n-1)/2 pairs on which two partitions disagree about sharing a cluster.
    :param pi_star: the ground-truth labels.
    :param pi: the predicted labels.
    :return: the clustering error in [0, 1].
    """
    pi_star = np.asarray(pi_star)
    pi = np.asarray(pi)
    if pi_star.shape != pi.shape or pi.ndim != 1:
        raise InvalidArgumentError(f'label arrays have shapes {pi_star.shape} and {pi.shape}')
    n = len(pi)
    if n < 2:
        raise InvalidArgumentError('clustering error needs at least 2 items')
    i, j = np.triu_indices(n, 1)
    disagreements = np.count_nonzero((pi_star[i] == pi_star[j]) != (pi[i] == pi[j]))
    return 2.0 * disagreements / (n * (n - 1))


def rff_frequencies(d: int, q: int, sigma: float, rng: RngSeed) -> np.ndarray:
    """q x d frequency matrix with i.i.d. N(0, sigma^2) entries."""
    if q < 1 or not sigma > 0:
        raise InvalidArgumentError(f'need q >= 1 and sigma > 0, got q={q}, sigma={sigma}')
    return sigma * rng.generator().standard_normal((q, d))


def rff_transform(X: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """r(x) = (1 / sqrt(q)) [sin(Qx), cos(Qx)] for each row x of X."""
    projection = np.asarray(X, dtype=np.float64) @ Q.T
    return np.hstack([np.sin(projection), np.cos(projection)]) / np.sqrt(Q.shape[0])


def rff(X: np.ndarray, q: int, sigma: float, rng: RngSeed) -> np.ndarray:
    """Random Fourier features of the rows of X, with one shared frequency draw.
    :return: an array of dimensions n x 2q whose rows have unit norm.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return rff_transform(X, rff_frequencies(X.shape[1], q, sigma, rng))


@dataclass(frozen=True, eq=False)
class ClusterTask:
    X: np.ndarray
    labels: np.ndarray
    omega: ObservationSet
    k: int

    @property
    def A(self) -> np.ndarray:
        """The similarity matrix, 1 where two items share a label."""
        return (self.labels[:, None] == self.labels[None, :]).astype(np.float64)


def make_cluster_task(X: np.ndarray, labels: Sequence[int], m: int, rng: RngSeed) -> ClusterTask:
    """Samples m similarity entries uniformly with replacement; m=None observes all n^2 entries."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    if X.shape[0] != n:
        raise InvalidArgumentError(f'{X.shape[0]} feature rows for {n} labels')
    if m is None:
        rows, cols = (index.ravel() for index in np.meshgrid(np.arange(n), np.arange(n), indexing='ij'))
    else:
        if m < 1:
            raise InvalidArgumentError(f'm must be at least 1, got {m}')
        generator = rng.generator()
        rows = generator.integers(0, n, size=m)
        cols = generator.integers(0, n, size=m)
    ratings = (labels[rows] == labels[cols]).astype(np.float64)
    return ClusterTask(X, labels, ObservationSet(rows, cols, ratings, shape=(n, n)), len(np.unique(labels)))


def gen_blob_task(n: int, d: int, k: int, m: int, rng: RngSeed, cluster_std: float = 1.0) -> ClusterTask:
    """Gaussian blobs (scikit-learn make_blobs) with sampled similarity observations."""
    X, labels = make_blobs(n_samples=n, n_features=d, centers=k, cluster_std=cluster_std,
                           random_state=_seed_int(rng.child(0)))
    return make_cluster_task(X, labels, m, rng.child(1))


@dataclass(frozen=True, eq=False)
class ClusterResult:
    labels: np.ndarray
    error: float
    W: np.ndarray


def top_left_singular_vectors(F: np.ndarray, k: int) -> np.ndarray:
    """Top-k left singular vectors of a tall matrix through the eigendecomposition of its small Gram matrix."""
    if k > F.shape[1]:
        raise InvalidArgumentError(f'cannot take {k} singular vectors of a matrix with {F.shape[1]} columns')
    eigenvalues, eigenvectors = eigh(F.T @ F)
    eigenvalues = eigenvalues[::-1][:k]
    eigenvectors = eigenvectors[:, ::-1][:, :k]
    singular_values = np.sqrt(np.maximum(eigenvalues, 0.0))
    # directions with a vanishing singular value carry no signal
    scale = np.where(singular_values > 0, singular_values, 1.0)
    return (F @ eigenvectors) / scale[None, :] * (singular_values > 0)[None, :]


def cluster_pipeline(task: ClusterTask, cfg: TrainConfig, k_latent: int, rng: RngSeed,
                     kind: ActivationKind = ActivationKind.RELU, rff_q: int = None,
                     rff_sigma: float = 1.0, standardize: bool = True) -> ClusterResult:
    """Learns a tied model on the observed similarities and clusters its latent features.
    :param task: the ClusterTask.
    :param cfg: the training settings.
    :param k_latent: the rank of the tied parameter W.
    :param rng: the random stream.
    :param kind: the activation (sigmoid, tanh or ReLU).
    :param rff_q: when given, the items are first lifted to 2 * rff_q random Fourier features.
    :param rff_sigma: the frequency scale of the random Fourier features.
    :param standardize: scale every raw feature to zero mean and unit variance first, so that phi(X W0) starts on
    the scale of the 0/1 similarities.
    :return: the k-means labels of the top singular vectors of phi(X W), the clustering error and W.
    """
    kind = _require_nonlinear(kind, 'semi-supervised clustering')
    if k_latent < 1:
        raise InvalidArgumentError(f'k_latent must be at least 1, got {k_latent}')
    features = StandardScaler().fit_transform(task.X) if standardize else task.X
    if rff_q is not None:
        features = rff(features, rff_q, rff_sigma, rng.child(0))
    fs = FeatureSet(features, features, provenance='cluster')
    d = features.shape[1]

    # U and V start from the same Gaussian matrix and stay one parameter
    W0 = rng.child(1).generator().standard_normal((d, k_latent)) / np.sqrt(d)
    W, trace = train_tied(W0, kind, fs, task.omega, cfg, rng.child(2))
    logger.info('tied training loss %.6g -> %.6g in %d iterations', trace.records[0].loss, trace.last.loss,
                trace.last.iter)

    embedding = top_left_singular_vectors(phi(kind, features @ W), task.k)
    kmeans = KMeans(n_clusters=task.k, init='k-means++', n_init=10, max_iter=100,
                    random_state=_seed_int(rng.child(3)))
    labels = kmeans.fit_predict(embedding)
    error = clustering_error(task.labels, labels)
    logger.info('clustering error %.4f with %d observations', error, len(task.omega))
    return ClusterResult(labels, error, W)


# ---------------------------------------------------------------------------------------------------------------
# recommendation and positive-unlabeled evaluation


def rmse_eval(fp: FactorPair, fs_test: FeatureSet, obs_test: ObservationSet) -> float:
    """Root mean squared residual over the test triples."""
    terms = ObservedTerms(fp, fs_test, obs_test)
    return float(np.sqrt(np.mean(terms.residual ** 2)))


def split_rows(obs: ObservationSet, n1: int, rng: RngSeed,
               test_fraction: float = 0.2) -> Tuple[ObservationSet, ObservationSet]:
    """Splits observations by user so that test users are never seen in training (4:1 by default)."""
    if not 0 < test_fraction < 1:
        raise InvalidArgumentError(f'test_fraction must be in (0, 1), got {test_fraction}')
    users = rng.generator().permutation(n1)
    test_users = users[:max(1, int(round(test_fraction * n1)))]
    in_test = np.isin(obs.rows, test_users)
    shape = obs.shape

    def subset(mask):
        return ObservationSet(obs.rows[mask], obs.cols[mask], obs.ratings[mask], shape=shape)

    return subset(~in_test), subset(in_test)


@dataclass(frozen=True, eq=False)
class PuEvalResult:
    r_values: np.ndarray
    cumulative_rank_curve: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    @property
    def precision_recall(self) -> List[Tuple[float, float]]:
        return list(zip(self.precision.tolist(), self.recall.tolist()))

    def curve_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'r': self.r_values, 'probability': self.cumulative_rank_curve})

    def pr_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'precision': self.precision, 'recall': self.recall})


def _positive_mask(positives: Union[ObservationSet, Sequence[Tuple[int, int]]], shape: Tuple[int, int]) -> np.ndarray:
    if isinstance(positives, ObservationSet):
        rows, cols = positives.rows, positives.cols
    else:
        pairs = np.asarray(list(positives), dtype=np.int64).reshape(-1, 2)
        rows, cols = pairs[:, 0], pairs[:, 1]
    if len(rows) == 0:
        raise InvalidArgumentError('positive set is empty')
    if rows.min() < 0 or cols.min() < 0 or rows.max() >= shape[0] or cols.max() >= shape[1]:
        raise InvalidArgumentError(f'positive cell outside the {shape[0]} x {shape[1]} grid')
    mask = np.zeros(shape, dtype=bool)
    mask[rows, cols] = True
    return mask


def rank_evaluation(scores: np.ndarray, positive_mask: np.ndarray, r_values: Sequence[int],
                    columns: Sequence[int] = None) -> PuEvalResult:
    """Cumulative best-rank curve and precision/recall points for a score matrix.
    Rows are ranked per column by decreasing score, ties broken by row index.
    """
    r_values = np.asarray(sorted(r_values), dtype=np.int64)
    if len(r_values) == 0 or r_values[0] < 1:
        raise InvalidArgumentError('r_values must be non-empty positive integers')
    columns = np.arange(scores.shape[1]) if columns is None else np.asarray(columns)
    # only columns with at least one positive contribute to the curve
    columns = columns[positive_mask[:, columns].any(axis=0)]
    if len(columns) == 0:
        raise InvalidArgumentError('no evaluated column has a positive entry')

    rows = np.arange(scores.shape[0])
    best_ranks = np.empty(len(columns), dtype=np.int64)
    for index, j in enumerate(columns):
        order = np.lexsort((rows, -scores[:, j]))
        best_ranks[index] = int(np.argmax(positive_mask[order, j])) + 1
    curve = np.array([np.mean(best_ranks <= r) for r in r_values])

    precision, recall, _ = precision_recall_curve(positive_mask[:, columns].ravel().astype(int),
                                                  scores[:, columns].ravel())
    return PuEvalResult(r_values, curve, precision, recall)


def pu_eval(fp: FactorPair, fs: FeatureSet, positives, r_values: Sequence[int],
            columns: Sequence[int] = None) -> PuEvalResult:
    """Ranks rows for every query column by predicted score.
    :param fp: the trained parameters.
    :param fs: the features.
    :param positives: the true positive cells, an ObservationSet or (row, col) pairs.
    :param r_values: the cut-offs of the cumulative curve.
    :param columns: the query columns, all by default.
    :return: the PuEvalResult.
    """
    positive_mask = _positive_mask(positives, (fs.n1, fs.n2))
    return rank_evaluation(predict_matrix(fp, fs.X, fs.Y), positive_mask, r_values, columns)


@dataclass(frozen=True, eq=False)
class PuTask:
    fs: FeatureSet
    positives: ObservationSet
    truth: FactorPair


def gen_pu_task(n1: int, n2: int, d1: int, d2: int, k: int, density: float, rng: RngSeed,
                kind: ActivationKind = ActivationKind.RELU) -> PuTask:
    """Synthetic association matrix: the top density fraction of a random model's scores are the positives."""
    kind = _require_nonlinear(kind, 'positive-unlabeled evaluation')
    if not 0 < density < 1:
        raise InvalidArgumentError(f'density must be in (0, 1), got {density}')
    truth = gen_truth(d1, d2, k, kind, rng.child(0))
    fs = gen_gaussian_features(n1, n2, d1, d2, rng.child(1))
    scores = predict_matrix(truth, fs.X, fs.Y)
    threshold = np.quantile(scores, 1.0 - density)
    rows, cols = np.nonzero(scores > threshold)
    if len(rows) == 0:
        raise InvalidArgumentError('density too low to produce a positive entry')
    return PuTask(fs, ObservationSet(rows, cols, np.ones(len(rows)), shape=(n1, n2)), truth)


def pu_train_eval(task: PuTask, k: int, beta: float, cfg: TrainConfig, r_values: Sequence[int], rng: RngSeed,
                  test_fraction: float = 0.2) -> PuEvalResult:
    """Trains the positive-unlabeled objective on a subset of columns and ranks rows for the held-out columns."""
    _require_nonlinear(task.truth.activation, 'positive-unlabeled training')
    if not 0 < test_fraction < 1:
        raise InvalidArgumentError(f'test_fraction must be in (0, 1), got {test_fraction}')
    fs = task.fs
    columns = rng.child(0).generator().permutation(fs.n2)
    test_columns = np.sort(columns[:max(1, int(round(test_fraction * fs.n2)))])
    train_columns = np.setdiff1d(np.arange(fs.n2), test_columns)

    # held-out columns are left out of the training grid entirely
    remap = -np.ones(fs.n2, dtype=np.int64)
    remap[train_columns] = np.arange(len(train_columns))
    keep = remap[task.positives.cols] >= 0
    if not np.any(keep):
        raise InvalidArgumentError('no positive falls in the training columns')
    train_fs = FeatureSet(fs.X, fs.Y[train_columns], provenance='pu-train')
    train_positives = ObservationSet(task.positives.rows[keep], remap[task.positives.cols[keep]],
                                     task.positives.ratings[keep], shape=(fs.n1, len(train_columns)))

    fp0 = random_factor_pair(fs.d1, fs.d2, k, task.truth.activation, rng.child(1))
    fp, _ = train_pu(fp0, train_fs, train_positives, beta, cfg, rng.child(2))
    return pu_eval(fp, fs, task.positives, r_values, columns=test_columns)
