import enum
import hashlib
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Tuple, Union

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class NimcError(Exception):
    """Base class for every error raised by the nimc package."""


class InvalidArgumentError(NimcError, ValueError):
    pass


class ParseError(NimcError, ValueError):
    """Raised when a matrix or observation file cannot be read.
    :param message: what went wrong.
    :param path: the file being read.
    :param line: the 1-based line number of the offending line.
    """

    def __init__(self, message: str, path: PathLike, line: int):
        super().__init__(f'{path}:{line}: {message}')
        self.path = str(path)
        self.line = line


class ResourceLimitError(NimcError):
    pass


class NumericError(NimcError, ArithmeticError):
    pass


class UnsupportedActivationError(InvalidArgumentError):
    pass


class RankDeficientError(NimcError):
    def __init__(self, factor: str, singular_values: np.ndarray):
        super().__init__(f'factor {factor} is rank deficient (singular values {singular_values})')
        self.factor = factor


class DegenerateSpectrumError(NimcError):
    pass


class OutOfRangeError(InvalidArgumentError):
    def __init__(self, value: float, low: float, high: float):
        super().__init__(f'{value!r} is outside the attainable range [{low!r}, {high!r}]')
        self.value = value
        self.range = (low, high)


class InsufficientDataError(InvalidArgumentError):
    pass


class ActivationKind(enum.Enum):
    SIGMOID = 'sigmoid'
    TANH = 'tanh'
    RELU = 'relu'
    # only used to demonstrate the rotation degeneracy of plain inductive matrix completion
    LINEAR = 'linear'

    @classmethod
    def parse(cls, name: Union[str, 'ActivationKind']) -> 'ActivationKind':
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise InvalidArgumentError(f'unknown activation {name!r}') from None


def _frozen(array: np.ndarray) -> np.ndarray:
    # copy into a read-only float64 array so the owning dataclass stays immutable
    result = np.array(array, dtype=np.float64, copy=True)
    result.setflags(write=False)
    return result


@dataclass(frozen=True, eq=False)
class RngSeed:
    """A reproducible random stream: identical (seed, stream) pairs give bit-identical draws."""
    seed: int
    stream: int = 0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2 ** 64 or not 0 <= int(self.stream) < 2 ** 64:
            raise InvalidArgumentError('seed and stream must be unsigned 64-bit integers')

    def generator(self) -> np.random.Generator:
        sequence = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream),))
        return np.random.Generator(np.random.Philox(sequence))

    def child(self, index: int) -> 'RngSeed':
        # derive the substream id from the (stream, index) pair through SeedSequence hashing
        sequence = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream), int(index)))
        return RngSeed(int(self.seed), int(sequence.generate_state(1, np.uint64)[0]))


@dataclass(frozen=True, eq=False)
class FactorPair:
    """The parameters (U, V) of the bilinear-through-activation model together with the activation."""
    U: np.ndarray
    V: np.ndarray
    activation: ActivationKind

    def __post_init__(self):
        U = _frozen(self.U)
        V = _frozen(self.V)
        if U.ndim != 2 or V.ndim != 2:
            raise InvalidArgumentError('U and V must be matrices')
        if U.shape[1] != V.shape[1]:
            raise InvalidArgumentError(f'U has {U.shape[1]} columns but V has {V.shape[1]}')
        k = U.shape[1]
        if k < 1 or k > min(U.shape[0], V.shape[0]):
            raise InvalidArgumentError(f'rank k={k} must satisfy 1 <= k <= min(d1, d2)')
        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(V))):
            raise InvalidArgumentError('factor entries must be finite')
        object.__setattr__(self, 'U', U)
        object.__setattr__(self, 'V', V)
        object.__setattr__(self, 'activation', ActivationKind.parse(self.activation))

    @property
    def d1(self) -> int:
        return self.U.shape[0]

    @property
    def d2(self) -> int:
        return self.V.shape[0]

    @property
    def k(self) -> int:
        return self.U.shape[1]

    def with_factors(self, U: np.ndarray, V: np.ndarray) -> 'FactorPair':
        return FactorPair(U, V, self.activation)

    def permuted(self, permutation) -> 'FactorPair':
        permutation = np.asarray(permutation)
        return FactorPair(self.U[:, permutation], self.V[:, permutation], self.activation)

    def same_as(self, other: 'FactorPair') -> bool:
        return (self.activation is other.activation and np.array_equal(self.U, other.U)
                and np.array_equal(self.V, other.V))


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Row-wise user features X (n1 x d1) and item features Y (n2 x d2)."""
    X: np.ndarray
    Y: np.ndarray
    provenance: str = 'ingested'

    def __post_init__(self):
        X = _frozen(self.X)
        Y = _frozen(self.Y)
        if X.ndim != 2 or Y.ndim != 2 or min(X.shape) < 1 or min(Y.shape) < 1:
            raise InvalidArgumentError('X and Y must be non-empty matrices')
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise InvalidArgumentError('feature entries must be finite')
        object.__setattr__(self, 'X', X)
        object.__setattr__(self, 'Y', Y)

    @property
    def n1(self) -> int:
        return self.X.shape[0]

    @property
    def n2(self) -> int:
        return self.Y.shape[0]

    @property
    def d1(self) -> int:
        return self.X.shape[1]

    @property
    def d2(self) -> int:
        return self.Y.shape[1]


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """A multiset of observed (row, col, rating) triples; duplicates are kept, as sampling is with replacement.
    The triples are stored column-wise as three parallel arrays.
    """
    rows: np.ndarray
    cols: np.ndarray
    ratings: np.ndarray
    shape: Tuple[int, int] = field(default=None)

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.int64, copy=True).reshape(-1)
        cols = np.array(self.cols, dtype=np.int64, copy=True).reshape(-1)
        ratings = _frozen(np.asarray(self.ratings, dtype=np.float64).reshape(-1))
        if not len(rows) == len(cols) == len(ratings):
            raise InvalidArgumentError('rows, cols and ratings must have equal length')
        if np.any(rows < 0) or np.any(cols < 0):
            raise InvalidArgumentError('observation indices must be non-negative')
        if not np.all(np.isfinite(ratings)):
            raise InvalidArgumentError('ratings must be finite')
        if self.shape is not None:
            n1, n2 = self.shape
            if len(rows) and (rows.max() >= n1 or cols.max() >= n2):
                raise InvalidArgumentError(f'observation index outside the {n1} x {n2} grid')
        rows.setflags(write=False)
        cols.setflags(write=False)
        object.__setattr__(self, 'rows', rows)
        object.__setattr__(self, 'cols', cols)
        object.__setattr__(self, 'ratings', ratings)

    def __len__(self) -> int:
        return len(self.ratings)

    def triples(self) -> Iterator[Tuple[int, int, float]]:
        for i, j, a in zip(self.rows, self.cols, self.ratings):
            yield int(i), int(j), float(a)

    def distinct_cells(self) -> np.ndarray:
        """:return: the distinct observed (row, col) cells as an array of shape (c, 2)."""
        return np.unique(np.stack([self.rows, self.cols], axis=1), axis=0)

    def multiset_digest(self) -> str:
        # sort the triples first so the digest does not depend on draw order
        order = np.lexsort((self.ratings, self.cols, self.rows))
        digest = hashlib.sha256()
        digest.update(self.rows[order].tobytes())
        digest.update(self.cols[order].tobytes())
        digest.update(self.ratings[order].tobytes())
        return digest.hexdigest()

    def check_against(self, fs: FeatureSet) -> None:
        if len(self) == 0:
            raise InvalidArgumentError('observation set is empty')
        if self.rows.max() >= fs.n1 or self.cols.max() >= fs.n2:
            raise InvalidArgumentError(f'observation index outside the {fs.n1} x {fs.n2} feature grid')


def _check_dims(**dims: int) -> None:
    for name, value in dims.items():
        if int(value) < 1:
            raise InvalidArgumentError(f'{name} must be at least 1, got {value}')


def gen_gaussian_features(n1: int, n2: int, d1: int, d2: int, rng: RngSeed) -> FeatureSet:
    """Draws user and item features with i.i.d. standard normal entries.
    :param n1: the number of users.
    :param n2: the number of items.
    :param d1: the user feature dimension.
    :param d2: the item feature dimension.
    :param rng: the random stream; the result is a pure function of it.
    :return: a FeatureSet with X of shape (n1, d1) and Y of shape (n2, d2).
    """
    _check_dims(n1=n1, n2=n2, d1=d1, d2=d2)
    generator = rng.generator()
    X = generator.standard_normal((n1, d1))
    Y = generator.standard_normal((n2, d2))
    return FeatureSet(X, Y, provenance='gaussian')


def sample_observations(fs: FeatureSet, truth: FactorPair, m: int, rng: RngSeed) -> ObservationSet:
    """Samples m grid cells uniformly with replacement and labels them with the ground-truth model.
    :param fs: the features the cells index into.
    :param truth: the generating parameters.
    :param m: the number of observations to draw.
    :param rng: the random stream.
    :return: an ObservationSet with exactly m triples.
    """
    from nimc.model import predict_rows

    _check_dims(m=m)
    if fs.d1 != truth.d1 or fs.d2 != truth.d2:
        raise InvalidArgumentError(f'truth dims ({truth.d1}, {truth.d2}) do not match features ({fs.d1}, {fs.d2})')
    generator = rng.generator()
    rows = generator.integers(0, fs.n1, size=m)
    cols = generator.integers(0, fs.n2, size=m)
    ratings = predict_rows(truth, fs.X[rows], fs.Y[cols])
    return ObservationSet(rows, cols, ratings, shape=(fs.n1, fs.n2))


def _orthonormal(generator: np.random.Generator, d: int, k: int) -> np.ndarray:
    q, r = np.linalg.qr(generator.standard_normal((d, k)))
    # fix the column signs so the draw is a deterministic function of the stream
    return q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))


def _normalized_factor(generator: np.random.Generator, d: int, k: int, kappa, orthonormal: bool) -> np.ndarray:
    if orthonormal:
        return _orthonormal(generator, d, k)
    if kappa is None:
        A = generator.standard_normal((d, k))
        return A / np.linalg.svd(A, compute_uv=False)[-1]
    if kappa < 1:
        raise InvalidArgumentError(f'kappa must be at least 1, got {kappa}')
    left = _orthonormal(generator, d, k)
    right = _orthonormal(generator, k, k)
    singular_values = np.linspace(kappa, 1.0, k)
    return left @ np.diag(singular_values) @ right.T


def gen_truth(d1: int, d2: int, k: int, kind: ActivationKind, rng: RngSeed, kappa: float = None,
              orthonormal: bool = False) -> FactorPair:
    """Draws synthetic ground-truth factors with the smallest singular value of each factor equal to 1.
    :param kappa: when given, the singular values of each factor are spaced evenly in [1, kappa].
    :param orthonormal: draw factors with orthonormal columns instead (unitary when d = k).
    """
    _check_dims(d1=d1, d2=d2, k=k)
    if k > min(d1, d2):
        raise InvalidArgumentError(f'k={k} exceeds min(d1, d2)={min(d1, d2)}')
    generator = rng.generator()
    U = _normalized_factor(generator, d1, k, kappa, orthonormal)
    V = _normalized_factor(generator, d2, k, kappa, orthonormal)
    return FactorPair(U, V, ActivationKind.parse(kind))


def random_factor_pair(d1: int, d2: int, k: int, kind: ActivationKind, rng: RngSeed,
                       scale: float = None) -> FactorPair:
    """Random initialization with i.i.d. N(0, scale^2) entries; scale defaults to 1/sqrt(d1)."""
    _check_dims(d1=d1, d2=d2, k=k)
    if scale is None:
        scale = 1.0 / np.sqrt(d1)
    generator = rng.generator()
    return FactorPair(scale * generator.standard_normal((d1, k)), scale * generator.standard_normal((d2, k)),
                      ActivationKind.parse(kind))


# ---------------------------------------------------------------------------------------------------------------
# text file formats


# floats carry 17 significant digits so that files reload bit-exactly
FLOAT_FORMAT = '%.17g'


def _data_lines(path: PathLike) -> Tuple[List[str], np.ndarray]:
    # the lines and the 1-based numbers of the non-blank ones
    lines = Path(path).read_text(encoding='utf-8').splitlines()
    numbers = np.array([number for number, line in enumerate(lines, start=1) if line.strip()], dtype=np.int64)
    return lines, numbers


def _read_numbers(path: PathLike, lines: List[str], numbers: np.ndarray, n_fields: int) -> np.ndarray:
    """Parses every non-blank line after the first as n_fields finite floats.
    :return: an array of dimensions (rows, n_fields). Raises ParseError naming the first offending line.
    """
    body = numbers[1:]
    # row r of the frame is file line body[r]
    rows = [lines[number - 1] for number in body]
    counts = pd.Series(rows, dtype=object).str.count(',').to_numpy() + 1
    wrong = np.flatnonzero(counts != n_fields)
    if wrong.size:
        raise ParseError(f'expected {n_fields} values, found {counts[wrong[0]]}', path, int(body[wrong[0]]))

    frame = pd.read_csv(io.StringIO('\n'.join(rows)), header=None, float_precision='round_trip')
    # a column holding text is left as strings by pandas
    values = frame.apply(lambda column: pd.to_numeric(column, errors='coerce')).to_numpy(dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(values).all(axis=1))
    if bad.size:
        raise ParseError(f'non-numeric or non-finite value in {rows[bad[0]]!r}', path, int(body[bad[0]]))
    return values


def save_matrix(matrix: np.ndarray, path: PathLike) -> None:
    """Writes a matrix as UTF-8 text: a '# rows cols' header, then one comma-separated row per line.
    :param matrix: the matrix to write, given as a 2d array.
    :param path: where to write it.
    :return: (None.)
    """
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    rows, cols = matrix.shape
    np.savetxt(path, matrix, fmt=FLOAT_FORMAT, delimiter=',', header=f'{rows} {cols}', comments='# ',
               encoding='utf-8')


def load_matrix(path: PathLike) -> np.ndarray:
    """Reads a matrix written by save_matrix. Blank lines are ignored.
    :param path: the file to read.
    :return: the matrix as a float64 array.
    """
    lines, numbers = _data_lines(path)
    if not lines:
        raise ParseError('empty file', path, 1)

    # the header names the shape
    header = lines[0].split()
    if len(header) != 3 or header[0] != '#':
        raise ParseError(f'malformed header {lines[0]!r}, expected "# rows cols"', path, 1)
    try:
        rows, cols = int(header[1]), int(header[2])
    except ValueError:
        raise ParseError(f'malformed header {lines[0]!r}', path, 1) from None
    if rows < 1 or cols < 1:
        raise ParseError('matrix dimensions must be positive', path, 1)

    body = numbers[1:]
    if len(body) != rows:
        # point at the first missing or the first surplus line
        line = int(body[rows]) if len(body) > rows else (int(body[-1]) if len(body) else 1) + 1
        raise ParseError(f'expected {rows} rows, found {len(body)}', path, line)
    return _read_numbers(path, lines, numbers, cols)


def save_features(fs: FeatureSet, x_path: PathLike, y_path: PathLike) -> None:
    save_matrix(fs.X, x_path)
    save_matrix(fs.Y, y_path)


def load_features(x_path: PathLike, y_path: PathLike) -> FeatureSet:
    return FeatureSet(load_matrix(x_path), load_matrix(y_path), provenance='ingested')


def save_factor_pair(fp: FactorPair, u_path: PathLike, v_path: PathLike) -> None:
    save_matrix(fp.U, u_path)
    save_matrix(fp.V, v_path)


def load_factor_pair(u_path: PathLike, v_path: PathLike, kind: ActivationKind) -> FactorPair:
    return FactorPair(load_matrix(u_path), load_matrix(v_path), ActivationKind.parse(kind))


OBSERVATION_COLUMNS = ['row', 'col', 'value']
OBSERVATION_HEADER = ','.join(OBSERVATION_COLUMNS)


def save_observations(obs: ObservationSet, path: PathLike) -> None:
    """Writes observations as a 'row,col,value' header followed by one 0-based triple per line."""
    frame = pd.DataFrame({'row': obs.rows, 'col': obs.cols, 'value': obs.ratings}, columns=OBSERVATION_COLUMNS)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, encoding='utf-8')


def load_observations(path: PathLike, shape: Tuple[int, int] = None) -> ObservationSet:
    """Reads an observation file. Blank lines are ignored.
    :param path: the file to read.
    :param shape: optional (n1, n2) grid; indices outside it are reported with their line number.
    :return: the ObservationSet.
    """
    lines, numbers = _data_lines(path)
    if not lines or lines[0].strip().replace(' ', '') != OBSERVATION_HEADER:
        raise ParseError(f'missing "{OBSERVATION_HEADER}" header', path, 1)
    if len(numbers) < 2:
        raise ParseError('no observations', path, len(lines))

    values = _read_numbers(path, lines, numbers, 3)
    body = numbers[1:]
    indices = values[:, :2]
    not_integral = np.flatnonzero(np.any(indices != np.floor(indices), axis=1))
    if not_integral.size:
        raise ParseError('row and col must be integers', path, int(body[not_integral[0]]))
    rows, cols = indices.astype(np.int64).T
    outside = (rows < 0) | (cols < 0)
    if shape is not None:
        outside |= (rows >= shape[0]) | (cols >= shape[1])
    bad = np.flatnonzero(outside)
    if bad.size:
        raise ParseError(f'index ({rows[bad[0]]}, {cols[bad[0]]}) out of range', path, int(body[bad[0]]))
    return ObservationSet(rows, cols, values[:, 2], shape=shape)
