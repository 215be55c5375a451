import numpy as np

from nimc.core import FactorPair, FeatureSet, ObservationSet
from nimc.hessian import flatten_direction, unflatten_direction


def as_flat(fp: FactorPair) -> np.ndarray:
    return flatten_direction(fp.U, fp.V)


def from_flat(theta: np.ndarray, like: FactorPair) -> FactorPair:
    U, V = unflatten_direction(theta, like.d1, like.d2, like.k)
    return like.with_factors(U, V)


def preactivation_margin(fp: FactorPair, fs: FeatureSet, obs: ObservationSet) -> float:
    """Smallest |u_i^T x| or |v_i^T y| over the observations, the distance to a ReLU kink."""
    return float(min(np.min(np.abs(fs.X[obs.rows] @ fp.U)), np.min(np.abs(fs.Y[obs.cols] @ fp.V))))
