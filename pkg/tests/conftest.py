import numpy as np
import pytest

from nimc.core import ActivationKind, RngSeed, gen_gaussian_features, gen_truth, sample_observations


@pytest.fixture
def make_instance():
    """Builds (truth, features, observations) for a synthetic problem from one seed."""

    def build(kind=ActivationKind.SIGMOID, d1=4, d2=3, k=2, n1=20, n2=15, m=60, seed=0, **truth_options):
        rng = RngSeed(seed)
        truth = gen_truth(d1, d2, k, kind, rng.child(0), **truth_options)
        fs = gen_gaussian_features(n1, n2, d1, d2, rng.child(1))
        obs = sample_observations(fs, truth, m, rng.child(2))
        return truth, fs, obs

    return build


@pytest.fixture
def numeric_gradient():
    """Central differences of a scalar function of a flat vector."""

    def differentiate(func, theta, step=1e-6):
        theta = np.asarray(theta, dtype=np.float64)
        result = np.empty_like(theta)
        for index in range(len(theta)):
            shift = np.zeros_like(theta)
            shift[index] = step
            result[index] = (func(theta + shift) - func(theta - shift)) / (2.0 * step)
        return result

    return differentiate


@pytest.fixture
def numeric_jacobian():
    """Central differences of a vector function of a flat vector, one column per coordinate."""

    def differentiate(func, theta, step=1e-5):
        theta = np.asarray(theta, dtype=np.float64)
        columns = []
        for index in range(len(theta)):
            shift = np.zeros_like(theta)
            shift[index] = step
            columns.append((func(theta + shift) - func(theta - shift)) / (2.0 * step))
        return np.stack(columns, axis=1)

    return differentiate
