import itertools

import numpy as np
import pytest

from nimc.core import (InvalidArgumentError, ObservationSet, RngSeed, UnsupportedActivationError,
                       gen_gaussian_features, gen_truth, random_factor_pair, sample_observations)
from nimc.model import predict
from nimc.optimizer import TrainConfig, train
from nimc.pipelines import (ClusterTask, PuTask, RecoveryGridResult, clustering_error,
                            cluster_pipeline, full_recovery_cell, gen_blob_task, gen_pu_task, make_cluster_task,
                            pu_eval, pu_train_eval, rank_evaluation, recovery_grid, recovery_trial, rff,
                            rff_frequencies, rff_transform, rmse_eval, spearman_monotone, split_rows,
                            top_left_singular_vectors)


def _pairwise_error(pi_star, pi):
    n = len(pi)
    wrong = sum((pi_star[i] == pi_star[j]) != (pi[i] == pi[j]) for i, j in itertools.combinations(range(n), 2))
    return wrong / (n * (n - 1) / 2)


def test_clustering_error_hand_case():
    assert clustering_error([0, 0, 1, 1], [0, 1, 0, 1]) == pytest.approx(4.0 / 6.0)


def test_clustering_error_ignores_label_names():
    assert clustering_error([0, 0, 1, 2, 2], [5, 5, 3, 7, 7]) == 0.0


def test_clustering_error_matches_pair_count():
    generator = RngSeed(0).generator()
    for _ in range(5):
        pi_star = generator.integers(0, 3, size=12)
        pi = generator.integers(0, 4, size=12)
        assert clustering_error(pi_star, pi) == pytest.approx(_pairwise_error(pi_star, pi), abs=1e-15)


def test_clustering_error_arguments():
    with pytest.raises(InvalidArgumentError):
        clustering_error([0, 1], [0, 1, 1])
    with pytest.raises(InvalidArgumentError):
        clustering_error([0], [0])


def test_rff_of_zero_frequencies():
    features = rff_transform(np.ones((2, 3)), np.zeros((4, 3)))
    assert np.allclose(features[:, :4], 0.0)
    assert np.allclose(features[:, 4:], 0.5)


def test_rff_rows_have_unit_norm():
    X = RngSeed(1).generator().standard_normal((10, 4))
    features = rff(X, 50, 0.7, RngSeed(2))
    assert features.shape == (10, 100)
    assert np.allclose(np.linalg.norm(features, axis=1), 1.0, atol=1e-12)


def test_rff_approximates_gaussian_kernel():
    sigma = 0.8
    x = np.array([0.3, -0.5, 1.0])
    y = np.array([-0.2, 0.4, 0.6])
    features = rff(np.stack([x, y]), 20000, sigma, RngSeed(3))
    kernel = np.exp(-sigma ** 2 * np.sum((x - y) ** 2) / 2.0)
    assert features[0] @ features[1] == pytest.approx(kernel, abs=0.03)


def test_rff_arguments():
    with pytest.raises(InvalidArgumentError):
        rff_frequencies(3, 0, 1.0, RngSeed(0))
    with pytest.raises(InvalidArgumentError):
        rff_frequencies(3, 5, 0.0, RngSeed(0))


def test_full_cluster_task():
    labels = np.array([0, 1, 1, 0])
    task = make_cluster_task(np.eye(4), labels, None, RngSeed(0))
    assert len(task.omega) == 16
    assert task.k == 2
    assert np.array_equal(task.omega.ratings, task.A[task.omega.rows, task.omega.cols])
    assert task.A[0, 3] == 1.0 and task.A[0, 1] == 0.0
    with pytest.raises(InvalidArgumentError):
        make_cluster_task(np.eye(3), labels, None, RngSeed(0))
    with pytest.raises(InvalidArgumentError):
        make_cluster_task(np.eye(4), labels, 0, RngSeed(0))


def test_blob_task_is_deterministic():
    first = gen_blob_task(40, 3, 2, 200, RngSeed(5))
    second = gen_blob_task(40, 3, 2, 200, RngSeed(5))
    assert np.array_equal(first.X, second.X)
    assert np.array_equal(first.labels, second.labels)
    assert first.omega.multiset_digest() == second.omega.multiset_digest()
    assert np.array_equal(first.omega.ratings, first.A[first.omega.rows, first.omega.cols])


def test_top_left_singular_vectors():
    F = RngSeed(6).generator().standard_normal((20, 4))
    vectors = top_left_singular_vectors(F, 2)
    expected = np.linalg.svd(F, full_matrices=False)[0][:, :2]
    assert np.allclose(np.abs(vectors.T @ expected), np.eye(2), atol=1e-10)
    with pytest.raises(InvalidArgumentError):
        top_left_singular_vectors(F, 5)


def test_cluster_pipeline_is_deterministic():
    task = gen_blob_task(30, 3, 2, 300, RngSeed(7))
    cfg = TrainConfig(max_iters=20)
    first = cluster_pipeline(task, cfg, 2, RngSeed(8))
    second = cluster_pipeline(task, cfg, 2, RngSeed(8))
    assert np.array_equal(first.labels, second.labels)
    assert np.array_equal(first.W, second.W)
    assert first.error == second.error
    assert 0.0 <= first.error <= 1.0
    assert first.error == clustering_error(task.labels, first.labels)


def test_cluster_pipeline_with_fourier_features():
    task = gen_blob_task(30, 2, 2, 300, RngSeed(9))
    result = cluster_pipeline(task, TrainConfig(max_iters=10), 3, RngSeed(1), rff_q=10, rff_sigma=0.5)
    assert result.W.shape == (20, 3)
    assert len(result.labels) == 30


@pytest.mark.slow
def test_cluster_pipeline_separates_blobs():
    task = gen_blob_task(150, 5, 3, 20 * 150, RngSeed(11))
    result = cluster_pipeline(task, TrainConfig(max_iters=2000), 5, RngSeed(12))
    assert result.error <= 0.05


def test_cluster_pipeline_ignores_feature_scale():
    task = gen_blob_task(30, 3, 2, 300, RngSeed(7))
    scaled = ClusterTask(1000.0 * task.X + 7.0, task.labels, task.omega, task.k)
    cfg = TrainConfig(max_iters=20)
    first = cluster_pipeline(task, cfg, 2, RngSeed(8))
    second = cluster_pipeline(scaled, cfg, 2, RngSeed(8))
    assert np.allclose(first.W, second.W, rtol=1e-6, atol=1e-9)
    assert np.array_equal(first.labels, second.labels)


def test_cluster_pipeline_rejects_linear():
    task = gen_blob_task(20, 2, 2, 100, RngSeed(7))
    with pytest.raises(UnsupportedActivationError):
        cluster_pipeline(task, TrainConfig(max_iters=5), 2, RngSeed(8), kind='linear')
    with pytest.raises(InvalidArgumentError):
        cluster_pipeline(task, TrainConfig(max_iters=5), 0, RngSeed(8))


def test_rmse_is_zero_at_truth(make_instance):
    truth, fs, obs = make_instance(kind='relu')
    assert rmse_eval(truth, fs, obs) == 0.0


def test_rmse_matches_scalar_loop(make_instance):
    truth, fs, obs = make_instance(kind='tanh')
    fp = random_factor_pair(truth.d1, truth.d2, truth.k, 'tanh', RngSeed(1))
    squares = [(predict(fp, fs.X[i], fs.Y[j]) - a) ** 2 for i, j, a in obs.triples()]
    assert rmse_eval(fp, fs, obs) == pytest.approx(np.sqrt(np.mean(squares)), rel=1e-12)


def test_split_rows_separates_users(make_instance):
    _, _, obs = make_instance(n1=20, m=200)
    train_obs, test_obs = split_rows(obs, 20, RngSeed(2))
    assert len(train_obs) + len(test_obs) == len(obs)
    assert not set(train_obs.rows.tolist()) & set(test_obs.rows.tolist())
    assert len(set(test_obs.rows.tolist())) <= 4
    with pytest.raises(InvalidArgumentError):
        split_rows(obs, 20, RngSeed(2), test_fraction=1.0)


def test_rank_evaluation_hand_case():
    scores = np.array([[0.9, 0.1],
                       [0.5, 0.8],
                       [0.1, 0.3]])
    positives = np.array([[False, False],
                          [False, True],
                          [True, False]])
    result = rank_evaluation(scores, positives, [3, 1, 2])
    assert result.r_values.tolist() == [1, 2, 3]
    assert result.cumulative_rank_curve.tolist() == [0.5, 0.5, 1.0]
    only_first = rank_evaluation(scores, positives, [1, 2, 3], columns=[0])
    assert only_first.cumulative_rank_curve.tolist() == [0.0, 0.0, 1.0]


def test_rank_evaluation_breaks_ties_by_row():
    scores = np.zeros((3, 1))
    positives = np.array([[False], [True], [False]])
    assert rank_evaluation(scores, positives, [1, 2]).cumulative_rank_curve.tolist() == [0.0, 1.0]


def test_rank_evaluation_skips_columns_without_positives():
    scores = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 1.0]])
    positives = np.array([[True, False, False], [False, False, False]])
    result = rank_evaluation(scores, positives, [1])
    assert result.cumulative_rank_curve.tolist() == [1.0]
    with pytest.raises(InvalidArgumentError):
        rank_evaluation(scores, positives, [1], columns=[1, 2])
    with pytest.raises(InvalidArgumentError):
        rank_evaluation(scores, positives, [0])


def test_rank_evaluation_of_perfect_scores():
    generator = RngSeed(3).generator()
    positives = generator.random((15, 6)) < 0.3
    positives[0] = True
    scores = positives + 0.01 * generator.random((15, 6))
    result = rank_evaluation(scores, positives, [1, 3, 10])
    assert np.all(result.cumulative_rank_curve == 1.0)
    assert result.precision[-1] == 1.0 and result.recall[-1] == 0.0
    assert len(result.precision_recall) == len(result.precision)
    assert list(result.curve_frame().columns) == ['r', 'probability']


def test_pu_eval_accepts_pairs():
    fs = gen_gaussian_features(8, 6, 3, 3, RngSeed(0))
    fp = random_factor_pair(3, 3, 2, 'relu', RngSeed(1))
    pairs = [(0, 1), (2, 3), (7, 5)]
    from_pairs = pu_eval(fp, fs, pairs, [1, 4, 8])
    from_set = pu_eval(fp, fs, ObservationSet([0, 2, 7], [1, 3, 5], np.ones(3)), [1, 4, 8])
    assert np.array_equal(from_pairs.cumulative_rank_curve, from_set.cumulative_rank_curve)
    assert np.all(np.diff(from_pairs.cumulative_rank_curve) >= 0)
    assert from_pairs.cumulative_rank_curve[-1] == 1.0
    with pytest.raises(InvalidArgumentError):
        pu_eval(fp, fs, [(8, 0)], [1])


def test_gen_pu_task():
    task = gen_pu_task(30, 25, 4, 4, 2, 0.1, RngSeed(4))
    assert 0 < len(task.positives) <= 0.1 * 30 * 25 + 1
    assert np.all(task.positives.ratings == 1.0)
    assert len(task.positives.distinct_cells()) == len(task.positives)
    with pytest.raises(InvalidArgumentError):
        gen_pu_task(30, 25, 4, 4, 2, 1.0, RngSeed(4))
    with pytest.raises(UnsupportedActivationError):
        gen_pu_task(30, 25, 4, 4, 2, 0.1, RngSeed(4), kind='linear')


def test_pu_train_eval_smoke():
    fs = gen_gaussian_features(30, 20, 4, 4, RngSeed(5))
    rows = np.concatenate([np.arange(20) % 30, (3 * np.arange(20) + 1) % 30])
    cols = np.concatenate([np.arange(20), np.arange(20)])
    positives = ObservationSet(rows, cols, np.ones(40), shape=(30, 20))
    task = PuTask(fs, positives, gen_truth(4, 4, 2, 'relu', RngSeed(6)))
    result = pu_train_eval(task, 2, 0.1, TrainConfig(max_iters=20), [1, 5, 30], RngSeed(7))
    curve = result.cumulative_rank_curve
    assert len(curve) == 3
    assert np.all(np.diff(curve) >= 0)
    assert curve[-1] == 1.0


def test_pu_train_eval_rejects_linear():
    fs = gen_gaussian_features(10, 8, 3, 3, RngSeed(5))
    positives = ObservationSet(np.arange(8), np.arange(8), np.ones(8), shape=(10, 8))
    task = PuTask(fs, positives, gen_truth(3, 3, 1, 'linear', RngSeed(6)))
    with pytest.raises(UnsupportedActivationError):
        pu_train_eval(task, 1, 0.1, TrainConfig(max_iters=2), [1], RngSeed(7))


def test_random_scores_give_the_uniform_rank_curve():
    generator = RngSeed(8).generator()
    n_rows, n_columns = 40, 4000
    positives = np.zeros((n_rows, n_columns), dtype=bool)
    positives[generator.integers(0, n_rows, size=n_columns), np.arange(n_columns)] = True
    scores = generator.random((n_rows, n_columns))
    r_values = [1, 5, 10, 20, 40]
    result = rank_evaluation(scores, positives, r_values)
    assert np.allclose(result.cumulative_rank_curve, np.array(r_values) / n_rows, atol=0.03)


def test_recovery_grid_arguments():
    cfg = TrainConfig(step_size=0.5, max_iters=1)
    with pytest.raises(UnsupportedActivationError):
        recovery_grid('linear', 2, 1, [5], [20], 1, cfg, RngSeed(0))
    with pytest.raises(InvalidArgumentError):
        recovery_grid('sigmoid', 2, 1, [5], [20], 0, cfg, RngSeed(0))


def test_recovery_grid_does_not_depend_on_workers():
    cfg = TrainConfig(step_size=0.5, max_iters=5, n_test=20)
    serial = recovery_grid('sigmoid', 2, 1, [5], [20, 40], 2, cfg, RngSeed(1), n_jobs=1)
    parallel = recovery_grid('sigmoid', 2, 1, [5], [20, 40], 2, cfg, RngSeed(1), n_jobs=2)
    assert np.array_equal(serial.success_rate, parallel.success_rate)
    assert serial.success_rate.shape == (1, 2)
    assert serial.to_frame().shape == (2, 3)


def test_recovery_trial_is_deterministic():
    cfg = TrainConfig(step_size=0.5, max_iters=5, n_test=20)
    first = recovery_trial('tanh', 3, 1, 10, 50, cfg, RngSeed(2))
    assert first == recovery_trial('tanh', 3, 1, 10, 50, cfg, RngSeed(2))
    assert first > 0


def test_spearman_monotone():
    result = RecoveryGridResult('sigmoid', [1, 2], [10, 20], np.array([[0.0, 0.5], [0.5, 1.0]]), 2)
    correlations = spearman_monotone(result)
    assert correlations['n'] == pytest.approx(1.0 / np.sqrt(2.0))
    assert correlations['m'] == pytest.approx(1.0 / np.sqrt(2.0))
    flat = RecoveryGridResult('sigmoid', [1, 2], [10, 20], np.ones((2, 2)), 2)
    assert spearman_monotone(flat) == {'n': 0.0, 'm': 0.0}


def test_recovery_trial_scores_on_the_stopping_set():
    cfg = TrainConfig(step_size=0.5, max_iters=8, n_test=20)
    rng = RngSeed(3)
    truth = gen_truth(3, 3, 1, 'tanh', rng.child(0))
    fs = gen_gaussian_features(10, 10, 3, 3, rng.child(1))
    obs = sample_observations(fs, truth, 50, rng.child(2))
    fp0 = random_factor_pair(3, 3, 1, 'tanh', rng.child(3))
    _, trace = train(fp0, truth, fs, obs, cfg, rng.child(4))
    assert recovery_trial('tanh', 3, 1, 10, 50, cfg, rng) == trace.last.test_error


def test_full_recovery_cell():
    rates = np.array([[0.0, 0.4, 1.0],
                      [0.2, 1.0, 1.0]])
    result = RecoveryGridResult('sigmoid', [10, 40], [100, 500, 1000], rates, 5)
    assert full_recovery_cell(result) == (10, 1000)
    never = RecoveryGridResult('relu', [10, 40], [100, 500, 1000], np.full((2, 3), 0.8), 5)
    assert full_recovery_cell(never) is None


@pytest.mark.slow
def test_sigmoid_grid_recovers_before_relu():
    cfg = TrainConfig(max_iters=20000)
    n_values = [10, 40, 70, 100]
    sigmoid = recovery_grid('sigmoid', 10, 5, n_values, [100, 500, 1000, 2000], 5, cfg, RngSeed(0), n_jobs=-1)
    assert sigmoid.success_rate[-1, -1] == 1.0
    correlations = spearman_monotone(sigmoid)
    assert correlations['n'] >= 0.0 and correlations['m'] >= 0.0

    relu = recovery_grid('relu', 10, 5, n_values, [200, 1000, 2000, 4000], 5, cfg, RngSeed(0), n_jobs=-1)
    sigmoid_cell = full_recovery_cell(sigmoid)
    relu_cell = full_recovery_cell(relu)
    assert relu_cell is None or relu_cell[0] * relu_cell[1] > sigmoid_cell[0] * sigmoid_cell[1]
