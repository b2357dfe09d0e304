import numpy as np
import pytest
from scipy import optimize

from recency_lab.models.config import ProbeConfig
from recency_lab.models.errors import EmptyEval, NonFiniteFeature, SingleClass
from recency_lab.services import probes

from .conftest import make_acts


def _blobs(n=400, dim=5, shift=2.0, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    X = rng.normal(size=(n, dim))
    X[:, 0] += np.where(y == 1, shift, -shift)
    return X, y


def test_objective_gradient_matches_finite_difference():
    X, y = _blobs(n=40, dim=3)
    objective = probes.LogisticObjective(X, y, l2=0.05)
    theta = np.random.default_rng(1).normal(size=objective.dim)
    _, grad = objective(theta)
    err = optimize.check_grad(lambda t: objective(t)[0], lambda t: objective(t)[1], theta)
    assert err < 1e-6 * max(1.0, np.linalg.norm(grad))


def test_bias_is_not_regularized():
    X = np.zeros((10, 2))
    y = np.array([1] * 8 + [0] * 2)
    probe = probes.train_probe(X, y, l2=10.0)
    assert np.allclose(probe.weights, 0.0)
    assert probe.bias == pytest.approx(np.log(8 / 2), rel=1e-4)


def test_separable_data_is_learned():
    X, y = _blobs()
    probe = probes.train_probe(X, y, l2=probes.l2_from_C(0.1, len(y)))
    assert probe.converged
    assert probes.eval_probe(probe, X, y) > 0.95
    assert probe.direction[0] > 0.9


def test_solution_does_not_depend_on_start():
    X, y = _blobs(n=100)
    a = probes.train_probe(X, y, l2=0.01)
    b = probes.train_probe(X, y, l2=0.01, seed=4, random_init=True)
    np.testing.assert_allclose(a.weights, b.weights, atol=1e-3)


def test_probe_input_errors():
    with pytest.raises(SingleClass):
        probes.train_probe(np.ones((4, 2)), np.zeros(4), l2=0.1)
    X = np.ones((4, 2))
    X[0, 0] = np.nan
    with pytest.raises(NonFiniteFeature):
        probes.train_probe(X, np.array([0, 1, 0, 1]), l2=0.1)
    model = probes.train_probe(np.eye(2), np.array([0, 1]), l2=0.1)
    with pytest.raises(EmptyEval):
        probes.eval_probe(model, np.zeros((0, 2)), np.zeros(0))


def test_cell_seed_is_stable():
    assert probes.cell_seed(0, 1, 2, 3) == probes.cell_seed(0, 1, 2, 3)
    assert probes.cell_seed(0, 1, 2, 3) != probes.cell_seed(0, 1, 3, 2)
    assert 0 <= probes.cell_seed(5, 0, 0, 0) < 2 ** 32


def test_entity_splits_keep_entities_together():
    entity_ids = np.repeat(np.arange(20), 3)
    labels = (entity_ids >= 10).astype(np.int64)
    splits = probes.entity_splits(entity_ids, labels, n_splits=3, ratio=0.8, seed=0)
    assert len(splits) == 3
    for train_mask, test_mask in splits:
        assert not set(entity_ids[train_mask]) & set(entity_ids[test_mask])
        assert (train_mask | test_mask).all()
        assert len(set(entity_ids[test_mask & (labels == 0)])) == 2
        assert len(set(entity_ids[test_mask & (labels == 1)])) == 2
    assert not np.array_equal(splits[0][0], splits[1][0])


def test_shuffled_labels_stay_per_entity():
    entity_ids = np.repeat(np.arange(10), 2)
    labels = (entity_ids % 2).astype(np.int64)
    shuffled = probes.shuffle_entity_labels(entity_ids, labels, seed=1)
    for e in range(10):
        assert len(set(shuffled[entity_ids == e])) == 1
    assert shuffled.sum() == labels.sum()


def test_probe_grid_finds_the_planted_cell(separable_acts):
    config = ProbeConfig(n_splits=2)
    report = probes.stage_probe_grid(separable_acts, 1, 2, config)
    assert report.layers == [0, 1] and report.tokens == [0, 1, 2]
    layer, token, best = report.max_cell()
    assert (layer, token) == (1, 2)
    assert best > 0.95
    assert report.at(0, 0) < 0.8
    assert report.label_def == "D1-vs-D2"
    frame = report.to_frame()
    assert len(frame) == 6
    assert set(frame.columns) >= {"layer", "token", "acc_mean", "acc_std"}


def test_probe_grid_is_deterministic(separable_acts):
    config = ProbeConfig(n_splits=2, layers=[1], tokens=[-1])
    a = probes.stage_probe_grid(separable_acts, 1, 2, config)
    b = probes.stage_probe_grid(separable_acts, 1, 2, config)
    assert a == b
    assert a.tokens == [2]


def test_shuffled_labels_drop_to_chance(separable_acts):
    config = ProbeConfig(n_splits=3, layers=[1], tokens=[2])
    report = probes.stage_probe_grid(separable_acts, 1, 2, config, shuffle_labels=True)
    assert report.acc_mean[0][0] < 0.7
    assert report.label_def.endswith("(shuffled)")


def _ordered_stage_acts(m=4, n_per=150, dim=6, seed=0):
    rng = np.random.default_rng(seed)
    stages = np.repeat(np.arange(1, m + 1), n_per)
    data = rng.normal(size=(len(stages), 1, 1, dim))
    data[:, 0, 0, 0] += 1.0 * (stages - 1)
    return make_acts(data, stages)


def test_pairwise_matrix_grows_with_stage_distance():
    acts = _ordered_stage_acts()
    matrix = probes.pairwise_stage_grid(acts, 4, 0, 0, ProbeConfig(n_splits=3))
    assert np.isnan(matrix.accuracy[1, 0]) and np.isnan(matrix.accuracy[2, 2])
    assert matrix.accuracy[0, 3] > matrix.accuracy[0, 1]
    assert matrix.weakly_monotone(tol=0.1)
    assert len(matrix.to_frame()) == 6


def test_all_pairs_directions_agree_on_ordered_stages():
    acts = _ordered_stage_acts()
    pairs, directions = probes.all_pairs_directions(acts, 4, 0, 0)
    assert pairs[0] == (1, 2) and len(pairs) == 6
    np.testing.assert_allclose(np.linalg.norm(directions, axis=1), 1.0)
    assert (directions[:, 0] > 0.8).all()


def test_cross_token_cosines_shape(separable_acts):
    grid = probes.cross_token_cosines(separable_acts, separable_acts, 1, 2, 1, [0, 2])
    assert grid.shape == (2, 2)
    assert grid[1, 1] == pytest.approx(1.0)


def test_probe_grid_finds_the_separable_cell(separable_acts, fast_probe_config):
    labels = (separable_acts.stages == 2).astype(np.int64)
    report = probes.probe_grid(separable_acts, labels, fast_probe_config, label_def="D1-vs-D2")
    assert report.layers == [0, 1] and report.tokens == [0, 1, 2]
    layer, token, acc = report.max_cell()
    assert (layer, token) == (1, 2)
    assert acc > 0.95
    assert report.n_train + report.n_test == 200

    shuffled = probes.probe_grid(separable_acts, labels, fast_probe_config, label_def="D1-vs-D2",
                                 shuffle_labels=True)
    assert shuffled.label_def == "D1-vs-D2 (shuffled)"
    assert shuffled.at(1, 2) < 0.8


def test_solver_reaches_the_same_objective_from_any_start():
    X, y = _blobs(n=300, dim=6, shift=0.7, seed=3)
    l2 = probes.l2_from_C(0.1, len(y))
    zero = probes.train_probe(X, y, l2=l2, tol=1e-9)
    noisy = probes.train_probe(X, y, l2=l2, seed=11, random_init=True, tol=1e-9)
    objective = probes.LogisticObjective(X, y, l2)
    a = objective(np.append(zero.weights, zero.bias))[0]
    b = objective(np.append(noisy.weights, noisy.bias))[0]
    assert abs(a - b) <= 1e-8


def test_flipped_labels_give_the_complementary_accuracy():
    X, y = _blobs(n=200, shift=0.5, seed=2)
    probe = probes.train_probe(X, y, l2=0.01)
    acc = probes.eval_probe(probe, X, y)
    assert 0.5 < acc < 1.0
    assert probes.eval_probe(probe, X, 1 - y) == pytest.approx(1.0 - acc, abs=1e-12)


def test_shuffled_label_grid_stays_near_chance_in_every_cell():
    rng = np.random.default_rng(7)
    n = 4000
    stages = np.repeat([1, 2], n // 2)
    data = rng.normal(size=(n, 2, 2, 8))
    data[:, 1, 1, 0] += np.where(stages == 2, 2.0, -2.0)
    acts = make_acts(data, stages)
    config = ProbeConfig(n_splits=3, n_permutations=5)

    null = probes.stage_probe_grid(acts, 1, 2, config, shuffle_labels=True)
    assert null.split.startswith("15x")
    assert np.all(np.abs(np.asarray(null.acc_mean) - 0.5) <= 0.03), null.acc_mean
    real = probes.stage_probe_grid(acts, 1, 2, config)
    assert real.at(1, 1) > 0.95
