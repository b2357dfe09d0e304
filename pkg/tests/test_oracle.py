import numpy as np
import pytest

from recency_lab.models.config import BalanceConfig, PlantedSpecConfig, ProbeConfig
from recency_lab.services import geometry, oracle
from recency_lab.services.controls import balanced_probe_compare

STRONG = PlantedSpecConfig(m=3, n=500, dim=8, centroid_spacing=1.0, noise_sigma=0.05)


def test_planted_means_follow_the_exposure_order():
    planted = oracle.plant_signal(STRONG.model_copy(update={"m": 4}), seed=3, order=[3, 1, 4, 2])
    along = planted.means @ planted.direction
    ranks = {stage: along[stage - 1] for stage in planted.order}
    assert ranks[3] < ranks[1] < ranks[4] < ranks[2]
    assert planted.acts.data.shape == (2000, oracle.PLANTED_LAYERS, oracle.PLANTED_TOKENS, 8)
    assert np.linalg.norm(planted.direction) == pytest.approx(1.0)


def test_planted_split_is_per_stage():
    planted = oracle.plant_signal(STRONG, seed=0)
    for stage in (1, 2, 3):
        rows = planted.acts.stages == stage
        assert planted.acts.probe_test[rows].sum() == 100


def test_curvature_bends_centroids_off_the_line():
    straight = oracle.plant_signal(STRONG.model_copy(update={"noise_sigma": 0.0}), seed=1)
    bent = oracle.plant_signal(STRONG.model_copy(update={"noise_sigma": 0.0, "curvature": 0.5}), seed=1)
    assert geometry.collinearity_residual(straight.means) == pytest.approx(0.0, abs=1e-9)
    assert geometry.collinearity_residual(bent.means) > 0.1


def test_bayes_accuracy():
    assert oracle.bayes_accuracy(0.0, 1.0) == pytest.approx(0.5)
    assert oracle.bayes_accuracy(2.0, 1.0) == pytest.approx(0.8413, abs=1e-4)
    assert oracle.bayes_accuracy(1.0, 0.0) == 1.0


def test_strong_spec_passes_every_check(tmp_path):
    results = oracle.verify_spec(STRONG, seed=0, out_dir=tmp_path, probe_config=ProbeConfig(n_splits=3))
    failed = [r for r in results if not r.passed]
    assert not failed, failed
    checks = {r.check for r in results}
    assert {"axis_alignment", "ordering_tau", "collinearity", "probe_peak_cell", "pairwise_monotone",
            "balance_equal_bins"} <= checks
    assert (tmp_path / "planted_0.actv").exists()


def test_null_spec_reports_instead_of_asserting_order():
    spec = PlantedSpecConfig(m=3, n=200, dim=8, centroid_spacing=0.0, noise_sigma=1.0)
    results = oracle.verify_spec(spec, seed=0, probe_config=ProbeConfig(n_splits=2))
    checks = {r.check for r in results}
    assert "ordering_tau_reported" in checks
    assert "ordering_tau" not in checks
    assert "probe_chance" in checks


def test_orthogonal_signal_hides_from_statistics():
    acts, labels = oracle.orthogonal_signal(50, seed=0)
    assert acts.n_samples == 100
    assert labels.sum() == 50


@pytest.mark.slow
def test_balancing_mechanism_checks():
    results = oracle.verify_balancing(2000, seed=0, probe_config=ProbeConfig(n_splits=1))
    assert all(r.passed for r in results), [r for r in results if not r.passed]


@pytest.mark.slow
def test_default_pipeline_passes():
    results = oracle.verify_pipeline([oracle.PlantedSpecConfig()], seed=0)
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_norm_only_rows_differ_only_in_norm():
    acts, labels = oracle.norm_only_signal(400, seed=0)
    rows = acts.cell(*oracle.PLANTED_CELL).astype(np.float64)
    norms = np.round(np.linalg.norm(rows, axis=1), 4)
    assert set(norms.tolist()) == {1.0, 1.5, 2.0}
    assert set(norms[labels == 0].tolist()) == {1.0, 1.5}
    assert set(norms[labels == 1].tolist()) == {1.5, 2.0}


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_norm_balancing_removes_a_norm_only_signal(seed):
    layer, token = oracle.PLANTED_CELL
    acts, labels = oracle.norm_only_signal(1000, seed=seed)
    norms = np.linalg.norm(acts.cell(layer, token).astype(np.float64), axis=1, keepdims=True)
    report = balanced_probe_compare(acts, labels, norms, ["l2_norm"], layer, token,
                                    BalanceConfig(n_bins=15), ProbeConfig(n_splits=1), seed)
    assert report.mixed_bins == 1
    assert report.accuracies["balanced"] <= 0.55
    assert report.accuracies["random"] >= 0.9


def test_bayes_bound_is_checked_at_small_n():
    spec = PlantedSpecConfig(m=2, n=500, dim=8, centroid_spacing=1.0, noise_sigma=1.0)
    results = {r.check: r for r in oracle.verify_spec(spec, seed=0, probe_config=ProbeConfig(n_splits=2))}
    bound = results["probe_bayes_bound"]
    assert bound.passed
    assert bound.value <= oracle.bayes_accuracy(1.0, 1.0) + 0.02


@pytest.mark.parametrize("ratio", [0.0, 1.0, 2.0, 4.0])
def test_two_stage_probe_tracks_the_bayes_accuracy(ratio):
    spec = PlantedSpecConfig(m=2, n=2000, dim=8, centroid_spacing=ratio, noise_sigma=1.0)
    bayes = oracle.bayes_accuracy(ratio, 1.0)
    for seed in range(20):
        planted = oracle.plant_signal(spec, seed)
        acc = oracle.pair_probe_accuracy(planted, spec, planted.acts, ProbeConfig(), seed)
        assert abs(acc - bayes) <= 0.03, (seed, acc, bayes)
