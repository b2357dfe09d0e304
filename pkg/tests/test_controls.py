import warnings

import numpy as np
import pytest
from scipy import special

from recency_lab.models.config import BalanceConfig, DataConfig, ProbeConfig
from recency_lab.models.errors import EmptyResult, TargetTooLarge
from recency_lab.services import controls
from recency_lab.services.capture import capture_activations
from recency_lab.services.datagen import build_corpus
from recency_lab.services.transformer import init_model

from .conftest import make_acts


def test_activation_stats_of_a_known_vector():
    out = controls.activation_stats(np.array([1.0, 2.0, 3.0, 4.0]))
    names = dict(zip(controls.ACTIVATION_STATS, out))
    assert names["l2_norm"] == pytest.approx(np.sqrt(30.0))
    assert names["max"] == 4.0
    assert names["mean"] == 2.5
    assert names["std"] == pytest.approx(np.sqrt(1.25))
    assert names["skewness"] == pytest.approx(0.0, abs=1e-12)
    assert names["kurtosis"] == pytest.approx(1.64)


def test_constant_vector_has_zero_shape_moments():
    out = controls.activation_stats(np.full(5, 2.0))
    assert out.tolist()[3:] == [0.0, 0.0, 0.0]


def test_logit_stats_uniform_logits():
    z = np.zeros(8)
    out = dict(zip(controls.LOGIT_STATS, controls.logit_stats(z)))
    assert out["entropy"] == pytest.approx(np.log(8))
    assert out["logsumexp"] == pytest.approx(special.logsumexp(z))
    assert out["logit_std"] == 0.0


def test_backward_stats_from_known_distribution():
    V = 4
    logp = np.log(np.full((3, V), 1.0 / V))
    out = controls.backward_stats_from_logprobs(logp, [0, 1, 2, 3], position=2)
    assert out[0] == pytest.approx(np.log(0.25))
    assert out[1] == pytest.approx(2 * np.log(V))
    assert out[2] == pytest.approx(out[3])
    with pytest.raises(ValueError):
        controls.backward_stats_from_logprobs(logp, [0, 1], position=0)


def test_bins_cover_out_of_range_values():
    spec = controls.BinSpec.fit(np.array([[0.0], [1.0]]), ["x"], n_bins=4)
    codes = spec.assign(np.array([[-5.0], [0.0], [0.99], [1.0], [9.0]]))
    assert codes[:, 0].tolist() == [0, 0, 3, 3, 3]


def test_quantile_bins_collapse_ties():
    spec = controls.BinSpec.fit(np.array([[1.0], [1.0], [1.0], [2.0]]), ["x"], n_bins=4, strategy="quantile")
    assert np.all(np.diff(spec.edges[0]) > 0)


def test_balanced_subset_equalizes_every_marginal():
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], 300)
    values = rng.normal(size=(600, 2)) + labels[:, None] * 0.8
    spec = controls.BinSpec.fit(values, ["a", "b"], n_bins=5)
    subset = controls.balance_subsample(values, labels, spec, seed=0)
    kept = subset.indices
    assert (labels[kept] == 0).sum() == (labels[kept] == 1).sum()
    for counts in controls.marginal_counts(values[kept], labels[kept], spec):
        np.testing.assert_array_equal(counts[0], counts[1])
    assert subset.mixed_bins <= subset.occupied_bins


def test_balance_with_no_mixed_bin():
    values = np.array([[0.0], [0.1], [10.0], [10.1]])
    labels = np.array([0, 0, 1, 1])
    spec = controls.BinSpec.fit(values, ["x"], n_bins=2)
    with pytest.raises(EmptyResult):
        controls.balance_subsample(values, labels, spec, seed=0)


def test_random_downsample_sizes():
    labels = np.array([0] * 5 + [1] * 3)
    picked = controls.random_downsample(labels, 3, seed=0)
    assert len(picked) == 6
    assert (labels[picked] == 1).sum() == 3
    with pytest.raises(TargetTooLarge):
        controls.random_downsample(labels, 4, seed=0)


def test_balanced_probe_compare_uses_one_test_set():
    rng = np.random.default_rng(1)
    n = 400
    stages = np.repeat([1, 2], n // 2)
    data = rng.normal(size=(n, 1, 1, 6))
    data[:, 0, 0, 1] += np.where(stages == 2, 1.5, 0.0)
    acts = make_acts(data, stages, probe_test=(np.arange(n) % 5 == 0))
    labels = (stages == 2).astype(np.int64)
    values, names = controls.compute_stats(acts, 0, 0, ["activation"])
    report = controls.balanced_probe_compare(acts, labels, values, names, 0, 0, BalanceConfig(n_bins=2),
                                             ProbeConfig(), seed=0)
    assert set(report.accuracies) == {"balanced", "random", "full"}
    assert report.n_test == 80
    assert report.train_sizes["balanced"] == report.train_sizes["random"]
    assert report.train_sizes["full"] == 320
    assert report.statistics == controls.ACTIVATION_STATS


def test_model_statistic_groups(micro_model_config):
    _, prompts = build_corpus(DataConfig(n_entities=12, m=2, seed=0))
    model = init_model(micro_model_config, seed=0)
    acts = capture_activations(model, prompts["1"])
    config = BalanceConfig(n_generations=3, max_new_tokens=4)
    values, names = controls.compute_stats(acts, -1, -1, ["activation", "logit", "backward", "forward"],
                                           model, prompts["1"], config)
    expected = (controls.ACTIVATION_STATS + controls.LOGIT_STATS + controls.BACKWARD_STATS
                + controls.FORWARD_STATS)
    assert names == expected
    assert values.shape == (12, len(expected))
    assert np.all(np.isfinite(values))


def test_model_groups_need_a_model(separable_acts):
    with pytest.raises(ValueError):
        controls.compute_stats(separable_acts, 0, 0, ["logit"])


def test_stats_table_rows_per_position(micro_model_config):
    _, prompts = build_corpus(DataConfig(n_entities=8, m=2, seed=0))
    model = init_model(micro_model_config, seed=0)
    acts = capture_activations(model, prompts["1"])
    table = controls.stats_table(acts, -1, [-2, -1], ["activation", "logit"], model, prompts["1"])
    assert len(table) == 16
    assert set(table["position"]) == {10, 11}


def test_norm_difference_table_detects_scaled_stage():
    rng = np.random.default_rng(0)
    stages = np.repeat([1, 2], 100)
    data = rng.normal(size=(200, 1, 2, 8))
    data[stages == 2, 0, 1] *= 2.0
    table = controls.norm_difference_table(make_acts(data, stages), 1, 2, 0)
    assert len(table) == 2
    assert table.loc[1, "p_bonferroni"] < 1e-6
    assert table.loc[1, "cohens_d"] < 0
    assert table.loc[0, "p_bonferroni"] > 0.001


def test_backward_stats_of_a_model(micro_model_config, vocab):
    model = init_model(micro_model_config, seed=0)
    prompt = vocab.range_ids("template")[:6]
    out = controls.backward_stats(model, prompt, position=4)
    assert out.shape == (len(controls.BACKWARD_STATS),)
    assert out[0] < 0.0
    assert out[2] <= out[3]
    with pytest.raises(ValueError):
        controls.backward_stats(model, prompt, position=0)


def test_forward_gen_stats_shape_and_ranges(micro_model_config, vocab):
    model = init_model(micro_model_config, seed=0)
    prompt = vocab.range_ids("template")[:5]
    result = controls.forward_gen_stats(model, prompt, position=4, n=4, max_tokens=6, seed=1)
    assert result.values.shape == (len(controls.FORWARD_STATS),)
    named = dict(zip(controls.FORWARD_STATS, result.values))
    assert 0.0 <= named["vocab_fraction"] <= 1.0
    assert named["len_mean"] <= 6
    assert result.flags == []

    single = controls.forward_gen_stats(model, prompt, position=4, n=1, max_tokens=6, seed=1)
    assert "jaccard_undefined" in single.flags


def _binned_counts(codes: np.ndarray, labels: np.ndarray) -> dict:
    counts = {}
    for code, label in zip(map(tuple, codes.tolist()), labels.tolist()):
        counts.setdefault(code, [0, 0])[label] += 1
    return counts


@pytest.mark.parametrize("strategy", ["equal-width", "quantile"])
@pytest.mark.parametrize("n_bins", [5, 15, 75])
@pytest.mark.parametrize("k", [1, 6, 7])
def test_balancing_equalizes_joint_and_marginal_counts(k, n_bins, strategy):
    rng = np.random.default_rng(k * 100 + n_bins)
    labels = np.repeat([0, 1], 3000)
    values = np.where(labels[:, None] == 0,
                      rng.choice(3, size=(6000, k), p=[0.4, 0.3, 0.3]),
                      rng.choice(3, size=(6000, k), p=[0.2, 0.3, 0.5])).astype(np.float64)
    spec = controls.BinSpec.fit(values, [f"s{d}" for d in range(k)], n_bins=n_bins, strategy=strategy)
    subset = controls.balance_subsample(values, labels, spec, seed=1)
    kept = subset.indices
    per_bin = _binned_counts(spec.assign(values[kept]), labels[kept])
    assert len(per_bin) == subset.mixed_bins
    assert all(a == b for a, b in per_bin.values())
    for counts in controls.marginal_counts(values[kept], labels[kept], spec):
        np.testing.assert_array_equal(counts[0], counts[1])


def test_constant_norms_give_a_defined_t_test():
    stages = np.repeat([1, 2], 20)
    data = np.zeros((40, 1, 2, 4))
    data[np.arange(40), 0, 0, np.arange(40) % 4] = 2.0
    data[np.arange(40), 0, 1, np.arange(40) % 4] = np.where(stages == 1, 2.0, 3.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        table = controls.norm_difference_table(make_acts(data, stages), 1, 2, 0)
    assert not table[["t_stat", "p_value", "p_bonferroni", "cohens_d"]].isna().any().any()
    assert table.loc[0, "t_stat"] == 0.0 and table.loc[0, "p_value"] == 1.0
    assert table.loc[1, "t_stat"] == -np.inf and table.loc[1, "p_value"] == 0.0
    assert table.loc[0, "cohens_d"] == 0.0
