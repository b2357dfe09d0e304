import hashlib
import json
from pathlib import Path

import pandas as pd
import pytest

from recency_lab.models.config import (DataConfig, ExperimentConfig, ModelConfig, ProbeConfig, TrainConfig,
                                       load_config)
from recency_lab.models.errors import ConfigInvalid, MissingArtifact
from recency_lab.models.records import ATTRIBUTE_KINDS, ProbeSplit
from recency_lab.services import experiments
from recency_lab.services.datagen import build_corpus

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
MICRO = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, max_context=32)


def _config(variant: str, **overrides) -> ExperimentConfig:
    base = {
        "name": f"tiny_{variant}",
        "variant": variant,
        "data": DataConfig(n_entities=48, m=3, seed=5),
        "model": MICRO,
        "train": TrainConfig(learning_rate=3e-3, batch_size=16, epochs=1),
        "probe": ProbeConfig(n_splits=2, max_iter=200),
    }
    base.update(overrides)
    return ExperimentConfig(**base)


def _all_traceable(run_dir) -> None:
    results = experiments.check_traceability(run_dir)
    assert results
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_stage_report_dataset_splits_by_probe_split(vocab):
    bundle, _ = build_corpus(DataConfig(n_entities=20, m=2, seed=0))
    letters = {1: "A", 2: "B"}
    train, evaluation = experiments.make_stage_report_dataset(
        bundle.aliases, bundle.plan.stage_of, letters, bundle.plan.probe_split, vocab)
    assert len(train) + len(evaluation) == 20
    assert all(s.probe_split == ProbeSplit.probe_test for s in evaluation)
    for sample in train + evaluation:
        assert sample.answer_tokens == [vocab.id(letters[sample.stage]), vocab.eos_id]
    with pytest.raises(ValueError):
        experiments.make_stage_report_dataset(bundle.aliases, bundle.plan.stage_of, {1: "A"},
                                              bundle.plan.probe_split, vocab)


def test_kind_assignment_is_a_disjoint_half_split():
    bundle, _ = build_corpus(DataConfig(n_entities=10, m=2, seed=0))
    assignment = experiments.assign_kinds_per_entity(bundle.entities, seed=3)
    assert assignment == experiments.assign_kinds_per_entity(bundle.entities, seed=3)
    for first, second in assignment.values():
        assert len(first) == len(second) == 3
        assert set(first) | set(second) == set(ATTRIBUTE_KINDS)


def test_datapoint_level_dataset_uses_each_entity_in_both_stages(vocab):
    bundle, _ = build_corpus(DataConfig(n_entities=10, m=2, seed=0))
    assignment = experiments.assign_kinds_per_entity(bundle.entities, seed=0)
    first, second = experiments.make_datapoint_level_dataset(bundle.entities, bundle.aliases, assignment,
                                                             bundle.plan, vocab)
    assert {s.stage for s in first} == {1} and {s.stage for s in second} == {2}
    assert {s.entity_id for s in first} == {s.entity_id for s in second} == {e.entity_id for e in bundle.entities}
    for sample in first:
        kinds = {k.value for k in assignment[sample.entity_id][0]}
        assert sample.template_id.split(":", 1)[1] in kinds


def test_stage_order_moves_reexposed_stage_last(tmp_path):
    config = _config("reexposure", data=DataConfig(n_entities=48, m=4, seed=0), reexposure_stage=2)
    assert experiments.ExperimentRunner(config, tmp_path).stage_order() == [1, 3, 4, 2]


def test_context_too_short_is_a_config_error(tmp_path):
    config = _config("six_stage", model=MICRO.model_copy(update={"max_context": 8}))
    with pytest.raises(ConfigInvalid) as info:
        experiments.run_experiment(config, tmp_path)
    assert info.value.details["max_context"] == 8
    assert info.value.details["stage"] == "corpus run0"


def test_multi_stage_run_is_fully_traceable(tmp_path):
    report = experiments.run_experiment(_config("six_stage"), tmp_path)
    for name in ("config.json", "report.json", "timing.json", "run.log", "ckpt/run0_D3.ckpt", "acts/run0_D3/1.actv"):
        assert (tmp_path / name).exists(), name
    assert set(report.stage_losses) == {"run0/D1", "run0/D2", "run0/D3"}
    assert "run0/1/first_vs_last_max" in report.scalars
    for artifact in ("probe_grid_run0_1", "pairwise_run0_1", "probe_cosines_run0_1", "histogram_diffmean",
                     "cosine_stats", "norm_difference", "histogram_probe"):
        assert artifact in report.artifacts, artifact
    pairwise = pd.read_csv(tmp_path / report.artifacts["pairwise_run0_1"])
    assert len(pairwise) == 3
    timing = json.loads((tmp_path / "timing.json").read_text())
    assert "train run0" in timing
    _all_traceable(tmp_path)


def test_two_runs_share_geometry_tables(tmp_path):
    config = _config("six_stage", n_runs=2, data=DataConfig(n_entities=48, m=3, seed=5, prompt_ids=[1, 2]))
    report = experiments.run_experiment(config, tmp_path)
    assert (tmp_path / "corpus" / "run1").is_dir()
    assert "cross_token_cosines" in report.artifacts
    if "projection" in report.artifacts:
        projection = pd.read_csv(tmp_path / report.artifacts["projection"])
        assert len(projection) == report.scalars["projection_rows"].value == 4 * 3
    _all_traceable(tmp_path)


def test_two_stage_run_notes_a_degenerate_axis(tmp_path):
    report = experiments.run_experiment(_config("two_stage", data=DataConfig(n_entities=48, m=2, seed=5)), tmp_path)
    assert any("recency axis unavailable" in note for note in report.notes)
    assert "pairwise_run0_1" not in report.artifacts
    assert "histogram_diffmean" in report.artifacts
    _all_traceable(tmp_path)


def test_washout_probes_after_every_epoch(tmp_path):
    report = experiments.run_experiment(_config("washout", washout_epochs=2, washout_tokens=2), tmp_path)
    frame = pd.read_csv(tmp_path / report.artifacts["washout_run0_1"])
    assert sorted(frame["epoch"].unique()) == [1, 2]
    assert len(frame) == 4
    assert "run0/washout" in report.stage_losses
    _all_traceable(tmp_path)


def test_datapoint_level_probes_each_question_kind(tmp_path):
    config = _config("datapoint_level", data=DataConfig(n_entities=40, m=2, seed=1))
    report = experiments.run_experiment(config, tmp_path)
    summary = pd.read_csv(tmp_path / report.artifacts["datapoint_summary_run0"])
    assert set(summary["kind"]) <= {k.value for k in ATTRIBUTE_KINDS}
    assert len(summary) >= 4
    assert (tmp_path / "ckpt" / "run0_D2.ckpt").exists()
    _all_traceable(tmp_path)


def test_stage_report_accuracy_is_reported(tmp_path):
    config = _config("stage_report", data=DataConfig(n_entities=40, m=2, seed=1), stage_report_epochs=1)
    report = experiments.run_experiment(config, tmp_path)
    value = report.scalars["run0/stage_report_accuracy"].value
    assert 0.0 <= value <= 1.0
    assert (tmp_path / "ckpt" / "run0_stage_report.ckpt").exists()
    _all_traceable(tmp_path)


def test_sanity_untrained_and_reexposure(tmp_path):
    untrained = experiments.run_experiment(_config("sanity", sanity_mode="untrained"), tmp_path / "untrained")
    assert untrained.stage_losses == {}
    assert (tmp_path / "untrained" / "ckpt" / "run0_init.ckpt").exists()

    reexposed = experiments.run_experiment(_config("reexposure", reexposure_stage=1), tmp_path / "reexposure")
    assert "run0/reD1" in reexposed.stage_losses
    assert (tmp_path / "reexposure" / "acts" / "run0_reD1" / "1.actv").exists()


def test_followups_seen_unseen_and_balancing(tmp_path):
    config = _config("two_stage", data=DataConfig(n_entities=60, m=2, seed=2), followups=["seen_unseen", "balancing"],
                     balance={"groups": ["activation"], "n_bins": 2})
    report = experiments.run_experiment(config, tmp_path)
    assert "run0/1/seen_unseen_max" in report.scalars
    assert "balance_run0_1" in report.artifacts or any(n.startswith("balancing") for n in report.notes)
    _all_traceable(tmp_path)


def test_traceability_flags_a_tampered_report(tmp_path):
    experiments.run_experiment(_config("two_stage", data=DataConfig(n_entities=48, m=2, seed=5)), tmp_path)
    report_file = tmp_path / "report.json"
    payload = json.loads(report_file.read_text())
    key = next(iter(payload["scalars"]))
    payload["scalars"][key]["value"] += 0.5
    report_file.write_text(json.dumps(payload))
    failed = [r for r in experiments.check_traceability(tmp_path) if not r.passed]
    assert [r.check for r in failed] == [key]


def test_traceability_needs_a_report(tmp_path):
    with pytest.raises(MissingArtifact):
        experiments.check_traceability(tmp_path)


def _digests(run_dir: Path) -> dict:
    files = [run_dir / "report.json"] + sorted((run_dir / "reports").glob("*.csv"))
    return {f.name: hashlib.sha256(f.read_bytes()).hexdigest() for f in files}


def test_reruns_write_byte_identical_reports(tmp_path):
    config = _config("two_stage", data=DataConfig(n_entities=48, m=2, seed=5))
    experiments.run_experiment(config, tmp_path / "a")
    experiments.run_experiment(config, tmp_path / "b")
    first, second = _digests(tmp_path / "a"), _digests(tmp_path / "b")
    assert len(first) > 1
    assert first == second


@pytest.mark.slow
@pytest.mark.parametrize("mode, ceiling", [("shuffled_labels", 0.53), ("untrained", 0.55),
                                           ("mixed_from_start", 0.55)])
def test_null_controls_stay_at_chance(tmp_path, mode, ceiling):
    config = load_config(CONFIG_DIR / f"sanity_{mode}.json", ExperimentConfig)
    report = experiments.run_experiment(config, tmp_path)
    best = report.scalars["run0/1/first_vs_last_max"].value
    assert best <= ceiling, f"{mode}: {best:.3f}"


@pytest.mark.slow
def test_six_stage_model_memorizes_and_orders_stages(tmp_path):
    config = load_config(CONFIG_DIR / "six_stage.json", ExperimentConfig)
    config = config.model_copy(update={
        "n_runs": 1,
        "followups": ["seen_unseen"],
        "data": config.data.model_copy(update={"prompt_ids": [1]}),
    })
    report = experiments.run_experiment(config, tmp_path)
    assert report.scalars["run0/1/seen_unseen_max"].value >= 0.8
    assert 0.5 <= report.scalars["run0/1/first_vs_last_max"].value <= 1.0
    first, last = report.stage_losses["run0/D1"], report.stage_losses["run0/D6"]
    assert last[-1] < last[0] and first[-1] < first[0]
