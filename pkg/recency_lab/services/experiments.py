"""
End-to-end experiment orchestration.

One ExperimentConfig drives corpus generation, the training schedule of its
variant, activation capture and the analyses the variant needs. Everything
lands in one run directory:

    config.json       resolved config
    corpus/<run>/     corpus files per independent run
    ckpt/             <run>_<stage>.ckpt
    acts/             <run>_<stage>/<tag>.actv (+ .idx.jsonl)
    reports/          CSV and JSON tables
    report.json       RunReport; every scalar points at a reports/ file
    timing.json       wall-clock per phase (kept out of report.json)
"""

import copy
import json
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from recency_lab.adapters.activation_store import activation_path, read_activations, write_activations
from recency_lab.adapters.checkpoint_store import checkpoint_path, load_checkpoint, save_checkpoint
from recency_lab.adapters.corpus_store import CorpusBundle, save_corpus
from recency_lab.models.activations import ActivationTensor
from recency_lab.models.config import ExperimentConfig
from recency_lab.models.errors import ConfigInvalid, EmptyResult, LabError, MissingArtifact
from recency_lab.models.records import (
    ATTRIBUTE_KINDS,
    Alias,
    AttributeKind,
    EntityRecord,
    ProbeSplit,
    QASample,
    StagePlan,
    Variant,
)
from recency_lab.models.reports import CheckResult, RunReport, TracedScalar
from recency_lab.services import geometry, probes
from recency_lab.services import templates as tpl
from recency_lab.services.capture import capture_activations
from recency_lab.services.controls import (
    balanced_probe_compare,
    compute_stats,
    norm_difference_table,
    stats_table,
)
from recency_lab.services.datagen import (
    NATURAL_ALIAS_LEN,
    build_corpus,
    encode_template,
    longest_sequence,
    render_synthetic_samples,
)
from recency_lab.services.training import sequential_finetune, train_stage
from recency_lab.services.transformer import TransformerLM, init_model, logits_and_activations
from recency_lab.services.vocabulary import Vocabulary, default_vocabulary
from recency_lab.utils.logger import logger, run_log


def stage_label(stage: int) -> str:
    return f"D{stage}"


def make_stage_report_dataset(
    aliases: Sequence[Alias],
    stage_labels: Dict[int, int],
    letter_map: Dict[int, str],
    probe_split: Dict[int, ProbeSplit],
    vocab: Optional[Vocabulary] = None,
) -> Tuple[List[QASample], List[QASample]]:
    """
    "Which training stage is this ALIAS from ?" samples answered by the
    stage letter. Probe-train aliases form the fine-tune set, probe-test
    aliases the evaluation set.
    """
    vocab = vocab or default_vocabulary()
    missing = sorted(set(stage_labels.values()) - set(letter_map))
    if missing:
        raise ValueError(f"letter_map does not cover stages {missing}")

    train, evaluation = [], []
    for alias in aliases:
        if alias.entity_id not in stage_labels:
            continue
        stage = stage_labels[alias.entity_id]
        split = probe_split.get(alias.entity_id, ProbeSplit.probe_train)
        prompt = encode_template(tpl.STAGE_REPORT_TEMPLATE, alias, vocab)
        answer = [vocab.id(letter_map[stage]), vocab.eos_id]
        sample = QASample(
            entity_id=alias.entity_id, stage=stage, probe_split=split, template_id="stage_report",
            prompt_tokens=prompt, answer_tokens=answer,
            variant=Variant.natural if len(alias.subtokens) == NATURAL_ALIAS_LEN else Variant.synthetic,
            text=vocab.render(prompt + answer),
        )
        (evaluation if split == ProbeSplit.probe_test else train).append(sample)
    return train, evaluation


def assign_kinds_per_entity(entities: Sequence[EntityRecord], seed: int) -> Dict[int, Tuple[List[AttributeKind], List[AttributeKind]]]:
    """Per entity, a random 3/3 split of the six question kinds into (stage 1, stage 2)."""
    assignment = {}
    for entity in entities:
        perm = np.random.default_rng([seed, entity.entity_id]).permutation(len(ATTRIBUTE_KINDS))
        half = len(ATTRIBUTE_KINDS) // 2
        assignment[entity.entity_id] = (
            [ATTRIBUTE_KINDS[int(i)] for i in sorted(perm[:half])],
            [ATTRIBUTE_KINDS[int(i)] for i in sorted(perm[half:])],
        )
    return assignment


def make_datapoint_level_dataset(
    entities: Sequence[EntityRecord],
    aliases: Sequence[Alias],
    assignment: Dict[int, Tuple[List[AttributeKind], List[AttributeKind]]],
    plan: StagePlan,
    vocab: Optional[Vocabulary] = None,
) -> List[List[QASample]]:
    """Two stage datasets over the same entities, each asking that entity's own disjoint kinds."""
    vocab = vocab or default_vocabulary()
    alias_of = {a.entity_id: a for a in aliases}
    stages: List[List[QASample]] = [[], []]
    for entity in entities:
        first, second = assignment[entity.entity_id]
        if set(first) & set(second):
            raise ValueError(f"entity {entity.entity_id} has kinds in both stages: {set(first) & set(second)}")
        for k, kinds in enumerate((first, second)):
            rendered = render_synthetic_samples(entity, alias_of[entity.entity_id], plan, kinds, vocab)
            stages[k].extend(s.model_copy(update={"stage": k + 1}) for s in rendered)
    return stages


def stage_report_accuracy(model: TransformerLM, samples: Sequence[QASample], batch_size: int = 128) -> float:
    """Fraction of samples whose greedy next token is the expected stage letter."""
    if not samples:
        return float("nan")
    hits = 0
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        logits, _ = logits_and_activations(model, [s.prompt_tokens for s in batch])
        predicted = logits[:, -1, :].argmax(dim=-1).tolist()
        hits += sum(int(p == s.answer_tokens[0]) for p, s in zip(predicted, batch))
    return hits / len(samples)


class ExperimentRunner:
    """Runs one ExperimentConfig into one run directory."""

    def __init__(self, config: ExperimentConfig, run_dir: Path):
        self.config = config
        self.run_dir = Path(run_dir)
        self.reports_dir = self.run_dir / "reports"
        self.timing: Dict[str, float] = {}
        self.report = RunReport(name=config.name, variant=config.variant, config=config.model_dump(mode="json"))
        self.vocab = default_vocabulary()
        self.m = config.data.m

    # bookkeeping

    @contextmanager
    def phase(self, name: str):
        start = time.perf_counter()
        logger.info(f"[{self.config.name}] {name}")
        try:
            yield
        except LabError as e:
            e.details.setdefault("stage", name)
            logger.error(f"[{self.config.name}] {name} failed: {e.message}")
            raise
        finally:
            self.timing[name] = self.timing.get(name, 0.0) + time.perf_counter() - start

    def write_csv(self, name: str, frame: pd.DataFrame) -> str:
        self.reports_dir.mkdir(parents=True, exist_ok=True)
        frame.to_csv(self.reports_dir / name, index=False)
        rel = f"reports/{name}"
        self.report.artifacts[name.rsplit(".", 1)[0]] = rel
        return rel

    def write_json(self, name: str, payload) -> str:
        self.reports_dir.mkdir(parents=True, exist_ok=True)
        (self.reports_dir / name).write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")
        rel = f"reports/{name}"
        self.report.artifacts[name.rsplit(".", 1)[0]] = rel
        return rel

    def trace(self, key: str, value: float, artifact: str, field: str, **where) -> None:
        self.report.scalars[key] = TracedScalar(value=float(value), artifact=artifact, field=field, where=where)

    # data and models

    def corpus(self, run: int) -> Tuple[CorpusBundle, Dict[str, List[QASample]]]:
        cfg = self.config
        data = cfg.data.model_copy(update={"seed": cfg.data.seed + run})
        if "seen_unseen" in cfg.followups and data.n_unseen == 0:
            data = data.model_copy(update={"n_unseen": max(2, data.entity_count // data.m)})
        epochs = [cfg.train.epochs] * self.m
        if cfg.variant == "extra_epochs":
            epochs[cfg.extra_epochs_stage - 1] = cfg.extra_epochs
        bundle, test_prompts = build_corpus(data, epochs, cfg.run_variant(run), self.vocab)

        longest = longest_sequence(bundle, test_prompts)
        if longest > cfg.model.max_context:
            raise ConfigInvalid(
                f"max_context {cfg.model.max_context} is shorter than the longest sequence {longest}",
                max_context=cfg.model.max_context, longest=longest,
            )
        save_corpus(self.run_dir, bundle, test_prompts, self.vocab, run=self.run_name(run))
        return bundle, test_prompts

    def run_name(self, run: int) -> str:
        return f"run{run}"

    def save(self, model: TransformerLM, run: int, label: str) -> str:
        name = f"{self.run_name(run)}_{label}"
        save_checkpoint(model, checkpoint_path(self.run_dir, name))
        return name

    def capture(self, model: TransformerLM, ckpt: str, tag: str, prompts: Sequence[QASample],
                include_answer: bool = False) -> ActivationTensor:
        acts = capture_activations(model, prompts, include_answer=include_answer)
        write_activations(activation_path(self.run_dir, ckpt, tag), acts)
        return acts

    def reload(self, ckpt: str, tag: str) -> ActivationTensor:
        return read_activations(activation_path(self.run_dir, ckpt, tag))

    def record_losses(self, run: int, logs) -> None:
        for log in logs:
            self.report.stage_losses[f"{self.run_name(run)}/{log.label}"] = log.epoch_losses

    def train_schedule(self, run: int, bundle: CorpusBundle) -> Tuple[TransformerLM, List[str]]:
        """Train the variant's stage schedule; returns the final model and checkpoint names in order."""
        cfg = self.config
        model = init_model(cfg.model, cfg.seed)
        train_cfg = cfg.train.model_copy(update={"seed": cfg.train.seed + 100 * run})
        datasets = bundle.stage_datasets()
        epochs = list(bundle.plan.epochs)
        names: List[str] = []

        if cfg.variant == "sanity" and cfg.sanity_mode == "untrained":
            names.append(self.save(model, run, "init"))
            return model, names
        if cfg.variant == "sanity" and cfg.sanity_mode == "mixed_from_start":
            union = [s for d in datasets for s in d]
            log = train_stage(model, union, train_cfg, "mixed")
            self.record_losses(run, [log])
            names.append(self.save(model, run, "mixed"))
            return model, names

        model, checkpoints, logs = sequential_finetune(model, datasets, epochs, train_cfg,
                                                       [stage_label(k + 1) for k in range(self.m)])
        self.record_losses(run, logs)
        for k, ckpt in enumerate(checkpoints):
            names.append(self.save(ckpt, run, stage_label(k + 1)))

        if cfg.variant == "reexposure":
            k = cfg.reexposure_stage
            label = f"re{stage_label(k)}"
            log = train_stage(model, datasets[k - 1],
                              train_cfg.model_copy(update={"seed": train_cfg.seed + self.m}), label)
            self.record_losses(run, [log])
            names.append(self.save(model, run, label))
        return model, names

    # analyses

    def analysis_cell(self, acts: ActivationTensor) -> Tuple[int, int]:
        return acts.resolve(self.config.probe.analysis_layer, self.config.probe.analysis_token)

    def probe_first_last(self, acts: ActivationTensor, run: int, tag: str, shuffle: bool = False) -> None:
        report = probes.stage_probe_grid(acts, 1, self.m, self.config.probe, shuffle_labels=shuffle)
        name = f"probe_grid_{self.run_name(run)}_{tag}.csv"
        rel = self.write_csv(name, report.to_frame())
        layer, token, best = report.max_cell()
        self.trace(f"{self.run_name(run)}/{tag}/first_vs_last_max", best, rel, "acc_mean", layer=layer, token=token)
        a_layer, a_token = self.analysis_cell(acts)
        if a_layer in report.layers and a_token in report.tokens:
            self.trace(f"{self.run_name(run)}/{tag}/first_vs_last_cell", report.at(a_layer, a_token), rel,
                       "acc_mean", layer=a_layer, token=a_token)

    def pairwise(self, acts: ActivationTensor, run: int, tag: str) -> None:
        if self.m < 3:
            return
        layer, token = self.analysis_cell(acts)
        matrix = probes.pairwise_stage_grid(acts, self.m, layer, token, self.config.probe)
        self.write_csv(f"pairwise_{self.run_name(run)}_{tag}.csv", matrix.to_frame())
        pairs, directions = probes.all_pairs_directions(acts, self.m, layer, token, self.config.probe)
        grid = geometry.probe_cosine_matrix(directions)
        labels = [f"D{i}-D{j}" for i, j in pairs]
        self.write_csv(f"probe_cosines_{self.run_name(run)}_{tag}.csv",
                       pd.DataFrame(grid, index=labels, columns=labels).reset_index().rename(columns={"index": "pair"}))

    def stage_order(self) -> List[int]:
        """Stage ids from oldest to most recent exposure."""
        order = list(range(1, self.m + 1))
        if self.config.variant == "reexposure":
            order.remove(self.config.reexposure_stage)
            order.append(self.config.reexposure_stage)
        return order

    def geometry_block(self, final: Dict[Tuple[int, str], ActivationTensor],
                       trajectory: Optional[Dict[Tuple[int, str, str], ActivationTensor]] = None) -> None:
        """Recency-axis projection over all runs and prompts, then per-cell density and similarity tables."""
        sets = []
        for (run, tag), acts in sorted(final.items()):
            layer, token = self.analysis_cell(acts)
            sets.append(geometry.centroids(acts, layer, token, list(range(1, self.m + 1)),
                                           run=f"{self.run_name(run)}/p{tag}"))
        try:
            self.projection_block(sets, trajectory)
        except LabError as e:
            self.report.notes.append(f"recency axis unavailable: {e.message}")
            logger.warning(f"Recency axis unavailable: {e.message}")
        self.density_block(final, sets[0])

    def projection_block(self, sets: List[geometry.CentroidSet],
                         trajectory: Optional[Dict[Tuple[int, str, str], ActivationTensor]]) -> None:
        first, last = self.stage_order()[0], self.stage_order()[-1]
        axis = geometry.recency_basis(sets, pair=(first, last))

        projected = list(sets)
        if trajectory:
            for (run, ckpt, tag), acts in sorted(trajectory.items()):
                layer, token = self.analysis_cell(acts)
                projected.append(geometry.centroids(acts, layer, token, list(range(1, self.m + 1)),
                                                    run=f"{self.run_name(run)}/{ckpt}/p{tag}"))
        rel_proj = self.write_csv("projection.csv", geometry.projection_frame(projected, axis))

        rank = {stage: r for r, stage in enumerate(self.stage_order())}
        rows = []
        for cs in sets:
            px = geometry.project(cs.vectors, axis)[:, 0]
            rows.append({
                "run": cs.run,
                "tau": geometry.ordering_score(px, [rank[s] for s in cs.stages]),
                "collinearity": geometry.collinearity_residual(cs.vectors) if len(cs.stages) >= 3 else 0.0,
                "rightmost_stage": int(cs.stages[int(np.argmax(px))]),
            })
        rel_geo = self.write_csv("geometry.csv", pd.DataFrame(rows))
        for row in rows:
            self.trace(f"{row['run']}/tau", row["tau"], rel_geo, "tau", run=row["run"])
            self.trace(f"{row['run']}/collinearity", row["collinearity"], rel_geo, "collinearity", run=row["run"])
        self.trace("projection_rows", len(projected) * self.m, rel_proj, "__rows__")

    def density_block(self, final: Dict[Tuple[int, str], ActivationTensor], cs: geometry.CentroidSet) -> None:
        """Histograms, centroid-only PCA, cosine and norm tables on the first run and prompt."""
        first, last = self.stage_order()[0], self.stage_order()[-1]
        _, acts = sorted(final.items())[0]
        layer, token = self.analysis_cell(acts)
        rows_at = acts.cell(layer, token)
        scaled = geometry.scaled_diffmean_projection(rows_at, cs.of(first), cs.of(last))
        self.write_csv("histogram_diffmean.csv", geometry.histogram_counts(scaled, acts.stages))
        view = geometry.centroid_pca_view(cs.vectors, rows_at)
        self.write_json("centroid_pca.json", view)
        groups = {stage_label(s): rows_at[acts.stages == s] for s in range(1, self.m + 1)}
        self.write_csv("cosine_stats.csv", geometry.cosine_stats(groups).to_frame())
        self.write_csv("norm_difference.csv", norm_difference_table(acts, first, last, layer))

        direction = probes.fit_direction(acts, first, last, layer, token, self.config.probe).direction
        subset = acts.stage_subset([first, last])
        self.write_csv("histogram_probe.csv",
                       geometry.histogram_counts(subset.cell(layer, token) @ direction, subset.stages))

        # token x token probe-direction agreement between the first two runs or prompts
        if len(final) >= 2:
            _, acts_b = sorted(final.items())[1]
            tokens = list(range(min(acts.n_tokens, acts_b.n_tokens)))
            frames = []
            for shuffled in (False, True):
                grid = probes.cross_token_cosines(acts, acts_b, first, last, layer, tokens,
                                                  self.config.probe, shuffle_labels=shuffled)
                frame = pd.DataFrame(grid, columns=[f"t{t}" for t in tokens])
                frame.insert(0, "token", tokens)
                frame.insert(0, "shuffled", shuffled)
                frames.append(frame)
            self.write_csv("cross_token_cosines.csv", pd.concat(frames, ignore_index=True))

    def trajectory_axis(self, run: int, trajectory: Dict[Tuple[int, str, str], ActivationTensor],
                        final: ActivationTensor, tag: str) -> None:
        """Axis from not-yet-seen (last stage) minus first-stage centroids at checkpoints before the last stage."""
        pairs = []
        for (r, ckpt, t), acts in sorted(trajectory.items()):
            if r != run or t != tag or ckpt == stage_label(self.m):
                continue
            layer, token = self.analysis_cell(acts)
            cs = geometry.centroids(acts, layer, token, list(range(1, self.m + 1)))
            pairs.append((cs.of(self.m), cs.of(1)))
        if not pairs:
            return
        try:
            axis = geometry.seen_unseen_axis(pairs)
        except LabError as e:
            self.report.notes.append(f"seen/unseen axis unavailable: {e.message}")
            return
        layer, token = self.analysis_cell(final)
        cs = geometry.centroids(final, layer, token, list(range(1, self.m + 1)))
        px = cs.vectors @ axis
        # unseen minus seen points toward older data, so recency increases against the axis
        tau = geometry.ordering_score(-px)
        rel = self.write_csv(f"seen_unseen_axis_{self.run_name(run)}_{tag}.csv",
                             pd.DataFrame({"stage": cs.stages, "px": px}))
        self.trace(f"{self.run_name(run)}/{tag}/seen_unseen_axis_tau", tau, rel, "__tau_neg_px__")

    def seen_unseen_probe(self, model_ckpt: str, run: int, tag: str, seen: ActivationTensor,
                          unseen_prompts: Sequence[QASample], model: TransformerLM) -> None:
        """Trained aliases (label 0) against never-trained aliases (label 1)."""
        unseen = self.capture(model, model_ckpt, f"unseen_{tag}", unseen_prompts)
        rng = np.random.default_rng(self.config.seed + run)
        keep = np.sort(rng.choice(seen.n_samples, size=min(seen.n_samples, unseen.n_samples), replace=False))
        mask = np.zeros(seen.n_samples, dtype=bool)
        mask[keep] = True
        both = ActivationTensor.concat([seen.select(mask), unseen])
        labels = np.concatenate([np.zeros(int(mask.sum()), dtype=np.int64), np.ones(unseen.n_samples, dtype=np.int64)])
        report = probes.probe_grid(both, labels, self.config.probe, label_def="seen-vs-unseen")
        rel = self.write_csv(f"seen_unseen_{self.run_name(run)}_{tag}.csv", report.to_frame())
        layer, token, best = report.max_cell()
        self.trace(f"{self.run_name(run)}/{tag}/seen_unseen_max", best, rel, "acc_mean", layer=layer, token=token)

    def washout(self, model: TransformerLM, union: Sequence[QASample], prompts: Sequence[QASample], run: int, tag: str,
                probe_pair: Optional[Tuple[int, int]] = None) -> None:
        """Mixed-data epochs on the shuffled union; re-probe after every epoch."""
        cfg = self.config
        tokens = list(range(-cfg.washout_tokens, 0))
        layer = cfg.probe.analysis_layer
        pair = probe_pair or (1, self.m)
        probe_cfg = cfg.probe.model_copy(update={"layers": [layer], "tokens": tokens})
        rows = []

        def reprobe(m: TransformerLM, epoch: int, loss: float) -> None:
            acts = capture_activations(m, prompts)
            report = probes.stage_probe_grid(acts, pair[0], pair[1], probe_cfg)
            for token in report.tokens:
                rows.append({"epoch": epoch + 1, "layer": report.layers[0], "token": token,
                             "acc_mean": report.at(report.layers[0], token), "loss": loss})

        washout_cfg = cfg.train.model_copy(update={"epochs": cfg.washout_epochs, "seed": cfg.train.seed + 100 * run + 999})
        log = train_stage(model, union, washout_cfg, "washout", on_epoch_end=reprobe)
        self.record_losses(run, [log])
        frame = pd.DataFrame(rows, columns=["epoch", "layer", "token", "acc_mean", "loss"])
        rel = self.write_csv(f"washout_{self.run_name(run)}_{tag}.csv", frame)
        events = frame["epoch"].nunique() if len(frame) else 0
        if events != cfg.washout_epochs:
            raise LabError(f"washout produced {events} probe events for {cfg.washout_epochs} epochs",
                           events=events, epochs=cfg.washout_epochs)
        if events:
            final = frame[frame["epoch"] == cfg.washout_epochs]
            best = final.loc[final["acc_mean"].idxmax()]
            self.trace(f"{self.run_name(run)}/{tag}/washout_final_max", best["acc_mean"], rel, "acc_mean",
                       epoch=int(best["epoch"]), token=int(best["token"]))

    def stage_report(self, model: TransformerLM, bundle: CorpusBundle, run: int) -> None:
        cfg = self.config
        letters = {s: tpl.STAGE_LETTERS[s - 1] for s in range(1, self.m + 1)}
        train, evaluation = make_stage_report_dataset(bundle.aliases, bundle.plan.stage_of, letters,
                                                      bundle.plan.probe_split, self.vocab)
        sr_cfg = cfg.train.model_copy(update={"epochs": cfg.stage_report_epochs, "loss_mask": "answer",
                                              "seed": cfg.train.seed + 100 * run + 555})
        log = train_stage(model, train, sr_cfg, "stage_report")
        self.record_losses(run, [log])
        self.save(model, run, "stage_report")
        accuracy = stage_report_accuracy(model, evaluation)
        rel = self.write_json(f"stage_report_{self.run_name(run)}.json", {
            "accuracy": accuracy, "n_train": len(train), "n_eval": len(evaluation),
            "epochs": cfg.stage_report_epochs, "learning_rate": cfg.train.learning_rate, "letters": letters,
        })
        self.trace(f"{self.run_name(run)}/stage_report_accuracy", accuracy, rel, "accuracy")

    def balancing(self, model: TransformerLM, acts: ActivationTensor, prompts: Sequence[QASample], run: int,
                  tag: str) -> None:
        cfg = self.config
        layer, token = self.analysis_cell(acts)
        pair = acts.stage_subset([1, self.m])
        rows = [i for i, row in enumerate(acts.index) if row.stage in (1, self.m)]
        pair_prompts = [prompts[i] for i in rows]
        labels = (pair.stages == self.m).astype(np.int64)
        values, names = compute_stats(pair, layer, token, cfg.balance.groups, model, pair_prompts, cfg.balance)
        last = list(range(-min(cfg.balance.last_tokens, acts.n_tokens), 0))
        table_groups = [g for g in cfg.balance.groups if g in ("activation", "logit")]
        if table_groups:
            self.write_csv(f"stats_table_{self.run_name(run)}_{tag}.csv",
                           stats_table(pair, layer, last, table_groups, model, pair_prompts, cfg.balance))
        try:
            result = balanced_probe_compare(pair, labels, values, names, layer, token, cfg.balance, cfg.probe,
                                            seed=cfg.balance.seed)
        except EmptyResult as e:
            self.report.notes.append(f"balancing {self.run_name(run)}/{tag}: {e.message}")
            logger.warning(f"Balancing skipped for {self.run_name(run)}/{tag}: {e.message}")
            return
        rel = self.write_json(f"balance_{self.run_name(run)}_{tag}.json", result.model_dump(mode="json"))
        for condition, value in result.accuracies.items():
            self.trace(f"{self.run_name(run)}/{tag}/balance_{condition}", value, rel, f"accuracies.{condition}")

    # variants

    def run_datapoint_level(self, run: int, bundle: CorpusBundle) -> None:
        cfg = self.config
        assignment = assign_kinds_per_entity(bundle.entities, cfg.data.seed + run)
        datasets = make_datapoint_level_dataset(bundle.entities, bundle.aliases, assignment, bundle.plan, self.vocab)
        model = init_model(cfg.model, cfg.seed)
        train_cfg = cfg.train.model_copy(update={"seed": cfg.train.seed + 100 * run})
        with self.phase(f"train {self.run_name(run)}"):
            model, checkpoints, logs = sequential_finetune(model, datasets, [cfg.train.epochs] * 2, train_cfg)
            self.record_losses(run, logs)
            for k, ckpt in enumerate(checkpoints):
                self.save(ckpt, run, stage_label(k + 1))

        rows = []
        with self.phase(f"probe training samples {self.run_name(run)}"):
            for kind in ATTRIBUTE_KINDS:
                samples = [s for d in datasets for s in d if s.template_id == f"syn:{kind.value}"]
                if len({s.stage for s in samples}) < 2:
                    continue
                acts = self.capture(model, f"{self.run_name(run)}_{stage_label(2)}", f"train_{kind.value}", samples)
                report = probes.stage_probe_grid(acts, 1, 2, cfg.probe)
                rel = self.write_csv(f"datapoint_grid_{self.run_name(run)}_{kind.value}.csv", report.to_frame())
                layer, token, best = report.max_cell()
                rows.append({"kind": kind.value, "max_acc": best, "layer": layer, "token": token})
                self.trace(f"{self.run_name(run)}/{kind.value}/datapoint_max", best, rel, "acc_mean",
                           layer=layer, token=token)
        if rows:
            self.write_csv(f"datapoint_summary_{self.run_name(run)}.csv", pd.DataFrame(rows))

        if "washout" in cfg.followups:
            kind = ATTRIBUTE_KINDS[0]
            union = [s for d in datasets for s in d]
            prompts = [s for s in union if s.template_id == f"syn:{kind.value}"]
            with self.phase(f"washout {self.run_name(run)}"):
                self.washout(copy.deepcopy(model), union, prompts, run, f"train_{kind.value}", probe_pair=(1, 2))

    def run_standard(self, run: int, bundle: CorpusBundle, test_prompts: Dict[str, List[QASample]],
                     final: Dict, trajectory: Dict) -> None:
        cfg = self.config
        with self.phase(f"train {self.run_name(run)}"):
            model, names = self.train_schedule(run, bundle)
        final_ckpt = names[-1]
        shuffle = cfg.variant == "sanity" and cfg.sanity_mode == "shuffled_labels"

        for pid in cfg.data.prompt_ids:
            tag = str(pid)
            with self.phase(f"capture {self.run_name(run)} prompt {tag}"):
                self.capture(model, final_ckpt, tag, test_prompts[tag])
                acts = self.reload(final_ckpt, tag)
            final[(run, tag)] = acts
            with self.phase(f"probe {self.run_name(run)} prompt {tag}"):
                self.probe_first_last(acts, run, tag, shuffle=shuffle)
                if tag == str(cfg.data.prompt_ids[0]) and not shuffle:
                    self.pairwise(acts, run, tag)

            if cfg.variant == "checkpoint_trajectory":
                with self.phase(f"trajectory {self.run_name(run)} prompt {tag}"):
                    for name in names:
                        label = name.split("_", 1)[1]
                        ckpt_model = load_checkpoint(checkpoint_path(self.run_dir, name))
                        self.capture(ckpt_model, name, tag, test_prompts[tag])
                        trajectory[(run, label, tag)] = self.reload(name, tag)
                    self.trajectory_axis(run, trajectory, acts, tag)

            unseen_tag = f"unseen_{tag}"
            if unseen_tag in test_prompts and tag == str(cfg.data.prompt_ids[0]):
                with self.phase(f"seen-vs-unseen {self.run_name(run)}"):
                    self.seen_unseen_probe(final_ckpt, run, tag, acts, test_prompts[unseen_tag], model)

        first_tag = str(cfg.data.prompt_ids[0])
        if "balancing" in cfg.followups:
            with self.phase(f"balancing {self.run_name(run)}"):
                self.balancing(model, final[(run, first_tag)], test_prompts[first_tag], run, first_tag)
        if cfg.variant == "washout" or "washout" in cfg.followups:
            with self.phase(f"washout {self.run_name(run)}"):
                self.washout(copy.deepcopy(model), bundle.train, test_prompts[first_tag], run, first_tag)
        if cfg.variant == "stage_report" or "stage_report" in cfg.followups:
            with self.phase(f"stage report {self.run_name(run)}"):
                self.stage_report(copy.deepcopy(model), bundle, run)

    def run(self) -> RunReport:
        cfg = self.config
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.json").write_text(cfg.model_dump_json(indent=2), encoding="utf-8")

        with run_log(self.run_dir):
            logger.info(f"Experiment {cfg.name} ({cfg.variant}, {cfg.n_runs} run(s)) in {self.run_dir}")
            final: Dict[Tuple[int, str], ActivationTensor] = {}
            trajectory: Dict[Tuple[int, str, str], ActivationTensor] = {}
            for run in range(cfg.n_runs):
                with self.phase(f"corpus {self.run_name(run)}"):
                    bundle, test_prompts = self.corpus(run)
                if cfg.variant == "datapoint_level":
                    self.run_datapoint_level(run, bundle)
                else:
                    self.run_standard(run, bundle, test_prompts, final, trajectory)

            if final:
                with self.phase("geometry"):
                    self.geometry_block(final, trajectory or None)

        (self.run_dir / "report.json").write_text(self.report.model_dump_json(indent=2), encoding="utf-8")
        (self.run_dir / "timing.json").write_text(json.dumps(self.timing, indent=2), encoding="utf-8")
        logger.info(f"Report written to {self.run_dir / 'report.json'} ({len(self.report.scalars)} scalars)")
        return self.report


def run_experiment(config: ExperimentConfig, run_dir: Path) -> RunReport:
    return ExperimentRunner(config, run_dir).run()


def _recompute(run_dir: Path, scalar: TracedScalar) -> float:
    path = run_dir / scalar.artifact
    if not path.exists():
        raise MissingArtifact(f"artifact {scalar.artifact} is missing", path=str(path))
    if path.suffix == ".json":
        value = json.loads(path.read_text(encoding="utf-8"))
        for key in scalar.field.split("."):
            value = value[key]
        return float(value)

    frame = pd.read_csv(path)
    if scalar.field == "__rows__":
        return float(len(frame))
    if scalar.field == "__tau_neg_px__":
        return geometry.ordering_score(-frame.sort_values("stage")["px"].to_numpy())
    for column, wanted in scalar.where.items():
        frame = frame[frame[column] == wanted]
    if len(frame) != 1:
        raise LabError(f"{scalar.artifact} matched {len(frame)} rows for {scalar.where}", artifact=scalar.artifact)
    return float(frame[scalar.field].iloc[0])


def check_traceability(run_dir: Path, tol: float = 1e-9) -> List[CheckResult]:
    """Recompute every reported scalar from its artifact."""
    run_dir = Path(run_dir)
    report_file = run_dir / "report.json"
    if not report_file.exists():
        raise MissingArtifact(f"no report.json in {run_dir}", path=str(report_file))
    report = RunReport.model_validate_json(report_file.read_text(encoding="utf-8"))

    results = []
    for key, scalar in sorted(report.scalars.items()):
        try:
            value = _recompute(run_dir, scalar)
            passed = bool(np.isclose(value, scalar.value, rtol=tol, atol=tol, equal_nan=True))
            results.append(CheckResult(spec=report.name, check=key, passed=passed, value=value,
                                       threshold=f"{scalar.value!r}", detail=scalar.artifact))
        except (LabError, KeyError) as e:
            results.append(CheckResult(spec=report.name, check=key, passed=False, detail=str(e)))
    failed = sum(not r.passed for r in results)
    if failed:
        logger.warning(f"{failed}/{len(results)} report scalars do not match their artifacts")
    return results
