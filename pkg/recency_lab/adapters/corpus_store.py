"""
Corpus persistence: JSON-lines samples, vocabulary map and stage plan.

Layout under `<run_dir>/corpus/`:
    vocab.json        token -> id
    entities.jsonl    one entity with its alias per line
    plan.json         StagePlan
    train.jsonl       training QASamples
    test_<k>.jsonl    answerless test prompts for prompt template k
    test_unseen_<k>.jsonl   the same prompts over never-trained aliases
"""

import json
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import BaseModel, Field

from recency_lab.models.errors import MissingArtifact
from recency_lab.models.records import Alias, EntityRecord, QASample, StagePlan, Variant
from recency_lab.services.vocabulary import Vocabulary, default_vocabulary
from recency_lab.utils.logger import logger


class CorpusBundle(BaseModel):
    """Everything generated for one run's data"""
    variant: Variant
    entities: List[EntityRecord]
    aliases: List[Alias]
    plan: StagePlan
    train: List[QASample]
    unseen_entities: List[EntityRecord] = Field(default_factory=list)
    unseen_aliases: List[Alias] = Field(default_factory=list)

    def stage_datasets(self) -> List[List[QASample]]:
        by_stage: Dict[int, List[QASample]] = {s: [] for s in range(1, self.plan.m + 1)}
        for sample in self.train:
            by_stage[sample.stage].append(sample)
        return [by_stage[s] for s in range(1, self.plan.m + 1)]


def corpus_dir(run_dir: Path, run: str = "") -> Path:
    """`<run_dir>/corpus`, or `<run_dir>/corpus/<run>` inside multi-run experiments."""
    base = Path(run_dir) / "corpus"
    return base / run if run else base


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> List[dict]:
    if not path.exists():
        raise MissingArtifact(f"missing corpus file {path}", path=str(path))
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _sample_row(sample: QASample) -> dict:
    return {
        "entity_id": sample.entity_id,
        "stage": sample.stage,
        "probe_split": sample.probe_split.value,
        "template_id": sample.template_id,
        "prompt_tokens": sample.prompt_tokens,
        "answer_tokens": sample.answer_tokens,
        "text": sample.text,
        "variant": sample.variant.value,
    }


def save_samples(path: Path, samples: List[QASample]) -> None:
    _write_jsonl(path, (_sample_row(s) for s in samples))


def load_samples(path: Path) -> List[QASample]:
    return [QASample.model_validate(row) for row in _read_jsonl(path)]


def save_corpus(run_dir: Path, bundle: CorpusBundle, test_prompts: Dict[str, List[QASample]],
                vocab: Optional[Vocabulary] = None, run: str = "") -> Path:
    out = corpus_dir(run_dir, run)
    out.mkdir(parents=True, exist_ok=True)
    vocab = vocab or default_vocabulary()

    (out / "vocab.json").write_text(json.dumps(vocab.to_json(), ensure_ascii=False, indent=1), encoding="utf-8")
    (out / "plan.json").write_text(bundle.plan.model_dump_json(indent=1), encoding="utf-8")

    alias_of = {a.entity_id: a for a in bundle.aliases + bundle.unseen_aliases}
    rows = []
    for entity, seen in [(e, True) for e in bundle.entities] + [(e, False) for e in bundle.unseen_entities]:
        rows.append({
            "entity": entity.model_dump(mode="json"),
            "alias": alias_of[entity.entity_id].model_dump(mode="json"),
            "seen": seen,
        })
    _write_jsonl(out / "entities.jsonl", rows)
    (out / "meta.json").write_text(json.dumps({"variant": bundle.variant.value}), encoding="utf-8")

    save_samples(out / "train.jsonl", bundle.train)
    for tag, prompts in test_prompts.items():
        save_samples(out / f"test_{tag}.jsonl", prompts)

    logger.info(f"Wrote corpus ({len(bundle.train)} training samples, {len(test_prompts)} test prompt sets) to {out}")
    return out


def load_corpus(run_dir: Path, run: str = "") -> CorpusBundle:
    src = corpus_dir(run_dir, run)
    for name in ("vocab.json", "plan.json", "meta.json"):
        if not (src / name).exists():
            raise MissingArtifact(f"missing corpus file {src / name}", path=str(src / name))

    Vocabulary.from_json(json.loads((src / "vocab.json").read_text(encoding="utf-8")))
    plan = StagePlan.model_validate_json((src / "plan.json").read_text(encoding="utf-8"))
    meta = json.loads((src / "meta.json").read_text(encoding="utf-8"))

    entities, aliases, unseen_entities, unseen_aliases = [], [], [], []
    for row in _read_jsonl(src / "entities.jsonl"):
        entity = EntityRecord.model_validate(row["entity"])
        alias = Alias.model_validate(row["alias"])
        if row["seen"]:
            entities.append(entity)
            aliases.append(alias)
        else:
            unseen_entities.append(entity)
            unseen_aliases.append(alias)

    return CorpusBundle(
        variant=Variant(meta["variant"]),
        entities=entities,
        aliases=aliases,
        plan=plan,
        train=load_samples(src / "train.jsonl"),
        unseen_entities=unseen_entities,
        unseen_aliases=unseen_aliases,
    )


def load_test_prompts(run_dir: Path, tag, run: str = "") -> List[QASample]:
    return load_samples(corpus_dir(run_dir, run) / f"test_{tag}.jsonl")
