from enum import Enum
from typing import Dict, List

from pydantic import BaseModel, Field, model_validator


class Variant(str, Enum):
    """Corpus style"""
    synthetic = "synthetic"
    natural = "natural"


class ProbeSplit(str, Enum):
    """Entity-level probe split label"""
    probe_train = "probe-train"
    probe_test = "probe-test"


class AttributeKind(str, Enum):
    """The six question kinds asked about every entity"""
    gender = "gender"
    birth_date = "birth_date"
    death_date = "death_date"
    region = "region"
    occupation = "occupation"
    nationality = "nationality"


ATTRIBUTE_KINDS: List[AttributeKind] = list(AttributeKind)


class EntityRecord(BaseModel):
    """An entity with one answer token per attribute kind"""
    entity_id: int = Field(ge=0)
    attributes: Dict[AttributeKind, str]

    @model_validator(mode="after")
    def _all_attributes(self):
        missing = [k.value for k in ATTRIBUTE_KINDS if k not in self.attributes]
        if missing:
            raise ValueError(f"entity {self.entity_id} missing attributes {missing}")
        return self


class Alias(BaseModel):
    """A fixed-length alias standing in for an entity's name"""
    entity_id: int
    subtokens: List[int]
    surface: str


class StagePlan(BaseModel):
    """Assignment of entities to sequential fine-tuning stages"""
    m: int = Field(ge=1)
    stage_of: Dict[int, int]
    epochs: List[int]
    samples_per_entity: int = 4
    probe_split: Dict[int, ProbeSplit] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _stages_in_range(self):
        if len(self.epochs) != self.m:
            raise ValueError(f"epochs has {len(self.epochs)} entries for {self.m} stages")
        bad = {s for s in self.stage_of.values() if not 1 <= s <= self.m}
        if bad:
            raise ValueError(f"stage indices out of range: {sorted(bad)}")
        return self

    def entities_of(self, stage: int) -> List[int]:
        return sorted(e for e, s in self.stage_of.items() if s == stage)

    def stage_sizes(self) -> List[int]:
        return [len(self.entities_of(s)) for s in range(1, self.m + 1)]


class QASample(BaseModel):
    """A tokenized prompt/answer pair about one entity"""
    entity_id: int
    stage: int
    probe_split: ProbeSplit
    template_id: str
    prompt_tokens: List[int]
    answer_tokens: List[int] = Field(default_factory=list)
    variant: Variant = Variant.synthetic
    text: str = ""

    @property
    def tokens(self) -> List[int]:
        return self.prompt_tokens + self.answer_tokens


class SampleIndex(BaseModel):
    """Row metadata of an activation tensor"""
    entity_id: int
    stage: int
    probe_split: ProbeSplit
    prompt_id: int
