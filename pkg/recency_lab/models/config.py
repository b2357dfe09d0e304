import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from recency_lab.models.errors import ConfigInvalid
from recency_lab.models.records import Variant

FULL_SCALE_ENTITIES = 16000


def _closed_vocab_size() -> int:
    from recency_lab.services.vocabulary import default_vocabulary
    return len(default_vocabulary())


class StrictModel(BaseModel):
    """Config base: unknown keys are rejected"""
    model_config = ConfigDict(extra="forbid")


class ModelConfig(StrictModel):
    """Decoder-only transformer shape"""
    n_layers: int = Field(default=4, ge=1)
    d_model: int = Field(default=128, ge=1)
    n_heads: int = Field(default=4, ge=1)
    d_ff: int = Field(default=512, ge=1)
    vocab_size: int = Field(default_factory=_closed_vocab_size)
    max_context: int = Field(default=48, ge=2)
    positional: Literal["learned-absolute"] = "learned-absolute"

    @model_validator(mode="after")
    def _heads_divide(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        return self


class TrainConfig(StrictModel):
    """One fine-tuning stage"""
    learning_rate: float = Field(default=3e-3, gt=0)
    batch_size: int = Field(default=16, ge=1)
    epochs: int = Field(default=5, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = Field(default=0.0, ge=0)
    loss_mask: Literal["answer", "all"] = "answer"
    warmup_steps: int = Field(default=0, ge=0)
    seed: int = 0


class DataConfig(StrictModel):
    """Corpus generation"""
    variant: Variant = Variant.synthetic
    n_entities: int = Field(default=2400, ge=2)
    full_scale: bool = False
    m: int = Field(default=6, ge=2)
    samples_per_entity: int = Field(default=4, ge=1)
    kinds_per_entity: int = Field(default=4, ge=1, le=6)
    alphabet_size: int = Field(default=200, ge=2)
    probe_ratio: float = Field(default=0.8, gt=0, lt=1)
    n_unseen: int = Field(default=0, ge=0)
    prompt_ids: List[int] = Field(default_factory=lambda: [1])
    seed: int = 0

    @property
    def entity_count(self) -> int:
        return FULL_SCALE_ENTITIES if self.full_scale else self.n_entities

    @model_validator(mode="after")
    def _prompt_ids_known(self):
        bad = [p for p in self.prompt_ids if p not in (1, 2, 3, 4)]
        if bad or not self.prompt_ids:
            raise ValueError(f"prompt_ids must be a nonempty subset of 1..4, got {self.prompt_ids}")
        if self.m > self.entity_count:
            raise ValueError(f"m={self.m} exceeds the number of entities {self.entity_count}")
        return self


class ProbeConfig(StrictModel):
    """Logistic probes over (layer, token) cells"""
    C: float = Field(default=0.1, gt=0)
    n_splits: int = Field(default=5, ge=1)
    n_permutations: int = Field(default=5, ge=1)
    split_ratio: float = Field(default=0.8, gt=0, lt=1)
    layers: Optional[List[int]] = None
    tokens: Optional[List[int]] = None
    analysis_layer: int = -1
    analysis_token: int = -1
    tol: float = 1e-6
    max_iter: int = 1000
    seed: int = 0


class BalanceConfig(StrictModel):
    """Statistical-balancing controls"""
    groups: List[Literal["activation", "logit", "backward", "forward"]] = Field(
        default_factory=lambda: ["activation", "logit"]
    )
    n_bins: int = Field(default=15, ge=2)
    strategy: Literal["equal-width", "quantile"] = "equal-width"
    last_tokens: int = Field(default=10, ge=1)
    n_generations: int = Field(default=20, ge=1)
    temperature: float = Field(default=1.0, gt=0)
    max_new_tokens: int = Field(default=10, ge=1)
    seed: int = 0


ExperimentVariant = Literal[
    "six_stage", "two_stage", "checkpoint_trajectory", "reexposure", "extra_epochs",
    "washout", "single_epoch_dense", "datapoint_level", "stage_report", "sanity",
]
Followup = Literal["seen_unseen", "washout", "stage_report", "balancing"]

TWO_STAGE_VARIANTS = {"two_stage", "datapoint_level", "stage_report"}


class ExperimentConfig(StrictModel):
    """Declarative description of one end-to-end experiment"""
    name: str = "experiment"
    variant: ExperimentVariant
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    balance: BalanceConfig = Field(default_factory=BalanceConfig)

    n_runs: int = Field(default=1, ge=1)
    run_variants: Optional[List[Variant]] = None
    reexposure_stage: Optional[int] = None
    extra_epochs_stage: Optional[int] = None
    extra_epochs: int = Field(default=15, ge=0)
    washout_epochs: int = Field(default=30, ge=0)
    washout_tokens: int = Field(default=3, ge=1)
    density: int = Field(default=5, ge=1)
    sanity_mode: Optional[Literal["mixed_from_start", "untrained", "shuffled_labels"]] = None
    stage_report_epochs: int = Field(default=3, ge=1)
    followups: List[Followup] = Field(default_factory=list)
    seed: int = 0

    @model_validator(mode="after")
    def _variant_fields(self):
        m = self.data.m
        if self.variant in TWO_STAGE_VARIANTS and m != 2:
            if "m" in self.data.model_fields_set:
                raise ValueError(f"variant {self.variant} needs m=2, got m={m}")
            self.data.m = 2
        if self.variant == "reexposure" and not (self.reexposure_stage and 1 <= self.reexposure_stage <= m):
            raise ValueError(f"reexposure needs reexposure_stage in 1..{m}")
        if self.variant == "extra_epochs" and not (self.extra_epochs_stage and 1 <= self.extra_epochs_stage <= m):
            raise ValueError(f"extra_epochs needs extra_epochs_stage in 1..{m}")
        if self.variant == "sanity" and self.sanity_mode is None:
            raise ValueError("sanity needs sanity_mode")
        if self.variant == "single_epoch_dense":
            if "variant" not in self.data.model_fields_set:
                self.data.variant = Variant.natural
            if "samples_per_entity" not in self.data.model_fields_set:
                self.data.samples_per_entity = 4 * self.density
            if "epochs" not in self.train.model_fields_set:
                self.train.epochs = 1
        if self.run_variants is not None and len(self.run_variants) != self.n_runs:
            raise ValueError(f"run_variants has {len(self.run_variants)} entries for n_runs={self.n_runs}")
        return self

    def run_variant(self, run: int) -> Variant:
        return self.run_variants[run] if self.run_variants else self.data.variant


# Per-subcommand jobs. Flags only select the config file and run directory.

class GenDataJob(StrictModel):
    data: DataConfig = Field(default_factory=DataConfig)


class TrainJob(StrictModel):
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    epochs_per_stage: Optional[List[int]] = None
    seed: int = 0


class CaptureJob(StrictModel):
    checkpoint: str
    prompt_ids: List[int] = Field(default_factory=lambda: [1])
    include_unseen: bool = False
    batch_size: int = Field(default=64, ge=1)


class ProbeJob(StrictModel):
    checkpoint: str
    prompt_id: int = 1
    stages: Tuple[int, int] = (1, 2)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    pairwise: bool = False
    shuffle_labels: bool = False


class GeometryJob(StrictModel):
    checkpoints: List[str]
    prompt_ids: List[int] = Field(default_factory=lambda: [1])
    layer: int = -1
    token: int = -1
    axis_pair: Optional[Tuple[int, int]] = None


class BalanceJob(StrictModel):
    checkpoint: str
    prompt_id: int = 1
    stages: Tuple[int, int] = (1, 2)
    layer: int = -1
    token: int = -1
    balance: BalanceConfig = Field(default_factory=BalanceConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)


class PlantedSpecConfig(StrictModel):
    m: int = Field(default=6, ge=2)
    n: int = Field(default=500, ge=1)
    dim: int = Field(default=32, ge=2)
    centroid_spacing: float = Field(default=1.0, ge=0)
    noise_sigma: float = Field(default=0.1, ge=0)
    curvature: float = Field(default=0.0, ge=0)


class OracleJob(StrictModel):
    specs: List[PlantedSpecConfig] = Field(default_factory=lambda: [PlantedSpecConfig()])
    seed: int = 0


ConfigT = TypeVar("ConfigT", bound=BaseModel)


def with_seed(config: ConfigT, seed: int) -> ConfigT:
    """Copy of `config` with every `seed` field, nested ones included, set to `seed`."""
    updates = {}
    for name in type(config).model_fields:
        value = getattr(config, name)
        if name == "seed":
            updates[name] = seed
        elif isinstance(value, BaseModel):
            updates[name] = with_seed(value, seed)
        elif isinstance(value, list) and value and isinstance(value[0], BaseModel):
            updates[name] = [with_seed(v, seed) for v in value]
    return config.model_copy(update=updates)


def load_config(path: Path, config_cls: Type[ConfigT]) -> ConfigT:
    """Parse a JSON config file into `config_cls`, raising ConfigInvalid on any problem."""
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(f"config file not found: {path}", path=str(path))
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        return config_cls.model_validate(raw)
    except json.JSONDecodeError as e:
        raise ConfigInvalid(f"{path} is not valid JSON: {e}", path=str(path))
    except ValidationError as e:
        errors = [{"loc": ".".join(str(p) for p in err["loc"]), "msg": err["msg"]} for err in e.errors()]
        raise ConfigInvalid(f"{path} does not describe a valid {config_cls.__name__}", path=str(path), errors=errors)
