from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from recency_lab.models.records import ProbeSplit, SampleIndex


@dataclass
class ActivationTensor:
    """
    Residual-stream activations of position-aligned prompts.

    data is [n_samples, n_layers, n_tokens, d_model] float32; row i of data
    belongs to index[i].
    """
    data: np.ndarray
    index: List[SampleIndex]
    fingerprint: str = ""
    fingerprint_mismatch: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"activation data must be 4-d, got shape {self.data.shape}")
        if len(self.index) != self.data.shape[0]:
            raise ValueError(f"index has {len(self.index)} rows for {self.data.shape[0]} samples")

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def n_layers(self) -> int:
        return self.data.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.data.shape[2]

    @property
    def d_model(self) -> int:
        return self.data.shape[3]

    def cell(self, layer: int, token: int) -> np.ndarray:
        """[n_samples, d_model] rows at one (layer, token), in index order. Negative indices count from the end."""
        return self.data[:, layer, token, :]

    def resolve(self, layer: int, token: int) -> tuple:
        return layer % self.n_layers, token % self.n_tokens

    @property
    def stages(self) -> np.ndarray:
        return np.array([row.stage for row in self.index], dtype=np.int64)

    @property
    def entity_ids(self) -> np.ndarray:
        return np.array([row.entity_id for row in self.index], dtype=np.int64)

    @property
    def probe_test(self) -> np.ndarray:
        return np.array([row.probe_split == ProbeSplit.probe_test for row in self.index], dtype=bool)

    def select(self, mask: np.ndarray) -> "ActivationTensor":
        rows = np.flatnonzero(mask)
        return ActivationTensor(
            data=self.data[rows],
            index=[self.index[i] for i in rows],
            fingerprint=self.fingerprint,
            fingerprint_mismatch=self.fingerprint_mismatch,
            meta=dict(self.meta),
        )

    def stage_subset(self, stages: List[int]) -> "ActivationTensor":
        return self.select(np.isin(self.stages, stages))

    @staticmethod
    def concat(parts: List["ActivationTensor"], fingerprint: Optional[str] = None) -> "ActivationTensor":
        return ActivationTensor(
            data=np.concatenate([p.data for p in parts], axis=0),
            index=[row for p in parts for row in p.index],
            fingerprint=fingerprint if fingerprint is not None else parts[0].fingerprint,
        )
