from typing import Any, Dict, List, Optional, Tuple

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field


class ProbeReport(BaseModel):
    """Probe accuracy per (layer, token) cell, aggregated over splits"""
    layers: List[int]
    tokens: List[int]
    acc_mean: List[List[float]]
    acc_std: List[List[float]]
    n_train: int
    n_test: int
    label_def: str
    split: str

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for i, layer in enumerate(self.layers):
            for j, token in enumerate(self.tokens):
                rows.append({
                    "layer": layer,
                    "token": token,
                    "acc_mean": self.acc_mean[i][j],
                    "acc_std": self.acc_std[i][j],
                    "n_train": self.n_train,
                    "n_test": self.n_test,
                    "label_def": self.label_def,
                })
        return pd.DataFrame(rows, columns=["layer", "token", "acc_mean", "acc_std", "n_train", "n_test", "label_def"])

    def max_cell(self) -> Tuple[int, int, float]:
        best = max(
            ((self.layers[i], self.tokens[j], self.acc_mean[i][j])
             for i in range(len(self.layers)) for j in range(len(self.tokens))),
            key=lambda cell: cell[2],
        )
        return best

    def at(self, layer: int, token: int) -> float:
        return self.acc_mean[self.layers.index(layer)][self.tokens.index(token)]


class CheckResult(BaseModel):
    """One pass/fail row of a verification table"""
    spec: str
    check: str
    passed: bool
    value: Optional[float] = None
    threshold: Optional[str] = None
    detail: str = ""


class BalanceReport(BaseModel):
    """Outcome of joint-binning balancing and the three-condition comparison"""
    statistics: List[str]
    n_bins: int
    strategy: str
    occupied_bins: int
    mixed_bins: int
    retained_per_class: Dict[str, int]
    subset_indices: List[int]
    accuracies: Dict[str, float] = Field(default_factory=dict)
    train_sizes: Dict[str, int] = Field(default_factory=dict)
    n_test: int = 0


class TracedScalar(BaseModel):
    """
    A reported number together with where it can be recomputed from.

    `artifact` is relative to the run directory. For CSV artifacts `field`
    is a column and `where` filters rows down to exactly one; for JSON
    artifacts `field` is a dotted key path.
    """
    model_config = ConfigDict(ser_json_inf_nan="constants")

    value: float
    artifact: str
    field: str
    where: Dict[str, Any] = Field(default_factory=dict)


class RunReport(BaseModel):
    """Structured result of one experiment run directory"""
    model_config = ConfigDict(ser_json_inf_nan="constants")

    name: str
    variant: str
    config: Dict[str, Any]
    stage_losses: Dict[str, List[float]] = Field(default_factory=dict)
    scalars: Dict[str, TracedScalar] = Field(default_factory=dict)
    artifacts: Dict[str, str] = Field(default_factory=dict)
    notes: List[str] = Field(default_factory=list)
