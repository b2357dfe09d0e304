"""
L2-regularized logistic probes on activation cells.

Objective for n rows with labels y in {0, 1} and t = 2y - 1:

    mean_i log(1 + exp(-t_i (w.x_i + b))) + (l2 / 2) ||w||^2

with l2 = 1 / (C n), which is the C-parameterized objective divided by C n.
The bias is not penalized. The problem is solved by a trust-region Newton
method to gradient norm 1e-6 (at most 1000 iterations).

Splits are entity-level: an entity's rows all land on the same side.
"""

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import optimize, special

from recency_lab.models.activations import ActivationTensor
from recency_lab.models.config import ProbeConfig
from recency_lab.models.errors import EmptyEval, NonFiniteFeature, SingleClass, SplitLeak
from recency_lab.models.reports import ProbeReport
from recency_lab.utils.logger import logger
from recency_lab.utils.settings import thread_cap


@dataclass
class ProbeModel:
    weights: np.ndarray
    bias: float
    l2: float
    loss: float = float("nan")
    converged: bool = True

    @property
    def direction(self) -> np.ndarray:
        norm = np.linalg.norm(self.weights)
        return self.weights / norm if norm > 0 else self.weights

    def decision(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Class 1 where the probability exceeds 0.5."""
        return (self.decision(X) > 0).astype(np.int64)


class LogisticObjective:
    """Value, gradient and Hessian of the regularized mean logistic loss over theta = [w, b]."""

    def __init__(self, X: np.ndarray, y: np.ndarray, l2: float):
        self.X = np.hstack([X, np.ones((len(X), 1))])
        self.t = 2.0 * y - 1.0
        self.l2 = l2
        self.n, self.dim = self.X.shape
        self.reg = np.full(self.dim, l2)
        self.reg[-1] = 0.0

    def __call__(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        margin = self.t * (self.X @ theta)
        loss = np.logaddexp(0.0, -margin).mean() + 0.5 * np.sum(self.reg * theta ** 2)
        grad = self.X.T @ (-self.t * special.expit(-margin)) / self.n + self.reg * theta
        return float(loss), grad

    def hess(self, theta: np.ndarray) -> np.ndarray:
        p = special.expit(self.X @ theta)
        weights = p * (1.0 - p) / self.n
        return (self.X.T * weights) @ self.X + np.diag(self.reg)


def train_probe(
    X: np.ndarray,
    y: np.ndarray,
    l2: float,
    seed: int = 0,
    random_init: bool = False,
    tol: float = 1e-6,
    max_iter: int = 1000,
) -> ProbeModel:
    """Fit one probe. Starts from zero unless `random_init`, which draws N(0, 0.1) from `seed`."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise SingleClass(f"probe labels contain a single class {np.unique(y).tolist()}", n=len(y))
    if not np.all(np.isfinite(X)):
        raise NonFiniteFeature("probe features contain NaN or inf", n_bad=int(np.sum(~np.isfinite(X))))

    objective = LogisticObjective(X, y, l2)
    theta0 = np.zeros(objective.dim)
    if random_init:
        theta0 = np.random.default_rng(seed).normal(0.0, 0.1, size=objective.dim)

    result = optimize.minimize(
        objective,
        theta0,
        jac=True,
        hess=objective.hess,
        method="trust-exact",
        options={"gtol": tol, "maxiter": max_iter},
    )
    if not result.success:
        logger.debug(f"probe solver stopped early: {result.message}")
    return ProbeModel(
        weights=result.x[:-1].copy(),
        bias=float(result.x[-1]),
        l2=l2,
        loss=float(result.fun),
        converged=bool(result.success),
    )


def l2_from_C(C: float, n: int) -> float:
    return 1.0 / (C * n)


def eval_probe(probe: ProbeModel, X: np.ndarray, y: np.ndarray) -> float:
    """Fraction of rows whose thresholded prediction equals the label."""
    if len(X) == 0:
        raise EmptyEval("cannot evaluate a probe on zero rows")
    return float(np.mean(probe.predict(X) == np.asarray(y)))


def cell_seed(seed: int, split: int, layer: int, token: int) -> int:
    """Per-cell solver seed: first 32 bits of md5("seed:split:layer:token")."""
    key = f"{seed}:{split}:{layer}:{token}"
    return int(hashlib.md5(key.encode()).hexdigest()[:8], 16)


def entity_splits(
    entity_ids: np.ndarray,
    labels: np.ndarray,
    n_splits: int,
    ratio: float,
    seed: int,
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    Random entity-level train/test row masks, stratified by class.

    Each split s draws from default_rng([seed, s]).
    """
    by_class: Dict[int, np.ndarray] = {}
    for cls in np.unique(labels):
        by_class[int(cls)] = np.unique(entity_ids[labels == cls])

    splits = []
    for s in range(n_splits):
        rng = np.random.default_rng([seed, s])
        train_entities = []
        for cls in sorted(by_class):
            members = rng.permutation(by_class[cls])
            train_entities.append(members[: int(np.floor(ratio * len(members)))])
        train_set = np.concatenate(train_entities)
        train_mask = np.isin(entity_ids, train_set)
        test_mask = ~train_mask
        leaked = set(entity_ids[train_mask].tolist()) & set(entity_ids[test_mask].tolist())
        if leaked:
            raise SplitLeak(f"{len(leaked)} entities on both sides of split {s}", split=s)
        splits.append((train_mask, test_mask))
    return splits


def binary_labels(acts: ActivationTensor, stage_a: int, stage_b: int) -> Tuple[ActivationTensor, np.ndarray]:
    """Rows of the two stages with label 0 for stage_a and 1 for stage_b."""
    subset = acts.stage_subset([stage_a, stage_b])
    return subset, (subset.stages == stage_b).astype(np.int64)


def shuffle_entity_labels(entity_ids: np.ndarray, labels: np.ndarray, seed: int) -> np.ndarray:
    """Permute labels across entities, keeping each entity's rows consistent."""
    entities = np.unique(entity_ids)
    per_entity = np.array([labels[entity_ids == e][0] for e in entities])
    shuffled = np.random.default_rng(seed).permutation(per_entity)
    lookup = dict(zip(entities.tolist(), shuffled.tolist()))
    return np.array([lookup[e] for e in entity_ids.tolist()], dtype=np.int64)


def _cells(acts: ActivationTensor, config: ProbeConfig) -> Tuple[List[int], List[int]]:
    layers = config.layers if config.layers is not None else list(range(acts.n_layers))
    tokens = config.tokens if config.tokens is not None else list(range(acts.n_tokens))
    return sorted({lyr % acts.n_layers for lyr in layers}), sorted({t % acts.n_tokens for t in tokens})


def probe_grid(
    acts: ActivationTensor,
    labels: np.ndarray,
    config: Optional[ProbeConfig] = None,
    label_def: str = "",
    shuffle_labels: bool = False,
) -> ProbeReport:
    """
    One probe per (layer, token) cell per random entity split.

    `labels` holds one binary label per row of `acts`; rows of one entity must
    share a label.
    """
    config = config or ProbeConfig()
    labels = np.asarray(labels, dtype=np.int64)
    entity_ids = acts.entity_ids
    # (labels, train_mask, test_mask) per fit; shuffled nulls average over independent permutations
    if shuffle_labels:
        fits = []
        for p in range(config.n_permutations):
            permuted = shuffle_entity_labels(entity_ids, labels, config.seed + p)
            fits += [(permuted, tr, te) for tr, te in
                     entity_splits(entity_ids, permuted, config.n_splits, config.split_ratio, config.seed + p)]
    else:
        fits = [(labels, tr, te) for tr, te in
                entity_splits(entity_ids, labels, config.n_splits, config.split_ratio, config.seed)]
    layers, tokens = _cells(acts, config)

    def run_cell(cell: Tuple[int, int]) -> Tuple[int, int, List[float]]:
        i, j = cell
        X = acts.cell(layers[i], tokens[j])
        accs = []
        for s, (y, train_mask, test_mask) in enumerate(fits):
            probe = train_probe(
                X[train_mask], y[train_mask],
                l2=l2_from_C(config.C, int(train_mask.sum())),
                seed=cell_seed(config.seed, s, layers[i], tokens[j]),
                tol=config.tol, max_iter=config.max_iter,
            )
            accs.append(eval_probe(probe, X[test_mask], y[test_mask]))
        return i, j, accs

    cells = [(i, j) for i in range(len(layers)) for j in range(len(tokens))]
    mean = np.zeros((len(layers), len(tokens)))
    std = np.zeros_like(mean)
    with ThreadPoolExecutor(max_workers=thread_cap()) as pool:
        for i, j, accs in pool.map(run_cell, cells):
            mean[i, j] = np.mean(accs)
            std[i, j] = np.std(accs)

    _, train_mask, test_mask = fits[0]
    report = ProbeReport(
        layers=layers,
        tokens=tokens,
        acc_mean=mean.tolist(),
        acc_std=std.tolist(),
        n_train=int(train_mask.sum()),
        n_test=int(test_mask.sum()),
        label_def=label_def + (" (shuffled)" if shuffle_labels else ""),
        split=f"{len(fits)}x random {config.split_ratio:.0%} entity-level",
    )
    best = report.max_cell()
    logger.info(f"Probe grid {report.label_def}: {len(cells)} cells, best layer {best[0]} token {best[1]} acc {best[2]:.3f}")
    return report


def stage_probe_grid(
    acts: ActivationTensor,
    stage_a: int,
    stage_b: int,
    config: Optional[ProbeConfig] = None,
    shuffle_labels: bool = False,
) -> ProbeReport:
    subset, labels = binary_labels(acts, stage_a, stage_b)
    return probe_grid(subset, labels, config, label_def=f"D{stage_a}-vs-D{stage_b}", shuffle_labels=shuffle_labels)


@dataclass
class PairwiseMatrix:
    stages: List[int]
    accuracy: np.ndarray  # NaN on and below the diagonal
    layer: int
    token: int

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for a, i in enumerate(self.stages):
            for b, j in enumerate(self.stages):
                if a < b:
                    rows.append({"stage_i": i, "stage_j": j, "layer": self.layer, "token": self.token,
                                 "acc_mean": float(self.accuracy[a, b])})
        return pd.DataFrame(rows, columns=["stage_i", "stage_j", "layer", "token", "acc_mean"])

    def weakly_monotone(self, tol: float = 0.0) -> bool:
        """Accuracy never drops when |i - j| grows along a row or a column."""
        m = len(self.stages)
        for a in range(m):
            for b in range(a + 1, m - 1):
                if self.accuracy[a, b + 1] < self.accuracy[a, b] - tol:
                    return False
        for b in range(m):
            for a in range(1, b):
                if self.accuracy[a - 1, b] < self.accuracy[a, b] - tol:
                    return False
        return True


def pairwise_stage_grid(
    acts: ActivationTensor,
    m: int,
    layer: int,
    token: int,
    config: Optional[ProbeConfig] = None,
) -> PairwiseMatrix:
    """Upper-triangular D_i-vs-D_j accuracy at one cell."""
    if m < 2:
        raise ValueError(f"pairwise_stage_grid needs m >= 2, got {m}")
    config = (config or ProbeConfig()).model_copy(update={"layers": [layer], "tokens": [token]})
    stages = list(range(1, m + 1))
    acc = np.full((m, m), np.nan)
    for a in range(m):
        for b in range(a + 1, m):
            report = stage_probe_grid(acts, stages[a], stages[b], config)
            acc[a, b] = report.acc_mean[0][0]
    L, T = acts.resolve(layer, token)
    return PairwiseMatrix(stages=stages, accuracy=acc, layer=L, token=T)


def fit_direction(
    acts: ActivationTensor,
    stage_a: int,
    stage_b: int,
    layer: int,
    token: int,
    config: Optional[ProbeConfig] = None,
    shuffle_labels: bool = False,
) -> ProbeModel:
    """Probe trained on every row of the two stages at one cell."""
    config = config or ProbeConfig()
    subset, labels = binary_labels(acts, stage_a, stage_b)
    if shuffle_labels:
        labels = shuffle_entity_labels(subset.entity_ids, labels, config.seed)
    return train_probe(
        subset.cell(layer, token), labels,
        l2=l2_from_C(config.C, len(labels)),
        seed=cell_seed(config.seed, 0, layer, token),
        tol=config.tol, max_iter=config.max_iter,
    )


def all_pairs_directions(
    acts: ActivationTensor,
    m: int,
    layer: int,
    token: int,
    config: Optional[ProbeConfig] = None,
) -> Tuple[List[Tuple[int, int]], np.ndarray]:
    """Unit probe directions for every stage pair (i < j) at one cell."""
    pairs = [(i, j) for i in range(1, m + 1) for j in range(i + 1, m + 1)]
    directions = np.stack([fit_direction(acts, i, j, layer, token, config).direction for i, j in pairs])
    return pairs, directions


def cross_token_cosines(
    acts_a: ActivationTensor,
    acts_b: ActivationTensor,
    stage_a: int,
    stage_b: int,
    layer: int,
    tokens: Sequence[int],
    config: Optional[ProbeConfig] = None,
    shuffle_labels: bool = False,
) -> np.ndarray:
    """
    Token x token cosine grid between probe directions fitted on two tensors
    (two runs or two prompts) at one layer.
    """
    dirs_a = np.stack([fit_direction(acts_a, stage_a, stage_b, layer, t, config, shuffle_labels).direction for t in tokens])
    dirs_b = np.stack([fit_direction(acts_b, stage_a, stage_b, layer, t, config, shuffle_labels).direction for t in tokens])
    return dirs_a @ dirs_b.T
