"""
Planted-signal activations with known geometry, and the checks that the
analysis pipeline recovers it.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from recency_lab.models.activations import ActivationTensor
from recency_lab.models.config import BalanceConfig, PlantedSpecConfig, ProbeConfig
from recency_lab.models.errors import DegenerateSpread, EmptyResult, LabError, ZeroVector
from recency_lab.models.records import ProbeSplit, SampleIndex
from recency_lab.models.reports import CheckResult
from recency_lab.services import geometry, probes
from recency_lab.services.controls import (
    ACTIVATION_STATS,
    BinSpec,
    activation_stats,
    balance_subsample,
    balanced_probe_compare,
    marginal_counts,
)
from recency_lab.utils.logger import logger

PLANTED_LAYERS = 2
PLANTED_TOKENS = 3
PLANTED_CELL = (1, 2)
BAYES_SAMPLE = 10000


@dataclass
class PlantedSignal:
    acts: ActivationTensor
    direction: np.ndarray
    means: np.ndarray  # [m, dim], row i is stage i + 1
    order: List[int]   # stage ids from oldest to most recent
    layer: int
    token: int


def _index(labels: np.ndarray, ratio: float = 0.8) -> List[SampleIndex]:
    """One entity per row; the first `ratio` of every class is probe-train."""
    is_test = np.zeros(len(labels), dtype=bool)
    for stage in np.unique(labels):
        rows = np.flatnonzero(labels == stage)
        is_test[rows[int(np.floor(ratio * len(rows))):]] = True
    return [
        SampleIndex(
            entity_id=i,
            stage=int(stage),
            probe_split=ProbeSplit.probe_test if is_test[i] else ProbeSplit.probe_train,
            prompt_id=0,
        )
        for i, stage in enumerate(labels.tolist())
    ]


def _embed(cell_rows: np.ndarray, rng: np.random.Generator, cell: Tuple[int, int]) -> np.ndarray:
    """Place cell_rows at `cell` of a [n, L, T, dim] tensor whose other cells are N(0, 1) noise."""
    n, dim = cell_rows.shape
    data = rng.normal(size=(n, PLANTED_LAYERS, PLANTED_TOKENS, dim))
    data[:, cell[0], cell[1], :] = cell_rows
    return data.astype(np.float32)


def plant_signal(
    spec: PlantedSpecConfig,
    seed: int,
    order: Optional[Sequence[int]] = None,
) -> PlantedSignal:
    """
    Stage-i rows ~ N(mu_i, sigma^2 I) at the planted cell, mu_i equally spaced
    along a random unit direction (optionally bent along an orthogonal one).

    `order` lists stage ids from oldest to most recent exposure; the default
    is 1..m. Position along the direction follows that order.
    """
    rng = np.random.default_rng(seed)
    order = list(order or range(1, spec.m + 1))
    u = rng.normal(size=spec.dim)
    u /= np.linalg.norm(u)
    w = rng.normal(size=spec.dim)
    w -= (w @ u) * u
    w /= np.linalg.norm(w)

    center = (spec.m - 1) / 2
    means = np.zeros((spec.m, spec.dim))
    for rank, stage in enumerate(order):
        offset = rank - center
        bend = spec.curvature * (offset ** 2 - np.mean((np.arange(spec.m) - center) ** 2))
        means[stage - 1] = offset * spec.centroid_spacing * u + bend * w

    labels = np.repeat(np.arange(1, spec.m + 1), spec.n)
    rows = means[labels - 1] + spec.noise_sigma * rng.normal(size=(len(labels), spec.dim))
    acts = ActivationTensor(
        data=_embed(rows, rng, PLANTED_CELL),
        index=_index(labels),
        fingerprint=f"planted:{seed}",
    )
    return PlantedSignal(acts=acts, direction=u, means=means, order=order, layer=PLANTED_CELL[0], token=PLANTED_CELL[1])


def fresh_rows(planted: PlantedSignal, spec: PlantedSpecConfig, stages: Sequence[int], n: int,
               seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """New planted-cell rows from the same stage means, n per stage."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.asarray(stages), n)
    rows = planted.means[labels - 1] + spec.noise_sigma * rng.normal(size=(len(labels), spec.dim))
    return rows, labels


def pair_probe_accuracy(planted: PlantedSignal, spec: PlantedSpecConfig, acts: ActivationTensor,
                        probe_config: ProbeConfig, seed: int, n_fresh: int = BAYES_SAMPLE) -> float:
    """D1-vs-D2 probe fitted on the probe-train rows, scored on a fresh sample."""
    pair = acts.stage_subset([1, 2])
    train = ~pair.probe_test
    X = pair.cell(planted.layer, planted.token)[train]
    y = (pair.stages[train] == 2).astype(np.int64)
    model = probes.train_probe(X, y, l2=probes.l2_from_C(probe_config.C, len(y)), seed=seed,
                               tol=probe_config.tol, max_iter=probe_config.max_iter)
    X_fresh, stages = fresh_rows(planted, spec, [1, 2], n_fresh, seed + 1)
    return probes.eval_probe(model, X_fresh, (stages == 2).astype(np.int64))


def bayes_accuracy(spacing: float, sigma: float) -> float:
    """Best achievable accuracy between two isotropic Gaussians `spacing` apart."""
    if sigma == 0:
        return 1.0 if spacing > 0 else 0.5
    return float(stats.norm.cdf(spacing / (2 * sigma)))


def norm_only_signal(n_per_class: int, seed: int, dim: int = 16, ambiguous: float = 0.1,
                     radii: Tuple[float, float] = (1.0, 2.0), tilt: float = 0.8) -> Tuple[ActivationTensor, np.ndarray]:
    """
    Classes that differ only in vector norm: x = r * (tilt * b + sqrt(1 - tilt^2) * v)
    with v uniform on the unit sphere orthogonal to a fixed b. Class 0 has
    r = radii[0], class 1 has r = radii[1], except an `ambiguous` fraction of
    each class that sits at the midpoint radius.

    Norm is linearly readable along b, and the direction v carries nothing.
    Rows at the midpoint radius form the only bin holding both classes, so a
    norm-balanced training set has constant projection on b.
    """
    rng = np.random.default_rng(seed)
    b = rng.normal(size=dim)
    b /= np.linalg.norm(b)
    labels = np.repeat([0, 1], n_per_class)
    radius = np.where(labels == 1, radii[1], radii[0])
    radius[rng.random(len(labels)) < ambiguous] = (radii[0] + radii[1]) / 2

    v = rng.normal(size=(len(labels), dim))
    v -= np.outer(v @ b, b)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    rows = radius[:, None] * (tilt * b + np.sqrt(1.0 - tilt ** 2) * v)
    acts = ActivationTensor(data=_embed(rows, rng, PLANTED_CELL), index=_index(labels + 1), fingerprint=f"norm-only:{seed}")
    return acts, labels


def orthogonal_signal(n_per_class: int, seed: int, dim: int = 16, shift: float = 1.5) -> Tuple[ActivationTensor, np.ndarray]:
    """
    Class 0 shifted along one coordinate, class 1 along another. Every
    activation statistic is permutation invariant, so none carries the class.
    """
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n_per_class)
    rows = rng.normal(size=(len(labels), dim))
    rows[labels == 0, 0] += shift
    rows[labels == 1, 1] += shift
    acts = ActivationTensor(data=_embed(rows, rng, PLANTED_CELL), index=_index(labels + 1), fingerprint=f"orthogonal:{seed}")
    return acts, labels


def _check(results: List[CheckResult], spec: str, check: str, passed: bool, value=None, threshold=None, detail=""):
    results.append(CheckResult(
        spec=spec, check=check, passed=bool(passed),
        value=None if value is None else float(value), threshold=threshold, detail=detail,
    ))


def _roundtrip(acts: ActivationTensor, out_dir: Optional[Path], name: str) -> ActivationTensor:
    if out_dir is None:
        return acts
    from recency_lab.adapters.activation_store import read_activations, write_activations
    path = write_activations(Path(out_dir) / f"{name}.actv", acts)
    return read_activations(path, expected_fingerprint=acts.fingerprint)


def _label(spec: PlantedSpecConfig) -> str:
    return f"m={spec.m},n={spec.n},s={spec.centroid_spacing:g},sigma={spec.noise_sigma:g},curv={spec.curvature:g}"


def verify_spec(spec: PlantedSpecConfig, seed: int, out_dir: Optional[Path] = None,
                probe_config: Optional[ProbeConfig] = None) -> List[CheckResult]:
    """Geometry, probe and balancing checks on one planted spec."""
    probe_config = probe_config or ProbeConfig()
    name = _label(spec)
    results: List[CheckResult] = []
    planted = plant_signal(spec, seed)
    acts = _roundtrip(planted.acts, out_dir, f"planted_{seed}")
    layer, token = planted.layer, planted.token
    strong = spec.noise_sigma == 0 or spec.centroid_spacing / spec.noise_sigma >= 10
    signal = spec.centroid_spacing > 0

    cs = geometry.centroids(acts, layer, token)
    try:
        x = geometry.diffmean_axis([(cs.of(spec.m), cs.of(1))])
    except ZeroVector:
        _check(results, name, "diffmean_axis", not signal, detail="ZeroVector raised")
        x = None
    if x is not None:
        cos = abs(float(x @ planted.direction))
        if strong and signal and spec.n >= 500:
            _check(results, name, "axis_alignment", cos >= 0.99, cos, ">= 0.99")
        try:
            y = geometry.residual_pc_axis(cs.vectors, x)
        except DegenerateSpread:
            y = None
            _check(results, name, "residual_pc_axis", spec.curvature == 0, detail="DegenerateSpread on collinear centroids")
        tau = geometry.ordering_score(cs.vectors @ x)
        if strong and signal:
            _check(results, name, "ordering_tau", tau == 1.0, tau, "== 1.0")
        elif not signal:
            _check(results, name, "ordering_tau_reported", True, tau, "reported", detail="no planted order")
        if y is not None:
            ortho = abs(float(x @ y))
            _check(results, name, "axis_orthonormal", ortho <= geometry.ORTHO_TOL, ortho, "<= 1e-6")
        if spec.m >= 3:
            resid = geometry.collinearity_residual(cs.vectors)
            if strong and signal and spec.curvature == 0:
                _check(results, name, "collinearity", resid <= 0.05, resid, "<= 0.05")

    grid = probes.stage_probe_grid(acts, 1, 2, probe_config)
    acc = grid.at(layer, token)
    bayes = bayes_accuracy(spec.centroid_spacing, spec.noise_sigma)
    if signal:
        fresh_acc = pair_probe_accuracy(planted, spec, acts, probe_config, seed)
        _check(results, name, "probe_bayes_bound", fresh_acc <= bayes + 0.02, fresh_acc, f"<= {bayes + 0.02:.3f}",
               detail=f"{BAYES_SAMPLE} fresh rows per stage")
        if spec.n >= 2000:
            _check(results, name, "probe_near_bayes", abs(fresh_acc - bayes) <= 0.03, fresh_acc, f"{bayes:.3f} +/- 0.03")
        best_layer, best_token, _ = grid.max_cell()
        if bayes >= 0.75:
            _check(results, name, "probe_peak_cell", (best_layer, best_token) == (layer, token),
                   detail=f"best cell ({best_layer}, {best_token})")
    else:
        _check(results, name, "probe_chance", abs(acc - 0.5) <= 0.05, acc, "0.5 +/- 0.05")
    others = [grid.acc_mean[i][j] for i in range(len(grid.layers)) for j in range(len(grid.tokens))
              if (grid.layers[i], grid.tokens[j]) != (layer, token)]
    _check(results, name, "noise_cells_chance", max(abs(a - 0.5) for a in others) <= 0.1,
           max(others), "0.5 +/- 0.1")

    if spec.m >= 3 and signal:
        pairwise = probes.pairwise_stage_grid(acts, spec.m, layer, token, probe_config)
        _check(results, name, "pairwise_monotone", pairwise.weakly_monotone(tol=0.03))

    pair = acts.stage_subset([1, 2])
    pair_labels = (pair.stages == 2).astype(np.int64)
    values = np.stack([activation_stats(v) for v in pair.cell(layer, token)])
    bin_spec = BinSpec.fit(values, ACTIVATION_STATS, 5, "equal-width")
    try:
        subset = balance_subsample(values, pair_labels, bin_spec, seed)
        equal = all(a == b for a, b in subset.per_bin.values())
        margins = marginal_counts(values[subset.indices], pair_labels[subset.indices], bin_spec)
        _check(results, name, "balance_equal_bins", equal and all(np.array_equal(m[0], m[1]) for m in margins))
    except EmptyResult:
        # statistics alone separate the pair, nothing to balance
        _check(results, name, "balance_equal_bins", True, detail="no joint bin holds both classes")
    except LabError as e:
        _check(results, name, "balance_equal_bins", False, detail=str(e))
    return results


def verify_balancing(n_per_class: int, seed: int, probe_config: Optional[ProbeConfig] = None) -> List[CheckResult]:
    """Norm-only signal must vanish under norm balancing; an orthogonal signal must survive it."""
    probe_config = probe_config or ProbeConfig()
    results: List[CheckResult] = []
    layer, token = PLANTED_CELL
    # odd bin count keeps the midpoint radius inside one bin
    balance = BalanceConfig(n_bins=15)

    acts, labels = norm_only_signal(n_per_class, seed)
    norms = np.linalg.norm(acts.cell(layer, token).astype(np.float64), axis=1, keepdims=True)
    report = balanced_probe_compare(acts, labels, norms, ["l2_norm"], layer, token, balance, probe_config, seed)
    _check(results, "norm-only", "balanced_collapses", report.accuracies["balanced"] <= 0.55,
           report.accuracies["balanced"], "<= 0.55")
    _check(results, "norm-only", "random_survives", report.accuracies["random"] >= 0.9,
           report.accuracies["random"], ">= 0.9")

    acts, labels = orthogonal_signal(n_per_class, seed)
    values = np.stack([activation_stats(v) for v in acts.cell(layer, token)])
    report = balanced_probe_compare(acts, labels, values, ACTIVATION_STATS, layer, token,
                                    BalanceConfig(n_bins=3), probe_config, seed)
    gap = abs(report.accuracies["balanced"] - report.accuracies["random"])
    _check(results, "orthogonal", "balanced_matches_random", gap <= 0.03, gap, "<= 0.03")
    return results


def verify_pipeline(
    specs: Sequence[PlantedSpecConfig],
    seed: int = 0,
    out_dir: Optional[Path] = None,
    balancing_n: int = 2000,
) -> List[CheckResult]:
    """Every check for every spec plus the balancing mechanism checks."""
    results: List[CheckResult] = []
    for k, spec in enumerate(specs):
        results.extend(verify_spec(spec, seed + k, out_dir))
    results.extend(verify_balancing(balancing_n, seed))
    failed = [r for r in results if not r.passed]
    if failed:
        first = failed[0]
        logger.error(f"Oracle check failed: [{first.spec}] {first.check} value={first.value} "
                     f"threshold={first.threshold} {first.detail}")
    logger.info(f"Oracle verification: {len(results) - len(failed)}/{len(results)} checks passed")
    return results
