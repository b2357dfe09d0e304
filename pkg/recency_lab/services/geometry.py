"""
Centroid geometry of activation cells.

Axes are oriented so that the most recently trained stage projects to the
right: `recency_basis` builds x from (c_last - c_first) differences.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from recency_lab.models.activations import ActivationTensor
from recency_lab.models.errors import DegenerateSpread, EmptyGroup, ZeroVector
from recency_lab.utils.logger import logger

ORTHO_TOL = 1e-6


@dataclass
class CentroidSet:
    """Per-stage mean activation at one (layer, token) cell"""
    stages: List[int]
    vectors: np.ndarray  # [n_stages, d_model] float64
    counts: List[int]
    layer: int
    token: int
    prompt_id: int = 0
    run: str = ""

    def of(self, stage: int) -> np.ndarray:
        return self.vectors[self.stages.index(stage)]


@dataclass
class Axis2D:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if abs(np.linalg.norm(self.x) - 1) > ORTHO_TOL or abs(np.linalg.norm(self.y) - 1) > ORTHO_TOL:
            raise ValueError("axis vectors must be unit length")
        if abs(float(self.x @ self.y)) > ORTHO_TOL:
            raise ValueError(f"axis vectors are not orthogonal (x.y = {float(self.x @ self.y):.2e})")


def _sign_fix(v: np.ndarray) -> np.ndarray:
    """Largest-magnitude coordinate made positive."""
    return v if v[np.argmax(np.abs(v))] >= 0 else -v


def centroids(
    acts: ActivationTensor,
    layer: int,
    token: int,
    stages: Optional[Sequence[int]] = None,
    run: str = "",
) -> CentroidSet:
    """Exact group means of the (layer, token) rows, grouped by stage."""
    rows = acts.cell(layer, token).astype(np.float64)
    labels = acts.stages
    stages = sorted(set(labels.tolist())) if stages is None else list(stages)
    vectors, counts = [], []
    for stage in stages:
        members = rows[labels == stage]
        if len(members) == 0:
            raise EmptyGroup(f"stage {stage} has no samples at layer {layer}, token {token}", stage=stage)
        vectors.append(members.mean(axis=0))
        counts.append(len(members))
    prompt_ids = {row.prompt_id for row in acts.index}
    L, T = acts.resolve(layer, token)
    return CentroidSet(
        stages=stages, vectors=np.stack(vectors), counts=counts, layer=L, token=T,
        prompt_id=prompt_ids.pop() if len(prompt_ids) == 1 else 0, run=run,
    )


def diffmean_axis(pairs: Sequence[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """normalize(mean(a - b)) over (a, b) pairs."""
    if not pairs:
        raise ValueError("diffmean_axis needs at least one pair")
    diffs = np.stack([np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64) for a, b in pairs])
    mean = diffs.mean(axis=0)
    scale = max(1.0, max(np.linalg.norm(np.asarray(v, dtype=np.float64)) for pair in pairs for v in pair))
    norm = np.linalg.norm(mean)
    if norm <= 1e-12 * scale:
        raise ZeroVector("mean centroid difference is numerically zero", norm=float(norm), n_pairs=len(pairs))
    return mean / norm


def residual_pc_axis(centroid_rows: np.ndarray, x: np.ndarray) -> np.ndarray:
    """First principal component of the centroids after removing their x components."""
    C = np.asarray(centroid_rows, dtype=np.float64)
    if len(C) < 2:
        raise ValueError("residual_pc_axis needs at least two centroids")
    residuals = C - np.outer(C @ x, x)
    residuals = residuals - residuals.mean(axis=0)
    scale = max(1.0, float(np.abs(C).max()))
    if np.abs(residuals).max() <= 1e-12 * scale:
        raise DegenerateSpread("centroids have no spread orthogonal to the x axis")

    _, _, vt = np.linalg.svd(residuals, full_matrices=False)
    y = vt[0] - (vt[0] @ x) * x
    return _sign_fix(y / np.linalg.norm(y))


def project(vectors: np.ndarray, axis: Axis2D) -> np.ndarray:
    """[n, 2] array of (v.x, v.y)."""
    V = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    return np.stack([V @ axis.x, V @ axis.y], axis=1)


def ordering_score(px: Sequence[float], true_order: Optional[Sequence[float]] = None) -> float:
    """Kendall tau-b between the x positions and the true stage order."""
    px = np.asarray(px, dtype=np.float64)
    if len(px) < 2:
        raise ValueError("ordering_score needs at least two stages")
    order = np.arange(len(px)) if true_order is None else np.asarray(true_order, dtype=np.float64)
    tau = stats.kendalltau(px, order).statistic
    if np.isnan(tau):
        logger.warning("ordering_score is undefined for constant positions, reporting 0")
        return 0.0
    # a perfect order must report exactly 1.0
    return round(float(tau), 12)


def collinearity_residual(centroid_rows: np.ndarray) -> float:
    """RMS distance to the best-fit (total least squares) line over the RMS spread."""
    C = np.asarray(centroid_rows, dtype=np.float64)
    if len(C) < 3:
        raise ValueError("collinearity_residual needs at least three centroids")
    centered = C - C.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    total = float(np.sum(s ** 2))
    if total == 0.0:
        return 0.0
    return float(np.sqrt(np.sum(s[1:] ** 2) / total))


def seen_unseen_axis(pairs: Sequence[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Mean (unseen - seen) centroid difference across checkpoints, normalized."""
    return diffmean_axis(pairs)


def pca(rows: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Centered PCA by eigendecomposition of the covariance.

    Returns components [k, dim] (orthonormal rows) and their explained
    variance ratios relative to the total variance.
    """
    X = np.asarray(rows, dtype=np.float64)
    n, dim = X.shape
    if not 1 <= k <= min(n, dim):
        raise ValueError(f"k must be in [1, {min(n, dim)}], got {k}")
    X = X - X.mean(axis=0)
    cov = X.T @ X / max(n - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    components = np.stack([_sign_fix(eigvecs[:, i]) for i in order[:k]])
    total = eigvals.sum()
    ratios = eigvals[:k] / total if total > 0 else np.zeros(k)
    return components, ratios


@dataclass
class CosineStats:
    within: Dict[str, float] = field(default_factory=dict)
    between: Dict[Tuple[str, str], float] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        rows = [{"group_a": g, "group_b": g, "mean_cosine": v} for g, v in self.within.items()]
        rows += [{"group_a": a, "group_b": b, "mean_cosine": v} for (a, b), v in self.between.items()]
        return pd.DataFrame(rows, columns=["group_a", "group_b", "mean_cosine"])


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    R = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(R, axis=1, keepdims=True)
    return R / np.where(norms == 0, 1.0, norms)


def cosine_stats(groups: Dict[str, np.ndarray]) -> CosineStats:
    """Mean pairwise cosine similarity within each group (self pairs excluded) and between groups."""
    units = {name: _unit_rows(rows) for name, rows in groups.items()}
    result = CosineStats()
    for name, U in units.items():
        n = len(U)
        if n == 0:
            raise EmptyGroup(f"group {name} is empty", group=name)
        if n == 1:
            logger.warning(f"group {name} has one row, within-group cosine undefined")
            result.within[name] = float("nan")
            continue
        G = U @ U.T
        result.within[name] = float((G.sum() - np.trace(G)) / (n * (n - 1)))
    names = list(units)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            result.between[(a, b)] = float((units[a] @ units[b].T).mean())
    return result


def probe_cosine_matrix(directions: np.ndarray) -> np.ndarray:
    """Pairwise cosine grid of probe weight directions."""
    U = _unit_rows(directions)
    if len(U) < 2:
        raise ValueError("probe_cosine_matrix needs at least two directions")
    return U @ U.T


def recency_basis(
    centroid_sets: Sequence[CentroidSet],
    pair: Optional[Tuple[int, int]] = None,
    plotted: Optional[Sequence[CentroidSet]] = None,
) -> Axis2D:
    """
    x: mean (c_j - c_i) over the given centroid sets, pair=(i, j) defaulting
    to (first stage, last stage); y: residual PC of the plotted centroids.
    """
    pairs = []
    for cs in centroid_sets:
        i, j = pair or (cs.stages[0], cs.stages[-1])
        pairs.append((cs.of(j), cs.of(i)))
    x = diffmean_axis(pairs)
    plotted = plotted if plotted is not None else centroid_sets
    y = residual_pc_axis(np.concatenate([cs.vectors for cs in plotted], axis=0), x)
    return Axis2D(x=x, y=y)


PROJECTION_COLUMNS = ["run", "stage", "layer", "token", "px", "py"]


def projection_frame(centroid_sets: Sequence[CentroidSet], axis: Axis2D) -> pd.DataFrame:
    """One row per projected centroid."""
    rows = []
    for cs in centroid_sets:
        for stage, (px, py) in zip(cs.stages, project(cs.vectors, axis)):
            rows.append({"run": cs.run, "stage": stage, "layer": cs.layer, "token": cs.token, "px": px, "py": py})
    return pd.DataFrame(rows, columns=PROJECTION_COLUMNS)


def scaled_diffmean_projection(rows: np.ndarray, c_first: np.ndarray, c_last: np.ndarray) -> np.ndarray:
    """Affine coordinate along c_last - c_first with c_first at -1 and c_last at +1."""
    delta = np.asarray(c_last, dtype=np.float64) - np.asarray(c_first, dtype=np.float64)
    sq = float(delta @ delta)
    if sq == 0.0:
        raise ZeroVector("first and last centroids coincide")
    t = (np.asarray(rows, dtype=np.float64) - c_first) @ delta / sq
    return 2.0 * t - 1.0


def histogram_counts(values: np.ndarray, groups: np.ndarray, bins: int = 30) -> pd.DataFrame:
    """Per-group counts over shared equal-width edges."""
    values = np.asarray(values, dtype=np.float64)
    edges = np.histogram_bin_edges(values, bins=bins)
    rows = []
    for g in sorted(set(np.asarray(groups).tolist())):
        counts, _ = np.histogram(values[np.asarray(groups) == g], bins=edges)
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            rows.append({"group": g, "bin_left": lo, "bin_right": hi, "count": int(c)})
    return pd.DataFrame(rows, columns=["group", "bin_left", "bin_right", "count"])


def centroid_pca_view(centroid_rows: np.ndarray, all_rows: Optional[np.ndarray] = None) -> dict:
    """Centroids on their own top-2 PCs, plus how much of the full activation variance that plane holds."""
    C = np.asarray(centroid_rows, dtype=np.float64)
    components, ratios = pca(C, k=min(2, len(C), C.shape[1]))
    coords = (C - C.mean(axis=0)) @ components.T
    view = {"coords": coords.tolist(), "explained_ratio": ratios.tolist()}
    if all_rows is not None:
        A = np.asarray(all_rows, dtype=np.float64)
        A = A - A.mean(axis=0)
        total = float(np.sum(A ** 2))
        view["plane_fraction"] = float(np.sum((A @ components.T) ** 2) / total) if total > 0 else 0.0
    return view
