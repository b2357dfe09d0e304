"""
Statistical-balancing controls.

Per-sample statistics are binned jointly on edges fitted to the pooled
(both-class) probe-train rows. Inside every occupied joint bin both classes
are subsampled to the smaller count, so no binned statistic can separate the
classes. Probes trained on the balanced subset, on a random subset of the same
size and on all probe-train rows are evaluated on one fixed held-out set.
"""

from collections import defaultdict
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from scipy import special, stats

from recency_lab.models.activations import ActivationTensor
from recency_lab.models.config import BalanceConfig, ProbeConfig
from recency_lab.models.errors import EmptyResult, TargetTooLarge
from recency_lab.models.records import QASample
from recency_lab.models.reports import BalanceReport
from recency_lab.services.probes import entity_splits, eval_probe, l2_from_C, train_probe
from recency_lab.services.training import sample_continuations
from recency_lab.services.transformer import TransformerLM
from recency_lab.utils.logger import logger

ACTIVATION_STATS = ["l2_norm", "max", "mean", "std", "skewness", "kurtosis"]
LOGIT_STATS = ["entropy", "max_logit", "logsumexp", "logit_mean", "logit_std", "logit_skewness", "logit_kurtosis"]
BACKWARD_STATS = ["mean_loglik", "cum_entropy", "min_entropy", "max_entropy"]
HORIZONS = (3, 5, 10)
FORWARD_STATS = (
    [f"{name}_h{h}" for h in HORIZONS for name in ("entropy", "ppl")]
    + ["distinct_2", "distinct_3", "jaccard", "token_entropy", "vocab_fraction", "len_mean", "len_std"]
)
STAT_GROUPS = {
    "activation": ACTIVATION_STATS,
    "logit": LOGIT_STATS,
    "backward": BACKWARD_STATS,
    "forward": FORWARD_STATS,
}


def _moments(v: np.ndarray) -> Tuple[float, float, float, float]:
    """Population mean, std, skewness and non-excess kurtosis; constant input gives zero shape moments."""
    mean = float(np.mean(v))
    if np.ptp(v) == 0:
        return float(v[0]), 0.0, 0.0, 0.0
    std = float(np.std(v))
    return mean, std, float(stats.skew(v, bias=True)), float(stats.kurtosis(v, fisher=False, bias=True))


def activation_stats(v: np.ndarray) -> np.ndarray:
    """l2_norm, max, mean, std, skewness, kurtosis"""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or len(v) < 2:
        raise ValueError(f"activation_stats needs a vector of length >= 2, got shape {v.shape}")
    mean, std, skew, kurt = _moments(v)
    return np.array([np.linalg.norm(v), v.max(), mean, std, skew, kurt])


def logit_stats(z: np.ndarray) -> np.ndarray:
    """entropy of softmax(z), max, logsumexp, then moments of the raw logits"""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logit_stats needs finite logits")
    entropy = float(stats.entropy(special.softmax(z)))
    mean, std, skew, kurt = _moments(z)
    return np.array([entropy, z.max(), special.logsumexp(z), mean, std, skew, kurt])


def _log_probs(model: TransformerLM, token_batch: List[List[int]]) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        logits, _ = model(torch.tensor(token_batch, dtype=torch.long))
        return F.log_softmax(logits.double(), dim=-1).numpy()


def backward_stats_from_logprobs(logp: np.ndarray, tokens: Sequence[int], position: int) -> np.ndarray:
    """
    logp is [T, V] next-token log-probabilities of one sequence. Uses the
    predictions made at positions 0..position-1.
    """
    if position < 1:
        raise ValueError(f"position must be >= 1, got {position}")
    rows = logp[:position]
    realized = rows[np.arange(position), np.asarray(tokens[1:position + 1])]
    entropies = -(np.exp(rows) * rows).sum(axis=1)
    return np.array([realized.mean(), entropies.sum(), entropies.min(), entropies.max()])


def backward_stats(model: TransformerLM, prompt: Sequence[int], position: int) -> np.ndarray:
    """mean log-likelihood of tokens 1..position, cumulative/min/max predictive entropy"""
    logp = _log_probs(model, [list(prompt[:position + 1])])[0]
    return backward_stats_from_logprobs(logp, prompt, position)


def _distinct_ratio(seq: List[int], n: int) -> Optional[float]:
    grams = [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)]
    return len(set(grams)) / len(grams) if grams else None


def _jaccard(a: List[int], b: List[int]) -> float:
    sa, sb = set(a), set(b)
    union = sa | sb
    return len(sa & sb) / len(union) if union else 1.0


@dataclass
class ForwardStats:
    values: np.ndarray
    flags: List[str] = field(default_factory=list)


def forward_gen_stats(
    model: TransformerLM,
    prompt: Sequence[int],
    position: int,
    n: int = 20,
    temperature: float = 1.0,
    max_tokens: int = 10,
    seed: int = 0,
) -> ForwardStats:
    """
    Statistics of n sampled continuations of prompt[:position + 1].

    Horizon h entropy is the mean entropy of the sampling distributions over
    the first h steps; perplexity is exp of the mean negative log-probability
    of the sampled tokens over the same steps. Distinct n-gram ratios are
    per-sequence means. Token entropy is the unigram entropy of all generated
    tokens; vocab fraction is distinct generated tokens over V.
    """
    cont = sample_continuations(model, list(prompt[:position + 1]), temperature, max_tokens, n, seed)
    alive = cont.alive.numpy()
    ent = cont.entropies.double().numpy()
    nll = -cont.token_logprobs.double().numpy()
    flags: List[str] = []

    values: List[float] = []
    for h in HORIZONS:
        mask = alive[:, :h]
        values.append(float(ent[:, :h][mask].mean()))
        values.append(float(np.exp(nll[:, :h][mask].mean())))

    seqs = cont.sequences
    for k in (2, 3):
        ratios = [r for r in (_distinct_ratio(s, k) for s in seqs) if r is not None]
        values.append(float(np.mean(ratios)) if ratios else 0.0)
    if len(seqs) < 2:
        flags.append("jaccard_undefined")
        logger.warning("pairwise Jaccard undefined for a single continuation, reporting 1.0")
        values.append(1.0)
    else:
        values.append(float(np.mean([_jaccard(a, b) for a, b in combinations(seqs, 2)])))

    generated = [t for s in seqs for t in s]
    if generated:
        _, counts = np.unique(generated, return_counts=True)
        values.append(float(stats.entropy(counts)))
    else:
        values.append(0.0)
    values.append(len(set(generated)) / model.config.vocab_size)
    lengths = np.array([len(s) for s in seqs], dtype=np.float64)
    values.extend([float(lengths.mean()), float(lengths.std())])
    return ForwardStats(values=np.array(values), flags=flags)


def compute_stats(
    acts: ActivationTensor,
    layer: int,
    token: int,
    groups: Sequence[str],
    model: Optional[TransformerLM] = None,
    prompts: Optional[Sequence[QASample]] = None,
    config: Optional[BalanceConfig] = None,
) -> Tuple[np.ndarray, List[str]]:
    """[n_samples, k] statistics of every row at one (layer, token) for the chosen groups."""
    config = config or BalanceConfig()
    _, token = acts.resolve(layer, token)
    needs_model = [g for g in groups if g != "activation"]
    if needs_model and (model is None or prompts is None):
        raise ValueError(f"statistic groups {needs_model} need a model and the captured prompts")

    columns, names = [], []
    if "activation" in groups:
        columns.append(np.stack([activation_stats(v) for v in acts.cell(layer, token)]))
        names += ACTIVATION_STATS
    if "logit" in groups or "backward" in groups:
        model.eval()
        with torch.no_grad():
            logits, _ = model(torch.tensor([p.prompt_tokens for p in prompts], dtype=torch.long))
        logits = logits.double()
        if "logit" in groups:
            columns.append(np.stack([logit_stats(z) for z in logits[:, token, :].numpy()]))
            names += LOGIT_STATS
        if "backward" in groups:
            logp = F.log_softmax(logits, dim=-1).numpy()
            pos = max(token, 1)
            columns.append(np.stack([
                backward_stats_from_logprobs(logp[i], p.prompt_tokens, pos) for i, p in enumerate(prompts)
            ]))
            names += BACKWARD_STATS
    if "forward" in groups:
        columns.append(np.stack([
            forward_gen_stats(model, p.prompt_tokens, token, config.n_generations, config.temperature,
                              config.max_new_tokens, seed=config.seed + i).values
            for i, p in enumerate(prompts)
        ]))
        names += FORWARD_STATS
    return np.concatenate(columns, axis=1), names


def stats_table(
    acts: ActivationTensor,
    layer: int,
    positions: Sequence[int],
    groups: Sequence[str],
    model: Optional[TransformerLM] = None,
    prompts: Optional[Sequence[QASample]] = None,
    config: Optional[BalanceConfig] = None,
) -> pd.DataFrame:
    """One row per (sample, position) with every named statistic."""
    frames = []
    for position in positions:
        values, names = compute_stats(acts, layer, position, groups, model, prompts, config)
        frame = pd.DataFrame(values, columns=names)
        frame.insert(0, "position", acts.resolve(layer, position)[1])
        frame.insert(0, "stage", acts.stages)
        frame.insert(0, "entity_id", acts.entity_ids)
        frame.insert(0, "sample", np.arange(acts.n_samples))
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


@dataclass
class BinSpec:
    """Per-statistic bin edges; edges[d] is strictly increasing."""
    names: List[str]
    n_bins: int
    strategy: str
    edges: List[np.ndarray]

    @classmethod
    def fit(cls, values: np.ndarray, names: Sequence[str], n_bins: int, strategy: str = "equal-width") -> "BinSpec":
        """Edges from pooled rows: min/max for equal-width, order statistics for quantile."""
        if n_bins < 2:
            raise ValueError(f"n_bins must be >= 2, got {n_bins}")
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        edges = []
        for d in range(values.shape[1]):
            col = values[:, d]
            lo, hi = float(col.min()), float(col.max())
            if strategy == "quantile":
                e = np.unique(np.quantile(col, np.linspace(0.0, 1.0, n_bins + 1)))
                if len(e) < 2:
                    e = np.array([lo - 0.5, hi + 0.5])
            elif strategy == "equal-width":
                if lo == hi:
                    lo, hi = lo - 0.5, hi + 0.5
                e = np.linspace(lo, hi, n_bins + 1)
            else:
                raise ValueError(f"unknown binning strategy {strategy}")
            edges.append(e)
        return cls(names=list(names), n_bins=n_bins, strategy=strategy, edges=edges)

    def assign(self, values: np.ndarray) -> np.ndarray:
        """[n, k] bin codes; values outside the edges fall into the end bins."""
        values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        return np.stack(
            [np.searchsorted(e[1:-1], values[:, d], side="right") for d, e in enumerate(self.edges)], axis=1
        )


@dataclass
class BalancedSubset:
    indices: np.ndarray
    per_bin: Dict[Tuple[int, ...], Tuple[int, int]]
    occupied_bins: int

    @property
    def mixed_bins(self) -> int:
        return len(self.per_bin)


def balance_subsample(values: np.ndarray, labels: np.ndarray, spec: BinSpec, seed: int) -> BalancedSubset:
    """
    Keep min(a, b) rows of each class inside every joint bin holding both
    classes; bins with one class are dropped.
    """
    labels = np.asarray(labels, dtype=np.int64)
    codes = spec.assign(values)
    bins: Dict[Tuple[int, ...], Dict[int, List[int]]] = defaultdict(lambda: {0: [], 1: []})
    for i, code in enumerate(map(tuple, codes.tolist())):
        bins[code][int(labels[i])].append(i)

    rng = np.random.default_rng(seed)
    kept: List[int] = []
    per_bin: Dict[Tuple[int, ...], Tuple[int, int]] = {}
    for code in sorted(bins):
        members = bins[code]
        k = min(len(members[0]), len(members[1]))
        if k == 0:
            continue
        for cls in (0, 1):
            kept.extend(rng.choice(members[cls], size=k, replace=False).tolist())
        per_bin[code] = (k, k)

    if not per_bin:
        raise EmptyResult("no joint bin contains both classes", occupied_bins=len(bins), n_bins=spec.n_bins)
    return BalancedSubset(indices=np.sort(np.array(kept, dtype=np.int64)), per_bin=per_bin, occupied_bins=len(bins))


def marginal_counts(values: np.ndarray, labels: np.ndarray, spec: BinSpec) -> List[np.ndarray]:
    """Per statistic, a [2, n_edges-1] array of class-conditional bin counts."""
    codes = spec.assign(values)
    labels = np.asarray(labels)
    out = []
    for d, e in enumerate(spec.edges):
        out.append(np.stack([np.bincount(codes[labels == c, d], minlength=len(e) - 1) for c in (0, 1)]))
    return out


def random_downsample(labels: np.ndarray, target_per_class: int, seed: int) -> np.ndarray:
    """Sorted indices of target_per_class rows drawn without replacement from each class."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    picked = []
    for cls in (0, 1):
        members = np.flatnonzero(labels == cls)
        if target_per_class > len(members):
            raise TargetTooLarge(
                f"class {cls} has {len(members)} rows, {target_per_class} requested",
                cls=cls, available=len(members), target=target_per_class,
            )
        picked.append(rng.choice(members, size=target_per_class, replace=False))
    return np.sort(np.concatenate(picked))


def held_out_mask(acts: ActivationTensor, labels: np.ndarray, config: ProbeConfig) -> np.ndarray:
    """The datagen probe-test split when present, else the first random entity split."""
    mask = acts.probe_test
    if mask.any() and (~mask).any():
        return mask
    _, test_mask = entity_splits(acts.entity_ids, labels, 1, config.split_ratio, config.seed)[0]
    return test_mask


def balanced_probe_compare(
    acts: ActivationTensor,
    labels: np.ndarray,
    values: np.ndarray,
    names: Sequence[str],
    layer: int,
    token: int,
    balance: Optional[BalanceConfig] = None,
    probe: Optional[ProbeConfig] = None,
    seed: int = 0,
    test_mask: Optional[np.ndarray] = None,
) -> BalanceReport:
    """
    Train balanced, size-matched random and full probes at one cell and
    evaluate all three on the same held-out rows.
    """
    balance = balance or BalanceConfig()
    probe = probe or ProbeConfig()
    labels = np.asarray(labels, dtype=np.int64)
    test_mask = held_out_mask(acts, labels, probe) if test_mask is None else np.asarray(test_mask, dtype=bool)
    train_rows = np.flatnonzero(~test_mask)
    X = acts.cell(layer, token)
    X_test, y_test = X[test_mask], labels[test_mask]

    spec = BinSpec.fit(values[train_rows], names, balance.n_bins, balance.strategy)
    subset = balance_subsample(values[train_rows], labels[train_rows], spec, seed)
    balanced_rows = train_rows[subset.indices]
    per_class = len(balanced_rows) // 2
    random_rows = train_rows[random_downsample(labels[train_rows], per_class, seed)]

    accuracies, sizes = {}, {}
    for condition, rows in (("balanced", balanced_rows), ("random", random_rows), ("full", train_rows)):
        model = train_probe(X[rows], labels[rows], l2=l2_from_C(probe.C, len(rows)), seed=seed,
                            tol=probe.tol, max_iter=probe.max_iter)
        accuracies[condition] = eval_probe(model, X_test, y_test)
        sizes[condition] = int(len(rows))
    logger.info(
        f"Balanced-probe comparison at layer {layer} token {token}: "
        + ", ".join(f"{k} {v:.3f} (n={sizes[k]})" for k, v in accuracies.items())
    )
    return BalanceReport(
        statistics=list(names),
        n_bins=balance.n_bins,
        strategy=balance.strategy,
        occupied_bins=subset.occupied_bins,
        mixed_bins=subset.mixed_bins,
        retained_per_class={"0": per_class, "1": per_class},
        subset_indices=balanced_rows.tolist(),
        accuracies=accuracies,
        train_sizes=sizes,
        n_test=int(test_mask.sum()),
    )


def _welch(a: np.ndarray, b: np.ndarray) -> Tuple[float, float]:
    """Welch t-test; two constant groups give t=0, p=1 when equal and t=+-inf, p=0 otherwise."""
    scale = max(1.0, float(np.abs(np.concatenate([a, b])).max()))
    if np.ptp(a) <= 1e-12 * scale and np.ptp(b) <= 1e-12 * scale:
        gap = float(a.mean() - b.mean())
        if abs(gap) <= 1e-12 * scale:
            return 0.0, 1.0
        return float(np.copysign(np.inf, gap)), 0.0
    result = stats.ttest_ind(a, b, equal_var=False)
    return float(result.statistic), float(result.pvalue)


def norm_difference_table(
    acts: ActivationTensor,
    stage_a: int,
    stage_b: int,
    layer: int,
    tokens: Optional[Sequence[int]] = None,
) -> pd.DataFrame:
    """Per token: Welch t-test of L2 norms between two stages, Bonferroni-adjusted, with Cohen's d."""
    tokens = list(range(acts.n_tokens)) if tokens is None else [t % acts.n_tokens for t in tokens]
    a_rows, b_rows = acts.stages == stage_a, acts.stages == stage_b
    rows = []
    for t in tokens:
        norms = np.linalg.norm(acts.cell(layer, t).astype(np.float64), axis=1)
        na, nb = norms[a_rows], norms[b_rows]
        t_stat, p_value = _welch(na, nb)
        pooled = np.sqrt(((len(na) - 1) * na.var(ddof=1) + (len(nb) - 1) * nb.var(ddof=1)) / (len(na) + len(nb) - 2))
        rows.append({
            "layer": acts.resolve(layer, t)[0],
            "token": t,
            "mean_norm_a": float(na.mean()),
            "mean_norm_b": float(nb.mean()),
            "t_stat": t_stat,
            "p_value": p_value,
            "p_bonferroni": min(1.0, p_value * len(tokens)),
            "cohens_d": float((na.mean() - nb.mean()) / pooled) if pooled > 0 else 0.0,
        })
    return pd.DataFrame(rows)
