"""
Sequential fine-tuning and sampling.

Every `train_stage` call builds a fresh optimizer, so optimizer state never
leaks from one stage into the next. Data order is reshuffled each epoch from
a generator seeded at stage entry.
"""

import copy
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import stats

from recency_lab.models.config import TrainConfig
from recency_lab.models.errors import NonFiniteLoss
from recency_lab.models.records import QASample
from recency_lab.services.transformer import TransformerLM, next_token_distribution
from recency_lab.services.vocabulary import default_vocabulary
from recency_lab.utils.logger import logger

EpochCallback = Callable[[TransformerLM, int, float], None]

MEMORIZATION_RATIO = 0.5


@dataclass
class StageLog:
    label: str
    epochs: int
    epoch_losses: List[float] = field(default_factory=list)
    # cross-entropy at the answer-value position, against the per-template answer entropy
    answer_losses: List[float] = field(default_factory=list)
    answer_entropy: float = 0.0

    @property
    def memorized(self) -> bool:
        """Final answer loss is well under what template frequencies alone give."""
        return bool(self.answer_losses) and self.answer_losses[-1] < MEMORIZATION_RATIO * self.answer_entropy


def collate(samples: Sequence[QASample], loss_mask: str = "answer",
            pad_id: Optional[int] = None) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Right-padded next-token batch.

    Returns inputs [B, T-1], targets [B, T-1] and a float mask that is 1 on
    the positions contributing to the loss.
    """
    pad_id = default_vocabulary().pad_id if pad_id is None else pad_id
    width = max(len(s.tokens) for s in samples)
    tokens = torch.full((len(samples), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(samples), width - 1))
    for row, sample in enumerate(samples):
        seq = sample.tokens
        tokens[row, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        # target index j predicts seq[j + 1]
        first = len(sample.prompt_tokens) - 1 if loss_mask == "answer" else 0
        mask[row, first: len(seq) - 1] = 1.0
    return tokens[:, :-1], tokens[:, 1:], mask


def token_losses(model: TransformerLM, inputs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """[B, T-1] next-token cross-entropy."""
    logits, _ = model(inputs)
    per_token = F.cross_entropy(logits.reshape(-1, logits.size(-1)), targets.reshape(-1), reduction="none")
    return per_token.view_as(targets)


def masked_loss(model: TransformerLM, inputs: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    per_token = token_losses(model, inputs, targets)
    return (per_token * mask).sum() / mask.sum().clamp_min(1.0)


def answer_value_positions(samples: Sequence[QASample]) -> torch.Tensor:
    """Target index of the first answer token in each row of a collated batch."""
    return torch.tensor([len(s.prompt_tokens) - 1 for s in samples], dtype=torch.long)


def answer_entropy(samples: Sequence[QASample]) -> float:
    """
    Mean entropy (nats) of the answer value given the question template.

    A model that has learned the templates but no entity facts sits at this
    loss on the answer-value position.
    """
    by_template: Dict[str, List[int]] = defaultdict(list)
    for s in samples:
        if s.answer_tokens:
            by_template[s.template_id].append(s.answer_tokens[0])
    total = sum(len(v) for v in by_template.values())
    if total == 0:
        return 0.0
    weighted = 0.0
    for answers in by_template.values():
        _, counts = np.unique(answers, return_counts=True)
        weighted += len(answers) * float(stats.entropy(counts))
    return weighted / total


def _warmup(optimizer: torch.optim.Optimizer, steps: int) -> Optional[torch.optim.lr_scheduler.LambdaLR]:
    if steps <= 0:
        return None
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda step: min(1.0, (step + 1) / steps))


def train_stage(
    model: TransformerLM,
    samples: Sequence[QASample],
    config: TrainConfig,
    stage_label: str = "D1",
    on_epoch_end: Optional[EpochCallback] = None,
) -> StageLog:
    """
    Mini-batch training of `model` in place on one stage's samples.

    `on_epoch_end(model, epoch, mean_loss)` runs after every epoch with the
    model in eval mode; it must not change parameters.
    """
    log = StageLog(label=stage_label, epochs=config.epochs)
    if config.epochs == 0:
        model.history.append((stage_label, 0))
        return log
    if not samples:
        raise ValueError(f"stage {stage_label} has no samples but epochs={config.epochs}")

    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=config.learning_rate,
        betas=config.betas,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    scheduler = _warmup(optimizer, config.warmup_steps)
    gen = torch.Generator().manual_seed(config.seed)
    n = len(samples)
    log.answer_entropy = answer_entropy(samples)

    for epoch in range(config.epochs):
        model.train()
        order = torch.randperm(n, generator=gen).tolist()
        batch_losses, value_losses = [], []
        for step, start in enumerate(range(0, n, config.batch_size)):
            batch = [samples[i] for i in order[start:start + config.batch_size]]
            inputs, targets, mask = collate(batch, config.loss_mask)
            per_token = token_losses(model, inputs, targets)
            loss = (per_token * mask).sum() / mask.sum().clamp_min(1.0)
            if not torch.isfinite(loss):
                logger.error(f"Non-finite loss in stage {stage_label}, epoch {epoch}, step {step}")
                raise NonFiniteLoss(
                    f"loss became {loss.item()} in stage {stage_label}",
                    stage=stage_label, epoch=epoch, step=step, loss=float(loss.item()),
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            if scheduler is not None:
                scheduler.step()
            batch_losses.append(float(loss.item()))
            answered = [row for row, s in enumerate(batch) if s.answer_tokens]
            if answered:
                rows = torch.tensor(answered, dtype=torch.long)
                value_losses.extend(per_token[rows, answer_value_positions(batch)[rows]].detach().tolist())

        mean_loss = sum(batch_losses) / len(batch_losses)
        log.epoch_losses.append(mean_loss)
        if value_losses:
            log.answer_losses.append(sum(value_losses) / len(value_losses))
        logger.info(f"[{stage_label}] epoch {epoch + 1}/{config.epochs} loss {mean_loss:.4f}"
                    + (f" answer {log.answer_losses[-1]:.4f}" if value_losses else ""))
        if on_epoch_end is not None:
            model.eval()
            on_epoch_end(model, epoch, mean_loss)

    if log.answer_losses:
        if log.memorized:
            logger.info(f"[{stage_label}] answer loss {log.answer_losses[-1]:.3f} "
                        f"vs template entropy {log.answer_entropy:.3f}: facts memorized")
        else:
            logger.warning(f"[{stage_label}] answer loss {log.answer_losses[-1]:.3f} is not below "
                           f"{MEMORIZATION_RATIO:g} x template entropy {log.answer_entropy:.3f}; "
                           "entity facts are not memorized")
    model.eval()
    model.history.append((stage_label, config.epochs))
    return log


def sequential_finetune(
    model: TransformerLM,
    stage_datasets: Sequence[Sequence[QASample]],
    epochs_per_stage: Sequence[int],
    config: TrainConfig,
    labels: Optional[Sequence[str]] = None,
) -> Tuple[TransformerLM, List[TransformerLM], List[StageLog]]:
    """
    Train stages in order, snapshotting the model after each one.

    Stage k (0-based) shuffles with seed `config.seed + k`.
    """
    if len(stage_datasets) != len(epochs_per_stage):
        raise ValueError(f"{len(stage_datasets)} stage datasets but {len(epochs_per_stage)} epoch counts")
    labels = list(labels or [f"D{k + 1}" for k in range(len(stage_datasets))])

    checkpoints: List[TransformerLM] = []
    logs: List[StageLog] = []
    for k, (samples, epochs) in enumerate(zip(stage_datasets, epochs_per_stage)):
        stage_config = config.model_copy(update={"epochs": epochs, "seed": config.seed + k})
        logger.info(f"Fine-tuning stage {labels[k]} on {len(samples)} samples for {epochs} epochs")
        logs.append(train_stage(model, samples, stage_config, labels[k]))
        checkpoints.append(copy.deepcopy(model))
    return model, checkpoints, logs


@dataclass
class Continuations:
    """Sampled continuations plus per-step sampling diagnostics"""
    sequences: List[List[int]]
    entropies: torch.Tensor       # [n, steps] entropy of each step's sampling distribution
    token_logprobs: torch.Tensor  # [n, steps] log-prob of the sampled token
    alive: torch.Tensor           # [n, steps] True while the sequence had not yet emitted eos


def sample_continuations(
    model: TransformerLM,
    prompt: Sequence[int],
    temperature: float = 1.0,
    max_new_tokens: int = 10,
    n_samples: int = 1,
    seed: int = 0,
    eos_id: Optional[int] = None,
) -> Continuations:
    """Batched ancestral sampling from softmax(logits / temperature); temperature 0 means argmax."""
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    eos_id = default_vocabulary().eos_id if eos_id is None else eos_id
    gen = torch.Generator().manual_seed(seed)
    window = model.config.max_context

    model.eval()
    tokens = torch.tensor([list(prompt)] * n_samples, dtype=torch.long)
    finished = torch.zeros(n_samples, dtype=torch.bool)
    entropies, logprobs, alive = [], [], []
    sequences: List[List[int]] = [[] for _ in range(n_samples)]

    if max_new_tokens <= 0:
        empty = torch.zeros((n_samples, 0))
        return Continuations(sequences=sequences, entropies=empty, token_logprobs=empty.clone(),
                             alive=torch.zeros((n_samples, 0), dtype=torch.bool))

    with torch.no_grad():
        for _ in range(max_new_tokens):
            scaled = next_token_distribution(model, tokens, temperature if temperature > 0 else 1.0, window)
            if temperature > 0:
                nxt = torch.multinomial(scaled.exp(), 1, generator=gen).squeeze(1)
            else:
                nxt = scaled.argmax(dim=-1)

            entropies.append(-(scaled.exp() * scaled).nan_to_num().sum(dim=-1))
            logprobs.append(scaled.gather(1, nxt.unsqueeze(1)).squeeze(1))
            alive.append(~finished)

            for row in range(n_samples):
                if not finished[row]:
                    sequences[row].append(int(nxt[row]))
            finished = finished | (nxt == eos_id)
            tokens = torch.cat([tokens, nxt.unsqueeze(1)], dim=1)
            if bool(finished.all()):
                break

    return Continuations(
        sequences=sequences,
        entropies=torch.stack(entropies, dim=1),
        token_logprobs=torch.stack(logprobs, dim=1),
        alive=torch.stack(alive, dim=1),
    )


def generate(
    model: TransformerLM,
    prompt: Sequence[int],
    temperature: float = 1.0,
    max_new_tokens: int = 10,
    n_samples: int = 1,
    seed: int = 0,
) -> List[List[int]]:
    """Token sequences only; each stops after eos or max_new_tokens."""
    return sample_continuations(model, prompt, temperature, max_new_tokens, n_samples, seed).sequences
