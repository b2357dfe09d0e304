from typing import List, Optional, Sequence

import numpy as np
import torch

from recency_lab.models.activations import ActivationTensor
from recency_lab.models.errors import MisalignedPrompts
from recency_lab.models.records import QASample, SampleIndex
from recency_lab.services.transformer import TransformerLM
from recency_lab.utils.logger import logger


def prompt_id_of(sample: QASample) -> int:
    """Test prompts carry `test:<k>`; anything else (training samples) maps to 0."""
    kind, _, rest = sample.template_id.partition(":")
    return int(rest) if kind == "test" and rest.isdigit() else 0


def capture_activations(
    model: TransformerLM,
    prompts: Sequence[QASample],
    batch_size: int = 64,
    include_answer: bool = False,
    prompt_id: Optional[int] = None,
) -> ActivationTensor:
    """
    Residual activations of every layer and token for position-aligned prompts.

    Output row order is the input order whatever the batch size.
    `include_answer` captures the full training sequence instead of the prompt.
    """
    if not prompts:
        raise MisalignedPrompts("no prompts to capture")
    sequences: List[List[int]] = [p.tokens if include_answer else p.prompt_tokens for p in prompts]
    lengths = sorted({len(s) for s in sequences})
    if len(lengths) > 1:
        raise MisalignedPrompts(
            f"prompts have {len(lengths)} different lengths {lengths[:5]}",
            lengths=lengths,
        )

    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(sequences), batch_size):
            batch = torch.tensor(sequences[start:start + batch_size], dtype=torch.long)
            _, acts = model(batch)
            # [L, B, T, D] -> [B, L, T, D]
            chunks.append(acts.permute(1, 0, 2, 3).contiguous().cpu().numpy().astype(np.float32))

    index = [
        SampleIndex(
            entity_id=p.entity_id,
            stage=p.stage,
            probe_split=p.probe_split,
            prompt_id=prompt_id if prompt_id is not None else prompt_id_of(p),
        )
        for p in prompts
    ]
    tensor = ActivationTensor(data=np.concatenate(chunks, axis=0), index=index, fingerprint=model.fingerprint())
    logger.debug(f"Captured activations {tensor.data.shape} from {len(prompts)} prompts")
    return tensor
