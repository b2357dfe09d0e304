"""
Small decoder-only transformer.

Pre-LayerNorm blocks with learned absolute positions and an untied output
head. `forward` returns the logits together with the residual stream after
every block, which is what activation capture persists.
"""

import hashlib
import math
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from recency_lab.models.config import ModelConfig
from recency_lab.models.errors import TokenOutOfRange


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, max_context: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.register_buffer(
            "causal", torch.tril(torch.ones(max_context, max_context, dtype=torch.bool)), persistent=False
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        q, k, v = self.qkv(x).split(D, dim=2)
        q = q.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)

        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        att = att.masked_fill(~self.causal[:T, :T], float("-inf"))
        att = F.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.proj(y)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.up = nn.Linear(d_model, d_ff)
        self.down = nn.Linear(d_ff, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(F.gelu(self.up(x)))


class Block(nn.Module):
    """x -> x + attn(ln1(x)) -> x + ff(ln2(x))"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.d_model)
        self.attn = CausalSelfAttention(config.d_model, config.n_heads, config.max_context)
        self.ln2 = nn.LayerNorm(config.d_model)
        self.ff = FeedForward(config.d_model, config.d_ff)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.ff(self.ln2(x))


class TransformerLM(nn.Module):
    """
    Decoder-only language model over the closed vocabulary.

    `history` records the fine-tuning stages applied so far as
    (stage label, epochs) pairs and travels with the checkpoint.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.history: List[Tuple[str, int]] = []
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.max_context, config.d_model)
        self.blocks = nn.ModuleList([Block(config) for _ in range(config.n_layers)])
        self.ln_f = nn.LayerNorm(config.d_model)
        self.head = nn.Linear(config.d_model, config.vocab_size)

    def forward(self, tokens: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        tokens: [batch, T] int64
        returns logits [batch, T, vocab] and activations [layers, batch, T, d_model]
        """
        _, T = tokens.shape
        if T > self.config.max_context:
            raise TokenOutOfRange(
                f"sequence length {T} exceeds max_context {self.config.max_context}",
                length=T, max_context=self.config.max_context,
            )
        if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= self.config.vocab_size):
            raise TokenOutOfRange(
                f"token ids must lie in [0, {self.config.vocab_size})",
                min_id=int(tokens.min()), max_id=int(tokens.max()), vocab_size=self.config.vocab_size,
            )

        positions = torch.arange(T, device=tokens.device)
        x = self.tok_emb(tokens) + self.pos_emb(positions)
        residuals = []
        for block in self.blocks:
            x = block(x)
            residuals.append(x)
        logits = self.head(self.ln_f(x))
        return logits, torch.stack(residuals, dim=0)

    def fingerprint(self) -> str:
        """sha256 over every parameter's name, shape and f32 bytes."""
        digest = hashlib.sha256()
        for name, tensor in self.state_dict().items():
            digest.update(name.encode("utf-8"))
            digest.update(str(tuple(tensor.shape)).encode("utf-8"))
            digest.update(tensor.detach().to(torch.float32).cpu().numpy().astype("<f4").tobytes())
        return digest.hexdigest()


def parameter_count(config: ModelConfig) -> int:
    """Closed-form number of trainable parameters for a config."""
    V, C, L, d, f = config.vocab_size, config.max_context, config.n_layers, config.d_model, config.d_ff
    per_block = 4 * d * d + 2 * d * f + 9 * d + f
    return V * d + C * d + L * per_block + 2 * d + d * V + V


def init_model(config: ModelConfig, seed: int) -> TransformerLM:
    """
    Fresh model with a fixed scheme: N(0, 0.02) for embeddings and weight
    matrices, N(0, 0.02/sqrt(2L)) for the projections that write into the
    residual stream, zero biases, unit LayerNorm gains.
    """
    model = TransformerLM(config)
    gen = torch.Generator().manual_seed(seed)
    residual_std = 0.02 / math.sqrt(2 * config.n_layers)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            elif ".ln" in name or name.startswith("ln_f"):
                param.fill_(1.0)
            else:
                std = residual_std if name.endswith(("attn.proj.weight", "ff.down.weight")) else 0.02
                param.copy_(torch.randn(param.shape, generator=gen) * std)
    return model


def logits_and_activations(model: TransformerLM, token_batch: List[List[int]]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Evaluation-mode forward pass over equal-length sequences."""
    model.eval()
    with torch.no_grad():
        return model(torch.tensor(token_batch, dtype=torch.long))


def next_token_distribution(model: TransformerLM, tokens: torch.Tensor,
                            temperature: float = 1.0, window: Optional[int] = None) -> torch.Tensor:
    """Log-probabilities of the next token for each row of a [batch, T] context."""
    window = window or model.config.max_context
    logits, _ = model(tokens[:, -window:])
    last = logits[:, -1, :]
    return F.log_softmax(last / temperature, dim=-1)
