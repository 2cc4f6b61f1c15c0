"""Causal self-attention sequence encoder with seeded dropout views."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import Batch


class NonFiniteLossError(FloatingPointError):
    def __init__(self, batch_id, value):
        super().__init__(f"non-finite loss {value} in batch {batch_id}")
        self.batch_id = batch_id
        self.value = value


@dataclass
class EncoderConfig:
    vocab_size: int  # number of items + 1 (token 0 is padding)
    max_len: int = 50
    dim: int = 64
    layers: int = 2
    heads: int = 2
    dropout_rate: float = 0.1
    ffn_mult: int = 2

    def __post_init__(self):
        if self.dim <= 0 or self.layers <= 0 or self.heads <= 0:
            raise ValueError("dim, layers and heads must be positive")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.vocab_size < 2 or self.max_len < 1:
            raise ValueError("vocab_size must be >= 2 and max_len >= 1")

    def to_dict(self):
        return asdict(self)


def seeded_dropout(x: torch.Tensor, p: float, gen: Optional[torch.Generator]) -> torch.Tensor:
    if gen is None or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_mult: int):
        super().__init__()
        self.heads = heads
        self.ln_attn = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln_ffn = nn.LayerNorm(dim)
        self.ffn_in = nn.Linear(dim, ffn_mult * dim)
        self.ffn_out = nn.Linear(ffn_mult * dim, dim)

    def forward(self, x, allowed, p, gen):
        b, n, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.ln_attn(x)).split(d, dim=-1)
        q, k, v = (t.view(b, n, h, d // h).transpose(1, 2) for t in (q, k, v))
        att = (q @ k.transpose(-1, -2)) / math.sqrt(d // h)
        att = att.masked_fill(~allowed[:, None], float("-inf"))
        att = seeded_dropout(att.softmax(dim=-1), p, gen)
        y = (att @ v).transpose(1, 2).reshape(b, n, d)
        x = x + seeded_dropout(self.proj(y), p, gen)
        y = self.ffn_out(F.gelu(self.ffn_in(self.ln_ffn(x))))
        return x + seeded_dropout(y, p, gen)


class SequenceEncoder(nn.Module):
    """Item + position embeddings followed by pre-norm causal transformer blocks.

    Rows are right-aligned (left-padded); the representation of a sequence is
    the final hidden state at its last position. Position 0 is the first real
    item of the row, not the first column.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.dim
        self.item_emb = nn.Parameter(torch.empty(config.vocab_size, d))
        self.pos_emb = nn.Parameter(torch.empty(config.max_len, d))
        self.ln_in = nn.LayerNorm(d)
        self.blocks = nn.ModuleList(Block(d, config.heads, config.ffn_mult) for _ in range(config.layers))
        self.ln_out = nn.LayerNorm(d)
        self.reset_parameters()

    def reset_parameters(self):
        bound = 1.0 / math.sqrt(self.config.dim)
        with torch.no_grad():
            nn.init.uniform_(self.item_emb, -bound, bound)
            nn.init.uniform_(self.pos_emb, -bound, bound)
            self.item_emb[0].zero_()
            for blk in self.blocks:
                for lin in (blk.qkv, blk.proj, blk.ffn_in, blk.ffn_out):
                    nn.init.normal_(lin.weight, std=0.02)
                    nn.init.zeros_(lin.bias)

    def hidden_states(self, tokens: torch.Tensor, gen: Optional[torch.Generator] = None) -> torch.Tensor:
        """Per-position outputs ``(B, L, D)``; padded positions are zeroed."""
        if tokens.shape[1] > self.config.max_len:
            raise ValueError(f"row length {tokens.shape[1]} exceeds max_len {self.config.max_len}")
        real = tokens != 0
        n = tokens.shape[1]
        first = n - real.sum(dim=1, keepdim=True)
        cols = torch.arange(n).expand_as(tokens)
        positions = (cols - first).clamp(min=0)

        x = F.embedding(tokens, self.item_emb, padding_idx=0) + self.pos_emb[positions]
        keep = real.unsqueeze(-1).to(x.dtype)
        p = self.config.dropout_rate
        x = seeded_dropout(self.ln_in(x), p, gen) * keep

        causal = torch.ones(n, n, dtype=torch.bool).tril()
        allowed = causal & real[:, None, :]
        # padded queries see only themselves so their softmax row is defined
        allowed = allowed | torch.eye(n, dtype=torch.bool)
        for blk in self.blocks:
            x = blk(x, allowed, p, gen) * keep
        return self.ln_out(x) * keep

    def forward(self, tokens: torch.Tensor, gen: Optional[torch.Generator] = None) -> torch.Tensor:
        if tokens.ndim != 2:
            raise ValueError("tokens must be (B, L)")
        empty = (tokens != 0).sum(dim=1) == 0
        if bool(empty.any()):
            rows = torch.nonzero(empty).flatten().tolist()
            raise ValueError(f"rows {rows} contain only padding")
        return self.hidden_states(tokens, gen)[:, -1]

    def item_vectors(self) -> torch.Tensor:
        """Output vectors for dense item indices (tied to the input table)."""
        return self.item_emb[1:]


def _generator(dropout_mode: str, rng_seed: Optional[int]) -> Optional[torch.Generator]:
    if dropout_mode == "off":
        return None
    if dropout_mode != "stochastic":
        raise ValueError(f"unknown dropout_mode {dropout_mode!r}")
    if rng_seed is None:
        raise ValueError("stochastic dropout requires rng_seed")
    return torch.Generator().manual_seed(int(rng_seed))


def as_tokens(batch_or_tokens) -> torch.Tensor:
    if isinstance(batch_or_tokens, Batch):
        return torch.as_tensor(batch_or_tokens.items, dtype=torch.long)
    return torch.as_tensor(batch_or_tokens, dtype=torch.long)


def encode(model: SequenceEncoder, batch, dropout_mode: str = "off", rng_seed: Optional[int] = None) -> torch.Tensor:
    """``(B, D)`` sequence representations; two stochastic calls with distinct
    seeds give the two dropout views of a batch."""
    return model(as_tokens(batch), _generator(dropout_mode, rng_seed))


def score_items(model: SequenceEncoder, repr: torch.Tensor, candidate_indices=None) -> torch.Tensor:
    """Inner products of representations with candidate item vectors.

    ``candidate_indices`` are dense item indices; ``None`` scores every item.
    Works for a single ``(D,)`` vector or a ``(B, D)`` matrix.
    """
    items = model.item_vectors()
    if candidate_indices is not None:
        items = items[torch.as_tensor(np.asarray(candidate_indices), dtype=torch.long)]
    return repr @ items.T


def forward_backward(
    params: nn.Module | list[nn.Module],
    inputs,
    loss_head: Callable,
    batch_id=None,
) -> tuple[float, dict[str, torch.Tensor]]:
    """Evaluate ``loss_head(inputs)`` and return the loss with gradients for
    every named parameter of ``params``.

    ``loss_head`` receives ``inputs`` unchanged and must return a scalar
    tensor; dropout masks are drawn once inside it, so the backward pass uses
    the masks of the forward pass.
    """
    modules = params if isinstance(params, (list, tuple)) else [params]
    named = []
    for m_idx, m in enumerate(modules):
        prefix = "" if len(modules) == 1 else f"{m_idx}."
        named += [(prefix + n, p) for n, p in m.named_parameters()]
    for _, p in named:
        p.grad = None
    loss = loss_head(inputs)
    if not bool(torch.isfinite(loss)):
        raise NonFiniteLossError(batch_id, loss.item())
    loss.backward()
    grads = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for n, p in named}
    return loss.item(), grads
