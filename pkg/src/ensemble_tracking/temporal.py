"""Temporal context carried along the flow of an activated local tracker."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import torch
from torch import nn

from .data import Candidate, Point2
from .exceptions import ShapeError, ValidationError
from .geometry import box_center
from .layers import AttentionConfig, FeedForward, MultiHeadAttention


@dataclass(frozen=True)
class QueryMemory:
    """The most recent online queries of one tracker, oldest first."""

    capacity: int
    entries: Tuple[torch.Tensor, ...] = ()

    def __post_init__(self):
        if self.capacity < 1:
            raise ValidationError("memory capacity must be >= 1", self.capacity)
        if len(self.entries) > self.capacity:
            raise ValidationError("memory holds more entries than its capacity")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def is_empty(self) -> bool:
        return not self.entries

    def push(self, query: torch.Tensor) -> QueryMemory:
        """Append `query`, dropping the oldest entry once the capacity is exceeded."""
        return QueryMemory(self.capacity, (self.entries + (query,))[-self.capacity :])

    def cleared(self) -> QueryMemory:
        return QueryMemory(self.capacity)

    def stacked(self) -> torch.Tensor:
        """(len, c)"""
        if self.is_empty:
            raise ShapeError("empty memory has no stacked form")
        return torch.stack(self.entries)


def memory_push(memory: QueryMemory, query: torch.Tensor) -> QueryMemory:
    if not torch.isfinite(query).all():
        raise ValidationError("refusing to store a non-finite query")
    return memory.push(query)


def transfer_reference(candidate: Candidate) -> Point2:
    """The next reference position of the activated tracker: its predicted box center."""
    return box_center(candidate.box)


class TCAModel(nn.Module):
    """
    Temporal context aggregation.

    With a nonempty memory the target embedding attends over the stored online
    queries, is added back and normalized, then adjusted by two feed-forward
    networks with a skip connection and a final normalization. A newly activated
    tracker has no memory, so its embedding goes through the adjustment only.
    """

    def __init__(self, cfg: AttentionConfig, ffn_dim: int):
        super().__init__()
        self.embed_dim = cfg.embed_dim
        self.cross_attn = MultiHeadAttention(cfg)
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.ffn_in = FeedForward(cfg.embed_dim, ffn_dim)
        self.ffn_out = FeedForward(cfg.embed_dim, ffn_dim)
        self.norm_out = nn.LayerNorm(cfg.embed_dim)

    def aggregate(self, embedding: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        attended = self.cross_attn(embedding.unsqueeze(-2), memory).squeeze(-2)
        return self.norm(attended + embedding)

    def adjust(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm_out(x + self.ffn_out(self.ffn_in(x)))

    def tca_forward(self, embedding: torch.Tensor, memory: QueryMemory) -> torch.Tensor:
        """Produce the online query for the next frame from a target embedding (c,)."""
        if embedding.shape[-1] != self.embed_dim:
            raise ShapeError("embedding dimension mismatch", tuple(embedding.shape))
        if memory.is_empty:
            return self.adjust(embedding)

        stored = memory.stacked()
        if stored.shape[-1] != self.embed_dim:
            raise ShapeError("memory dimension mismatch", tuple(stored.shape))
        return self.adjust(self.aggregate(embedding, stored))

    def forward(self, embedding: torch.Tensor, memory: QueryMemory) -> torch.Tensor:
        return self.tca_forward(embedding, memory)
