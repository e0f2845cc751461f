"""Dense multi-head attention."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import torch
from torch import nn

from ensemble_tracking.exceptions import ShapeError


@dataclass(frozen=True)
class AttentionConfig:
    """Shape of an attention block."""

    embed_dim: int
    num_heads: int = 4
    num_points: int = 4
    """Sample points per head (deformable attention only)."""

    def __post_init__(self):
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ShapeError(
                "embed_dim must be divisible by num_heads", self.embed_dim, self.num_heads
            )
        if self.num_points < 1:
            raise ShapeError("num_points must be >= 1", self.num_points)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


def softmax_normalize(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """Softmax along `axis`; refuses empty axes."""
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("cannot normalize over an empty axis", tuple(x.shape), axis)
    return torch.softmax(x, dim=axis)


class MultiHeadAttention(nn.Module):
    """
    Scaled dot-product attention with `num_heads` heads.

    Used as self-attention when query and key_value are the same tokens,
    and as cross-attention otherwise.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        self.q_proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        self.k_proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        self.v_proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        self.out_proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)

    def forward(self, query: torch.Tensor, key_value: torch.Tensor) -> torch.Tensor:
        output, _ = self.attend(query, key_value)
        return output

    def attend(
        self, query: torch.Tensor, key_value: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Return the attention output and the weights.

        query: (..., Nq, c), key_value: (..., Nk, c)
        output: (..., Nq, c), weights: (..., h, Nq, Nk)
        """
        c = self.cfg.embed_dim
        if query.shape[-1] != c or key_value.shape[-1] != c:
            raise ShapeError(
                "attention inputs must end in the embedding dimension",
                tuple(query.shape),
                tuple(key_value.shape),
            )
        if key_value.shape[-2] == 0:
            raise ShapeError("attention over zero keys")

        q = self._split_heads(self.q_proj(query))
        k = self._split_heads(self.k_proj(key_value))
        v = self._split_heads(self.v_proj(key_value))

        scores = q @ k.transpose(-1, -2) / math.sqrt(self.cfg.head_dim)
        weights = softmax_normalize(scores, -1)

        heads = weights @ v  # (..., h, Nq, d)
        merged = heads.transpose(-3, -2).flatten(-2)
        return self.out_proj(merged), weights

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        # (..., N, c) -> (..., h, N, d)
        x = x.unflatten(-1, (self.cfg.num_heads, self.cfg.head_dim))
        return x.transpose(-3, -2)
