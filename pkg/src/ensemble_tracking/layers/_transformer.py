"""Pre-norm transformer building blocks."""
from __future__ import annotations

import torch
from torch import nn

from ._attention import AttentionConfig, MultiHeadAttention


class FeedForward(nn.Module):
    """Two-layer feed-forward network."""

    def __init__(self, embed_dim: int, hidden_dim: int):
        super().__init__()
        self.linear1 = nn.Linear(embed_dim, hidden_dim)
        self.activation = nn.ReLU()
        self.linear2 = nn.Linear(hidden_dim, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.linear2(self.activation(self.linear1(x)))


class EncoderLayer(nn.Module):
    """Self-attention and feed-forward sublayers, each wrapped as x + f(norm(x))."""

    def __init__(self, cfg: AttentionConfig, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.self_attn = MultiHeadAttention(cfg)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.ffn = FeedForward(cfg.embed_dim, ffn_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        normed = self.norm1(tokens)
        tokens = tokens + self.self_attn(normed, normed)
        return tokens + self.ffn(self.norm2(tokens))
