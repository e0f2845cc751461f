"""The ensemble of deformable-attention local trackers and the candidate prediction head."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import nn

from .data import BBox, Candidate, FeatureMap, Point2, TemplateBundle
from .exceptions import ShapeError, ValidationError
from .layers import AttentionConfig, DeformableCrossAttention, FeedForward, MultiHeadAttention
from .temporal import QueryMemory

logger = logging.getLogger(__name__)

MIN_BOX_EXTENT = 1e-4
"""Predicted widths and heights are kept above this so every box is a valid BBox."""


@dataclass
class LocalTracker:
    """Inference state of one ensemble member."""

    tracker_id: int
    offline_query: torch.Tensor = field(repr=False)
    default_reference: torch.Tensor
    reference: torch.Tensor
    memory: QueryMemory
    online_query: Optional[torch.Tensor] = field(default=None, repr=False)
    activated: bool = False

    @property
    def effective_query(self) -> torch.Tensor:
        """The online query while activated, the learned offline query otherwise."""
        return self.online_query if self.online_query is not None else self.offline_query

    @property
    def reference_point(self) -> Point2:
        x, y = self.reference.tolist()
        return Point2(x, y)

    @property
    def default_point(self) -> Point2:
        x, y = self.default_reference.tolist()
        return Point2(x, y)

    def activate(self, reference: Point2, online_query: torch.Tensor, memory: QueryMemory):
        self.reference = reference.to_tensor(self.default_reference.dtype).clamp(0.0, 1.0)
        self.online_query = online_query
        self.memory = memory
        self.activated = True

    def reset(self):
        """Move back to the default reference and forget the temporal context."""
        self.reference = self.default_reference.clone()
        self.online_query = None
        self.memory = self.memory.cleared()
        self.activated = False


class HeadOutput(NamedTuple):
    scores: torch.Tensor
    """(..., N) foreground scores"""
    boxes: torch.Tensor
    """(..., N, 4) center-form normalized boxes"""
    vectors: torch.Tensor
    """(..., N, c) unit-norm candidate vectors"""
    confidences: torch.Tensor
    """(..., N) score times clamped cosine similarity to the template"""


class DecoderLayer(nn.Module):
    """Joint self-attention of all trackers, then deformable cross-attention at their references."""

    def __init__(self, cfg: AttentionConfig, ffn_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.embed_dim)
        self.self_attn = MultiHeadAttention(cfg)
        self.norm2 = nn.LayerNorm(cfg.embed_dim)
        self.cross_attn = DeformableCrossAttention(cfg)
        self.norm3 = nn.LayerNorm(cfg.embed_dim)
        self.ffn = FeedForward(cfg.embed_dim, ffn_dim)

    def forward(
        self, queries: torch.Tensor, references: torch.Tensor, feature_map: FeatureMap
    ) -> torch.Tensor:
        normed = self.norm1(queries)
        queries = queries + self.self_attn(normed, normed)
        queries = queries + self.cross_attn(self.norm2(queries), references, feature_map)
        return queries + self.ffn(self.norm3(queries))


class EnsembleDecoder(nn.Module):
    """Offline queries, their default reference positions and the stacked decoder layers."""

    def __init__(self, cfg: AttentionConfig, num_trackers: int, depth: int, ffn_dim: int):
        super().__init__()
        self.num_trackers = num_trackers
        self.query_embed = nn.Embedding(num_trackers, cfg.embed_dim)
        self.reference_head = nn.Linear(cfg.embed_dim, 2)
        self.layers = nn.ModuleList([DecoderLayer(cfg, ffn_dim) for _ in range(depth)])
        self.norm = nn.LayerNorm(cfg.embed_dim)

    @property
    def offline_queries(self) -> torch.Tensor:
        return self.query_embed.weight

    def default_references(self, offline_queries: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(N, 2) positions predicted from the offline queries by a linear layer and a sigmoid."""
        queries = self.offline_queries if offline_queries is None else offline_queries
        if queries.shape[0] < 1:
            raise ShapeError("need at least one offline query")
        return torch.sigmoid(self.reference_head(queries))

    def decode_ensemble(
        self, queries: torch.Tensor, references: torch.Tensor, feature_map: FeatureMap
    ) -> torch.Tensor:
        """
        Run all local trackers in parallel.

        queries: (..., N, c) effective queries, references: (..., N, 2)
        returns the (..., N, c) target embeddings in tracker order
        """
        if queries.shape[-2] == 0:
            raise ShapeError("cannot decode an empty ensemble")
        for layer in self.layers:
            queries = layer(queries, references, feature_map)
        return self.norm(queries)

    def initial_trackers(self, memory_length: int) -> List[LocalTracker]:
        """Fresh tracker states: offline queries at their default references, empty memories."""
        with torch.no_grad():
            queries = self.offline_queries.detach().clone()
            references = self.default_references().detach().clone()

        return [
            LocalTracker(
                tracker_id=i,
                offline_query=queries[i],
                default_reference=references[i],
                reference=references[i].clone(),
                memory=QueryMemory(memory_length),
            )
            for i in range(self.num_trackers)
        ]


class PredictionHead(nn.Module):
    """
    Per-embedding classification score, box and candidate vector.

    The box comes from a three-layer feed-forward network with a sigmoid output,
    in absolute normalized (cx, cy, w, h).
    """

    def __init__(self, embed_dim: int):
        super().__init__()
        self.class_head = nn.Linear(embed_dim, 1)
        self.box_head = nn.Sequential(
            nn.Linear(embed_dim, embed_dim),
            nn.ReLU(),
            nn.Linear(embed_dim, embed_dim),
            nn.ReLU(),
            nn.Linear(embed_dim, 4),
        )
        self.candidate_proj = nn.Linear(embed_dim, embed_dim)

    def forward(self, embeddings: torch.Tensor, template_vector: torch.Tensor) -> HeadOutput:
        scores = torch.sigmoid(self.class_head(embeddings)).squeeze(-1)

        boxes = torch.sigmoid(self.box_head(embeddings))
        boxes = torch.cat([boxes[..., :2], boxes[..., 2:].clamp(min=MIN_BOX_EXTENT)], dim=-1)

        vectors = F.normalize(self.candidate_proj(embeddings), dim=-1)
        cosine = (vectors * template_vector.unsqueeze(-2)).sum(-1)
        confidences = scores * cosine.clamp(0.0, 1.0)
        return HeadOutput(scores, boxes, vectors, confidences)

    def predict_candidates(
        self, embeddings: torch.Tensor, template: TemplateBundle
    ) -> List[Candidate]:
        """Build one Candidate per (N, c) embedding row."""
        if template.vector is None:
            raise ValidationError("template bundle has not been encoded")
        output = self(embeddings, template.vector)

        candidates = []
        for i in range(embeddings.shape[0]):
            candidates.append(
                Candidate(
                    tracker_id=i,
                    score=float(output.scores[i]),
                    box=BBox.from_tensor(output.boxes[i]),
                    confidence=float(output.confidences[i]),
                    embedding=embeddings[i],
                )
            )
        return candidates
