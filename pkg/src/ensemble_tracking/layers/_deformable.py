"""Bilinear feature sampling and single-scale deformable cross-attention."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ensemble_tracking.data import FeatureMap
from ensemble_tracking.exceptions import ShapeError

from ._attention import AttentionConfig, softmax_normalize


def sample_features(values: torch.Tensor, locations: torch.Tensor) -> torch.Tensor:
    """
    Bilinearly sample a (B, c, H, W) map at normalized (x, y) locations (B, ..., 2).

    Pixel j covers [j/W, (j+1)/W), so its center sits at (j + 0.5) / W.
    Neighbors outside the map read zeros. Returns (B, ..., c).
    """
    batch, channels = values.shape[:2]
    query_shape = locations.shape[1:-1]
    grid = (2 * locations - 1).reshape(batch, 1, -1, 2)
    sampled = F.grid_sample(
        values, grid, mode="bilinear", padding_mode="zeros", align_corners=False
    )
    # (B, c, 1, P) -> (B, P, c)
    return sampled[:, :, 0].transpose(1, 2).reshape(batch, *query_shape, channels)


def bilinear_sample(feature_map: FeatureMap, points: torch.Tensor) -> torch.Tensor:
    """
    Sample an unbatched (H, W, c) feature map at normalized points (..., 2).

    The result is linear in the feature values.
    """
    if feature_map.values.ndim != 3:
        shape = tuple(feature_map.values.shape)
        raise ShapeError("expected an unbatched (H, W, c) feature map", shape)
    values = feature_map.values.permute(2, 0, 1).unsqueeze(0)
    points = torch.as_tensor(points, dtype=values.dtype)
    return sample_features(values, points.unsqueeze(0))[0]


class DeformableCrossAttention(nn.Module):
    """
    Sparse attention of each query over `num_heads * num_points` sampled feature pixels.

    Sample positions are the query's reference position plus offsets predicted from the
    query, measured in feature cells. The attention weights are predicted from the query
    and normalized jointly over all samples of that query.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        self.num_samples = cfg.num_heads * cfg.num_points

        self.sampling_offsets = nn.Linear(cfg.embed_dim, self.num_samples * 2)
        self.attention_weights = nn.Linear(cfg.embed_dim, self.num_samples)
        self.value_proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        self.output_proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)

        self._reset_parameters()

    def _reset_parameters(self):
        nn.init.constant_(self.sampling_offsets.weight, 0.0)
        thetas = torch.arange(self.cfg.num_heads, dtype=torch.float32) * (
            2.0 * math.pi / self.cfg.num_heads
        )
        grid_init = torch.stack([thetas.cos(), thetas.sin()], -1)
        grid_init = (grid_init / grid_init.abs().max(-1, keepdim=True)[0]).view(
            self.cfg.num_heads, 1, 2
        )
        grid_init = grid_init.repeat(1, self.cfg.num_points, 1)
        for i in range(self.cfg.num_points):
            grid_init[:, i, :] *= i + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid_init.view(-1))

        nn.init.constant_(self.attention_weights.weight, 0.0)
        nn.init.constant_(self.attention_weights.bias, 0.0)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.constant_(self.value_proj.bias, 0.0)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.constant_(self.output_proj.bias, 0.0)

    def sampling_locations(
        self, queries: torch.Tensor, references: torch.Tensor, height: int, width: int
    ) -> torch.Tensor:
        """Normalized sample positions (..., N, h*K, 2) for queries (..., N, c)."""
        offsets = self.sampling_offsets(queries).unflatten(-1, (self.num_samples, 2))
        normalizer = torch.tensor([width, height], dtype=offsets.dtype, device=offsets.device)
        return references.unsqueeze(-2) + offsets / normalizer

    def sampling_weights(self, queries: torch.Tensor) -> torch.Tensor:
        """Attention weights (..., N, h*K), summing to one per query."""
        return softmax_normalize(self.attention_weights(queries), -1)

    def forward(
        self, queries: torch.Tensor, references: torch.Tensor, feature_map: FeatureMap
    ) -> torch.Tensor:
        """
        queries: (N, c) or (B, N, c)
        references: (N, 2) or (B, N, 2), normalized (x, y)
        feature_map: values (H, W, c) or (B, H, W, c)
        """
        unbatched = queries.ndim == 2
        if unbatched:
            queries = queries.unsqueeze(0)
            references = references.unsqueeze(0)

        values = feature_map.values
        if values.ndim == 3:
            values = values.unsqueeze(0)
        if values.shape[1] * values.shape[2] == 0:
            raise ShapeError("cannot attend over an empty feature map")
        if queries.shape[-1] != self.cfg.embed_dim or values.shape[-1] != self.cfg.embed_dim:
            raise ShapeError("channel mismatch", tuple(queries.shape), tuple(values.shape))
        if references.shape[:-1] != queries.shape[:-1]:
            raise ShapeError("one reference per query expected", tuple(references.shape))

        height, width = values.shape[1], values.shape[2]
        value_map = self.value_proj(values).permute(0, 3, 1, 2)

        locations = self.sampling_locations(queries, references, height, width)
        weights = self.sampling_weights(queries)

        sampled = sample_features(value_map, locations)  # (B, N, h*K, c)
        output = self.output_proj((weights.unsqueeze(-1) * sampled).sum(-2))
        return output[0] if unbatched else output
