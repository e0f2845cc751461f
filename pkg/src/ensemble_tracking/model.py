"""The tracker network: feature extraction, fusion encoder, tracker ensemble, head and TCA."""
from __future__ import annotations

import dataclasses
import logging
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .data import FeatureMap, TemplateBundle
from .ensemble import EnsembleDecoder, HeadOutput, LocalTracker, PredictionHead
from .exceptions import ShapeError, ValidationError
from .features import (
    FeatureExtractor,
    FusionEncoder,
    TemplatePooling,
    frame_to_tensor,
    resize_frame,
)
from .layers import AttentionConfig
from .temporal import TCAModel

logger = logging.getLogger(__name__)

Frame = Union[np.ndarray, torch.Tensor]
"""An HxWx3 uint8 image or a 3xHxW float tensor in [0, 1]."""


class EnsembleTracker(nn.Module):
    """
    Everything with learnable parameters.

    Tracking state (references, online queries, memories) is not stored here; it lives in
    LocalTracker records owned by a tracking session or by the training unroll.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        attention = AttentionConfig(cfg.embed_dim, cfg.num_heads, cfg.num_points)

        self.extractor = FeatureExtractor(cfg.backbone_widths, cfg.backbone_dim, cfg.embed_dim)
        self.encoder = FusionEncoder(attention, cfg.encoder_layers, cfg.ffn_dim)
        self.pooling = TemplatePooling(cfg.embed_dim)
        self.decoder = EnsembleDecoder(attention, cfg.num_trackers, cfg.decoder_layers, cfg.ffn_dim)
        self.head = PredictionHead(cfg.embed_dim)
        self.tca = TCAModel(attention, cfg.ffn_dim)

    @property
    def search_size(self) -> Tuple[int, int]:
        """(width, height) every search frame is resized to."""
        return self.cfg.search_width, self.cfg.search_height

    def set_normalization(self, mean: Sequence[float], std: Sequence[float]):
        self.extractor.set_normalization(mean, std)

    def embed_template(self, bundle: TemplateBundle) -> TemplateBundle:
        """Attach the reduced template features and the pooled template vector."""
        if bundle.image.shape[:2] != (self.cfg.template_size, self.cfg.template_size):
            raise ShapeError("template crop has the wrong size", bundle.image.shape)

        image = frame_to_tensor(bundle.image).to(self._dtype)
        features = self.extractor.extract_and_reduce(image)
        vector = self.pooling(features, bundle.target_box)
        return dataclasses.replace(bundle, features=features, vector=vector)

    def encode_frame(self, frame: Frame, template: TemplateBundle) -> FeatureMap:
        """Search features F_t fused with the template features."""
        if template.features is None:
            raise ValidationError("template bundle has not been encoded")

        if isinstance(frame, np.ndarray):
            frame = frame_to_tensor(resize_frame(frame, self.search_size))
        frame = frame.to(self._dtype)

        search = self.extractor.extract_and_reduce(frame)
        return self.encoder.fuse_encode(template.features, search)

    def predict(
        self,
        feature_map: FeatureMap,
        queries: torch.Tensor,
        references: torch.Tensor,
        template_vector: torch.Tensor,
    ) -> Tuple[torch.Tensor, HeadOutput]:
        """Decode the ensemble and apply the head; returns the embeddings and the head output."""
        embeddings = self.decoder.decode_ensemble(queries, references, feature_map)
        return embeddings, self.head(embeddings, template_vector)

    def initial_trackers(self) -> List[LocalTracker]:
        return self.decoder.initial_trackers(self.cfg.memory_length)

    @property
    def _dtype(self) -> torch.dtype:
        return self.decoder.query_embed.weight.dtype
