"""
Differentiable primitives the tracker network is assembled from.

    * dense multi-head attention (self- and cross-attention)
    * bilinear feature sampling and deformable cross-attention
    * focal loss
    * pre-norm transformer blocks
"""
from ._attention import AttentionConfig, MultiHeadAttention, softmax_normalize
from ._deformable import DeformableCrossAttention, bilinear_sample, sample_features
from ._losses import SCORE_EPSILON, focal_loss
from ._transformer import EncoderLayer, FeedForward

__all__ = [
    "AttentionConfig",
    "DeformableCrossAttention",
    "EncoderLayer",
    "FeedForward",
    "MultiHeadAttention",
    "SCORE_EPSILON",
    "bilinear_sample",
    "focal_loss",
    "sample_features",
    "softmax_normalize",
]
