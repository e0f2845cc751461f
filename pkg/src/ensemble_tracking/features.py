"""Template cropping, backbone feature extraction and template/search fusion encoding."""
from __future__ import annotations

import logging
import math
from typing import Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .data import BBox, FeatureMap, TemplateBundle
from .exceptions import ShapeError, ValidationError
from .layers import AttentionConfig, EncoderLayer

logger = logging.getLogger(__name__)

FEATURE_STRIDE = 16
TEMPLATE_CONTEXT = 2.0
"""Side of the template crop relative to sqrt(w*h) of the target."""


def resize_frame(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Resize an 8-bit RGB frame to (width, height)."""
    if (image.shape[1], image.shape[0]) == tuple(size):
        return image
    resized = Image.fromarray(image).resize(tuple(size), Image.BILINEAR)
    return np.asarray(resized)


def frame_to_tensor(image: np.ndarray) -> torch.Tensor:
    """HxWx3 uint8 -> 3xHxW float in [0, 1]."""
    pixels = np.array(image, dtype=np.uint8, order="C", copy=True)
    return torch.from_numpy(pixels).permute(2, 0, 1).float() / 255.0


def crop_template(image: np.ndarray, gt: BBox, size: int = 128) -> TemplateBundle:
    """
    Crop a square around the target whose area is four times the target area.

    Regions outside the frame are filled with the per-channel image mean,
    then the crop is resized to `size` x `size`.
    """
    height, width = image.shape[:2]
    x0, y0, w_px, h_px = gt.to_pixels((width, height))
    side = TEMPLATE_CONTEXT * math.sqrt(w_px * h_px)
    if side < 1.0:
        raise ValidationError("target too small to crop a template", gt)

    cx, cy = x0 + w_px / 2, y0 + h_px / 2
    side_px = max(1, int(round(side)))
    left = int(round(cx - side_px / 2))
    top = int(round(cy - side_px / 2))

    mean_color = tuple(int(round(v)) for v in image.reshape(-1, 3).mean(axis=0))
    canvas = Image.new("RGB", (side_px, side_px), mean_color)

    src_x0, src_y0 = max(left, 0), max(top, 0)
    src_x1, src_y1 = min(left + side_px, width), min(top + side_px, height)
    if src_x1 > src_x0 and src_y1 > src_y0:
        region = Image.fromarray(image).crop((src_x0, src_y0, src_x1, src_y1))
        canvas.paste(region, (src_x0 - left, src_y0 - top))
    else:
        logger.debug("template crop lies completely outside the frame")

    if side_px != size:
        canvas = canvas.resize((size, size), Image.BILINEAR)

    target_box = BBox(
        (cx - left) / side_px,
        (cy - top) / side_px,
        w_px / side_px,
        h_px / side_px,
    )
    return TemplateBundle(image=np.asarray(canvas), target_box=target_box)


def sine_position_encoding(
    height: int, width: int, dim: int, temperature: float = 10000.0
) -> torch.Tensor:
    """Fixed 2-D sinusoidal encoding, (H*W, dim): first half encodes y, second half x."""
    if dim % 4:
        raise ShapeError("positional encoding needs a dimension divisible by 4", dim)

    scale = 2 * math.pi
    y_embed = (torch.arange(height, dtype=torch.float32) + 1) / height * scale
    x_embed = (torch.arange(width, dtype=torch.float32) + 1) / width * scale

    num_feats = dim // 2
    dim_t = torch.arange(num_feats, dtype=torch.float32)
    dim_t = temperature ** (2 * torch.div(dim_t, 2, rounding_mode="floor") / num_feats)

    pos_y = y_embed[:, None] / dim_t  # (H, num_feats)
    pos_x = x_embed[:, None] / dim_t  # (W, num_feats)
    pos_y = torch.stack((pos_y[:, 0::2].sin(), pos_y[:, 1::2].cos()), dim=2).flatten(1)
    pos_x = torch.stack((pos_x[:, 0::2].sin(), pos_x[:, 1::2].cos()), dim=2).flatten(1)

    pos = torch.cat(
        (
            pos_y[:, None, :].expand(height, width, num_feats),
            pos_x[None, :, :].expand(height, width, num_feats),
        ),
        dim=-1,
    )
    return pos.reshape(height * width, dim)


class Backbone(nn.Module):
    """Four stride-2 convolution blocks, total stride 16."""

    def __init__(self, widths: Sequence[int], out_channels: int):
        super().__init__()
        channels = [3, *widths, out_channels]
        blocks = []
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1),
                    nn.ReLU(),
                    nn.Conv2d(c_out, c_out, kernel_size=3, padding=1),
                    nn.ReLU(),
                )
            )
        self.blocks = nn.Sequential(*blocks)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.blocks(images)


class FeatureExtractor(nn.Module):
    """Backbone followed by a learned 1x1 channel reduction from C to c."""

    def __init__(self, widths: Sequence[int], backbone_dim: int, embed_dim: int):
        super().__init__()
        self.backbone = Backbone(widths, backbone_dim)
        self.reduce = nn.Conv2d(backbone_dim, embed_dim, kernel_size=1)
        self.register_buffer("pixel_mean", torch.full((3,), 0.5))
        self.register_buffer("pixel_std", torch.full((3,), 0.25))

    def set_normalization(self, mean: Sequence[float], std: Sequence[float]):
        """Install dataset statistics (in [0, 1] pixel units)."""
        with torch.no_grad():
            self.pixel_mean.copy_(torch.as_tensor(mean, dtype=self.pixel_mean.dtype))
            self.pixel_std.copy_(torch.as_tensor(std, dtype=self.pixel_std.dtype).clamp(min=1e-3))

    def reduce_channels(self, backbone_features: torch.Tensor) -> torch.Tensor:
        return self.reduce(backbone_features)

    def extract_and_reduce(self, images: torch.Tensor) -> FeatureMap:
        """
        images: (3, H, W) or (B, 3, H, W) float in [0, 1]
        returns a FeatureMap of ceil(H/16) x ceil(W/16) cells with `embed_dim` channels
        """
        unbatched = images.ndim == 3
        if unbatched:
            images = images.unsqueeze(0)
        if images.shape[-1] < FEATURE_STRIDE or images.shape[-2] < FEATURE_STRIDE:
            raise ShapeError("image smaller than one feature stride", tuple(images.shape))

        mean = self.pixel_mean.view(1, 3, 1, 1)
        std = self.pixel_std.view(1, 3, 1, 1)
        features = self.reduce_channels(self.backbone((images - mean) / std))
        values = features.permute(0, 2, 3, 1)
        return FeatureMap(values[0] if unbatched else values, stride=FEATURE_STRIDE)


class FusionEncoder(nn.Module):
    """
    Joint self-attention encoder over template and search tokens.

    Both token sets get their own sinusoidal encoding plus a learned segment embedding.
    Only the search tokens are returned.
    """

    def __init__(self, cfg: AttentionConfig, depth: int, ffn_dim: int):
        super().__init__()
        self.embed_dim = cfg.embed_dim
        self.segment_embed = nn.Embedding(2, cfg.embed_dim)
        self.layers = nn.ModuleList([EncoderLayer(cfg, ffn_dim) for _ in range(depth)])

    def positional_encoding(self, height: int, width: int, segment: int) -> torch.Tensor:
        """(H*W, c) encoding for the template (segment 0) or the search frame (segment 1)."""
        pos = sine_position_encoding(height, width, self.embed_dim)
        pos = pos.to(dtype=self.segment_embed.weight.dtype, device=self.segment_embed.weight.device)
        return pos + self.segment_embed.weight[segment]

    def fuse_encode(self, template_feat: FeatureMap, search_feat: FeatureMap) -> FeatureMap:
        if template_feat.channels != search_feat.channels or search_feat.channels != self.embed_dim:
            raise ShapeError(
                "template and search features need the same channel count",
                template_feat.channels,
                search_feat.channels,
            )

        template_tokens = template_feat.tokens() + self.positional_encoding(
            template_feat.height, template_feat.width, 0
        )
        search_tokens = search_feat.tokens() + self.positional_encoding(
            search_feat.height, search_feat.width, 1
        )

        batch_shape = torch.broadcast_shapes(template_tokens.shape[:-2], search_tokens.shape[:-2])
        template_tokens = template_tokens.expand(*batch_shape, *template_tokens.shape[-2:])
        search_tokens = search_tokens.expand(*batch_shape, *search_tokens.shape[-2:])

        tokens = torch.cat([template_tokens, search_tokens], dim=-2)
        logger.debug("encoding %d tokens", tokens.shape[-2])
        for layer in self.layers:
            tokens = layer(tokens)

        search_out = tokens[..., template_tokens.shape[-2] :, :]
        values = search_out.unflatten(-2, (search_feat.height, search_feat.width))
        return FeatureMap(values, stride=search_feat.stride)


class TemplatePooling(nn.Module):
    """Pools template cells covered by the target into a unit-norm template vector."""

    def __init__(self, embed_dim: int):
        super().__init__()
        self.proj = nn.Linear(embed_dim, embed_dim)

    def forward(self, template_feat: FeatureMap, target_box: BBox) -> torch.Tensor:
        mask = target_cell_mask(template_feat.height, template_feat.width, target_box)
        mask = mask.to(dtype=template_feat.values.dtype, device=template_feat.values.device)
        pooled = (template_feat.values * mask[..., None]).sum((-3, -2)) / mask.sum()
        return F.normalize(self.proj(pooled), dim=-1)


def target_cell_mask(height: int, width: int, box: BBox) -> torch.Tensor:
    """Cells whose centers fall inside `box`; the cell holding the box center if none do."""
    ys = (torch.arange(height, dtype=torch.float64) + 0.5) / height
    xs = (torch.arange(width, dtype=torch.float64) + 0.5) / width
    x0, y0, x1, y1 = box.corners
    mask = ((ys >= y0) & (ys <= y1))[:, None] & ((xs >= x0) & (xs <= x1))[None, :]

    if not mask.any():
        row = min(int(box.cy * height), height - 1)
        col = min(int(box.cx * width), width - 1)
        mask[row, col] = True
    return mask
