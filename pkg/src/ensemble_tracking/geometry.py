"""Box algebra in normalized image coordinates, for single boxes and for batched tensors."""
from __future__ import annotations

from typing import Tuple, Union

import torch

from .data import BBox, BoxFormat, CornerBox, Point2
from .exceptions import ValidationError


def box_convert(box: Union[BBox, CornerBox], direction: BoxFormat) -> Union[CornerBox, BBox]:
    """Convert a box between center form and corner form."""
    direction = BoxFormat(direction)

    if direction is BoxFormat.CENTER_TO_CORNERS:
        if not isinstance(box, BBox):
            raise ValidationError("expected a center-form box", box)
        return CornerBox(*box.corners)

    if not isinstance(box, CornerBox):
        raise ValidationError("expected a corner-form box", box)
    return BBox(
        (box.x0 + box.x1) / 2,
        (box.y0 + box.y1) / 2,
        box.x1 - box.x0,
        box.y1 - box.y0,
    )


def box_overlap_metrics(a: BBox, b: BBox) -> Tuple[float, float]:
    """Return (IoU, generalized IoU) of two boxes."""
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners

    inter_w = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    inter_h = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = inter_w * inter_h
    union = a.area + b.area - inter
    iou = inter / union

    enclosing = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    giou = iou - (enclosing - union) / enclosing
    return iou, giou


def box_center(box: BBox) -> Point2:
    return Point2(box.cx, box.cy)


def box_cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    """Area of corner-form boxes."""
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def box_iou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Pairwise IoU and union of corner-form boxes [N,4] x [M,4] -> [N,M]."""
    area1 = box_area(boxes1)
    area2 = box_area(boxes2)

    lt = torch.max(boxes1[:, None, :2], boxes2[:, :2])  # [N,M,2]
    rb = torch.min(boxes1[:, None, 2:], boxes2[:, 2:])  # [N,M,2]

    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1[:, None] + area2 - inter
    return inter / union, union


def generalized_box_iou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """Pairwise generalized IoU of corner-form boxes [N,4] x [M,4] -> [N,M]."""
    iou, union = box_iou(boxes1, boxes2)

    lt = torch.min(boxes1[:, None, :2], boxes2[:, :2])
    rb = torch.max(boxes1[:, None, 2:], boxes2[:, 2:])

    wh = (rb - lt).clamp(min=0)
    enclosing = wh[..., 0] * wh[..., 1]
    return iou - (enclosing - union) / enclosing


def elementwise_giou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """Generalized IoU of matching rows of two center-form box tensors [..., 4]."""
    a = box_cxcywh_to_xyxy(boxes1)
    b = box_cxcywh_to_xyxy(boxes2)

    inter_wh = (torch.min(a[..., 2:], b[..., 2:]) - torch.max(a[..., :2], b[..., :2])).clamp(min=0)
    inter = inter_wh[..., 0] * inter_wh[..., 1]
    union = box_area(a) + box_area(b) - inter

    enclosing_wh = torch.max(a[..., 2:], b[..., 2:]) - torch.min(a[..., :2], b[..., :2])
    enclosing = enclosing_wh[..., 0] * enclosing_wh[..., 1]
    return inter / union - (enclosing - union) / enclosing
