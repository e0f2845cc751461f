"""Bipartite assignment and the matching cost between tracker predictions and the ground truth."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .config import TrainingConfig
from .data import Assignment, BBox, Candidate, GroundTruth, Point2
from .exceptions import ShapeError, ValidationError
from .geometry import box_cxcywh_to_xyxy, generalized_box_iou

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the matching cost and loss terms."""

    cls: float = 1.0
    r: float = 5.0
    """Reference distance; used by the matching cost only."""

    l1: float = 5.0
    iou: float = 2.0

    def __post_init__(self):
        if min(self.cls, self.r, self.l1, self.iou) < 0:
            raise ValidationError("loss weights must be nonnegative", self)

    @classmethod
    def from_config(cls, cfg: TrainingConfig) -> LossWeights:
        return cls(cfg.lambda_cls, cfg.lambda_r, cfg.lambda_l1, cfg.lambda_iou)


def solve_assignment(cost: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Minimum-cost assignment of rows to columns.

    Returns (row indices, column indices); rectangular matrices assign min(rows, cols) pairs.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or 0 in cost.shape:
        raise ShapeError("expected a nonempty 2-D cost matrix", cost.shape)
    if not np.isfinite(cost).all():
        raise ValidationError("cost matrix has non-finite entries")
    return linear_sum_assignment(cost)


@torch.no_grad()
def matching_costs(
    scores: torch.Tensor,
    boxes: torch.Tensor,
    references: torch.Tensor,
    gt_boxes: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    """
    Pairwise matching cost [N, M] between N predictions and M ground truth boxes.

    scores: [N], boxes: [N, 4] center form, references: [N, 2], gt_boxes: [M, 4] center form.
    The reference term compares each tracker's reference with the ground truth box center.
    """
    cost_class = -scores[:, None]
    cost_bbox = torch.cdist(boxes, gt_boxes, p=1)
    cost_giou = 1 - generalized_box_iou(box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(gt_boxes))
    cost_ref = torch.cdist(references, gt_boxes[:, :2], p=1)

    return (
        weights.cls * cost_class
        + weights.l1 * cost_bbox
        + weights.iou * cost_giou
        + weights.r * cost_ref
    )


def match_prediction(
    scores: torch.Tensor,
    boxes: torch.Tensor,
    references: torch.Tensor,
    gt_box: BBox,
    weights: LossWeights = LossWeights(),
) -> int:
    """Index of the prediction matched with a single ground truth box."""
    if scores.shape[0] == 0:
        raise ShapeError("no predictions to match")
    if references.shape[0] != scores.shape[0]:
        raise ShapeError("one reference per prediction expected", tuple(references.shape))

    gt = gt_box.to_tensor(boxes.dtype).to(boxes.device)[None]
    cost = matching_costs(scores.detach(), boxes.detach(), references.detach(), gt, weights)
    rows, _ = solve_assignment(cost.cpu().numpy())
    return int(rows[0])


def hungarian_match(
    candidates: Sequence[Candidate],
    gt: GroundTruth,
    references: Sequence[Point2],
    weights: LossWeights = LossWeights(),
) -> Assignment:
    """Match the ground truth of one frame with the candidate of lowest cost."""
    if not gt.present:
        raise ValidationError("cannot match an absent target")
    if len(candidates) != len(references):
        raise ShapeError("one reference per candidate expected", len(candidates), len(references))
    if not candidates:
        raise ShapeError("no candidates to match")

    scores = torch.tensor([c.score for c in candidates], dtype=torch.float64)
    boxes = torch.tensor([c.box.as_tuple() for c in candidates], dtype=torch.float64)
    refs = torch.tensor([p.as_tuple() for p in references], dtype=torch.float64)

    index = match_prediction(scores, boxes, refs, gt.box, weights)
    logger.debug("matched tracker %d", index)
    return Assignment(index)
