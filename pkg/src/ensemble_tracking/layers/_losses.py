"""Classification loss used by the training objective."""
from __future__ import annotations

from typing import Optional, Union

import torch

SCORE_EPSILON = 1e-7

TensorLike = Union[torch.Tensor, float]


def focal_loss(
    score: TensorLike,
    label: TensorLike,
    gamma: float = 2.0,
    alpha: Optional[float] = 0.25,
) -> torch.Tensor:
    """
    Focal loss of a foreground probability against a 0/1 label.

    loss = -alpha_t * (1 - p_t)^gamma * log(p_t), where p_t is the probability of the
    true class and alpha_t is `alpha` for positives and `1 - alpha` for negatives.
    Pass `alpha=None` (or a negative value) to disable the class balance.
    Scores are clamped into [eps, 1 - eps].
    """
    if not isinstance(score, torch.Tensor):
        score = torch.tensor(score, dtype=torch.get_default_dtype())
    label = torch.as_tensor(label, dtype=score.dtype, device=score.device)
    score = score.clamp(SCORE_EPSILON, 1 - SCORE_EPSILON)

    p_t = label * score + (1 - label) * (1 - score)
    loss = -((1 - p_t) ** gamma) * torch.log(p_t)

    if alpha is not None and alpha >= 0:
        alpha_t = label * alpha + (1 - label) * (1 - alpha)
        loss = alpha_t * loss

    return loss
