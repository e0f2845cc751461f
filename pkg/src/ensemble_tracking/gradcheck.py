"""Central finite-difference checks of analytic gradients, at 64-bit precision."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Sequence

import torch

from .data import FeatureMap
from .ensemble import PredictionHead
from .geometry import elementwise_giou
from .layers import (
    AttentionConfig,
    DeformableCrossAttention,
    EncoderLayer,
    MultiHeadAttention,
    bilinear_sample,
    focal_loss,
    softmax_normalize,
)
from .temporal import QueryMemory, TCAModel

logger = logging.getLogger(__name__)

_PROJECTION_SEED = 0
_RELATIVE_FLOOR = 1e-3
_KINK_FACTOR = 10.0
"""Left and right difference quotients may disagree by this many `tol` at smooth points."""


@dataclass(frozen=True)
class GradcheckReport:
    name: str
    max_rel_err: float
    passed: bool
    non_differentiable: bool = False
    """Set if some input coordinate sits on a kink; such coordinates are left out."""


def _relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), _RELATIVE_FLOOR)


def finite_difference_gradcheck(
    op: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    epsilon: float = 1e-6,
    tol: float = 1e-4,
    name: str = "op",
) -> GradcheckReport:
    """
    Compare autograd gradients of `op` with central differences.

    Non-scalar outputs are reduced to a scalar by a fixed random projection. Every input
    coordinate is perturbed in place. A coordinate whose left and right difference
    quotients disagree is reported as non-differentiable instead of failing the check.
    """
    inputs = [x.detach().to(torch.float64).clone().requires_grad_(True) for x in inputs]

    output = op(*inputs)
    if output.numel() == 1:
        projection = torch.ones_like(output)
    else:
        generator = torch.Generator().manual_seed(_PROJECTION_SEED)
        projection = torch.randn(output.shape, generator=generator, dtype=torch.float64)

    scalar = (output * projection).sum()
    if scalar.requires_grad:
        analytic = torch.autograd.grad(scalar, inputs, allow_unused=True)
    else:
        analytic = [None] * len(inputs)
    analytic = [torch.zeros_like(x) if g is None else g for x, g in zip(inputs, analytic)]

    def evaluate() -> float:
        return float((op(*inputs) * projection).sum())

    max_error = 0.0
    kinks = 0
    with torch.no_grad():
        center = evaluate()
        for x, gradient in zip(inputs, analytic):
            flat, flat_gradient = x.view(-1), gradient.reshape(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + epsilon
                plus = evaluate()
                flat[i] = old - epsilon
                minus = evaluate()
                flat[i] = old

                right = (plus - center) / epsilon
                left = (center - minus) / epsilon
                if abs(right - left) > _KINK_FACTOR * tol * max(abs(right), abs(left), 1.0):
                    kinks += 1
                    continue

                numeric = (plus - minus) / (2 * epsilon)
                max_error = max(max_error, _relative_error(flat_gradient[i].item(), numeric))

    if kinks:
        logger.warning("%s: %d coordinate(s) at a non-differentiable point", name, kinks)

    report = GradcheckReport(name, max_error, max_error < tol, kinks > 0)
    logger.debug("%s: max relative error %.3e", name, max_error)
    return report


def run_gradcheck_suite(seed: int = 0, tol: float = 1e-4) -> List[GradcheckReport]:
    """Check every differentiable primitive on random small instances."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return list(_suite(tol))


def _suite(tol: float):
    f64 = torch.float64
    cfg = AttentionConfig(embed_dim=8, num_heads=2, num_points=2)

    yield finite_difference_gradcheck(
        lambda x: softmax_normalize(x, -1),
        [torch.randn(3, 5, dtype=f64)],
        tol=tol,
        name="softmax_normalize",
    )

    attention = MultiHeadAttention(cfg).double()
    yield finite_difference_gradcheck(
        attention,
        [torch.randn(3, 8, dtype=f64), torch.randn(4, 8, dtype=f64)],
        tol=tol,
        name="multi_head_attention",
    )

    yield finite_difference_gradcheck(
        lambda values, points: bilinear_sample(FeatureMap(values, 16), points),
        [torch.randn(8, 8, 6, dtype=f64), torch.rand(5, 2, dtype=f64) * 0.9 + 0.05],
        tol=tol,
        name="bilinear_sample",
    )

    deformable = DeformableCrossAttention(AttentionConfig(6, 2, 2)).double()
    torch.nn.init.normal_(deformable.attention_weights.weight, std=0.5)
    torch.nn.init.normal_(deformable.sampling_offsets.weight, std=0.5)
    yield finite_difference_gradcheck(
        lambda queries, refs, values: deformable(queries, refs, FeatureMap(values, 16)),
        [
            torch.randn(3, 6, dtype=f64),
            torch.rand(3, 2, dtype=f64) * 0.6 + 0.2,
            torch.randn(8, 8, 6, dtype=f64),
        ],
        tol=tol,
        name="deformable_cross_attention",
    )

    labels = torch.tensor([1.0, 0.0, 1.0, 0.0, 0.0, 1.0], dtype=f64)
    yield finite_difference_gradcheck(
        lambda scores: focal_loss(scores, labels),
        [torch.rand(6, dtype=f64) * 0.9 + 0.05],
        tol=tol,
        name="focal_loss",
    )

    head = PredictionHead(8).double()
    template_vector = torch.nn.functional.normalize(torch.randn(8, dtype=f64), dim=0)

    def head_outputs(embeddings: torch.Tensor) -> torch.Tensor:
        output = head(embeddings, template_vector)
        return torch.cat(
            [output.scores, output.boxes.flatten(), output.vectors.flatten(), output.confidences]
        )

    yield finite_difference_gradcheck(
        head_outputs, [torch.randn(3, 8, dtype=f64)], tol=tol, name="prediction_head"
    )

    tca = TCAModel(cfg, 16).double()
    yield finite_difference_gradcheck(
        lambda embedding, memory: tca.tca_forward(
            embedding, QueryMemory(5, tuple(memory.unbind(0)))
        ),
        [torch.randn(8, dtype=f64), torch.randn(3, 8, dtype=f64)],
        tol=tol,
        name="tca_forward",
    )

    encoder = EncoderLayer(cfg, 16).double()
    yield finite_difference_gradcheck(
        encoder, [torch.randn(4, 8, dtype=f64)], tol=tol, name="encoder_layer"
    )

    centers = torch.rand(4, 2, dtype=f64) * 0.4 + 0.3
    extents = torch.rand(4, 2, dtype=f64) * 0.2 + 0.1
    boxes = torch.cat([centers, extents], dim=-1)
    yield finite_difference_gradcheck(
        elementwise_giou,
        [boxes, boxes.flip(0) + 0.01],
        tol=tol,
        name="generalized_iou",
    )
