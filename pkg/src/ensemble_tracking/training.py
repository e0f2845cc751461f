"""Sequence loss, curriculum, the unrolled training step, the trainer loop and checkpoints."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import (
    List,
    Literal,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np
import torch
from torch import nn
from tqdm import tqdm

from .config import ModelConfig, TrainingConfig, WorldConfig, build_section
from .data import AnnotatedFrame, Assignment, Candidate, GroundTruth, TemplateBundle
from .ensemble import HeadOutput
from .exceptions import CheckpointError, TrainingError, ValidationError
from .features import crop_template
from .geometry import elementwise_giou
from .layers import focal_loss
from .matching import LossWeights, match_prediction
from .model import EnsembleTracker
from .synthetic import augment_sequence, generate_sequence
from .temporal import QueryMemory, memory_push

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "ensemble-tracking/1"

Predictions = Union[HeadOutput, Sequence[Candidate]]
FrameRecord = Tuple[Predictions, GroundTruth, Assignment]


def _as_tensors(predictions: Predictions) -> Tuple[torch.Tensor, torch.Tensor]:
    if isinstance(predictions, HeadOutput):
        return predictions.scores, predictions.boxes
    scores = torch.tensor([c.score for c in predictions], dtype=torch.float64)
    boxes = torch.tensor([c.box.as_tuple() for c in predictions], dtype=torch.float64)
    return scores, boxes


def frame_loss(
    predictions: Predictions,
    gt: GroundTruth,
    assignment: Assignment,
    weights: LossWeights = LossWeights(),
    gamma: float = 2.0,
    alpha: Optional[float] = 0.25,
) -> torch.Tensor:
    """
    Focal classification terms of all candidates plus the box terms of the matched one.

    Without a match every label is 0 and there is no box term.
    """
    scores, boxes = _as_tensors(predictions)
    index = assignment.index
    if gt.present and index is None:
        raise ValidationError("a frame with a visible target needs an assignment")
    if not gt.present and index is not None:
        raise ValidationError("a frame without target cannot be assigned")

    labels = torch.zeros_like(scores)
    if index is not None:
        labels[index] = 1.0
    loss = weights.cls * focal_loss(scores, labels, gamma, alpha).sum()

    if index is not None:
        target = gt.box.to_tensor(boxes.dtype).to(boxes.device)
        l1 = (boxes[index] - target).abs().sum()
        giou = elementwise_giou(boxes[index], target)
        loss = loss + weights.l1 * l1 + weights.iou * (1 - giou)

    return loss


def sequence_loss(
    per_frame: Sequence[FrameRecord],
    weights: LossWeights = LossWeights(),
    gamma: float = 2.0,
    alpha: Optional[float] = 0.25,
) -> torch.Tensor:
    """Mean of frame_loss over the testing frames of one sequence sample."""
    if not per_frame:
        raise ValidationError("cannot compute the loss of an empty sequence")
    losses = [frame_loss(p, gt, a, weights, gamma, alpha) for p, gt, a in per_frame]
    return torch.stack(losses).mean()


@dataclass(frozen=True)
class CurriculumSchedule:
    """Sample length (template frame included) by epoch."""

    stages: Tuple[Tuple[int, int], ...] = ((2, 0), (3, 2), (4, 4), (5, 6), (6, 8))
    """(length, first epoch)"""

    def __post_init__(self):
        if not self.stages:
            raise ValidationError("curriculum needs at least one stage")
        epochs = [epoch for _, epoch in self.stages]
        if epochs != sorted(epochs) or epochs[0] != 0:
            raise ValidationError("curriculum stages must start at epoch 0 in ascending order")
        if any(length < 2 for length, _ in self.stages):
            raise ValidationError("curriculum lengths must be >= 2")

    @classmethod
    def from_config(cls, cfg: TrainingConfig) -> CurriculumSchedule:
        return cls(tuple(cfg.curriculum))

    def length_for_epoch(self, epoch: int) -> int:
        length = self.stages[0][0]
        for stage_length, first_epoch in self.stages:
            if epoch >= first_epoch:
                length = stage_length
        return length

    @property
    def max_length(self) -> int:
        return max(length for length, _ in self.stages)


@dataclass
class UnrolledSequence:
    """Everything the loss needs from one forward pass through a sequence sample."""

    template: TemplateBundle
    frames: List[Tuple[HeadOutput, GroundTruth, Assignment]]


def unroll_sequence(
    model: EnsembleTracker,
    sample: Sequence[AnnotatedFrame],
    weights: LossWeights = LossWeights(),
    temporal_transfer: bool = True,
) -> UnrolledSequence:
    """
    Run the tracker through the testing frames of `sample`, keeping the autograd graph.

    The tracker matched in frame t carries its predicted box center and a fresh online
    query into frame t+1; all others keep their offline queries and default references.
    Gradients flow through both handoffs. A frame without target breaks the activated
    flow, as does `temporal_transfer=False`.
    """
    if len(sample) < 2:
        raise ValidationError("a sequence sample needs a template frame and a testing frame")
    first = sample[0]
    if not first.gt.present:
        raise ValidationError("the template frame must show the target")

    template = model.embed_template(
        crop_template(first.image, first.gt.box, model.cfg.template_size)
    )
    queries = model.decoder.offline_queries
    defaults = model.decoder.default_references()

    active: Optional[int] = None
    online_query: Optional[torch.Tensor] = None
    reference: Optional[torch.Tensor] = None
    memory = QueryMemory(model.cfg.memory_length)

    frames = []
    for frame in sample[1:]:
        frame_queries, frame_references = queries, defaults
        if active is not None:
            frame_queries = torch.cat(
                [queries[:active], online_query[None], queries[active + 1 :]]
            )
            frame_references = torch.cat(
                [defaults[:active], reference[None], defaults[active + 1 :]]
            )

        feature_map = model.encode_frame(frame.image, template)
        embeddings, output = model.predict(
            feature_map, frame_queries, frame_references, template.vector
        )

        if frame.gt.present:
            index = match_prediction(
                output.scores, output.boxes, frame_references, frame.gt.box, weights
            )
        else:
            index = None
        frames.append((output, frame.gt, Assignment(index)))

        if index is None or not temporal_transfer:
            active, online_query, reference = None, None, None
            memory = memory.cleared()
            continue

        if index != active:
            memory = memory.cleared()
        reference = output.boxes[index, :2].clamp(0.0, 1.0)
        online_query = model.tca.tca_forward(embeddings[index], memory)
        memory = memory_push(memory, online_query)
        active = index

    return UnrolledSequence(template, frames)


def similarity_loss(unrolled: UnrolledSequence) -> torch.Tensor:
    """Mean over testing frames of 1 - cos(matched candidate vector, template vector)."""
    terms = []
    for output, _, assignment in unrolled.frames:
        if assignment.index is None:
            terms.append(output.vectors.new_zeros(()))
        else:
            cosine = (output.vectors[assignment.index] * unrolled.template.vector).sum()
            terms.append(1 - cosine)
    return torch.stack(terms).mean()


def train_sequence_step(
    model: EnsembleTracker,
    optimizer: torch.optim.Optimizer,
    sample: Sequence[AnnotatedFrame],
    cfg: TrainingConfig = TrainingConfig(),
    epoch: Optional[int] = None,
) -> float:
    """One optimizer step on one sequence sample; returns the loss before the step."""
    if epoch is not None:
        allowed = CurriculumSchedule.from_config(cfg).length_for_epoch(epoch)
        if len(sample) > allowed:
            raise ValidationError(
                f"sample of length {len(sample)} exceeds the curriculum length {allowed}"
            )

    model.train()
    optimizer.zero_grad()

    weights = LossWeights.from_config(cfg)
    unrolled = unroll_sequence(model, sample, weights, cfg.temporal_transfer)
    loss = sequence_loss(unrolled.frames, weights, cfg.focal_gamma, cfg.focal_alpha)
    if cfg.lambda_sim > 0:
        loss = loss + cfg.lambda_sim * similarity_loss(unrolled)

    if not torch.isfinite(loss):
        optimizer.zero_grad()
        raise TrainingError("non-finite loss, step aborted", float(loss.detach()))

    loss.backward()
    nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return float(loss.detach())


def build_optimizer(model: nn.Module, cfg: TrainingConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )


def sample_clip(
    sequence: Sequence[AnnotatedFrame], length: int, rng: np.random.Generator
) -> List[AnnotatedFrame]:
    """
    Draw a training sample of `length` frames whose first frame shows the target.

    Length 2 gives a detection sample: the template frame and one later frame of the
    same sequence. Longer samples are consecutive frames.
    """
    if length < 2:
        raise ValidationError("sample length must be >= 2", length)

    last_start = len(sequence) - 2 if length == 2 else len(sequence) - length
    starts = [i for i in range(last_start + 1) if sequence[i].gt.present]
    if not starts:
        raise ValidationError("sequence has no valid start frame for the requested length")

    start = int(starts[rng.integers(len(starts))])
    if length == 2:
        other = start + 1 + int(rng.integers(len(sequence) - start - 1))
        return [sequence[start], sequence[other]]
    return list(sequence[start : start + length])


def compute_normalization(
    sequences: Sequence[Sequence[AnnotatedFrame]],
) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Per-channel mean and standard deviation of all frames, in [0, 1] pixel units."""
    total = np.zeros(3)
    squares = np.zeros(3)
    count = 0
    for sequence in sequences:
        for frame in sequence:
            pixels = frame.image.reshape(-1, 3).astype(np.float64) / 255.0
            total += pixels.sum(0)
            squares += (pixels**2).sum(0)
            count += pixels.shape[0]
    if count == 0:
        raise ValidationError("no frames to compute normalization statistics from")

    mean = total / count
    std = np.sqrt(np.maximum(squares / count - mean**2, 0.0))
    return tuple(mean.tolist()), tuple(std.tolist())


class Trainer:
    """Runs the curriculum over synthetic or stored sequences."""

    def __init__(
        self,
        model: EnsembleTracker,
        cfg: TrainingConfig = TrainingConfig(),
        world: WorldConfig = WorldConfig(),
        log_path: Optional[Union[str, Path]] = None,
        progress: bool = False,
    ):
        self.model = model
        self.cfg = cfg
        self.world = world
        self.log_path = Path(log_path) if log_path is not None else None
        self.progress = progress

        torch.manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.schedule = CurriculumSchedule.from_config(cfg)
        self.optimizer = build_optimizer(model, cfg)
        self.scheduler = torch.optim.lr_scheduler.MultiStepLR(
            self.optimizer, milestones=[cfg.lr_drop_epoch], gamma=cfg.lr_drop_factor
        )
        self.step = 0

    def fit(
        self, sequences: Optional[Sequence[Sequence[AnnotatedFrame]]] = None
    ) -> List[float]:
        """
        Train for `cfg.epochs` epochs and return the mean loss of each epoch.

        Without `sequences`, every sample is drawn from a freshly generated sequence.
        """
        if sequences:
            self.model.set_normalization(*compute_normalization(sequences))
        else:
            samples = [self._generate(self.schedule.max_length) for _ in range(4)]
            self.model.set_normalization(*compute_normalization(samples))

        return [self.run_epoch(epoch, sequences) for epoch in range(self.cfg.epochs)]

    def run_epoch(
        self, epoch: int, sequences: Optional[Sequence[Sequence[AnnotatedFrame]]] = None
    ) -> float:
        length = self.schedule.length_for_epoch(epoch)
        losses = []
        for _ in tqdm(
            range(self.cfg.sequences_per_epoch),
            desc=f"epoch {epoch}",
            disable=not self.progress,
        ):
            if sequences:
                sequence = sequences[int(self.rng.integers(len(sequences)))]
            else:
                sequence = self._generate(length)

            sample = sample_clip(sequence, length, self.rng)
            if self.cfg.augment:
                sample = augment_sequence(sample, self.rng)

            loss = train_sequence_step(self.model, self.optimizer, sample, self.cfg, epoch)
            losses.append(loss)
            self.step += 1
            self._log_step(length, loss)

        self.scheduler.step()
        mean_loss = float(np.mean(losses)) if losses else math.nan
        logger.info("epoch %d: length %d, mean loss %.5f", epoch, length, mean_loss)
        return mean_loss

    def _generate(self, length: int) -> List[AnnotatedFrame]:
        world = dataclasses.replace(
            self.world,
            sequence_length=max(length, self.world.sequence_length),
            world_seed=int(self.rng.integers(2**31)),
        )
        return generate_sequence(world)

    def _log_step(self, length: int, loss: float):
        logger.debug("step %d: length %d, loss %.6f", self.step, length, loss)
        if self.log_path is not None:
            with self.log_path.open("a", encoding="utf-8") as log:
                log.write(f"step={self.step} length={length} loss={loss:.6f}\n")


def save_checkpoint(model: EnsembleTracker, path: Union[str, Path]):
    """Write version, model configuration and every parameter and buffer."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.cfg),
        "state_dict": model.state_dict(),
    }
    try:
        torch.save(payload, Path(path))
    except OSError as error:
        raise CheckpointError("could not write checkpoint", str(path)) from error
    logger.info("saved checkpoint to %s", path)


def load_checkpoint(path: Union[str, Path]) -> EnsembleTracker:
    """Restore a model; nothing is built unless the whole checkpoint is valid."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except FileNotFoundError as error:
        raise CheckpointError("checkpoint does not exist", str(path)) from error
    except Exception as error:
        raise CheckpointError("checkpoint is corrupted", str(path)) from error

    if not isinstance(payload, Mapping) or "version" not in payload:
        raise CheckpointError("file is not a checkpoint", str(path))
    if payload["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload['version']!r} does not match {CHECKPOINT_VERSION!r}"
        )

    try:
        cfg = build_section(ModelConfig, dict(payload["config"]).items())
        model = EnsembleTracker(cfg)
        model.load_state_dict(payload["state_dict"])
    except (KeyError, TypeError, RuntimeError) as error:
        raise CheckpointError("checkpoint does not fit its model configuration") from error

    model.eval()
    logger.info("loaded checkpoint from %s", path)
    return model


def checkpoint_io(
    model: EnsembleTracker, path: Union[str, Path], direction: Literal["save", "load"]
) -> EnsembleTracker:
    """
    Save `model` to `path`, or load `path` into `model`.

    Loading leaves `model` untouched unless the checkpoint is valid and has the same
    configuration.
    """
    if direction == "save":
        save_checkpoint(model, path)
        return model
    if direction != "load":
        raise ValidationError("direction must be 'save' or 'load'", direction)

    loaded = load_checkpoint(path)
    if loaded.cfg != model.cfg:
        raise CheckpointError("checkpoint was written for another model configuration")
    model.load_state_dict(loaded.state_dict())
    return model

