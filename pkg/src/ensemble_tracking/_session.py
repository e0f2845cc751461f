"""Provides the TrackingSession class and the per-frame tracking state machine."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import RuntimeConfig
from .data import AnnotatedFrame, BBox, Candidate, Point2, TemplateBundle, TrackResult
from .ensemble import LocalTracker
from .exceptions import SessionError, ShapeError, ValidationError
from .features import crop_template
from .matching import solve_assignment
from .model import EnsembleTracker, Frame
from .temporal import memory_push, transfer_reference

logger = logging.getLogger(__name__)


@dataclass
class SessionState:
    """Mutable tracking state of one sequence."""

    trackers: List[LocalTracker]
    template: TemplateBundle
    runtime: RuntimeConfig
    previous: Optional[Point2] = None
    """Center of the last accepted box; None after a frame without target."""

    present: bool = True
    frame_index: int = 0

    @property
    def active(self) -> Optional[LocalTracker]:
        return next((tracker for tracker in self.trackers if tracker.activated), None)

    @property
    def activated_count(self) -> int:
        return sum(tracker.activated for tracker in self.trackers)


@torch.no_grad()
def init_sequence(
    model: EnsembleTracker,
    first_frame: np.ndarray,
    gt: BBox,
    runtime: RuntimeConfig = RuntimeConfig(),
) -> SessionState:
    """Encode the template and put every tracker at its offline query and default reference."""
    if not gt.inside_frame():
        raise ValidationError("initial box leaves the frame", gt)

    template = model.embed_template(crop_template(first_frame, gt, model.cfg.template_size))
    return SessionState(
        trackers=model.initial_trackers(),
        template=template,
        runtime=runtime,
        previous=Point2(gt.cx, gt.cy),
    )


def select_final(
    candidates: Sequence[Candidate], previous: Optional[Point2], alpha: float = 1.0
) -> Candidate:
    """
    Pick the final prediction.

    Without a previous position the most confident candidate wins; otherwise the one
    minimizing (1 - confidence) + alpha * L1 distance of its center to `previous`.
    """
    if not candidates:
        raise ShapeError("no candidates to select from")
    if previous is None:
        return max(candidates, key=lambda candidate: candidate.confidence)

    cost = np.array(
        [
            [
                (1 - c.confidence)
                + alpha * (abs(c.box.cx - previous.x) + abs(c.box.cy - previous.y))
                for c in candidates
            ]
        ]
    )
    _, columns = solve_assignment(cost)
    return candidates[int(columns[0])]


@torch.no_grad()
def track_frame(
    model: EnsembleTracker, state: Optional[SessionState], frame: Frame
) -> Tuple[TrackResult, SessionState]:
    """Track one frame; `state` is updated in place and returned."""
    if state is None:
        raise SessionError("tracking session has not been initialized")

    state.frame_index += 1
    feature_map = model.encode_frame(frame, state.template)
    queries = torch.stack([tracker.effective_query for tracker in state.trackers])
    references = torch.stack([tracker.reference for tracker in state.trackers])

    embeddings = model.decoder.decode_ensemble(queries, references, feature_map)
    candidates = model.head.predict_candidates(embeddings, state.template)
    winner = select_final(candidates, state.previous, state.runtime.selection_weight)
    present = winner.confidence >= state.runtime.theta

    if present:
        if state.runtime.temporal_transfer:
            _hand_over(model, state, winner)
        state.previous = transfer_reference(winner)
    else:
        for tracker in state.trackers:
            tracker.reset()
        state.previous = None

    state.present = present
    logger.debug(
        "frame %d: tracker %d, confidence %.4f, present %s",
        state.frame_index,
        winner.tracker_id,
        winner.confidence,
        present,
    )
    return TrackResult(state.frame_index, winner.box, winner.confidence, present), state


def _hand_over(model: EnsembleTracker, state: SessionState, winner: Candidate):
    """Make the winner's tracker the only activated one and carry its context forward."""
    tracker = state.trackers[winner.tracker_id]
    previous_active = state.active
    if previous_active is not None and previous_active is not tracker:
        previous_active.reset()

    memory = tracker.memory if tracker.activated else tracker.memory.cleared()
    online_query = model.tca.tca_forward(winner.embedding, memory)
    tracker.activate(transfer_reference(winner), online_query, memory_push(memory, online_query))


class TrackingSession:
    """
    Tracks a single target through one sequence at a time.
    """

    def __init__(self, model: EnsembleTracker, runtime: RuntimeConfig = RuntimeConfig()):
        """
        Initializes a TrackingSession object.

        Parameters:
            model: a trained tracker network, e.g. from `load_checkpoint()`.
            runtime: presence threshold, selection weight and the temporal transfer switch.
        """
        self.model = model
        self.runtime = runtime
        self.state: Optional[SessionState] = None

    def initialize(self, image: np.ndarray, box: BBox):
        """Start a new sequence from its first frame and the target box."""
        self.model.eval()
        self.state = init_sequence(self.model, image, box, self.runtime)

    def track(self, image: Frame) -> TrackResult:
        result, self.state = track_frame(self.model, self.state, image)
        return result

    def run(self, frames: Sequence[AnnotatedFrame]) -> List[TrackResult]:
        """
        Track a whole annotated sequence, initialized from the first frame's ground truth.

        The first result repeats the initial box with confidence 1.
        """
        if not frames or not frames[0].gt.present:
            raise ValidationError("the first frame must show the target")

        first = frames[0]
        self.initialize(first.image, first.gt.box)
        results = [TrackResult(0, first.gt.box, 1.0, True)]
        results.extend(self.track(frame.image) for frame in frames[1:])
        return results
