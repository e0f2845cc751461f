"""
Long-term tracking metrics over per-frame results.

All metrics are computed per sequence and averaged over sequences.

    * one-pass evaluation: success AUC, precision at 20 px, normalized precision
    * presence: TPR, TNR and their maximum geometric mean over confidence thresholds
    * presence: precision, recall and the maximum F-score over confidence thresholds
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

from .data import AnnotatedFrame, TrackResult
from .exceptions import EvaluationError

logger = logging.getLogger(__name__)

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 51)
NORMALIZED_PRECISION_THRESHOLDS = np.linspace(0.0, 0.5, 51)
PRESENCE_THRESHOLDS = np.linspace(0.0, 1.0, 101)
PRECISION_PIXELS = 20.0
OVERLAP_THRESHOLD = 0.5
"""IoU above which a present prediction counts as a true positive."""

RESULTS_HEADER = "frame_index,x0,y0,w,h,confidence,present"


class ResultRow(NamedTuple):
    """One line of a results file; the box is in pixels."""

    frame_index: int
    x0: float
    y0: float
    w: float
    h: float
    confidence: float
    present: bool

    @property
    def box(self) -> Tuple[float, float, float, float]:
        return self.x0, self.y0, self.w, self.h


class OpeMetrics(NamedTuple):
    auc: float
    precision: float
    normalized_precision: float


class OxuvaMetrics(NamedTuple):
    tpr: float
    tnr: float
    maxgm: float


class VotltMetrics(NamedTuple):
    precision: float
    recall: float
    fscore: float


@dataclass(frozen=True)
class EvalRecord:
    """Predictions and ground truth of one sequence, boxes as pixel (x0, y0, w, h)."""

    pred_boxes: np.ndarray
    confidences: np.ndarray
    pred_present: np.ndarray
    gt_boxes: np.ndarray
    gt_present: np.ndarray

    def __post_init__(self):
        for name, dtype in (
            ("pred_boxes", np.float64),
            ("confidences", np.float64),
            ("pred_present", bool),
            ("gt_boxes", np.float64),
            ("gt_present", bool),
        ):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=dtype))

        lengths = {
            len(self.pred_boxes),
            len(self.confidences),
            len(self.pred_present),
            len(self.gt_boxes),
            len(self.gt_present),
        }
        if len(lengths) != 1:
            raise EvaluationError("predictions and ground truth differ in length")
        if len(self) and (self.pred_boxes.shape[1:] != (4,) or self.gt_boxes.shape[1:] != (4,)):
            raise EvaluationError("boxes must be (x0, y0, w, h) rows")

    def __len__(self) -> int:
        return len(self.gt_present)

    @classmethod
    def from_rows(
        cls,
        rows: Sequence[ResultRow],
        annotations: Sequence[Tuple[int, Tuple[float, ...], bool]],
    ) -> EvalRecord:
        """Pair results-file rows with `(frame_index, box, present)` annotations."""
        if len(rows) != len(annotations):
            raise EvaluationError(
                "results and annotations differ in length", len(rows), len(annotations)
            )
        return cls(
            pred_boxes=np.array([row.box for row in rows]).reshape(-1, 4),
            confidences=[row.confidence for row in rows],
            pred_present=[row.present for row in rows],
            gt_boxes=np.array([box for _, box, _ in annotations]).reshape(-1, 4),
            gt_present=[present for _, _, present in annotations],
        )

    @classmethod
    def from_results(
        cls, results: Sequence[TrackResult], frames: Sequence[AnnotatedFrame]
    ) -> EvalRecord:
        """Build a record from in-memory results, rounded exactly like a results file."""
        if len(results) != len(frames):
            raise EvaluationError("results and frames differ in length", len(results), len(frames))

        annotations = []
        for index, frame in enumerate(frames):
            if frame.gt.present:
                box = tuple(round(v, 3) for v in frame.gt.box.to_pixels(frame.size))
                annotations.append((index, box, True))
            else:
                annotations.append((index, (0.0, 0.0, 0.0, 0.0), False))

        size = frames[0].size if frames else (1, 1)
        return cls.from_rows(to_rows(results, size), annotations)


def overlap_ratios(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """IoU of matching rows of two (T, 4) pixel box arrays; 0 where the union is empty."""
    boxes1 = np.asarray(boxes1, dtype=np.float64).reshape(-1, 4)
    boxes2 = np.asarray(boxes2, dtype=np.float64).reshape(-1, 4)

    left = np.maximum(boxes1[:, 0], boxes2[:, 0])
    top = np.maximum(boxes1[:, 1], boxes2[:, 1])
    right = np.minimum(boxes1[:, 0] + boxes1[:, 2], boxes2[:, 0] + boxes2[:, 2])
    bottom = np.minimum(boxes1[:, 1] + boxes1[:, 3], boxes2[:, 1] + boxes2[:, 3])

    intersection = np.clip(right - left, 0, None) * np.clip(bottom - top, 0, None)
    union = boxes1[:, 2] * boxes1[:, 3] + boxes2[:, 2] * boxes2[:, 3] - intersection
    return np.divide(intersection, union, out=np.zeros_like(union), where=union > 0)


def _centers(boxes: np.ndarray) -> np.ndarray:
    return boxes[:, :2] + boxes[:, 2:] / 2


def center_errors(pred_boxes: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """Euclidean center distance in pixels."""
    return np.linalg.norm(_centers(pred_boxes) - _centers(gt_boxes), axis=1)


def normalized_center_errors(pred_boxes: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """Center distance with each component divided by the gt width or height."""
    delta = (_centers(pred_boxes) - _centers(gt_boxes)) / gt_boxes[:, 2:]
    return np.linalg.norm(delta, axis=1)


def sequence_ope_metrics(record: EvalRecord) -> Optional[OpeMetrics]:
    """OPE metrics over the frames showing the target; None if there are none."""
    mask = record.gt_present
    if not mask.any():
        return None
    pred, gt = record.pred_boxes[mask], record.gt_boxes[mask]

    iou = overlap_ratios(pred, gt)
    success = (iou[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)

    precision = float((center_errors(pred, gt) < PRECISION_PIXELS).mean())

    normalized = normalized_center_errors(pred, gt)
    curve = (normalized[None, :] < NORMALIZED_PRECISION_THRESHOLDS[:, None]).mean(axis=1)
    return OpeMetrics(float(success.mean()), precision, float(curve.mean()))


def compute_ope_metrics(records: Sequence[EvalRecord]) -> OpeMetrics:
    """Success AUC, precision@20 and normalized precision, averaged over sequences."""
    per_sequence = [m for m in map(sequence_ope_metrics, records) if m is not None]
    if not per_sequence:
        raise EvaluationError("no frame shows the target")
    return OpeMetrics(*(float(v) for v in np.mean(np.array(per_sequence), axis=0)))


def _presence_hits(record: EvalRecord) -> Tuple[np.ndarray, np.ndarray]:
    """(thresholds, T) masks: frames reported present, and those of them hitting the target."""
    reported = record.pred_present[None, :] & (
        record.confidences[None, :] >= PRESENCE_THRESHOLDS[:, None]
    )
    iou = overlap_ratios(record.pred_boxes, record.gt_boxes)
    hits = record.gt_present & (iou > OVERLAP_THRESHOLD)
    return reported, reported & hits[None, :]


def _oxuva_curves(records: Sequence[EvalRecord]) -> Tuple[np.ndarray, np.ndarray]:
    tpr_curves, tnr_curves = [], []
    for record in records:
        reported, true_positive = _presence_hits(record)
        positives = record.gt_present.sum()
        negatives = (~record.gt_present).sum()
        if positives:
            tpr_curves.append(true_positive.sum(axis=1) / positives)
        if negatives:
            true_negative = ~reported & ~record.gt_present[None, :]
            tnr_curves.append(true_negative.sum(axis=1) / negatives)

    if not tpr_curves or not tnr_curves:
        raise EvaluationError(
            "the oxuva protocol needs frames with and frames without the target"
        )
    return np.mean(tpr_curves, axis=0), np.mean(tnr_curves, axis=0)


def _votlt_curves(records: Sequence[EvalRecord]) -> Tuple[np.ndarray, np.ndarray]:
    precision_sum = np.zeros(len(PRESENCE_THRESHOLDS))
    precision_count = np.zeros(len(PRESENCE_THRESHOLDS))
    recall_curves = []
    for record in records:
        reported, true_positive = _presence_hits(record)
        hits = true_positive.sum(axis=1)
        reported_count = reported.sum(axis=1)

        defined = reported_count > 0
        precision_sum[defined] += hits[defined] / reported_count[defined]
        precision_count += defined
        if record.gt_present.any():
            recall_curves.append(hits / record.gt_present.sum())

    if not recall_curves:
        raise EvaluationError("no frame shows the target")
    precision = np.divide(
        precision_sum,
        precision_count,
        out=np.zeros_like(precision_sum),
        where=precision_count > 0,
    )
    return precision, np.mean(recall_curves, axis=0)


def compute_presence_metrics(
    records: Sequence[EvalRecord], mode: str = "votlt"
) -> Union[OxuvaMetrics, VotltMetrics]:
    """
    Sweep the confidence threshold and report the best operating point.

    A frame counts as reported present at threshold t if the tracker flagged it present
    and its confidence is at least t. It is a true positive if it also overlaps the
    target with IoU > 0.5.
    """
    if not records:
        raise EvaluationError("no records to evaluate")

    if mode == "oxuva":
        tpr, tnr = _oxuva_curves(records)
        gm = np.sqrt(tpr * tnr)
        best = int(np.argmax(gm))
        return OxuvaMetrics(float(tpr[best]), float(tnr[best]), float(gm[best]))

    if mode == "votlt":
        precision, recall = _votlt_curves(records)
        total = precision + recall
        fscore = np.divide(
            2 * precision * recall, total, out=np.zeros_like(total), where=total > 0
        )
        best = int(np.argmax(fscore))
        return VotltMetrics(float(precision[best]), float(recall[best]), float(fscore[best]))

    raise EvaluationError(f"unknown presence protocol {mode!r}, expected 'oxuva' or 'votlt'")


def mean_iou_rate(records: Sequence[EvalRecord], threshold: float = OVERLAP_THRESHOLD) -> float:
    """Fraction of frames showing the target that are tracked with IoU above `threshold`."""
    rates = []
    for record in records:
        mask = record.gt_present
        if mask.any():
            iou = overlap_ratios(record.pred_boxes[mask], record.gt_boxes[mask])
            rates.append(float((iou > threshold).mean()))
    if not rates:
        raise EvaluationError("no frame shows the target")
    return float(np.mean(rates))


def reacquisition_rate(
    records: Sequence[EvalRecord], window: int = 5, threshold: float = OVERLAP_THRESHOLD
) -> float:
    """
    Fraction of sequences in which the target is found again after every reappearance.

    Found again means: reported present with IoU above `threshold` within `window`
    frames of the reappearance.
    """
    outcomes = []
    for record in records:
        present = record.gt_present
        reappearances = [t for t in range(1, len(record)) if present[t] and not present[t - 1]]
        if not reappearances:
            continue

        iou = overlap_ratios(record.pred_boxes, record.gt_boxes)
        found = present & record.pred_present & (iou > threshold)
        outcomes.append(all(found[t : t + window].any() for t in reappearances))

    if not outcomes:
        raise EvaluationError("no sequence has a reappearance")
    return float(np.mean(outcomes))


def to_rows(results: Sequence[TrackResult], size: Tuple[int, int]) -> List[ResultRow]:
    """Convert results to pixel rows with the precision of the results file."""
    rows = []
    for result in results:
        x0, y0, w, h = (round(v, 3) for v in result.box.to_pixels(size))
        rows.append(
            ResultRow(
                result.frame_index, x0, y0, w, h, round(result.confidence, 6), result.present
            )
        )
    return rows


def write_results(path: Union[str, Path], rows: Sequence[ResultRow]):
    """Write `frame_index,x0,y0,w,h,confidence,present` lines, one per frame."""
    lines = [
        f"{r.frame_index},{r.x0:.3f},{r.y0:.3f},{r.w:.3f},{r.h:.3f},"
        f"{r.confidence:.6f},{int(r.present)}"
        for r in rows
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_results(path: Union[str, Path]) -> List[ResultRow]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as error:
        raise EvaluationError("could not read results", str(path)) from error

    rows = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith(RESULTS_HEADER):
            continue
        try:
            index, x0, y0, w, h, confidence, present = line.split(",")
            rows.append(
                ResultRow(
                    int(index),
                    float(x0),
                    float(y0),
                    float(w),
                    float(h),
                    float(confidence),
                    present.strip() == "1",
                )
            )
        except ValueError as error:
            raise EvaluationError(f"malformed results line {number}", line) from error
    return rows


def render_overlay(
    frames: Sequence[AnnotatedFrame],
    rows: Sequence[ResultRow],
    directory: Union[str, Path],
    draw_gt: bool = True,
) -> List[Path]:
    """
    Draw predicted boxes (and ground truth boxes) onto the frames and save them as PNG.

    Predictions reported present are red, those reported absent are gray; ground truth is green.
    """
    if len(frames) != len(rows):
        raise EvaluationError("frames and results differ in length", len(frames), len(rows))

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    paths = []
    for frame, row in zip(frames, rows):
        image = Image.fromarray(frame.image)
        draw = ImageDraw.Draw(image)
        if draw_gt and frame.gt.present:
            x0, y0, w, h = frame.gt.box.to_pixels(frame.size)
            draw.rectangle([x0, y0, x0 + w, y0 + h], outline=(0, 200, 0), width=2)

        color = (220, 30, 30) if row.present else (128, 128, 128)
        draw.rectangle([row.x0, row.y0, row.x0 + row.w, row.y0 + row.h], outline=color, width=2)
        draw.text((4, 4), f"{row.frame_index} {row.confidence:.3f}", fill=color)

        path = directory / f"{row.frame_index:05d}.png"
        image.save(path)
        paths.append(path)

    logger.debug("rendered %d overlay frames into %s", len(paths), directory)
    return paths
