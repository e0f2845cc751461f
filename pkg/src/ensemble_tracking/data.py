"""Data classes representing boxes, predictions and annotated frames."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np
import torch

from .exceptions import ValidationError

_FRAME_TOLERANCE = 1e-9


def _require_finite(name: str, *values: float):
    if not all(math.isfinite(value) for value in values):
        raise ValidationError(f"{name} has non-finite components", values)


class BoxFormat(str, Enum):
    """Direction of a box conversion."""

    CENTER_TO_CORNERS = "center_to_corners"
    CORNERS_TO_CENTER = "corners_to_center"


@dataclass(frozen=True)
class Point2:
    """A point in normalized image coordinates."""

    x: float
    y: float

    def __post_init__(self):
        _require_finite("Point2", self.x, self.y)

    def as_tuple(self) -> Tuple[float, float]:
        return self.x, self.y

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.tensor([self.x, self.y], dtype=dtype)


@dataclass(frozen=True)
class BBox:
    """
    Axis-aligned box in center form, normalized to the image size.

    Centers are clamped to the frame and extents to at most the full frame on construction.
    Zero or negative extents are rejected.
    """

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        _require_finite("BBox", self.cx, self.cy, self.w, self.h)
        if self.w <= 0 or self.h <= 0:
            raise ValidationError("box has zero extent", (self.w, self.h))

        object.__setattr__(self, "cx", min(max(float(self.cx), 0.0), 1.0))
        object.__setattr__(self, "cy", min(max(float(self.cy), 0.0), 1.0))
        object.__setattr__(self, "w", min(float(self.w), 1.0))
        object.__setattr__(self, "h", min(float(self.h), 1.0))

    @property
    def corners(self) -> Tuple[float, float, float, float]:
        """(x0, y0, x1, y1)"""
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return self.cx, self.cy, self.w, self.h

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.tensor(self.as_tuple(), dtype=dtype)

    @classmethod
    def from_tensor(cls, values: torch.Tensor) -> BBox:
        cx, cy, w, h = (float(v) for v in values.detach().reshape(4).tolist())
        return cls(cx, cy, w, h)

    @classmethod
    def from_pixels(cls, x0: float, y0: float, w: float, h: float, size: Tuple[int, int]) -> BBox:
        """Build a box from pixel (x0, y0, w, h) and an image size (width, height)."""
        width, height = size
        return cls((x0 + w / 2) / width, (y0 + h / 2) / height, w / width, h / height)

    def to_pixels(self, size: Tuple[int, int]) -> Tuple[float, float, float, float]:
        """Return pixel (x0, y0, w, h) for an image size (width, height)."""
        width, height = size
        x0, y0, _, _ = self.corners
        return x0 * width, y0 * height, self.w * width, self.h * height

    def inside_frame(self) -> bool:
        x0, y0, x1, y1 = self.corners
        return (
            x0 >= -_FRAME_TOLERANCE
            and y0 >= -_FRAME_TOLERANCE
            and x1 <= 1 + _FRAME_TOLERANCE
            and y1 <= 1 + _FRAME_TOLERANCE
        )


@dataclass(frozen=True)
class CornerBox:
    """Axis-aligned box in corner form (x0, y0, x1, y1), normalized to the image size."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        _require_finite("CornerBox", self.x0, self.y0, self.x1, self.y1)
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValidationError("corners are not ordered", self.as_tuple())

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return self.x0, self.y0, self.x1, self.y1


@dataclass(frozen=True)
class GroundTruth:
    """Annotation of one frame: the target box if the target is present."""

    box: Optional[BBox] = None
    """Ground truth box, given iff `present` is set."""

    present: bool = True

    def __post_init__(self):
        if (self.box is not None) != self.present:
            raise ValidationError("box must be given iff the target is present")

    @property
    def center(self) -> Optional[Point2]:
        """Ground truth box center, used as the reference regularization target."""
        if self.box is None:
            return None
        return Point2(self.box.cx, self.box.cy)

    @classmethod
    def absent(cls) -> GroundTruth:
        return cls(None, False)


@dataclass(frozen=True)
class Candidate:
    """Prediction of a single local tracker on one frame."""

    tracker_id: int
    score: float
    """Foreground classification score."""

    box: BBox
    confidence: float
    """Score multiplied by the clamped cosine similarity to the template."""

    embedding: Optional[torch.Tensor] = field(default=None, compare=False, repr=False)
    """Target embedding produced by the local tracker."""

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError("score outside [0, 1]", self.score)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError("confidence outside [0, 1]", self.confidence)


@dataclass(frozen=True)
class Assignment:
    """Index of the tracker matched with the ground truth on one frame (None if absent)."""

    index: Optional[int] = None


@dataclass(frozen=True)
class TrackResult:
    """Per-frame output of a tracking session."""

    frame_index: int
    box: BBox
    confidence: float
    present: bool


@dataclass(frozen=True)
class AnnotatedFrame:
    """An 8-bit RGB image together with its ground truth."""

    image: np.ndarray = field(repr=False)
    gt: GroundTruth

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError("expected an HxWx3 image", self.image.shape)
        if self.gt.box is not None and not self.gt.box.inside_frame():
            raise ValidationError("ground truth box leaves the frame", self.gt.box)

    @property
    def size(self) -> Tuple[int, int]:
        """(width, height)"""
        return self.image.shape[1], self.image.shape[0]


@dataclass(frozen=True)
class FeatureMap:
    """Spatial features laid out as (..., H, W, c) with the stride of one cell in pixels."""

    values: torch.Tensor = field(repr=False)
    stride: int

    def __post_init__(self):
        if self.values.ndim < 3:
            shape = tuple(self.values.shape)
            raise ValidationError("feature map needs (H, W, c) dimensions", shape)
        if self.channels <= 0 or self.height <= 0 or self.width <= 0:
            raise ValidationError("feature map is empty", tuple(self.values.shape))

    @property
    def height(self) -> int:
        return self.values.shape[-3]

    @property
    def width(self) -> int:
        return self.values.shape[-2]

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    def tokens(self) -> torch.Tensor:
        """Flatten to (..., H*W, c) in row-major order."""
        return self.values.flatten(-3, -2)


@dataclass(frozen=True)
class TemplateBundle:
    """The first-frame target crop and its encoded representatives."""

    image: np.ndarray = field(repr=False)
    """128x128 RGB crop, target centered and covering a quarter of its area."""

    target_box: BBox
    """Target box inside the crop."""

    features: Optional[FeatureMap] = field(default=None, repr=False)
    """Reduced template feature map."""

    vector: Optional[torch.Tensor] = field(default=None, repr=False)
    """Pooled, unit-norm template vector used for the cosine similarity."""
