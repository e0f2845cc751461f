"""
Labeled synthetic sequences: a textured target moving over a noisy background.

The target may disappear behind an occluder or leave the view for a bounded number
of frames and reappear somewhere else. Distractors share the target shape and have
a perturbed target color.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

from .config import WorldConfig
from .data import AnnotatedFrame, BBox, GroundTruth
from .exceptions import ValidationError

logger = logging.getLogger(__name__)

GROUNDTRUTH_FILE = "groundtruth.txt"
IMAGE_PATTERN = "{:05d}.png"

PixelBox = Tuple[int, int, int, int]
"""Pixel (x0, y0, w, h)."""

Color = Tuple[int, int, int]

_OCCLUDER_MARGIN = 4
_PLACEMENT_ATTEMPTS = 100


@dataclass(frozen=True)
class Sprite:
    """A filled shape drawn into a frame."""

    box: PixelBox
    shape: str
    """"ellipse" or "rectangle"."""

    color: Color


@dataclass(frozen=True)
class SceneState:
    """Everything needed to rasterize one frame."""

    size: Tuple[int, int]
    """(width, height)"""

    background: Color
    texture_noise: float
    texture_seed: int
    target: Optional[Sprite] = None
    """The target, None while it is out of view."""

    occluder: Optional[Sprite] = None
    distractors: Tuple[Sprite, ...] = ()


@dataclass
class _Walker:
    """Smooth random walk of a box center inside the frame."""

    cx: float
    cy: float
    heading: float
    speed: float

    def step(self, rng: np.random.Generator, turn_noise: float, bounds: Tuple[float, ...]):
        x_min, y_min, x_max, y_max = bounds
        self.heading += rng.normal(0.0, turn_noise)
        self.cx += self.speed * math.cos(self.heading)
        self.cy += self.speed * math.sin(self.heading)

        # bounce off the frame border
        if not x_min <= self.cx <= x_max:
            self.cx = min(max(self.cx, x_min), x_max)
            self.heading = math.pi - self.heading
        if not y_min <= self.cy <= y_max:
            self.cy = min(max(self.cy, y_min), y_max)
            self.heading = -self.heading


def _center_bounds(size: Tuple[int, int], w: int, h: int) -> Tuple[float, float, float, float]:
    width, height = size
    return w / 2, h / 2, width - w / 2, height - h / 2


def _pixel_box(cx: float, cy: float, w: int, h: int, size: Tuple[int, int]) -> PixelBox:
    width, height = size
    x0 = min(max(int(round(cx - w / 2)), 0), width - w)
    y0 = min(max(int(round(cy - h / 2)), 0), height - h)
    return x0, y0, w, h


def _step_aside(
    walker: _Walker, target_box: PixelBox, bounds: Tuple[float, ...], size: Tuple[int, int]
) -> PixelBox:
    """Move a distractor that covers the target by one box size, along x first, then y."""
    x_min, y_min, x_max, y_max = bounds
    _, _, w, h = target_box
    for dx, dy in ((w, 0), (-w, 0), (0, h), (0, -h), (w, h), (-w, -h), (w, -h), (-w, h)):
        cx, cy = walker.cx + dx, walker.cy + dy
        if not (x_min <= cx <= x_max and y_min <= cy <= y_max):
            continue
        box = _pixel_box(cx, cy, w, h, size)
        if box[:2] != target_box[:2]:
            walker.cx, walker.cy = cx, cy
            return box

    # frames barely larger than the box: take the farthest corner
    walker.cx = x_min if walker.cx - x_min > x_max - walker.cx else x_max
    walker.cy = y_min if walker.cy - y_min > y_max - walker.cy else y_max
    return _pixel_box(walker.cx, walker.cy, w, h, size)


def _box_center(box: PixelBox) -> Tuple[float, float]:
    x0, y0, w, h = box
    return x0 + w / 2, y0 + h / 2


def _absence_schedule(cfg: WorldConfig, rng: np.random.Generator) -> List[Optional[str]]:
    """Per frame: None if the target is present, otherwise "occlusion" or "out_of_view"."""
    length = cfg.sequence_length
    events: List[Optional[str]] = [None] * length

    for start, duration in cfg.scripted_events:
        if start < 1 or duration < 1 or start + duration > length - 1:
            raise ValidationError(
                "scripted absence must start after frame 0 and end before the last frame",
                (start, duration),
            )
        for t in range(start, start + duration):
            events[t] = "out_of_view"

    event_prob = cfg.occlusion_prob + cfg.out_of_view_prob
    t = 2
    while t < length - 1:
        if events[t] is not None or events[t - 1] is not None:
            t += 1
            continue
        draw = rng.random()
        if draw >= min(event_prob, 1.0):
            t += 1
            continue

        share = cfg.occlusion_prob / event_prob
        kind = "occlusion" if draw < share * min(event_prob, 1.0) else "out_of_view"
        duration = int(rng.integers(cfg.absent_min, cfg.absent_max + 1))
        end = t
        # stop before another absence and keep a present frame at the end
        while end < min(t + duration, length - 1) and events[end] is None:
            end += 1
        if end < length - 1 and events[end] is not None:
            end -= 1
        for i in range(t, end):
            events[i] = kind
        t = end + 1

    return events


def _reinsert(
    previous: Tuple[float, float],
    w: int,
    h: int,
    cfg: WorldConfig,
    rng: np.random.Generator,
) -> Tuple[float, float]:
    """A new target center at least `reappear_min_displacement` away from `previous`."""
    x_min, y_min, x_max, y_max = _center_bounds(cfg.size, w, h)
    for _ in range(_PLACEMENT_ATTEMPTS):
        point = (rng.uniform(x_min, x_max), rng.uniform(y_min, y_max))
        if math.dist(point, previous) >= cfg.reappear_min_displacement:
            return point

    # the farthest point of the feasible rectangle is one of its corners
    corners = [(x, y) for x in (x_min, x_max) for y in (y_min, y_max)]
    farthest = max(corners, key=lambda corner: math.dist(corner, previous))
    if math.dist(farthest, previous) < cfg.reappear_min_displacement:
        logger.warning("frame too small for the requested reappearance displacement")
    return farthest


def _distractor_color(target: Color, cfg: WorldConfig, rng: np.random.Generator) -> Color:
    other = rng.integers(0, 256, size=3)
    similarity = cfg.distractor_similarity
    mixed = similarity * np.asarray(target) + (1 - similarity) * other
    mixed = np.clip(np.round(mixed + rng.normal(0.0, 8.0, size=3)), 0, 255).astype(int)
    if tuple(mixed) == tuple(target):
        mixed[0] = (mixed[0] + 24) % 256
    return int(mixed[0]), int(mixed[1]), int(mixed[2])


def generate_sequence(cfg: WorldConfig) -> List[AnnotatedFrame]:
    """Generate `cfg.sequence_length` annotated frames; a pure function of `cfg`."""
    width, height = cfg.size
    if not 1 <= cfg.target_min_size <= cfg.target_max_size:
        raise ValidationError("target size bounds must satisfy 1 <= min <= max")
    if cfg.target_max_size >= min(width, height):
        raise ValidationError("target does not fit into the frame", cfg.target_max_size, cfg.size)

    rng = np.random.default_rng(cfg.world_seed)
    w = int(rng.integers(cfg.target_min_size, cfg.target_max_size + 1))
    h = int(rng.integers(cfg.target_min_size, cfg.target_max_size + 1))
    shape = cfg.target_shape
    if shape == "random":
        shape = ("ellipse", "rectangle")[int(rng.integers(2))]
    color = tuple(int(v) for v in rng.integers(40, 216, size=3))
    # every background channel stays far from the target channel
    shifts = rng.integers(96, 161, size=3)
    background = tuple(int(c + shift) % 256 for c, shift in zip(color, shifts))
    texture_seed = int(rng.integers(2**31))

    bounds = _center_bounds(cfg.size, w, h)
    speed_range = (0.3 * cfg.velocity_max, cfg.velocity_max)

    def new_walker(center: Optional[Tuple[float, float]] = None) -> _Walker:
        if center is None:
            center = (rng.uniform(bounds[0], bounds[2]), rng.uniform(bounds[1], bounds[3]))
        return _Walker(*center, rng.uniform(0, 2 * math.pi), rng.uniform(*speed_range))

    target = new_walker()
    distractors = [
        (new_walker(), _distractor_color(color, cfg, rng)) for _ in range(cfg.num_distractors)
    ]
    events = _absence_schedule(cfg, rng)

    frames = []
    last_box: Optional[PixelBox] = None
    for t, event in enumerate(events):
        if t > 0:
            if event is None and events[t - 1] is not None:
                target = new_walker(_reinsert(_box_center(last_box), w, h, cfg, rng))
            elif event is None:
                target.step(rng, cfg.turn_noise, bounds)
        for walker, _ in distractors:
            walker.step(rng, cfg.turn_noise, bounds)

        box = _pixel_box(target.cx, target.cy, w, h, cfg.size)
        occluder = None
        if event is None:
            last_box = box
        elif event == "occlusion":
            box = last_box
            occluder = Sprite(
                _occluder_box(last_box, cfg.size), "rectangle", _occluder_color(background)
            )

        distractor_sprites = []
        for walker, distractor_color in distractors:
            d_box = _pixel_box(walker.cx, walker.cy, w, h, cfg.size)
            if event is None and d_box[:2] == box[:2]:
                d_box = _step_aside(walker, box, bounds, cfg.size)
            distractor_sprites.append(Sprite(d_box, shape, distractor_color))

        scene = SceneState(
            size=cfg.size,
            background=background,
            texture_noise=cfg.texture_noise,
            texture_seed=texture_seed + t,
            target=None if event == "out_of_view" else Sprite(box, shape, color),
            occluder=occluder,
            distractors=tuple(distractor_sprites),
        )
        if event is None:
            gt = GroundTruth(BBox.from_pixels(*box, size=cfg.size))
        else:
            gt = GroundTruth.absent()
        frames.append(AnnotatedFrame(render_frame(scene), gt))

    logger.debug(
        "generated %d frames (%d absent) with seed %d",
        len(frames),
        sum(event is not None for event in events),
        cfg.world_seed,
    )
    return frames


def _occluder_box(box: PixelBox, size: Tuple[int, int]) -> PixelBox:
    width, height = size
    x0, y0, w, h = box
    left, top = max(x0 - _OCCLUDER_MARGIN, 0), max(y0 - _OCCLUDER_MARGIN, 0)
    right = min(x0 + w + _OCCLUDER_MARGIN, width)
    bottom = min(y0 + h + _OCCLUDER_MARGIN, height)
    return left, top, right - left, bottom - top


def _occluder_color(background: Color) -> Color:
    return tuple(255 - c for c in background)


def render_frame(scene: SceneState) -> np.ndarray:
    """Rasterize background texture, distractors, target and occluder, in that order."""
    width, height = scene.size
    rng = np.random.default_rng(scene.texture_seed)
    image = np.empty((height, width, 3), dtype=np.float64)
    image[:] = scene.background
    if scene.texture_noise > 0:
        image += rng.normal(0.0, scene.texture_noise, size=image.shape)

    sprites = [*scene.distractors, scene.target, scene.occluder]
    for sprite in sprites:
        if sprite is not None:
            _paint(image, sprite, scene.texture_noise / 2, rng)

    return np.clip(np.round(image), 0, 255).astype(np.uint8)


def _paint(image: np.ndarray, sprite: Sprite, noise: float, rng: np.random.Generator):
    height, width = image.shape[:2]
    mask = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(mask)

    x0, y0, w, h = sprite.box
    outline = [x0, y0, x0 + w - 1, y0 + h - 1]
    if sprite.shape == "ellipse":
        draw.ellipse(outline, fill=255)
    else:
        draw.rectangle(outline, fill=255)

    covered = np.asarray(mask) > 0
    image[covered] = sprite.color
    if noise > 0:
        image[covered] += rng.normal(0.0, noise, size=(int(covered.sum()), 3))


def generate_dataset(
    cfg: WorldConfig, count: int, prefix: str = "seq"
) -> Dict[str, List[AnnotatedFrame]]:
    """`count` sequences whose seeds are drawn from `cfg.world_seed`."""
    seeds = np.random.default_rng(cfg.world_seed).integers(2**31, size=count)
    return {
        f"{prefix}-{i:03d}": generate_sequence(dataclasses.replace(cfg, world_seed=int(seed)))
        for i, seed in enumerate(seeds)
    }


def write_dataset(sequences: Mapping[str, Sequence[AnnotatedFrame]], root: Union[str, Path]):
    """
    Write one directory per sequence holding numbered PNG frames and a `groundtruth.txt`
    with lines `frame_index,x0,y0,w,h,present` in pixels. Absent frames carry a zero box.
    """
    root = Path(root)
    for name, frames in sequences.items():
        directory = root / name
        directory.mkdir(parents=True, exist_ok=True)

        lines = []
        for index, frame in enumerate(frames):
            Image.fromarray(frame.image).save(directory / IMAGE_PATTERN.format(index))
            if frame.gt.present:
                x0, y0, w, h = frame.gt.box.to_pixels(frame.size)
                lines.append(f"{index},{x0:.3f},{y0:.3f},{w:.3f},{h:.3f},1")
            else:
                lines.append(f"{index},0.000,0.000,0.000,0.000,0")
        (directory / GROUNDTRUTH_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")

    logger.info("wrote %d sequence(s) to %s", len(sequences), root)


def read_annotations(path: Union[str, Path]) -> List[Tuple[int, Tuple[float, ...], bool]]:
    """Parse a `groundtruth.txt` into (frame_index, pixel box, present) tuples."""
    rows = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as error:
        raise ValidationError("could not read annotations", str(path)) from error

    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            index, x0, y0, w, h, present = line.split(",")
            box = (float(x0), float(y0), float(w), float(h))
            rows.append((int(index), box, present.strip() == "1"))
        except ValueError as error:
            raise ValidationError(f"malformed annotation in line {number}", line) from error
    return rows


def read_sequence(directory: Union[str, Path]) -> List[AnnotatedFrame]:
    """Load a sequence directory written by write_dataset."""
    directory = Path(directory)
    frames = []
    for index, box, present in read_annotations(directory / GROUNDTRUTH_FILE):
        with Image.open(directory / IMAGE_PATTERN.format(index)) as image:
            pixels = np.array(image.convert("RGB"))
        size = (pixels.shape[1], pixels.shape[0])
        gt = GroundTruth(BBox.from_pixels(*box, size=size)) if present else GroundTruth.absent()
        frames.append(AnnotatedFrame(pixels, gt))
    return frames


def read_dataset(root: Union[str, Path]) -> Dict[str, List[AnnotatedFrame]]:
    """Load every sequence directory below `root`, ordered by name."""
    root = Path(root)
    if not root.is_dir():
        raise ValidationError("dataset directory does not exist", str(root))
    return {
        directory.name: read_sequence(directory)
        for directory in sorted(root.iterdir())
        if (directory / GROUNDTRUTH_FILE).is_file()
    }


def augment_sequence(
    frames: Sequence[AnnotatedFrame], rng: np.random.Generator
) -> List[AnnotatedFrame]:
    """Apply one random horizontal flip and per-channel color jitter to all frames alike."""
    flip = bool(rng.random() < 0.5)
    gain = rng.uniform(0.8, 1.2, size=3)
    offset = rng.uniform(-10.0, 10.0, size=3)

    augmented = []
    for frame in frames:
        image = frame.image[:, ::-1] if flip else frame.image
        image = np.clip(np.round(image * gain + offset), 0, 255).astype(np.uint8)

        gt = frame.gt
        if flip and gt.present:
            gt = GroundTruth(dataclasses.replace(gt.box, cx=1.0 - gt.box.cx))
        augmented.append(AnnotatedFrame(image, gt))
    return augmented
