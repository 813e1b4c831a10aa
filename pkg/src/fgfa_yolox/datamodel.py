"""Value types for frames, windows, boxes and detections."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidBox, InvalidClip, InvalidConfig, InvalidInputShape

DEFAULT_CLASS_NAMES = ("bicycle", "skateboard", "e-scooter")


@dataclass(frozen=True, eq=False)
class Frame:
    """One RGB video frame, ``image`` is H x W x 3 float32 in [0, 1]."""

    image: np.ndarray
    timestamp_index: int = 0
    source_video_id: str = ""

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float32)
        if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] <= 0 or img.shape[1] <= 0:
            raise InvalidInputShape(f"frame image must be HxWx3, got {img.shape}")
        if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
            raise InvalidInputShape("frame pixels must be finite and within [0, 1]")
        if self.timestamp_index < 0:
            raise InvalidClip("timestamp_index must be >= 0")
        if img is self.image:
            img = img.view()
        img.flags.writeable = False
        object.__setattr__(self, "image", img)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class FrameWindow:
    frames: tuple[Frame, ...]
    center_index: int
    context_radius: int

    def __post_init__(self):
        if len(self.frames) != 2 * self.context_radius + 1:
            raise InvalidClip("window length must be 2N+1")
        if self.center_index != self.context_radius:
            raise InvalidClip("center_index must point at the middle frame")
        shapes = {f.image.shape for f in self.frames}
        if len(shapes) != 1:
            raise InvalidInputShape(f"window frames differ in size: {sorted(shapes)}")

    @property
    def current(self) -> Frame:
        return self.frames[self.center_index]

    @property
    def neighbours(self) -> list[Frame]:
        return [f for i, f in enumerate(self.frames) if i != self.center_index]


@dataclass(frozen=True)
class BoundingBox:
    """Corner-form box in absolute pixels."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBox(f"non-finite box {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidBox(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BoundingBox":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    label: int
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise InvalidConfig(f"score {self.score} outside [0, 1]")
        if self.label < 0:
            raise InvalidConfig(f"negative label {self.label}")


@dataclass(frozen=True)
class GroundTruthInstance:
    box: BoundingBox
    label: int
    frame_ref: tuple[str, int] = field(default=("", 0))


def make_window(clip: Sequence[Frame], t: int, context_radius: int) -> FrameWindow:
    """Window of ``2N+1`` frames centred on ``clip[t]``; edges repeat the first/last frame."""
    if len(clip) == 0:
        raise InvalidClip("empty clip")
    if context_radius < 0:
        raise InvalidConfig("context radius must be >= 0")
    if not 0 <= t < len(clip):
        raise InvalidClip(f"t={t} outside clip of length {len(clip)}")
    last = len(clip) - 1
    frames = tuple(clip[min(max(i, 0), last)] for i in range(t - context_radius, t + context_radius + 1))
    return FrameWindow(frames=frames, center_index=context_radius, context_radius=context_radius)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    for box in (a, b):
        if not isinstance(box, BoundingBox):
            raise InvalidBox(f"expected BoundingBox, got {type(box).__name__}")
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two (n, 4) / (m, 4) corner-form arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.minimum(out, 1.0)
