"""Aspect-preserving resize with symmetric gray padding to a fixed input size."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from ..datamodel import BoundingBox, Frame

PAD_VALUE = 114.0 / 255.0


@dataclass(frozen=True)
class LetterboxTransform:
    scale: float
    pad_x: int
    pad_y: int
    target_size: tuple[int, int]  # (width, height)

    def forward_box(self, box: BoundingBox) -> BoundingBox:
        s = self.scale
        return BoundingBox(box.x_min * s + self.pad_x, box.y_min * s + self.pad_y,
                           box.x_max * s + self.pad_x, box.y_max * s + self.pad_y)

    def inverse_box(self, box: BoundingBox, clip_to: tuple[int, int] | None = None) -> BoundingBox | None:
        """Map a letterboxed box back; with ``clip_to=(w, h)`` returns None if nothing is left."""
        s = self.scale
        x0 = (box.x_min - self.pad_x) / s
        y0 = (box.y_min - self.pad_y) / s
        x1 = (box.x_max - self.pad_x) / s
        y1 = (box.y_max - self.pad_y) / s
        if clip_to is not None:
            w, h = clip_to
            x0, x1 = min(max(x0, 0.0), w), min(max(x1, 0.0), w)
            y0, y1 = min(max(y0, 0.0), h), min(max(y1, 0.0), h)
            if not (x0 < x1 and y0 < y1):
                return None
        return BoundingBox(x0, y0, x1, y1)


def letterbox_params(width: int, height: int, target: tuple[int, int]) -> tuple[LetterboxTransform, int, int]:
    tw, th = target
    scale = min(tw / width, th / height)
    new_w = min(tw, int(round(width * scale)))
    new_h = min(th, int(round(height * scale)))
    return LetterboxTransform(scale, (tw - new_w) // 2, (th - new_h) // 2, (tw, th)), new_w, new_h


def letterbox(frame: Frame, target: tuple[int, int]) -> tuple[Frame, LetterboxTransform]:
    transform, new_w, new_h = letterbox_params(frame.width, frame.height, target)
    tw, th = target
    if (new_w, new_h) == (frame.width, frame.height) and (tw, th) == (new_w, new_h):
        return frame, transform
    resized = frame.image
    if (new_w, new_h) != (frame.width, frame.height):
        resized = cv2.resize(np.ascontiguousarray(frame.image), (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    canvas = np.full((th, tw, 3), PAD_VALUE, dtype=np.float32)
    canvas[transform.pad_y:transform.pad_y + new_h, transform.pad_x:transform.pad_x + new_w] = resized
    np.clip(canvas, 0.0, 1.0, out=canvas)
    return Frame(canvas, frame.timestamp_index, frame.source_video_id), transform
