"""Temporal subsampling of current frames and window construction."""

from __future__ import annotations

import math
from typing import Iterator

from ..datamodel import FrameWindow, GroundTruthInstance, make_window
from ..errors import InvalidConfig
from .index import DatasetIndex


def sampling_stride(native_fps: float, target_fps: float) -> int:
    if target_fps <= 0:
        raise InvalidConfig("target_fps must be positive")
    return max(1, int(math.floor(native_fps / target_fps + 0.5)))


def sample_positions(index: DatasetIndex, target_fps: float) -> list[tuple[str, int]]:
    """(video_id, t) of every current frame kept by the subsampling."""
    out = []
    for v in index.videos:
        stride = sampling_stride(v.fps, target_fps)
        out.extend((v.video_id, t) for t in range(0, v.num_frames, stride))
    return out


def sample_clips(index: DatasetIndex, target_fps: float, context_radius: int
                 ) -> Iterator[tuple[FrameWindow, list[GroundTruthInstance]]]:
    """Windows around subsampled current frames; context frames come at the native rate."""
    if context_radius < 0:
        raise InvalidConfig("context radius must be >= 0")
    positions = sample_positions(index, target_fps)
    clips: dict[str, list] = {}
    for vid, t in positions:
        if vid not in clips:
            clips = {vid: index.clip(vid)}
        yield make_window(clips[vid], t, context_radius), list(index.ground_truth(vid, t))
