"""In-memory description of a video dataset and its frame-level annotations.

On-disk layout shared by all readers and writers::

    root/
      classes.txt                  one class name per line, in label order
      videos.txt                   "<video_id> <fps>" per line (optional, fps defaults to 30)
      images/<video_id>_<frame:06d>.png
      labels/<stem>.txt            YOLO
      annotations/<stem>.xml       Pascal VOC
      annotations.json             COCO

Every image stem follows ``<video_id>_<frame index>``; the frame index is the
position of the frame in its video and must run 0..T-1 without gaps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from ..datamodel import DEFAULT_CLASS_NAMES, Frame, GroundTruthInstance
from ..errors import ParseError, ValidationError

DEFAULT_FPS = 30.0
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class VideoRecord:
    video_id: str
    frame_paths: list[Path | None]
    fps: float = DEFAULT_FPS
    pixels: np.ndarray | None = None  # (T, H, W, 3) uint8 when held in memory

    @property
    def num_frames(self) -> int:
        if self.pixels is not None:
            return self.pixels.shape[0]
        return len(self.frame_paths)


@dataclass
class DatasetIndex:
    videos: list[VideoRecord]
    annotations: dict[tuple[str, int], list[GroundTruthInstance]] = field(default_factory=dict)
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES

    def __post_init__(self):
        self._by_id = {v.video_id: v for v in self.videos}
        if len(self._by_id) != len(self.videos):
            raise ValidationError("duplicate video ids")
        self._frame_cache: dict[tuple[str, int], Frame] = {}

    def video(self, video_id: str) -> VideoRecord:
        try:
            return self._by_id[video_id]
        except KeyError:
            raise ValidationError(f"unknown video {video_id!r}") from None

    def pixels(self, video_id: str, t: int) -> np.ndarray:
        """uint8 H x W x 3 pixels of one frame."""
        v = self.video(video_id)
        if not 0 <= t < v.num_frames:
            raise ValidationError(f"frame {t} outside video {video_id!r}")
        if v.pixels is not None:
            return v.pixels[t]
        with Image.open(v.frame_paths[t]) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)

    def frame(self, video_id: str, t: int) -> Frame:
        key = (video_id, t)
        f = self._frame_cache.get(key)
        if f is None:
            f = Frame(self.pixels(video_id, t).astype(np.float32) / 255.0, t, video_id)
            self._frame_cache[key] = f
        return f

    def clip(self, video_id: str) -> list[Frame]:
        return [self.frame(video_id, t) for t in range(self.video(video_id).num_frames)]

    def image_size(self, video_id: str, t: int = 0) -> tuple[int, int]:
        """(width, height) of a frame without decoding the pixels when possible."""
        v = self.video(video_id)
        if v.pixels is not None:
            return v.pixels.shape[2], v.pixels.shape[1]
        with Image.open(v.frame_paths[t]) as im:
            return im.size

    def ground_truth(self, video_id: str, t: int) -> list[GroundTruthInstance]:
        return self.annotations.get((video_id, t), [])

    def frame_keys(self) -> Iterable[tuple[str, int]]:
        for v in self.videos:
            for t in range(v.num_frames):
                yield (v.video_id, t)

    def class_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in self.class_names}
        for gts in self.annotations.values():
            for g in gts:
                counts[self.class_names[g.label]] += 1
        return counts

    def validate(self):
        for (vid, t), gts in self.annotations.items():
            if vid not in self._by_id or not 0 <= t < self._by_id[vid].num_frames:
                raise ValidationError(f"annotation for missing frame {vid}:{t}")
            for g in gts:
                if not 0 <= g.label < len(self.class_names):
                    raise ValidationError(f"label {g.label} outside class set at {vid}:{t}")


def frame_stem(video_id: str, t: int) -> str:
    return f"{video_id}_{t:06d}"


def parse_stem(stem: str, path=None) -> tuple[str, int]:
    vid, sep, idx = stem.rpartition("_")
    if not sep or not vid or not idx.isdigit():
        raise ParseError(f"image name {stem!r} does not follow <video_id>_<frame index>", path)
    return vid, int(idx)


def read_class_names(root: Path) -> tuple[str, ...]:
    path = Path(root) / "classes.txt"
    if not path.exists():
        return DEFAULT_CLASS_NAMES
    names = tuple(line.strip() for line in path.read_text().splitlines() if line.strip())
    if not names:
        raise ParseError("empty class list", path)
    return names


def read_fps_table(root: Path) -> dict[str, float]:
    path = Path(root) / "videos.txt"
    table: dict[str, float] = {}
    if not path.exists():
        return table
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            vid, fps = parts[0], float(parts[1])
        except (IndexError, ValueError):
            raise ParseError("expected '<video_id> <fps>'", path, lineno) from None
        if fps <= 0:
            raise ValidationError(f"{path}:{lineno}: fps must be positive")
        table[vid] = fps
    return table


def group_frames(paths: Iterable[Path], fps_table: dict[str, float]) -> list[VideoRecord]:
    """Group image paths into videos by the stem convention."""
    frames: dict[str, dict[int, Path]] = {}
    for p in paths:
        vid, t = parse_stem(p.stem, p)
        frames.setdefault(vid, {})[t] = p
    videos = []
    for vid in sorted(frames):
        by_t = frames[vid]
        if sorted(by_t) != list(range(len(by_t))):
            raise ValidationError(f"video {vid!r} frame indices are not contiguous from 0")
        videos.append(VideoRecord(vid, [by_t[t] for t in range(len(by_t))], fps_table.get(vid, DEFAULT_FPS)))
    return videos


def list_images(root: Path) -> list[Path]:
    img_dir = Path(root) / "images"
    if not img_dir.is_dir():
        raise ValidationError(f"missing image directory {img_dir}")
    return sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def write_common(index: DatasetIndex, root) -> Path:
    """Write images, classes.txt and videos.txt; returns the root path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("".join(f"{n}\n" for n in index.class_names))
    (root / "videos.txt").write_text("".join(f"{v.video_id} {v.fps!r}\n" for v in index.videos))
    for vid, t in index.frame_keys():
        path = root / "images" / f"{frame_stem(vid, t)}.png"
        Image.fromarray(index.pixels(vid, t)).save(path)
    return root
