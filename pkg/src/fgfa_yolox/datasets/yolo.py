"""YOLO text annotations: one ``labels/<stem>.txt`` per frame, lines
``class cx cy w h`` with coordinates normalised by the image size."""

from __future__ import annotations

from pathlib import Path

from ..datamodel import BoundingBox, GroundTruthInstance
from ..errors import InvalidBox, ParseError, ValidationError
from .index import (DatasetIndex, frame_stem, group_frames, list_images, read_class_names,
                    read_fps_table, write_common)


def parse_yolo_line(line: str, width: int, height: int, num_classes: int, path=None, lineno=None):
    parts = line.split()
    if len(parts) != 5:
        raise ParseError(f"expected 5 fields, got {len(parts)}", path, lineno)
    try:
        label = int(parts[0])
        cx, cy, w, h = (float(p) for p in parts[1:])
    except ValueError:
        raise ParseError(f"non-numeric field in {line.strip()!r}", path, lineno) from None
    if not 0 <= label < num_classes:
        raise ValidationError(f"{path}:{lineno}: class {label} outside 0..{num_classes - 1}")
    for name, v in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"{path}:{lineno}: normalised {name}={v} outside [0, 1]")
    x_min = max(0.0, (cx - w / 2) * width)
    y_min = max(0.0, (cy - h / 2) * height)
    x_max = min(float(width), (cx + w / 2) * width)
    y_max = min(float(height), (cy + h / 2) * height)
    try:
        box = BoundingBox(x_min, y_min, x_max, y_max)
    except InvalidBox as exc:
        raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return box, label


def load_yolo(root) -> DatasetIndex:
    root = Path(root)
    class_names = read_class_names(root)
    videos = group_frames(list_images(root), read_fps_table(root))
    index = DatasetIndex(videos, {}, class_names)
    for v in videos:
        for t in range(v.num_frames):
            label_path = root / "labels" / f"{frame_stem(v.video_id, t)}.txt"
            if not label_path.exists():
                continue
            width, height = index.image_size(v.video_id, t)
            gts = []
            for lineno, line in enumerate(label_path.read_text().splitlines(), 1):
                if not line.strip():
                    continue
                box, label = parse_yolo_line(line, width, height, len(class_names), label_path, lineno)
                gts.append(GroundTruthInstance(box, label, (v.video_id, t)))
            if gts:
                index.annotations[(v.video_id, t)] = gts
    return index


def write_yolo(index: DatasetIndex, root) -> Path:
    root = write_common(index, root)
    (root / "labels").mkdir(exist_ok=True)
    for vid, t in index.frame_keys():
        width, height = index.image_size(vid, t)
        lines = []
        for g in index.ground_truth(vid, t):
            cx, cy = g.box.center
            vals = (cx / width, cy / height, g.box.width / width, g.box.height / height)
            lines.append(f"{g.label} " + " ".join(format(v, ".10g") for v in vals) + "\n")
        (root / "labels" / f"{frame_stem(vid, t)}.txt").write_text("".join(lines))
    return root
