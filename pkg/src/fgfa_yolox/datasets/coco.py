"""COCO json annotations.

``images[].file_name`` stems follow ``<video_id>_<frame index>``; that is how
image ids are mapped back to video frames.  An optional top-level ``videos``
list (``{"name", "fps"}``) carries frame rates.  Category ids are mapped to
labels by their position in ``categories`` sorted by id.
"""

from __future__ import annotations

import json
from pathlib import Path

from ..datamodel import BoundingBox, GroundTruthInstance
from ..errors import InvalidBox, ParseError, ValidationError
from .index import DEFAULT_FPS, DatasetIndex, VideoRecord, frame_stem, parse_stem, write_common


def _require(obj, key, path, what):
    try:
        return obj[key]
    except (KeyError, TypeError):
        raise ParseError(f"{what} lacks required key {key!r}", path) from None


def load_coco(json_path) -> DatasetIndex:
    json_path = Path(json_path)
    try:
        data = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid json: {exc}", json_path) from None
    images = _require(data, "images", json_path, "container")
    anns = _require(data, "annotations", json_path, "container")
    cats = _require(data, "categories", json_path, "container")
    cats = sorted(cats, key=lambda c: _require(c, "id", json_path, "category"))
    class_names = tuple(_require(c, "name", json_path, "category") for c in cats)
    cat_to_label = {c["id"]: i for i, c in enumerate(cats)}
    fps_table = {}
    for v in data.get("videos", []):
        fps_table[_require(v, "name", json_path, "video")] = float(v.get("fps", DEFAULT_FPS))

    base = json_path.parent
    image_ref: dict = {}
    sizes: dict = {}
    frames: dict[str, dict[int, Path]] = {}
    for im in images:
        image_id = _require(im, "id", json_path, "image")
        file_name = _require(im, "file_name", json_path, "image")
        vid, t = parse_stem(Path(file_name).stem, json_path)
        image_ref[image_id] = (vid, t)
        sizes[image_id] = (im.get("width"), im.get("height"))
        frames.setdefault(vid, {})[t] = base / file_name
    videos = []
    for vid in sorted(frames):
        by_t = frames[vid]
        if sorted(by_t) != list(range(len(by_t))):
            raise ValidationError(f"video {vid!r} frame indices are not contiguous from 0")
        videos.append(VideoRecord(vid, [by_t[t] for t in range(len(by_t))], fps_table.get(vid, DEFAULT_FPS)))

    annotations: dict = {}
    for ann in anns:
        image_id = _require(ann, "image_id", json_path, "annotation")
        cat = _require(ann, "category_id", json_path, "annotation")
        bbox = _require(ann, "bbox", json_path, "annotation")
        if image_id not in image_ref:
            raise ValidationError(f"annotation {ann.get('id')} references unknown image_id {image_id}")
        if cat not in cat_to_label:
            raise ValidationError(f"annotation {ann.get('id')} references unknown category {cat}")
        if len(bbox) != 4:
            raise ParseError(f"bbox must have 4 numbers, got {bbox}", json_path)
        try:
            box = BoundingBox.from_xywh(*bbox)
        except InvalidBox as exc:
            raise ValidationError(f"annotation {ann.get('id')}: {exc}") from None
        ref = image_ref[image_id]
        annotations.setdefault(ref, []).append(GroundTruthInstance(box, cat_to_label[cat], ref))
    return DatasetIndex(videos, annotations, class_names)


def to_coco_dict(index: DatasetIndex, image_dir: str = "images") -> dict:
    images, anns = [], []
    image_ids = coco_image_ids(index)
    for vid, t in index.frame_keys():
        width, height = index.image_size(vid, t)
        image_id = image_ids[(vid, t)]
        images.append({"id": image_id, "file_name": f"{image_dir}/{frame_stem(vid, t)}.png",
                       "width": width, "height": height})
        for g in index.ground_truth(vid, t):
            anns.append({"id": len(anns) + 1, "image_id": image_id, "category_id": g.label + 1,
                         "bbox": g.box.to_xywh(), "area": g.box.area, "iscrowd": 0})
    return {
        "images": images,
        "annotations": anns,
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(index.class_names)],
        "videos": [{"id": i + 1, "name": v.video_id, "fps": v.fps} for i, v in enumerate(index.videos)],
    }


def coco_image_ids(index: DatasetIndex) -> dict[tuple[str, int], int]:
    """Sequential 1-based image ids in video/frame order."""
    return {key: i + 1 for i, key in enumerate(index.frame_keys())}


def write_coco(index: DatasetIndex, root, json_name: str = "annotations.json") -> Path:
    root = write_common(index, root)
    path = root / json_name
    path.write_text(json.dumps(to_coco_dict(index), indent=1))
    return path
