"""Format detection and a single entry point for on-disk datasets."""

from __future__ import annotations

from pathlib import Path

from ..errors import ParseError
from .coco import load_coco
from .index import DatasetIndex
from .voc import load_voc
from .yolo import load_yolo


def detect_format(root) -> str:
    """Guess the annotation format from the directory contents."""
    root = Path(root)
    if root.is_file() and root.suffix == ".json":
        return "coco"
    if (root / "annotations.json").exists():
        return "coco"
    if (root / "labels").is_dir():
        return "yolo"
    if (root / "annotations").is_dir():
        return "voc"
    raise ParseError("cannot tell the annotation format (no annotations.json, labels/ or annotations/)", root)


def load_dataset(root, fmt: str = "auto") -> DatasetIndex:
    """Load ``root`` as YOLO, COCO or VOC; raises FileNotFoundError if it is missing."""
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset path {root} does not exist")
    if fmt == "auto":
        fmt = detect_format(root)
    if fmt == "yolo":
        return load_yolo(root)
    if fmt == "coco":
        return load_coco(root if root.is_file() else root / "annotations.json")
    if fmt == "voc":
        return load_voc(root)
    raise ValueError(f"unknown dataset format {fmt!r}")


