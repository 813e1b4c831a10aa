"""Dataset ingestion (YOLO, COCO, VOC), letterboxing, clip sampling and
synthetic sprite videos."""

from .coco import load_coco, to_coco_dict, write_coco
from .index import DatasetIndex, VideoRecord, frame_stem, parse_stem
from .letterbox import LetterboxTransform, letterbox
from .loader import detect_format, load_dataset
from .sampling import sample_clips, sample_positions, sampling_stride
from .synthetic import SyntheticConfig, generate_synthetic_dataset
from .voc import load_voc, write_voc
from .yolo import load_yolo, write_yolo

__all__ = [
    "DatasetIndex", "VideoRecord", "frame_stem", "parse_stem",
    "load_yolo", "write_yolo", "load_coco", "write_coco", "to_coco_dict", "load_voc", "write_voc",
    "LetterboxTransform", "letterbox", "sample_clips", "sample_positions", "sampling_stride",
    "SyntheticConfig", "generate_synthetic_dataset", "detect_format", "load_dataset",
]
