"""Pascal VOC xml annotations, one ``annotations/<stem>.xml`` per frame.

VOC pixel coordinates are 1-based: ``xmin``/``ymin`` are shifted down by one
on load (and back up on export) so boxes become 0-based corner form.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path

from ..datamodel import BoundingBox, GroundTruthInstance
from ..errors import InvalidBox, ParseError, ValidationError
from .index import (DatasetIndex, frame_stem, group_frames, list_images, read_class_names,
                    read_fps_table, write_common)


def _num(node, tag, path):
    child = node.find(tag)
    if child is None or child.text is None:
        raise ParseError(f"missing <{tag}>", path)
    try:
        return float(child.text)
    except ValueError:
        raise ParseError(f"<{tag}> is not a number: {child.text!r}", path) from None


def parse_voc_xml(path, class_names, frame_ref) -> list[GroundTruthInstance]:
    try:
        root = ET.parse(path).getroot()
    except ET.ParseError as exc:
        raise ParseError(f"malformed xml: {exc}", path) from None
    lookup = {n: i for i, n in enumerate(class_names)}
    gts = []
    for obj in root.iter("object"):
        name_node = obj.find("name")
        if name_node is None or not (name_node.text or "").strip():
            raise ParseError("object without <name>", path)
        name = name_node.text.strip()
        if name not in lookup:
            raise ValidationError(f"{path}: unknown class name {name!r}")
        bnd = obj.find("bndbox")
        if bnd is None:
            raise ParseError("object without <bndbox>", path)
        try:
            box = BoundingBox(_num(bnd, "xmin", path) - 1, _num(bnd, "ymin", path) - 1,
                              _num(bnd, "xmax", path), _num(bnd, "ymax", path))
        except InvalidBox as exc:
            raise ValidationError(f"{path}: {exc}") from None
        gts.append(GroundTruthInstance(box, lookup[name], frame_ref))
    return gts


def load_voc(root, class_names=None) -> DatasetIndex:
    root = Path(root)
    class_names = tuple(class_names) if class_names else read_class_names(root)
    videos = group_frames(list_images(root), read_fps_table(root))
    annotations = {}
    for v in videos:
        for t in range(v.num_frames):
            path = root / "annotations" / f"{frame_stem(v.video_id, t)}.xml"
            if path.exists():
                gts = parse_voc_xml(path, class_names, (v.video_id, t))
                if gts:
                    annotations[(v.video_id, t)] = gts
    return DatasetIndex(videos, annotations, class_names)


def _fmt(v: float) -> str:
    return format(v, ".10g")


def write_voc(index: DatasetIndex, root) -> Path:
    root = write_common(index, root)
    (root / "annotations").mkdir(exist_ok=True)
    for vid, t in index.frame_keys():
        width, height = index.image_size(vid, t)
        ann = ET.Element("annotation")
        ET.SubElement(ann, "filename").text = f"{frame_stem(vid, t)}.png"
        size = ET.SubElement(ann, "size")
        ET.SubElement(size, "width").text = str(width)
        ET.SubElement(size, "height").text = str(height)
        ET.SubElement(size, "depth").text = "3"
        for g in index.ground_truth(vid, t):
            obj = ET.SubElement(ann, "object")
            ET.SubElement(obj, "name").text = index.class_names[g.label]
            bnd = ET.SubElement(obj, "bndbox")
            ET.SubElement(bnd, "xmin").text = _fmt(g.box.x_min + 1)
            ET.SubElement(bnd, "ymin").text = _fmt(g.box.y_min + 1)
            ET.SubElement(bnd, "xmax").text = _fmt(g.box.x_max)
            ET.SubElement(bnd, "ymax").text = _fmt(g.box.y_max)
        ET.indent(ann)
        ET.ElementTree(ann).write(root / "annotations" / f"{frame_stem(vid, t)}.xml", encoding="unicode")
    return root
