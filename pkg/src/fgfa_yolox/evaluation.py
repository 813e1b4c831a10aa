"""COCO-protocol average precision and a class/background confusion matrix."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datamodel import DEFAULT_CLASS_NAMES, Detection, GroundTruthInstance, iou_matrix
from .errors import InvalidConfig

COCO_IOU_THRESHOLDS = np.linspace(0.5, 0.95, int(np.round((0.95 - 0.5) / 0.05)) + 1)
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, int(np.round(1.0 / 0.01)) + 1)


@dataclass(frozen=True)
class MatchRecord:
    det_index: int
    gt_index: int | None
    iou: float
    is_true_positive: bool
    score: float
    label: int


def _check_threshold(iou_threshold):
    if not 0.0 <= iou_threshold <= 1.0:
        raise InvalidConfig(f"IoU threshold {iou_threshold} outside [0, 1]")


def _score_order(scores: Sequence[float]) -> np.ndarray:
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def _greedy_match(order, ious, det_labels, gt_labels, iou_threshold, class_aware=True):
    """Returns per-detection (gt index or -1, iou) in the original detection order."""
    gt_taken = np.zeros(len(gt_labels), dtype=bool)
    assigned = np.full(len(det_labels), -1)
    best_ious = np.zeros(len(det_labels))
    for d in order:
        best, best_iou = -1, -1.0
        for g in range(len(gt_labels)):
            if gt_taken[g] or (class_aware and gt_labels[g] != det_labels[d]):
                continue
            v = ious[d, g]
            if v >= iou_threshold and v > best_iou:
                best, best_iou = g, v
        if best >= 0:
            gt_taken[best] = True
            assigned[d] = best
            best_ious[d] = best_iou
        else:
            same = [g for g in range(len(gt_labels)) if not class_aware or gt_labels[g] == det_labels[d]]
            best_ious[d] = max((ious[d, g] for g in same), default=0.0)
    return assigned, best_ious


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthInstance],
                     iou_threshold: float = 0.5) -> list[MatchRecord]:
    """Greedy same-class matching of one frame's detections, highest score first.

    Each detection takes the still-unmatched same-class GT of highest IoU
    (>= threshold, ties to the lower GT index).  Records come back in
    descending score order; unmatched GTs are the false negatives.
    """
    _check_threshold(iou_threshold)
    if not dets:
        return []
    db = np.array([d.box.as_tuple() for d in dets])
    gb = np.array([g.box.as_tuple() for g in gts]).reshape(-1, 4)
    ious = iou_matrix(db, gb)
    order = _score_order([d.score for d in dets])
    assigned, best = _greedy_match(order, ious, [d.label for d in dets], [g.label for g in gts], iou_threshold)
    return [MatchRecord(int(i), None if assigned[i] < 0 else int(assigned[i]), float(best[i]),
                        bool(assigned[i] >= 0), float(dets[i].score), int(dets[i].label)) for i in order]


def average_precision(records: Sequence[MatchRecord], num_gt: int, label: int | None = None) -> float | None:
    """101-point interpolated AP of score-ranked records; None when there is no GT."""
    if label is not None:
        records = [r for r in records if r.label == label]
    if num_gt == 0:
        return None
    if not records:
        return 0.0
    order = _score_order([r.score for r in records])
    tp = np.array([records[i].is_true_positive for i in order], dtype=np.float64)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / num_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    for i in range(len(precision) - 1, 0, -1):
        if precision[i] > precision[i - 1]:
            precision[i - 1] = precision[i]
    idx = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(np.mean(sampled))


@dataclass
class EvalReport:
    class_names: tuple[str, ...]
    per_class_ap: dict[str, float | None]
    per_class_ap50: dict[str, float | None]
    map: float
    map50: float
    num_gt: dict[str, int]
    confusion_counts: np.ndarray
    confusion: np.ndarray
    confusion_iou_threshold: float = 0.5
    confusion_score_threshold: float = 0.3
    num_frames: int = 0

    def to_dict(self) -> dict:
        """Flat key -> value view."""
        d = {"num_frames": self.num_frames, "mAP": self.map, "mAP@50": self.map50,
             "confusion.iou_threshold": self.confusion_iou_threshold,
             "confusion.score_threshold": self.confusion_score_threshold}
        for name in self.class_names:
            d[f"AP.{name}"] = self.per_class_ap[name]
            d[f"AP50.{name}"] = self.per_class_ap50[name]
            d[f"num_gt.{name}"] = self.num_gt[name]
        labels = list(self.class_names) + ["background"]
        for i, a in enumerate(labels):
            for j, p in enumerate(labels):
                d[f"confusion.{a}.{p}"] = float(self.confusion[i, j])
        return d

    def confusion_csv(self) -> str:
        labels = list(self.class_names) + ["background"]
        buf = io.StringIO()
        buf.write(f"# iou_threshold={self.confusion_iou_threshold!r} score_threshold={self.confusion_score_threshold!r}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["actual\\predicted"] + labels)
        for i, a in enumerate(labels):
            w.writerow([a] + [f"{v:.6f}" for v in self.confusion[i]])
        return buf.getvalue()

    def to_text(self) -> str:
        def fmt(v):
            return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:.2f}"

        lines = [f"frames evaluated: {self.num_frames}",
                 f"mAP (0.50:0.95): {fmt(self.map)}",
                 f"mAP@50:          {fmt(self.map50)}", ""]
        lines.append(f"{'class':<14}{'#gt':>6}{'AP':>9}{'AP50':>9}")
        for name in self.class_names:
            lines.append(f"{name:<14}{self.num_gt[name]:>6}{fmt(self.per_class_ap[name]):>9}"
                         f"{fmt(self.per_class_ap50[name]):>9}")
        lines.append("")
        lines.append(f"confusion matrix (IoU {self.confusion_iou_threshold}, score >= {self.confusion_score_threshold})")
        labels = list(self.class_names) + ["background"]
        lines.append(" " * 14 + "".join(f"{p[:10]:>11}" for p in labels))
        for i, a in enumerate(labels):
            lines.append(f"{a:<14}" + "".join(f"{v:>11.2f}" for v in self.confusion[i]))
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "eval") -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"text": out_dir / f"{stem}_report.txt", "json": out_dir / f"{stem}_report.json",
                 "confusion": out_dir / f"{stem}_confusion.csv"}
        paths["text"].write_text(self.to_text())
        paths["json"].write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        paths["confusion"].write_text(self.confusion_csv())
        return paths


def confusion_matrix(dets_per_frame: Mapping, gts_per_frame: Mapping, num_classes: int = 3,
                     iou_threshold: float = 0.5, score_threshold: float = 0.3):
    """Label-agnostic spatial matching, then tabulation by (actual, predicted).

    Returns (counts, row-normalised) arrays of shape (K+1, K+1); index K is
    background.  Rows without any entry stay zero.
    """
    _check_threshold(iou_threshold)
    k = num_classes
    counts = np.zeros((k + 1, k + 1), dtype=np.int64)
    for key in _frame_keys(dets_per_frame, gts_per_frame):
        dets = [d for d in dets_per_frame.get(key, []) if d.score >= score_threshold]
        gts = list(gts_per_frame.get(key, []))
        gt_labels = [g.label for g in gts]
        matched_gt = np.zeros(len(gts), dtype=bool)
        if dets:
            db = np.array([d.box.as_tuple() for d in dets])
            gb = np.array([g.box.as_tuple() for g in gts]).reshape(-1, 4)
            ious = iou_matrix(db, gb)
            order = _score_order([d.score for d in dets])
            assigned, _ = _greedy_match(order, ious, [d.label for d in dets], gt_labels, iou_threshold,
                                        class_aware=False)
            for i, g in enumerate(assigned):
                if g >= 0:
                    counts[gt_labels[g], dets[i].label] += 1
                    matched_gt[g] = True
                else:
                    counts[k, dets[i].label] += 1
        for g, lab in enumerate(gt_labels):
            if not matched_gt[g]:
                counts[lab, k] += 1
    sums = counts.sum(axis=1, keepdims=True)
    normalized = np.divide(counts, sums, out=np.zeros(counts.shape), where=sums > 0)
    return counts, normalized


def _frame_keys(dets_per_frame: Mapping, gts_per_frame: Mapping) -> list:
    keys = list(gts_per_frame.keys())
    seen = set(keys)
    keys.extend(k for k in dets_per_frame.keys() if k not in seen)
    return keys


def evaluate(dets_per_frame: Mapping, gts_per_frame: Mapping, class_names: Sequence[str] = DEFAULT_CLASS_NAMES,
             iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS, confusion_iou_threshold: float = 0.5,
             confusion_score_threshold: float = 0.3) -> EvalReport:
    """Dataset-level metrics over frames keyed identically in both mappings.

    Frames present only in ``gts_per_frame`` count as having no detections.
    """
    class_names = tuple(class_names)
    k = len(class_names)
    thresholds = [float(t) for t in iou_thresholds]
    for t in thresholds:
        _check_threshold(t)
    records = {t: [] for t in thresholds}
    num_gt = np.zeros(k, dtype=np.int64)
    keys = _frame_keys(dets_per_frame, gts_per_frame)
    for key in keys:
        dets = list(dets_per_frame.get(key, []))
        gts = list(gts_per_frame.get(key, []))
        for g in gts:
            if not 0 <= g.label < k:
                raise InvalidConfig(f"GT label {g.label} outside class set")
            num_gt[g.label] += 1
        if not dets:
            continue
        db = np.array([d.box.as_tuple() for d in dets])
        gb = np.array([g.box.as_tuple() for g in gts]).reshape(-1, 4)
        ious = iou_matrix(db, gb)
        order = _score_order([d.score for d in dets])
        det_labels = [d.label for d in dets]
        gt_labels = [g.label for g in gts]
        for t in thresholds:
            assigned, best = _greedy_match(order, ious, det_labels, gt_labels, t)
            records[t].extend(MatchRecord(int(i), None if assigned[i] < 0 else int(assigned[i]), float(best[i]),
                                          bool(assigned[i] >= 0), float(dets[i].score), det_labels[i])
                              for i in order)
    per_thr = {t: [average_precision(records[t], int(num_gt[c]), c) for c in range(k)] for t in thresholds}
    per_class_ap, per_class_ap50 = {}, {}
    for c, name in enumerate(class_names):
        vals = [per_thr[t][c] for t in thresholds]
        per_class_ap[name] = None if vals[0] is None else float(np.mean(vals))
        per_class_ap50[name] = _ap_at(per_thr, thresholds, 0.5, c)
    valid = [v for v in per_class_ap.values() if v is not None]
    valid50 = [v for v in per_class_ap50.values() if v is not None]
    counts, normalized = confusion_matrix(dets_per_frame, gts_per_frame, k, confusion_iou_threshold,
                                          confusion_score_threshold)
    return EvalReport(
        class_names=class_names,
        per_class_ap=per_class_ap,
        per_class_ap50=per_class_ap50,
        map=float(np.mean(valid)) if valid else float("nan"),
        map50=float(np.mean(valid50)) if valid50 else float("nan"),
        num_gt={name: int(num_gt[c]) for c, name in enumerate(class_names)},
        confusion_counts=counts,
        confusion=normalized,
        confusion_iou_threshold=confusion_iou_threshold,
        confusion_score_threshold=confusion_score_threshold,
        num_frames=len(keys),
    )


def _ap_at(per_thr, thresholds, target, c):
    for t in thresholds:
        if abs(t - target) < 1e-9:
            return per_thr[t][c]
    return None
