"""PAFPN neck, decoupled anchor-free head, box decoding and NMS, and the
full windowed detection pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .aggregation import AggregationConfig, TemporalAggregator, aggregate_window
from .backbone import (BackboneConfig, CSPDarknet, MultiScaleFeatures,
                       extract_features, extract_window_features, wrap_levels)
from .datamodel import DEFAULT_CLASS_NAMES, BoundingBox, Detection, Frame, FrameWindow, iou_matrix
from .errors import InvalidConfig, InvalidInputShape
from .flow import FlowNetConfig, FlowNetSimple, estimate_flow
from .layers import ConvBnAct, CSPLayer, init_conv_weights

MAX_LOG_SIZE = 10.0


@dataclass(frozen=True)
class NeckConfig:
    in_channels: tuple[int, int, int] = (16, 32, 64)
    out_channels: int = 32
    depth: int = 1


@dataclass(frozen=True)
class HeadConfig:
    num_classes: int = 3
    width: int = 32
    num_convs: int = 2
    prior_prob: float = 0.01


@dataclass(frozen=True)
class PostprocessConfig:
    score_threshold: float = 0.01
    nms_iou_threshold: float = 0.65
    max_detections: int = 100

    def __post_init__(self):
        if not 0.0 <= self.score_threshold <= 1.0:
            raise InvalidConfig("score_threshold must lie in [0, 1]")
        if not 0.0 < self.nms_iou_threshold < 1.0:
            raise InvalidConfig("nms_iou_threshold must lie in (0, 1)")
        if self.max_detections < 0:
            raise InvalidConfig("max_detections must be >= 0")


@dataclass(frozen=True)
class HeadOutput:
    """Raw predictions of one pyramid level for one image."""

    cls_logits: torch.Tensor  # (K, H, W)
    obj_logits: torch.Tensor  # (1, H, W)
    box_reg: torch.Tensor  # (4, H, W): dx, dy, log w, log h in cells
    stride: int

    def __post_init__(self):
        hw = self.obj_logits.shape[-2:]
        if self.cls_logits.shape[-2:] != hw or self.box_reg.shape[-2:] != hw or self.box_reg.shape[0] != 4:
            raise InvalidInputShape("head output branches disagree in shape")


class PAFPN(nn.Module):
    """Top-down FPN followed by a bottom-up path, then 1x1 convs to a common width."""

    def __init__(self, config: NeckConfig | None = None):
        super().__init__()
        self.config = config = config or NeckConfig()
        c1, c2, c3 = config.in_channels
        n = config.depth
        self.lateral_conv0 = ConvBnAct(c3, c2, 1)
        self.C3_p4 = CSPLayer(2 * c2, c2, n, shortcut=False)
        self.reduce_conv1 = ConvBnAct(c2, c1, 1)
        self.C3_p3 = CSPLayer(2 * c1, c1, n, shortcut=False)
        self.bu_conv2 = ConvBnAct(c1, c1, 3, 2)
        self.C3_n3 = CSPLayer(2 * c1, c2, n, shortcut=False)
        self.bu_conv1 = ConvBnAct(c2, c2, 3, 2)
        self.C3_n4 = CSPLayer(2 * c2, c3, n, shortcut=False)
        self.out_convs = nn.ModuleList(ConvBnAct(c, config.out_channels, 1) for c in (c1, c2, c3))
        init_conv_weights(self)

    def forward(self, feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        if len(feats) != 3:
            raise InvalidInputShape("neck expects three levels")
        x0, x1, x2 = feats
        for x, c in zip(feats, self.config.in_channels):
            if x.shape[1] != c:
                raise InvalidInputShape(f"neck expected {c} channels, got {x.shape[1]}")
        fpn_out0 = self.lateral_conv0(x2)
        f_out0 = F.interpolate(fpn_out0, size=x1.shape[-2:], mode="nearest")
        f_out0 = self.C3_p4(torch.cat([f_out0, x1], 1))
        fpn_out1 = self.reduce_conv1(f_out0)
        f_out1 = F.interpolate(fpn_out1, size=x0.shape[-2:], mode="nearest")
        pan_out2 = self.C3_p3(torch.cat([f_out1, x0], 1))
        p_out1 = self.C3_n3(torch.cat([self.bu_conv2(pan_out2), fpn_out1], 1))
        pan_out0 = self.C3_n4(torch.cat([self.bu_conv1(p_out1), fpn_out0], 1))
        return [conv(x) for conv, x in zip(self.out_convs, (pan_out2, p_out1, pan_out0))]


class DecoupledHead(nn.Module):
    """Separate conv stacks for classification and for box/objectness."""

    def __init__(self, in_channels: int, config: HeadConfig | None = None, num_levels: int = 3):
        super().__init__()
        self.config = config = config or HeadConfig()
        w = config.width
        self.cls_convs = nn.ModuleList()
        self.reg_convs = nn.ModuleList()
        self.cls_preds = nn.ModuleList()
        self.reg_preds = nn.ModuleList()
        self.obj_preds = nn.ModuleList()
        for _ in range(num_levels):
            self.cls_convs.append(nn.Sequential(*[ConvBnAct(in_channels if i == 0 else w, w, 3)
                                                  for i in range(config.num_convs)]))
            self.reg_convs.append(nn.Sequential(*[ConvBnAct(in_channels if i == 0 else w, w, 3)
                                                  for i in range(config.num_convs)]))
            self.cls_preds.append(nn.Conv2d(w, config.num_classes, 1))
            self.reg_preds.append(nn.Conv2d(w, 4, 1))
            self.obj_preds.append(nn.Conv2d(w, 1, 1))
        init_conv_weights(self)
        bias = -math.log((1 - config.prior_prob) / config.prior_prob)
        for preds, b in ((self.cls_preds, bias), (self.obj_preds, bias), (self.reg_preds, 0.0)):
            for conv in preds:
                nn.init.normal_(conv.weight, std=0.01)
                nn.init.constant_(conv.bias, b)

    def forward(self, feats: Sequence[torch.Tensor]):
        """Per level (reg (B,4,H,W), obj (B,1,H,W), cls (B,K,H,W))."""
        out = []
        for i, x in enumerate(feats):
            c = self.cls_convs[i](x)
            r = self.reg_convs[i](x)
            out.append((self.reg_preds[i](r), self.obj_preds[i](r), self.cls_preds[i](c)))
        return out


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    flow: FlowNetConfig = field(default_factory=FlowNetConfig)
    context_radius: int = 2
    neck_out_channels: int = 32
    head: HeadConfig = field(default_factory=HeadConfig)
    image_size: tuple[int, int] = (64, 64)  # (width, height)
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES
    fusion_init_noise: float = 1e-3

    def __post_init__(self):
        if self.context_radius < 0:
            raise InvalidConfig("context radius must be >= 0")
        if self.head.num_classes != len(self.class_names):
            raise InvalidConfig("head.num_classes must equal len(class_names)")
        w, h = self.image_size
        m = max(self.backbone.strides[-1], self.flow.input_multiple)
        if w % m or h % m:
            raise InvalidConfig(f"image size {self.image_size} must be divisible by {m}")

    @property
    def strides(self) -> tuple[int, int, int]:
        return tuple(self.backbone.strides)

    @classmethod
    def desk(cls, context_radius: int = 2, **kw) -> "ModelConfig":
        return cls(context_radius=context_radius, **kw)

    @classmethod
    def paper(cls, context_radius: int = 2, **kw) -> "ModelConfig":
        bb = BackboneConfig.paper()
        base = dict(backbone=bb, flow=FlowNetConfig.paper(), neck_out_channels=int(256 * bb.widen_factor),
                    head=HeadConfig(width=int(256 * bb.widen_factor)), image_size=(640, 640))
        base.update(kw)
        return cls(context_radius=context_radius, **base)

    def to_dict(self) -> dict:
        return {
            "backbone": {"deepen_factor": self.backbone.deepen_factor,
                         "widen_factor": self.backbone.widen_factor,
                         "base_channels": list(self.backbone.base_channels),
                         "strides": list(self.backbone.strides),
                         "stem_channels": self.backbone.stem_channels},
            "flow": {"encoder_channels": list(self.flow.encoder_channels),
                     "decoder_depth": self.flow.decoder_depth,
                     "decoder_channels": self.flow.decoder_channels},
            "context_radius": self.context_radius,
            "neck_out_channels": self.neck_out_channels,
            "head": {"num_classes": self.head.num_classes, "width": self.head.width,
                     "num_convs": self.head.num_convs, "prior_prob": self.head.prior_prob},
            "image_size": list(self.image_size),
            "class_names": list(self.class_names),
            "fusion_init_noise": self.fusion_init_noise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        bb = d["backbone"]
        return cls(
            backbone=BackboneConfig(bb["deepen_factor"], bb["widen_factor"], tuple(bb["base_channels"]),
                                    tuple(bb["strides"]), bb["stem_channels"]),
            flow=FlowNetConfig(tuple(d["flow"]["encoder_channels"]), d["flow"]["decoder_depth"],
                               d["flow"]["decoder_channels"]),
            context_radius=d["context_radius"],
            neck_out_channels=d["neck_out_channels"],
            head=HeadConfig(**d["head"]),
            image_size=tuple(d["image_size"]),
            class_names=tuple(d["class_names"]),
            fusion_init_noise=d["fusion_init_noise"],
        )


class FGFAYOLOX(nn.Module):
    """Backbone, flow net, temporal aggregator, neck and head in one module."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config = config or ModelConfig()
        torch.manual_seed(seed)
        self.backbone = CSPDarknet(config.backbone)
        self.flownet = FlowNetSimple(config.flow)
        gen = torch.Generator().manual_seed(seed + 1)
        self.aggregator = TemporalAggregator(
            AggregationConfig(config.context_radius, config.backbone.base_channels, config.fusion_init_noise),
            generator=gen)
        self.neck = PAFPN(NeckConfig(config.backbone.base_channels, config.neck_out_channels,
                                     config.backbone.base_depth))
        self.head = DecoupledHead(config.neck_out_channels, config.head)

    @property
    def context_radius(self) -> int:
        return self.config.context_radius

    def forward(self, frames: torch.Tensor):
        """(B, 2N+1, 3, H, W) windows -> per level (reg, obj, cls) raw outputs.

        The current frame is at index N along dim 1.
        """
        b, t = frames.shape[:2]
        n = self.context_radius
        if t != 2 * n + 1:
            raise InvalidInputShape(f"expected {2 * n + 1} frames per window, got {t}")
        feats = self.backbone(frames.reshape(b * t, *frames.shape[2:]))
        feats = [f.reshape(b, t, *f.shape[1:]) for f in feats]
        current = [f[:, n] for f in feats]
        nb_idx = [i for i in range(t) if i != n]
        neighbours, flows = [], []
        if nb_idx:
            ref = frames[:, n:n + 1].expand(b, len(nb_idx), *frames.shape[2:]).reshape(-1, *frames.shape[2:])
            nbs = frames[:, nb_idx].reshape(-1, *frames.shape[2:])
            flow = self.flownet(ref, nbs).reshape(b, len(nb_idx), 2, *frames.shape[-2:])
            for j, i in enumerate(nb_idx):
                neighbours.append([f[:, i] for f in feats])
                flows.append(flow[:, j])
        g = self.aggregator(current, neighbours, flows, self.config.strides)
        return self.head(self.neck(g))


def neck_forward(g: MultiScaleFeatures, neck: PAFPN) -> MultiScaleFeatures:
    outs = neck([fm.data[None] for fm in g])
    return wrap_levels([o[0] for o in outs], [fm.stride for fm in g])


def head_forward(neck_out: MultiScaleFeatures, head: DecoupledHead) -> list[HeadOutput]:
    raw = head([fm.data[None] for fm in neck_out])
    return [HeadOutput(cls[0], obj[0], reg[0], fm.stride) for (reg, obj, cls), fm in zip(raw, neck_out)]


def head_outputs_from_batch(raw, strides, index: int = 0) -> list[HeadOutput]:
    return [HeadOutput(cls[index], obj[index], reg[index], s) for (reg, obj, cls), s in zip(raw, strides)]


def decode_level(reg: torch.Tensor, stride: int) -> torch.Tensor:
    """(..., 4, H, W) offsets -> (..., 4, H, W) corner boxes in pixels."""
    h, w = reg.shape[-2:]
    ys = torch.arange(h, dtype=reg.dtype, device=reg.device).view(h, 1)
    xs = torch.arange(w, dtype=reg.dtype, device=reg.device).view(1, w)
    cx = (xs + reg[..., 0, :, :]) * stride
    cy = (ys + reg[..., 1, :, :]) * stride
    bw = torch.exp(reg[..., 2, :, :].clamp(max=MAX_LOG_SIZE)) * stride
    bh = torch.exp(reg[..., 3, :, :].clamp(max=MAX_LOG_SIZE)) * stride
    return torch.stack((cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2), dim=-3)


def decode_arrays(head_out: Sequence[HeadOutput], strides: Sequence[int]):
    """Flattened (boxes (n,4), scores (n,), labels (n,)) over all levels, clipped to the image."""
    if len(head_out) != len(strides):
        raise InvalidConfig("one stride per head level required")
    for ho, s in zip(head_out, strides):
        if ho.stride != s:
            raise InvalidConfig(f"head level stride {ho.stride} != {s}")
    img_h = head_out[0].obj_logits.shape[-2] * strides[0]
    img_w = head_out[0].obj_logits.shape[-1] * strides[0]
    boxes, scores, labels = [], [], []
    with torch.no_grad():
        for ho, s in zip(head_out, strides):
            b = decode_level(ho.box_reg.double(), s).reshape(4, -1).T
            cls_prob = torch.sigmoid(ho.cls_logits.double()).reshape(ho.cls_logits.shape[0], -1)
            best, label = cls_prob.max(dim=0)
            score = torch.sigmoid(ho.obj_logits.double()).reshape(-1) * best
            boxes.append(b)
            scores.append(score)
            labels.append(label)
    boxes = torch.cat(boxes).numpy()
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, img_w)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, img_h)
    return boxes, torch.cat(scores).numpy(), torch.cat(labels).numpy()


def decode_boxes(head_out: Sequence[HeadOutput], strides: Sequence[int]) -> list[Detection]:
    boxes, scores, labels = decode_arrays(head_out, strides)
    dets = []
    for b, s, l in zip(boxes, scores, labels):
        if b[2] > b[0] and b[3] > b[1]:
            dets.append(Detection(BoundingBox(*map(float, b)), int(l), float(s)))
    return dets


def nms(dets: Sequence[Detection], config: PostprocessConfig | None = None) -> list[Detection]:
    """Class-wise greedy NMS with the sort key (score desc, x_min asc, y_min asc, input order)."""
    config = config or PostprocessConfig()
    if not dets:
        return []
    boxes = np.array([d.box.as_tuple() for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    labels = np.array([d.label for d in dets])
    order = np.lexsort((np.arange(len(dets)), boxes[:, 1], boxes[:, 0], -scores))
    suppressed = np.zeros(len(dets), dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        if len(keep) == config.max_detections:
            break
        rest = order[pos + 1:]
        rest = rest[(labels[rest] == labels[i]) & ~suppressed[rest]]
        if rest.size:
            ious = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
            suppressed[rest[ious > config.nms_iou_threshold]] = True
    return [dets[i] for i in keep]


def postprocess(head_out: Sequence[HeadOutput], strides, config: PostprocessConfig) -> list[Detection]:
    dets = [d for d in decode_boxes(head_out, strides) if d.score >= config.score_threshold]
    return nms(dets, config)


def _prepare(frames: Sequence[Frame], model: FGFAYOLOX):
    """Letterbox frames to the model input size when needed."""
    from .datasets.letterbox import letterbox

    w, h = model.config.image_size
    if frames[0].width == w and frames[0].height == h:
        return list(frames), None
    out, transform = [], None
    for f in frames:
        lf, transform = letterbox(f, (w, h))
        out.append(lf)
    return out, transform


def _restore(dets: list[Detection], transform, frame: Frame) -> list[Detection]:
    if transform is None:
        return dets
    restored = []
    for d in dets:
        b = transform.inverse_box(d.box, clip_to=(frame.width, frame.height))
        if b is not None:
            restored.append(Detection(b, d.label, d.score))
    return restored


def detect(window: FrameWindow, model: FGFAYOLOX, post: PostprocessConfig | None = None,
           feature_cache: dict | None = None) -> list[Detection]:
    """Detections for the window's current frame, in that frame's pixel coordinates.

    Runs with gradients disabled; put the model in eval mode first.
    ``feature_cache`` lets consecutive windows of one video reuse backbone
    features (see ``extract_window_features``).
    """
    post = post or PostprocessConfig()
    if window.context_radius != model.context_radius:
        raise InvalidConfig(f"window radius {window.context_radius} != model radius {model.context_radius}")
    frames, transform = _prepare(window.frames, model)
    lb_window = FrameWindow(tuple(frames), window.center_index, window.context_radius) \
        if transform is not None else window
    with torch.no_grad():
        feats = extract_window_features(lb_window, model.backbone, feature_cache)
        n = lb_window.center_index
        current = feats[n]
        nb_feats = [f for i, f in enumerate(feats) if i != n]
        flows = [estimate_flow(lb_window.current, nb, model.flownet) for nb in lb_window.neighbours]
        g = aggregate_window(current, nb_feats, flows, model.aggregator)
        head_out = head_forward(neck_forward(g, model.neck), model.head)
    dets = postprocess(head_out, model.config.strides, post)
    return _restore(dets, transform, window.current)


def detect_single_frame(frame: Frame, model: FGFAYOLOX, post: PostprocessConfig | None = None) -> list[Detection]:
    """Still-image pipeline: backbone, neck, head, decode, NMS (no temporal context)."""
    post = post or PostprocessConfig()
    frames, transform = _prepare([frame], model)
    with torch.no_grad():
        feats = extract_features(frames[0], model.backbone)
        head_out = head_forward(neck_forward(feats, model.neck), model.head)
    dets = postprocess(head_out, model.config.strides, post)
    return _restore(dets, transform, frame)


def detections_to_coco(dets_per_image: dict, category_offset: int = 0) -> list[dict]:
    """``{image_id: [Detection]}`` -> COCO results list ``{image_id, category_id, bbox, score}``."""
    out = []
    for image_id, dets in dets_per_image.items():
        for d in dets:
            out.append({"image_id": image_id, "category_id": int(d.label) + category_offset,
                        "bbox": [float(v) for v in d.box.to_xywh()], "score": float(d.score)})
    return out


def detections_from_coco(results: Sequence[dict], category_offset: int = 0) -> dict:
    out: dict = {}
    for r in results:
        x, y, w, h = r["bbox"]
        det = Detection(BoundingBox.from_xywh(x, y, w, h), int(r["category_id"]) - category_offset,
                        float(r["score"]))
        out.setdefault(r["image_id"], []).append(det)
    return out
