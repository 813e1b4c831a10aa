"""CSP-Darknet feature extractor producing three pyramid levels (strides 8/16/32)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .datamodel import Frame, FrameWindow
from .errors import InvalidConfig, InvalidInputShape
from .layers import ConvBnAct, CSPLayer, Focus, SPPBottleneck, init_conv_weights

SCALE_IDS = ("C1", "C2", "C3")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """A C x H x W feature tensor tagged with its pyramid level."""

    data: torch.Tensor
    scale_id: str
    stride: int

    def __post_init__(self):
        if self.data.dim() != 3:
            raise InvalidInputShape(f"feature map must be CxHxW, got {tuple(self.data.shape)}")
        if self.scale_id not in SCALE_IDS:
            raise InvalidConfig(f"unknown scale id {self.scale_id!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


MultiScaleFeatures = tuple  # (FeatureMap C1, FeatureMap C2, FeatureMap C3)


@dataclass(frozen=True)
class BackboneConfig:
    deepen_factor: float = 0.33
    widen_factor: float = 0.0625
    base_channels: tuple[int, int, int] = (16, 32, 64)
    strides: tuple[int, int, int] = (8, 16, 32)
    stem_channels: int = 8

    def __post_init__(self):
        if self.deepen_factor <= 0 or self.widen_factor <= 0:
            raise InvalidConfig("deepen/widen factors must be positive")
        c = self.base_channels
        if len(c) != 3 or not (0 < c[0] < c[1] < c[2]):
            raise InvalidConfig(f"channels must be strictly increasing, got {c}")
        if tuple(self.strides) != (8, 16, 32):
            raise InvalidConfig(f"this backbone layout has strides (8, 16, 32), got {self.strides}")

    @property
    def base_depth(self) -> int:
        return max(round(self.deepen_factor * 3), 1)

    @classmethod
    def desk(cls) -> "BackboneConfig":
        return cls()

    @classmethod
    def paper(cls) -> "BackboneConfig":
        w = 1.25
        return cls(deepen_factor=1.33, widen_factor=w,
                   base_channels=(int(256 * w), int(512 * w), int(1024 * w)),
                   stem_channels=int(64 * w))

    def output_shapes(self, height: int, width: int) -> list[tuple[int, int, int]]:
        check_divisible(height, width, self.strides[-1])
        return [(c, height // s, width // s) for c, s in zip(self.base_channels, self.strides)]


def check_divisible(height, width, stride):
    if height % stride or width % stride:
        raise InvalidInputShape(
            f"input {height}x{width} not divisible by stride {stride}; letterbox it first")


class CSPDarknet(nn.Module):
    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        self.config = config = config or BackboneConfig()
        d = config.base_depth
        stem = config.stem_channels
        c1, c2, c3 = config.base_channels
        self.stem = Focus(3, stem)
        self.dark2 = nn.Sequential(ConvBnAct(stem, 2 * stem, 3, 2), CSPLayer(2 * stem, 2 * stem, n=d))
        self.dark3 = nn.Sequential(ConvBnAct(2 * stem, c1, 3, 2), CSPLayer(c1, c1, n=3 * d))
        self.dark4 = nn.Sequential(ConvBnAct(c1, c2, 3, 2), CSPLayer(c2, c2, n=3 * d))
        self.dark5 = nn.Sequential(ConvBnAct(c2, c3, 3, 2), SPPBottleneck(c3, c3),
                                   CSPLayer(c3, c3, n=d, shortcut=False))
        init_conv_weights(self)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(B, 3, H, W) images in [0, 1] -> three (B, C_i, H/s_i, W/s_i) tensors."""
        check_divisible(x.shape[-2], x.shape[-1], self.config.strides[-1])
        x = self.dark2(self.stem(x - 0.5))
        p3 = self.dark3(x)
        p4 = self.dark4(p3)
        p5 = self.dark5(p4)
        return p3, p4, p5


def frame_to_tensor(frame: Frame, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frame.image.transpose(2, 0, 1))).to(dtype)[None]


def wrap_levels(tensors: Sequence[torch.Tensor], strides=(8, 16, 32)) -> MultiScaleFeatures:
    """Per-sample tensors (C, H, W) for each level -> MultiScaleFeatures."""
    return tuple(FeatureMap(t, sid, s) for t, sid, s in zip(tensors, SCALE_IDS, strides))


def extract_features(frame: Frame, backbone: CSPDarknet) -> MultiScaleFeatures:
    param = next(backbone.parameters())
    x = frame_to_tensor(frame, param.dtype).to(param.device)
    levels = backbone(x)
    return wrap_levels([t[0] for t in levels], backbone.config.strides)


def extract_window_features(window: FrameWindow, backbone: CSPDarknet,
                            cache: dict | None = None) -> list[MultiScaleFeatures]:
    """Backbone features for every frame of the window, one shared set of weights.

    Repeated frames (edge replication) are computed once.  ``cache`` may be
    shared across windows of one video; it is keyed by (video id, frame index).
    """
    store = cache if cache is not None else {}
    out = []
    for frame in window.frames:
        if cache is not None:
            key = (frame.source_video_id, frame.timestamp_index, frame.image.shape)
        else:
            key = id(frame)
        if key not in store:
            store[key] = extract_features(frame, backbone)
        out.append(store[key])
    return out
