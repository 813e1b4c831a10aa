"""Temporal aggregation: concatenate aligned neighbour features with the
current frame's features and fuse them with a 3x3 convolution per level."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .backbone import FeatureMap, MultiScaleFeatures
from .errors import InvalidConfig, InvalidInputShape
from .flow import FlowField, bilinear_warp, rescale_flow, rescale_flow_tensor, warp_features


@dataclass(frozen=True)
class AggregationConfig:
    context_radius: int = 2
    channels: tuple[int, int, int] = (16, 32, 64)
    init_noise_std: float = 1e-3

    def __post_init__(self):
        if self.context_radius < 0:
            raise InvalidConfig("context radius must be >= 0")
        if self.init_noise_std < 0:
            raise InvalidConfig("init_noise_std must be >= 0")

    @property
    def identity_mode(self) -> bool:
        return self.context_radius == 0

    @property
    def num_blocks(self) -> int:
        return 2 * self.context_radius + 1


def averaging_kernel(channels: int, num_blocks: int) -> torch.Tensor:
    """3x3 kernel whose output channel c is the mean of channel c over all blocks."""
    weight = torch.zeros(channels, channels * num_blocks, 3, 3)
    for k in range(num_blocks):
        weight[torch.arange(channels), k * channels + torch.arange(channels), 1, 1] = 1.0 / num_blocks
    return weight


class TemporalAggregator(nn.Module):
    """One fusion conv per pyramid level; a pass-through when N == 0."""

    def __init__(self, config: AggregationConfig | None = None, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config = config or AggregationConfig()
        self.fuse = nn.ModuleList()
        if config.identity_mode:
            return
        for c in config.channels:
            conv = nn.Conv2d(c * config.num_blocks, c, 3, 1, 1)
            with torch.no_grad():
                w = averaging_kernel(c, config.num_blocks)
                if config.init_noise_std > 0:
                    w += torch.randn(w.shape, generator=generator) * config.init_noise_std
                conv.weight.copy_(w)
                conv.bias.zero_()
            self.fuse.append(conv)

    def fuse_level(self, level: int, current: torch.Tensor, aligned: Sequence[torch.Tensor]) -> torch.Tensor:
        """Batched fusion at one level: (B, C, H, W) current + 2N aligned tensors."""
        if self.config.identity_mode:
            if len(aligned):
                raise InvalidConfig("identity mode takes no neighbours")
            return current
        if len(aligned) != 2 * self.config.context_radius:
            raise InvalidConfig(f"expected {2 * self.config.context_radius} neighbours, got {len(aligned)}")
        for a in aligned:
            if a.shape != current.shape:
                raise InvalidInputShape(f"neighbour {tuple(a.shape)} vs current {tuple(current.shape)}")
        stacked = torch.cat(list(aligned) + [current], dim=1)
        return self.fuse[level](stacked)

    def forward(self, current: Sequence[torch.Tensor], neighbours: Sequence[Sequence[torch.Tensor]],
                flows: Sequence[torch.Tensor], strides=(8, 16, 32)) -> list[torch.Tensor]:
        """Batched window aggregation.

        ``current``: per-level (B, C, H, W); ``neighbours``: per neighbour, per level;
        ``flows``: per neighbour (B, 2, H_img, W_img) pixel flow.
        """
        if len(neighbours) != len(flows):
            raise InvalidConfig("one flow per neighbour required")
        out = []
        for level, stride in enumerate(strides):
            aligned = [bilinear_warp(nb[level], rescale_flow_tensor(fl, stride))
                       for nb, fl in zip(neighbours, flows)]
            out.append(self.fuse_level(level, current[level], aligned))
        return out


def _level_index(scale_id: str) -> int:
    return {"C1": 0, "C2": 1, "C3": 2}[scale_id]


def aggregate(current: FeatureMap, aligned_neighbours: Sequence[FeatureMap],
              aggregator: TemporalAggregator) -> FeatureMap:
    for fm in aligned_neighbours:
        if fm.scale_id != current.scale_id or fm.shape != current.shape:
            raise InvalidInputShape("neighbour features must match the current level")
    level = _level_index(current.scale_id)
    fused = aggregator.fuse_level(level, current.data[None], [fm.data[None] for fm in aligned_neighbours])
    return FeatureMap(fused[0], current.scale_id, current.stride)


def aggregate_window(current_feats: MultiScaleFeatures, neighbour_feats: Sequence[MultiScaleFeatures],
                     flows: Sequence[FlowField], aggregator: TemporalAggregator) -> MultiScaleFeatures:
    if len(neighbour_feats) != len(flows):
        raise InvalidConfig("one flow per neighbour required")
    out = []
    for level, cur in enumerate(current_feats):
        aligned = [warp_features(nb[level], rescale_flow(fl, cur.stride))
                   for nb, fl in zip(neighbour_feats, flows)]
        out.append(aggregate(cur, aligned, aggregator))
    return tuple(out)
