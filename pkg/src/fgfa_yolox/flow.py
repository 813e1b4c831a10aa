"""Motion estimation (a small FlowNetSimple) and flow-guided feature warping.

Convention: ``flow[:, y, x] = (dx, dy)`` says that the content seen at (x, y)
in the current frame sits at (x + dx, y + dy) in the neighbour frame.  Warping
a neighbour therefore samples it at the displaced positions (backward warp).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import SCALE_IDS, FeatureMap, frame_to_tensor
from .datamodel import Frame
from .errors import InvalidConfig, InvalidInputShape, ParseError

STRIDE_TO_SCALE = {8: "C1", 16: "C2", 32: "C3"}
FLOW_MAGIC = b"FLW2"


@dataclass(frozen=True, eq=False)
class FlowField:
    """Displacements of shape (2, H, W); channel 0 is x, channel 1 is y.

    ``resolution_tag`` is ``"image"`` for pixel units or a scale id
    (``"C1"``..``"C3"``) when expressed in feature cells of that level.
    """

    displacement: torch.Tensor
    resolution_tag: str = "image"

    def __post_init__(self):
        d = self.displacement
        if d.dim() != 3 or d.shape[0] != 2:
            raise InvalidInputShape(f"flow must be 2xHxW, got {tuple(d.shape)}")

    @property
    def height(self) -> int:
        return self.displacement.shape[1]

    @property
    def width(self) -> int:
        return self.displacement.shape[2]


@dataclass(frozen=True)
class FlowNetConfig:
    encoder_channels: tuple[int, ...] = (16, 32, 64, 64)
    decoder_depth: int = 2
    decoder_channels: int = 32

    def __post_init__(self):
        if len(self.encoder_channels) == 0:
            raise InvalidConfig("encoder_channels must not be empty")
        if not 0 <= self.decoder_depth < len(self.encoder_channels):
            raise InvalidConfig("decoder_depth must be < number of encoder levels")

    @property
    def output_stride(self) -> int:
        return 2 ** (len(self.encoder_channels) - self.decoder_depth)

    @property
    def input_multiple(self) -> int:
        return 2 ** len(self.encoder_channels)

    @classmethod
    def desk(cls) -> "FlowNetConfig":
        return cls()

    @classmethod
    def paper(cls) -> "FlowNetConfig":
        # FlowNetS encoder widths, refinement up to 1/4 resolution
        return cls(encoder_channels=(64, 128, 256, 512, 512, 1024), decoder_depth=4, decoder_channels=64)


def _conv(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.LeakyReLU(0.1))


class FlowNetSimple(nn.Module):
    """Stacked-input encoder/decoder regressing pixel flow.

    The final prediction layer starts at zero, so an untrained net outputs
    exactly zero motion.
    """

    def __init__(self, config: FlowNetConfig | None = None):
        super().__init__()
        self.config = config = config or FlowNetConfig()
        chans = config.encoder_channels
        self.encoder = nn.ModuleList()
        cin = 6
        for c in chans:
            self.encoder.append(_conv(cin, c, 2))
            cin = c
        self.decoder = nn.ModuleList()
        for level in range(config.decoder_depth):
            skip = chans[-2 - level]
            self.decoder.append(_conv(cin + skip, config.decoder_channels))
            cin = config.decoder_channels
        self.predict = nn.Conv2d(cin, 2, 3, 1, 1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, a=0.1, nonlinearity="leaky_relu")
                nn.init.zeros_(m.bias)
        nn.init.zeros_(self.predict.weight)
        nn.init.zeros_(self.predict.bias)

    def forward(self, reference: torch.Tensor, neighbour: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) pair -> (B, 2, H, W) flow in pixels."""
        if reference.shape != neighbour.shape:
            raise InvalidInputShape(f"frame shapes differ: {tuple(reference.shape)} vs {tuple(neighbour.shape)}")
        h, w = reference.shape[-2:]
        m = self.config.input_multiple
        if h % m or w % m:
            raise InvalidInputShape(f"flow net input {h}x{w} must be divisible by {m}")
        x = torch.cat((reference, neighbour), dim=1) - 0.5
        skips = []
        for enc in self.encoder:
            x = enc(x)
            skips.append(x)
        for level, dec in enumerate(self.decoder):
            skip = skips[-2 - level]
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = dec(torch.cat((x, skip), dim=1))
        flow = self.predict(x)
        return F.interpolate(flow, size=(h, w), mode="bilinear", align_corners=False)


def estimate_flow(reference: Frame, neighbour: Frame, flownet: FlowNetSimple) -> FlowField:
    if reference.image.shape != neighbour.image.shape:
        raise InvalidInputShape("reference and neighbour frames differ in size")
    param = next(flownet.parameters())
    ref = frame_to_tensor(reference, param.dtype).to(param.device)
    nb = frame_to_tensor(neighbour, param.dtype).to(param.device)
    return FlowField(flownet(ref, nb)[0], "image")


def rescale_flow_tensor(flow: torch.Tensor, stride: int) -> torch.Tensor:
    """(B, 2, H, W) pixel flow -> (B, 2, H/stride, W/stride) flow in cells."""
    h, w = flow.shape[-2:]
    if stride <= 0 or h % stride or w % stride:
        raise InvalidInputShape(f"stride {stride} does not divide flow size {h}x{w}")
    if stride == 1:
        return flow
    small = F.interpolate(flow, size=(h // stride, w // stride), mode="bilinear", align_corners=False)
    return small / stride


def rescale_flow(flow: FlowField, target_stride: int) -> FlowField:
    if flow.resolution_tag != "image":
        raise InvalidInputShape("rescale_flow expects an image-resolution flow")
    tag = STRIDE_TO_SCALE.get(target_stride, f"s{target_stride}")
    return FlowField(rescale_flow_tensor(flow.displacement[None], target_stride)[0], tag)


def bilinear_warp(features: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Sample ``features`` (B, C, H, W) at ``grid + flow`` with zero padding.

    Differentiable in both arguments; zero flow reproduces the input exactly.
    """
    if features.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise InvalidInputShape("expected features (B,C,H,W) and flow (B,2,H,W)")
    if features.shape[0] != flow.shape[0] or features.shape[-2:] != flow.shape[-2:]:
        raise InvalidInputShape(
            f"flow {tuple(flow.shape)} does not match features {tuple(features.shape)}")
    b, c, h, w = features.shape
    ys = torch.arange(h, dtype=flow.dtype, device=flow.device).view(1, h, 1)
    xs = torch.arange(w, dtype=flow.dtype, device=flow.device).view(1, 1, w)
    x = xs + flow[:, 0]
    y = ys + flow[:, 1]
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx = x - x0
    wy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    flat = features.reshape(b, c, h * w)

    def corner(xi, yi):
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).view(b, 1, h * w).expand(b, c, h * w)
        vals = torch.gather(flat, 2, idx).view(b, c, h, w)
        return vals * valid.unsqueeze(1).to(features.dtype)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    out = corner(x0, y0) * ((1 - wx) * (1 - wy))
    out = out + corner(x0 + 1, y0) * (wx * (1 - wy))
    out = out + corner(x0, y0 + 1) * ((1 - wx) * wy)
    out = out + corner(x0 + 1, y0 + 1) * (wx * wy)
    return out


def warp_features(features: FeatureMap, flow: FlowField) -> FeatureMap:
    if flow.resolution_tag != features.scale_id:
        raise InvalidInputShape(
            f"flow expressed at {flow.resolution_tag!r}, features at {features.scale_id!r}")
    if tuple(flow.displacement.shape[-2:]) != tuple(features.data.shape[-2:]):
        raise InvalidInputShape("flow and feature spatial sizes differ")
    out = bilinear_warp(features.data[None], flow.displacement[None].to(features.data.dtype))[0]
    return FeatureMap(out, features.scale_id, features.stride)


def write_flow(path, flow: FlowField):
    """Planar binary flow file.

    Layout (little-endian): 4-byte magic ``FLW2``, int32 height, int32 width,
    then the x plane and the y plane as row-major float32.
    """
    d = flow.displacement.detach().cpu().numpy().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<ii", d.shape[1], d.shape[2]))
        fh.write(d[0].tobytes())
        fh.write(d[1].tobytes())


def read_flow(path, resolution_tag: str = "image") -> FlowField:
    raw = Path(path).read_bytes()
    if raw[:4] != FLOW_MAGIC:
        raise ParseError("bad flow magic", path)
    h, w = struct.unpack("<ii", raw[4:12])
    expected = 12 + 2 * h * w * 4
    if h <= 0 or w <= 0 or len(raw) != expected:
        raise ParseError(f"flow payload size mismatch for {h}x{w}", path)
    planes = np.frombuffer(raw[12:], dtype="<f4").reshape(2, h, w).astype(np.float32)
    return FlowField(torch.from_numpy(planes.copy()), resolution_tag)


def fit_flownet(flownet: FlowNetSimple, references: torch.Tensor, neighbours: torch.Tensor,
                target_flows: torch.Tensor, steps: int = 200, lr: float = 1e-3,
                batch_size: int = 8, seed: int = 0) -> list[float]:
    """Supervised end-point-error fit on pairs with known flow.

    Stands in for pretraining on a flow dataset; returns per-step losses.
    """
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(flownet.parameters(), lr=lr)
    n = references.shape[0]
    losses = []
    flownet.train()
    for _ in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=gen)
        pred = flownet(references[idx], neighbours[idx])
        loss = torch.linalg.vector_norm(pred - target_flows[idx], dim=1).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    flownet.eval()
    return losses


__all__ = [
    "FlowField", "FlowNetConfig", "FlowNetSimple", "estimate_flow", "rescale_flow",
    "rescale_flow_tensor", "bilinear_warp", "warp_features", "write_flow", "read_flow",
    "fit_flownet", "SCALE_IDS",
]
