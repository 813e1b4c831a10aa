"""Label assignment, detection losses and the SGD training loop."""

from __future__ import annotations

import copy
import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import BoundingBox, GroundTruthInstance
from .datasets.index import DatasetIndex
from .datasets.letterbox import letterbox
from .datasets.sampling import sample_positions
from .detector import FGFAYOLOX, decode_level
from .errors import DivergenceError, InvalidConfig

log = logging.getLogger(__name__)

INF = float("inf")
PAPER_SIZE_RANGES = ((0.0, 64.0), (64.0, 128.0), (128.0, INF))
DESK_SIZE_RANGES = ((0.0, 32.0), (32.0, 64.0), (64.0, INF))
LOSS_WEIGHTS = {"box": 5.0, "obj": 1.0, "cls": 1.0}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    epochs: int = 3
    warmup_iters: int = 500
    batch_windows: int = 8
    seed: int = 0
    target_fps: float = 10.0
    hflip: bool = False
    center_radius: float = 1.5
    size_ranges: tuple = PAPER_SIZE_RANGES
    device: str = "cpu"
    # exponential moving average of the weights; 0 trains and returns the raw iterate
    ema_decay: float = 0.0
    ema_ramp_iters: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "epochs", "batch_windows", "target_fps", "center_radius"):
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.warmup_iters < 0:
            raise InvalidConfig("momentum, weight_decay and warmup_iters must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0 or self.ema_ramp_iters < 0:
            raise InvalidConfig("ema_decay must lie in [0, 1) and ema_ramp_iters be >= 0")
        if len(self.size_ranges) != 3:
            raise InvalidConfig("size_ranges needs one (lo, hi) band per level")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """From-scratch CPU training: larger step, short warm-up, flips, weight averaging."""
        base = dict(learning_rate=0.02, warmup_iters=50, batch_windows=8, hflip=True,
                    size_ranges=DESK_SIZE_RANGES, ema_decay=0.995, ema_ramp_iters=100)
        base.update(kw)
        return cls(**base)


@dataclass
class LevelTargets:
    """Per-cell targets of one level: ``gt_index`` is -1 for negatives."""

    gt_index: np.ndarray  # (H, W) int
    boxes: np.ndarray  # (H, W, 4) corner boxes of the assigned GT
    labels: np.ndarray  # (H, W) int

    @property
    def positive(self) -> np.ndarray:
        return self.gt_index >= 0

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


@dataclass
class LossBreakdown:
    box_loss: torch.Tensor
    objectness_loss: torch.Tensor
    classification_loss: torch.Tensor
    total: torch.Tensor
    num_positive: int = 0

    def as_floats(self) -> dict[str, float]:
        return {"box": float(self.box_loss.detach()), "obj": float(self.objectness_loss.detach()),
                "cls": float(self.classification_loss.detach()), "total": float(self.total.detach())}


def select_level(box: BoundingBox, size_ranges) -> int:
    size = math.sqrt(box.area)
    for level, (lo, hi) in enumerate(size_ranges):
        if lo <= size < hi:
            return level
    return len(size_ranges) - 1 if size >= size_ranges[-1][0] else 0


def assign_targets(gts: Sequence[GroundTruthInstance], strides: Sequence[int],
                   grid_sizes: Sequence[tuple[int, int]], size_ranges=PAPER_SIZE_RANGES,
                   center_radius: float = 1.5) -> list[LevelTargets]:
    """Fixed centre-sampling assignment.

    A cell on the GT's level is positive when its centre lies strictly inside
    the box and within ``center_radius`` cells of the box centre on both axes.
    Overlaps go to the smaller box, then the earlier GT.  A GT that would get
    no cell at all falls back to the cell holding its centre.
    """
    out = []
    for (h, w) in grid_sizes:
        out.append(LevelTargets(np.full((h, w), -1, dtype=np.int64), np.zeros((h, w, 4)),
                                np.zeros((h, w), dtype=np.int64)))
    owner_area = [np.full(gs, INF) for gs in grid_sizes]
    for gi, g in enumerate(gts):
        level = select_level(g.box, size_ranges)
        s = strides[level]
        h, w = grid_sizes[level]
        cy = (np.arange(h) + 0.5) * s
        cx = (np.arange(w) + 0.5) * s
        gcx, gcy = g.box.center
        in_box = ((cx[None, :] > g.box.x_min) & (cx[None, :] < g.box.x_max)
                  & (cy[:, None] > g.box.y_min) & (cy[:, None] < g.box.y_max))
        r = center_radius * s
        in_center = (np.abs(cx[None, :] - gcx) < r) & (np.abs(cy[:, None] - gcy) < r)
        cand = in_box & in_center
        if not cand.any():
            i = min(max(int(gcy // s), 0), h - 1)
            j = min(max(int(gcx // s), 0), w - 1)
            cand[i, j] = True
        area = g.box.area
        take = cand & (area < owner_area[level])
        t = out[level]
        t.gt_index[take] = gi
        t.boxes[take] = g.box.as_tuple()
        t.labels[take] = g.label
        owner_area[level][take] = area
    return out


def box_iou_pairs(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-9) -> torch.Tensor:
    """Row-wise IoU of (n, 4) corner boxes."""
    iw = (torch.minimum(pred[:, 2], target[:, 2]) - torch.maximum(pred[:, 0], target[:, 0])).clamp(min=0)
    ih = (torch.minimum(pred[:, 3], target[:, 3]) - torch.maximum(pred[:, 1], target[:, 1])).clamp(min=0)
    inter = iw * ih
    area_p = (pred[:, 2] - pred[:, 0]) * (pred[:, 3] - pred[:, 1])
    area_t = (target[:, 2] - target[:, 0]) * (target[:, 3] - target[:, 1])
    return inter / (area_p + area_t - inter + eps)


def compute_loss(head_out, targets: Sequence[Sequence[LevelTargets]], strides: Sequence[int]) -> LossBreakdown:
    """YOLOX-family losses for a batch.

    ``head_out``: per level (reg (B,4,H,W), obj (B,1,H,W), cls (B,K,H,W));
    ``targets``: per image, per level.  Every term is summed and divided by
    max(1, number of positive cells).
    """
    dtype = head_out[0][0].dtype
    device = head_out[0][0].device
    box_sum = torch.zeros((), dtype=dtype, device=device)
    obj_sum = torch.zeros((), dtype=dtype, device=device)
    cls_sum = torch.zeros((), dtype=dtype, device=device)
    num_pos = 0
    for level, ((reg, obj, cls), stride) in enumerate(zip(head_out, strides)):
        gt_index = torch.from_numpy(np.stack([t[level].gt_index for t in targets])).to(device)
        pos = gt_index >= 0  # (B, H, W)
        obj_t = pos.to(dtype)
        obj_sum = obj_sum + F.binary_cross_entropy_with_logits(obj[:, 0], obj_t, reduction="sum")
        n = int(pos.sum())
        if n == 0:
            continue
        num_pos += n
        gt_boxes = torch.from_numpy(np.stack([t[level].boxes for t in targets])).to(device, dtype)[pos]
        gt_labels = torch.from_numpy(np.stack([t[level].labels for t in targets])).to(device)[pos]
        pred_boxes = decode_level(reg, stride).permute(0, 2, 3, 1)[pos]
        box_sum = box_sum + (1.0 - box_iou_pairs(pred_boxes, gt_boxes)).sum()
        cls_logits = cls.permute(0, 2, 3, 1)[pos]
        cls_t = F.one_hot(gt_labels, cls.shape[1]).to(dtype)
        cls_sum = cls_sum + F.binary_cross_entropy_with_logits(cls_logits, cls_t, reduction="sum")
    norm = max(1, num_pos)
    box_loss, obj_loss, cls_loss = box_sum / norm, obj_sum / norm, cls_sum / norm
    total = LOSS_WEIGHTS["box"] * box_loss + LOSS_WEIGHTS["obj"] * obj_loss + LOSS_WEIGHTS["cls"] * cls_loss
    return LossBreakdown(box_loss, obj_loss, cls_loss, total, num_pos)


def learning_rate_at(iteration: int, config: TrainConfig) -> float:
    """Linear warm-up from 0 to the base rate, constant afterwards."""
    if config.warmup_iters > 0 and iteration < config.warmup_iters:
        return config.learning_rate * iteration / config.warmup_iters
    return config.learning_rate


class SGDW:
    """SGD with heavy-ball momentum and decoupled weight decay.

    Decay shrinks conv/linear kernels only (tensors with more than one
    dimension), never biases or normalisation parameters.
    """

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = [p for p in params if p.requires_grad]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float):
        for p, buf in zip(self.params, self.buffers):
            if p.grad is not None:
                buf.mul_(self.momentum).add_(p.grad)
                p.sub_(lr * buf)
            if self.weight_decay and p.dim() > 1:
                p.mul_(1.0 - lr * self.weight_decay)


class WeightAverage:
    """Exponential moving average of every floating-point state entry.

    The decay ramps up as ``decay * (1 - exp(-step / ramp))`` so early,
    poorly trained iterates fade out quickly.
    """

    def __init__(self, model: torch.nn.Module, decay: float, ramp_iters: int = 0):
        self.decay = decay
        self.ramp_iters = ramp_iters
        self.shadow = {k: v.detach().clone() for k, v in model.state_dict().items() if v.is_floating_point()}

    def decay_at(self, step: int) -> float:
        if self.ramp_iters <= 0:
            return self.decay
        return self.decay * (1.0 - math.exp(-step / self.ramp_iters))

    @torch.no_grad()
    def update(self, model: torch.nn.Module, step: int):
        d = self.decay_at(step)
        for k, v in model.state_dict().items():
            if k in self.shadow:
                self.shadow[k].mul_(d).add_(v.detach(), alpha=1.0 - d)

    def copy_to(self, model: torch.nn.Module):
        state = model.state_dict()
        state.update(self.shadow)
        model.load_state_dict(state)


@dataclass
class PreparedVideo:
    frames: torch.Tensor  # (T, 3, H, W)
    gts: list[list[GroundTruthInstance]]


def prepare_video(index: DatasetIndex, video_id: str, image_size: tuple[int, int]) -> PreparedVideo:
    """Frames as a tensor at the model input size, GT boxes mapped alongside."""
    v = index.video(video_id)
    width, height = index.image_size(video_id)
    frames, gts = [], []
    for t in range(v.num_frames):
        gt = index.ground_truth(video_id, t)
        if (width, height) == tuple(image_size):
            img = index.pixels(video_id, t).astype(np.float32) / 255.0
        else:
            lf, tr = letterbox(index.frame(video_id, t), image_size)
            img = lf.image
            gt = [GroundTruthInstance(tr.forward_box(g.box), g.label, g.frame_ref) for g in gt]
        frames.append(torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))))
        gts.append(list(gt))
    return PreparedVideo(torch.stack(frames), gts)


def flip_gts(gts, width: int):
    return [GroundTruthInstance(BoundingBox(width - g.box.x_max, g.box.y_min, width - g.box.x_min, g.box.y_max),
                                g.label, g.frame_ref) for g in gts]


def window_indices(t: int, num_frames: int, radius: int) -> list[int]:
    return [min(max(i, 0), num_frames - 1) for i in range(t - radius, t + radius + 1)]


class BatchBuilder:
    """Turns (video_id, t, flip) triples into model inputs and targets."""

    def __init__(self, index: DatasetIndex, model: FGFAYOLOX, config: TrainConfig):
        self.model = model
        self.config = config
        self.image_size = model.config.image_size
        self.videos = {v.video_id: prepare_video(index, v.video_id, self.image_size) for v in index.videos}
        width, height = self.image_size
        self.grid_sizes = [(height // s, width // s) for s in model.config.strides]
        self._targets: dict = {}

    def targets(self, video_id, t, flip):
        key = (video_id, t, flip)
        if key not in self._targets:
            gts = self.videos[video_id].gts[t]
            if flip:
                gts = flip_gts(gts, self.image_size[0])
            self._targets[key] = assign_targets(gts, self.model.config.strides, self.grid_sizes,
                                                self.config.size_ranges, self.config.center_radius)
        return self._targets[key]

    def build(self, items):
        radius = self.model.context_radius
        windows, targets = [], []
        for video_id, t, flip in items:
            v = self.videos[video_id]
            w = v.frames[window_indices(t, v.frames.shape[0], radius)]
            if flip:
                w = torch.flip(w, dims=[-1])
            windows.append(w)
            targets.append(self.targets(video_id, t, flip))
        return torch.stack(windows), targets


@dataclass
class TrainResult:
    model: FGFAYOLOX
    history: list[dict] = field(default_factory=list)


HISTORY_FIELDS = ("iteration", "epoch", "lr", "box", "obj", "cls", "total", "num_positive")


def train(dataset: DatasetIndex, config: TrainConfig, model: FGFAYOLOX,
          on_epoch_end: Callable[[int, FGFAYOLOX], None] | None = None) -> TrainResult:
    """Jointly train every submodule on windows sampled from ``dataset``.

    Deterministic for a fixed seed on a fixed device and thread count.
    ``on_epoch_end(epoch, model)`` runs after each pass, e.g. to save a checkpoint;
    with ``ema_decay > 0`` it receives, and training returns, the averaged weights.
    """
    positions = sample_positions(dataset, config.target_fps)
    if not positions:
        raise InvalidConfig("dataset yields no training windows")
    torch.manual_seed(config.seed)
    device = torch.device(config.device)
    model.to(device)
    model.train()
    builder = BatchBuilder(dataset, model, config)
    opt = SGDW(model.parameters(), config.momentum, config.weight_decay)
    ema = WeightAverage(model, config.ema_decay, config.ema_ramp_iters) if config.ema_decay > 0 else None
    rng = np.random.default_rng(config.seed)
    history = []
    iteration = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(positions))
        flips = rng.random(len(positions)) < 0.5 if config.hflip else np.zeros(len(positions), dtype=bool)
        for start in range(0, len(order), config.batch_windows):
            batch = [(positions[i][0], positions[i][1], bool(flips[i]))
                     for i in order[start:start + config.batch_windows]]
            frames, targets = builder.build(batch)
            lr = learning_rate_at(iteration, config)
            out = model(frames.to(device))
            losses = compute_loss(out, targets, model.config.strides)
            if not torch.isfinite(losses.total):
                raise DivergenceError(f"non-finite loss at iteration {iteration}")
            opt.zero_grad()
            losses.total.backward()
            opt.step(lr)
            if ema is not None:
                ema.update(model, iteration + 1)
            row = {"iteration": iteration, "epoch": epoch, "lr": lr, **losses.as_floats(),
                   "num_positive": losses.num_positive}
            history.append(row)
            if iteration % 50 == 0:
                log.info("iter %d epoch %d lr %.5f loss %.4f", iteration, epoch, lr, row["total"])
            iteration += 1
        if on_epoch_end is not None:
            on_epoch_end(epoch, _averaged_copy(model, ema))
    if ema is not None:
        ema.copy_to(model)
    model.eval()
    return TrainResult(model, history)


def _averaged_copy(model: FGFAYOLOX, ema: WeightAverage | None) -> FGFAYOLOX:
    if ema is None:
        return model
    snapshot = copy.deepcopy(model)
    ema.copy_to(snapshot)
    return snapshot.eval()


def history_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for row in history:
        w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_FIELDS])
    return buf.getvalue()


def write_history(history: Sequence[dict], path) -> Path:
    path = Path(path)
    path.write_text(history_csv(history))
    return path
