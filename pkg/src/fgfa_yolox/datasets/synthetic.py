"""Synthetic traffic-like videos of moving sprites with exact ground truth.

Three sprite shapes stand in for the three vehicle classes.  Sprites move on
integer, piecewise-linear paths (they bounce off the image border), may pass
behind static vertical occluders ("poles") or each other, and get a
directional box blur along their motion on some frames.  Ground-truth boxes
always describe the full, unoccluded, unblurred sprite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..datamodel import DEFAULT_CLASS_NAMES, BoundingBox, GroundTruthInstance
from .index import DatasetIndex, VideoRecord

CLASS_COLORS = np.array([[0.85, 0.15, 0.15], [0.15, 0.75, 0.20], [0.15, 0.30, 0.90]])


@dataclass(frozen=True)
class SyntheticConfig:
    min_sprites: int = 1
    max_sprites: int = 3
    scale_range: tuple[int, int] = (10, 18)
    speed_range: tuple[int, int] = (1, 4)
    occluder_count: tuple[int, int] = (0, 1)
    occluder_width: tuple[int, int] = (4, 8)
    blur_prob: float = 0.2
    blur_length: tuple[int, int] = (3, 7)
    noise_std: float = 0.02
    fps: float = 10.0
    # frames a sprite stays in the scene before a fresh one replaces it;
    # None keeps every sprite for the whole video
    lifetime: tuple[int, int] | None = (20, 40)

    @classmethod
    def heavy(cls, **kw) -> "SyntheticConfig":
        """Wide occluders and frequent strong blur."""
        base = dict(occluder_count=(2, 2), occluder_width=(10, 16), blur_prob=0.5, blur_length=(5, 11))
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True)
class SpriteSpec:
    label: int
    width: int
    height: int
    x: int
    y: int
    vx: int
    vy: int
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    start: int = 0
    end: int | None = None  # exclusive; None means until the last frame

    def visible_at(self, t: int) -> bool:
        return self.start <= t and (self.end is None or t < self.end)


@dataclass(frozen=True)
class Occluder:
    x: int
    width: int
    color: tuple[float, float, float] = (0.3, 0.3, 0.3)


def _disk(h, w, cx, cy, r):
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def sprite_mask(label: int, width: int, height: int, facing_left: bool = False) -> np.ndarray:
    """Boolean mask that touches all four edges of its ``height x width`` box."""
    h, w = height, width
    m = np.zeros((h, w), dtype=bool)
    if label == 0:  # bicycle: two wheels joined by a frame
        r = min(h / 2, w / 3.2)
        inner = max(r - max(1.5, 0.4 * r), 0.0)
        for cx in (r, w - r):
            ring = _disk(h, w, cx, h - r, r) & ~_disk(h, w, cx, h - r, inner)
            m |= ring
        top = max(1, int(round(0.2 * h)))
        m[:top, int(r):int(np.ceil(w - r))] = True
        mid = int(w / 2)
        m[:int(np.ceil(h - r)), mid - 1:mid + 1] = True
    elif label == 1:  # skateboard: deck plus two wheels
        deck = max(1, int(round(0.55 * h)))
        m[:deck, :] = True
        m[0, 0] = m[0, w - 1] = False
        r = max(1.0, (h - deck) * 0.9)
        for cx in (0.22 * w, 0.78 * w):
            m |= _disk(h, w, cx, h - r, r)
        m[h - 1, int(0.22 * w)] = True
    else:  # e-scooter: stem, handlebar, deck
        stem = max(1, int(round(0.25 * w)))
        m[:, w - stem:] = True
        deck = max(1, int(round(0.15 * h)))
        m[h - deck:, :] = True
        bar = max(1, int(round(0.1 * h)))
        m[:bar, int(0.4 * w):] = True
    if facing_left:
        m = m[:, ::-1]
    return m


def sprite_size(label: int, scale: int) -> tuple[int, int]:
    """(width, height) of a sprite of the given class and nominal size."""
    if label == 0:
        return int(round(1.6 * scale)), scale
    if label == 1:
        return int(round(2.2 * scale)), max(4, int(round(0.6 * scale)))
    return max(5, int(round(0.75 * scale))), int(round(1.3 * scale))


def simulate_track(spec: SpriteSpec, num_frames: int, image_size: tuple[int, int]) -> list[tuple[int, int, int, int]]:
    """Per-frame (x, y, vx, vy); positions bounce off the image border."""
    width, height = image_size
    x, y, vx, vy = spec.x, spec.y, spec.vx, spec.vy
    max_x, max_y = width - spec.width, height - spec.height
    track = []
    for _ in range(num_frames):
        track.append((x, y, vx, vy))
        x, y = x + vx, y + vy
        if x < 0:
            x, vx = -x, -vx
        elif x > max_x:
            x, vx = 2 * max_x - x, -vx
        if y < 0:
            y, vy = -y, -vy
        elif y > max_y:
            y, vy = 2 * max_y - y, -vy
    return track


def _shift(arr: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(arr)
    h, w = arr.shape[:2]
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = arr[src_y, src_x]
    return out


def motion_blur(layer: np.ndarray, vx: float, vy: float, length: int) -> np.ndarray:
    """Directional box filter of ``length`` taps along (vx, vy)."""
    norm = float(np.hypot(vx, vy))
    if length <= 1 or norm == 0:
        return layer
    dx, dy = vx / norm, vy / norm
    acc = np.zeros_like(layer)
    for k in range(length):
        o = k - (length - 1) / 2
        acc += _shift(layer, int(round(o * dx)), int(round(o * dy)))
    return acc / length


def make_background(rng: np.random.Generator, image_size: tuple[int, int]) -> np.ndarray:
    width, height = image_size
    c0 = rng.uniform(0.35, 0.65) + rng.uniform(-0.05, 0.05, size=3)
    c1 = rng.uniform(0.35, 0.65) + rng.uniform(-0.05, 0.05, size=3)
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:height, 0:width]
    ramp = (np.cos(angle) * xx / width + np.sin(angle) * yy / height)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    bg = c0[None, None, :] * (1 - ramp[..., None]) + c1[None, None, :] * ramp[..., None]
    texture = rng.normal(0, 0.04, size=(height // 4 + 1, width // 4 + 1))
    texture = np.kron(texture, np.ones((4, 4)))[:height, :width]
    return np.clip(bg + texture[..., None], 0, 1)


def render_video(background: np.ndarray, sprites: list[SpriteSpec], occluders: list[Occluder],
                 num_frames: int, rng: np.random.Generator, config: SyntheticConfig | None = None,
                 video_id: str = "video"):
    """Render frames; returns (uint8 pixels (T, H, W, 3), {t: [GroundTruthInstance]})."""
    config = config or SyntheticConfig()
    height, width = background.shape[:2]
    tracks = [simulate_track(s, max(num_frames - s.start, 0), (width, height)) for s in sprites]
    masks = {}
    frames = np.empty((num_frames, height, width, 3), dtype=np.uint8)
    gts: dict[int, list[GroundTruthInstance]] = {}
    for t in range(num_frames):
        canvas = background.copy()
        frame_gts = []
        for spec, track in zip(sprites, tracks):
            if not spec.visible_at(t):
                continue
            x, y, vx, vy = track[t - spec.start]
            key = (spec.label, spec.width, spec.height, vx < 0)
            if key not in masks:
                masks[key] = sprite_mask(spec.label, spec.width, spec.height, facing_left=vx < 0)
            alpha = np.zeros((height, width), dtype=np.float64)
            alpha[y:y + spec.height, x:x + spec.width] = masks[key]
            layer = np.concatenate([alpha[..., None] * np.asarray(spec.color), alpha[..., None]], axis=2)
            if rng.random() < config.blur_prob:
                length = int(rng.integers(config.blur_length[0], config.blur_length[1] + 1))
                layer = motion_blur(layer, vx, vy, length)
            a = layer[..., 3:4]
            canvas = canvas * (1 - a) + layer[..., :3]
            frame_gts.append(GroundTruthInstance(
                BoundingBox(float(x), float(y), float(x + spec.width), float(y + spec.height)),
                spec.label, (video_id, t)))
        for occ in occluders:
            canvas[:, occ.x:occ.x + occ.width] = occ.color
        if config.noise_std > 0:
            canvas = canvas + rng.normal(0, config.noise_std, size=canvas.shape)
        frames[t] = np.round(np.clip(canvas, 0, 1) * 255).astype(np.uint8)
        gts[t] = frame_gts
    return frames, gts


def random_sprite(rng: np.random.Generator, image_size: tuple[int, int], config: SyntheticConfig,
                  start: int = 0, end: int | None = None) -> SpriteSpec:
    width, height = image_size
    label = int(rng.integers(0, 3))
    scale = int(rng.integers(config.scale_range[0], config.scale_range[1] + 1))
    w, h = sprite_size(label, scale)
    w, h = min(w, width - 2), min(h, height - 2)
    speed = int(rng.integers(config.speed_range[0], config.speed_range[1] + 1))
    vx = speed * (1 if rng.random() < 0.5 else -1)
    vy = int(rng.integers(-1, 2))
    color = np.clip(CLASS_COLORS[label] + rng.uniform(-0.12, 0.12, size=3), 0, 1)
    return SpriteSpec(label, w, h, int(rng.integers(0, width - w + 1)), int(rng.integers(0, height - h + 1)),
                      vx, vy, tuple(float(c) for c in color), start, end)


def random_sprite_slot(rng: np.random.Generator, image_size: tuple[int, int], config: SyntheticConfig,
                       num_frames: int) -> list[SpriteSpec]:
    """Sprites that occupy one scene slot back to back for ``num_frames`` frames."""
    if config.lifetime is None:
        return [random_sprite(rng, image_size, config)]
    out, start = [], 0
    while start < num_frames:
        life = int(rng.integers(config.lifetime[0], config.lifetime[1] + 1))
        end = start + life
        out.append(random_sprite(rng, image_size, config, start, end if end < num_frames else None))
        start = end
    return out


def random_occluders(rng: np.random.Generator, image_size: tuple[int, int], config: SyntheticConfig) -> list[Occluder]:
    width = image_size[0]
    count = int(rng.integers(config.occluder_count[0], config.occluder_count[1] + 1))
    out = []
    for _ in range(count):
        ow = int(rng.integers(config.occluder_width[0], config.occluder_width[1] + 1))
        gray = rng.uniform(0.15, 0.45)
        color = tuple(float(gray + d) for d in rng.uniform(-0.05, 0.05, size=3))
        out.append(Occluder(int(rng.integers(0, width - ow + 1)), ow, color))
    return out


def generate_synthetic_dataset(seed: int, num_videos: int, frames_per_video: int,
                               image_size: tuple[int, int] = (64, 64),
                               config: SyntheticConfig | None = None,
                               class_names=DEFAULT_CLASS_NAMES) -> DatasetIndex:
    """Deterministic (given ``seed``) in-memory dataset of sprite videos."""
    if num_videos <= 0 or frames_per_video <= 0 or min(image_size) <= 0:
        raise ValueError("sizes must be positive")
    config = config or SyntheticConfig()
    children = np.random.SeedSequence(seed).spawn(num_videos)
    videos, annotations = [], {}
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        video_id = f"syn{seed}v{i:03d}"
        n = int(rng.integers(config.min_sprites, config.max_sprites + 1))
        sprites = [s for _ in range(n) for s in random_sprite_slot(rng, image_size, config, frames_per_video)]
        occluders = random_occluders(rng, image_size, config)
        background = make_background(rng, image_size)
        pixels, gts = render_video(background, sprites, occluders, frames_per_video, rng, config, video_id)
        videos.append(VideoRecord(video_id, [None] * frames_per_video, config.fps, pixels))
        for t, g in gts.items():
            if g:
                annotations[(video_id, t)] = g
    return DatasetIndex(videos, annotations, tuple(class_names))
