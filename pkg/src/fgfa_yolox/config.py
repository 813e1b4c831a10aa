"""Run configuration: an INI file merged with command-line overrides.

File layout (every key optional)::

    [data]
    dataset = synthetic          ; or a directory
    format = auto                ; auto | yolo | coco | voc | synthetic
    split = train                ; synthetic only: train | test
    data_seed = 0
    num_videos = 8
    frames_per_video = 300
    heavy = false

    [model]
    preset = desk                ; desk | paper
    context_radius = 2
    image_size = 64x64

    [train]
    learning_rate = 0.02
    ...                          ; any TrainConfig field

    [post]
    score_threshold = 0.01
    nms_iou_threshold = 0.65
    max_detections = 100

    [run]
    out_dir = runs/default
    seed = 0
    target_fps = 10

Flags given on the command line win over the file.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .detector import ModelConfig, PostprocessConfig
from .errors import InvalidConfig
from .training import TrainConfig

FORMATS = ("auto", "yolo", "coco", "voc", "synthetic")
PRESETS = ("desk", "paper")
SYNTHETIC = "synthetic"
# the held-out synthetic split draws from a disjoint seed range
SYNTHETIC_TEST_SEED_OFFSET = 10_000


def parse_size(text: str) -> tuple[int, int]:
    """``"64x48"`` -> (64, 48) as (width, height); a single number means square."""
    parts = str(text).lower().replace(",", "x").split("x")
    try:
        nums = [int(p) for p in parts if p.strip()]
    except ValueError:
        raise InvalidConfig(f"bad image size {text!r}; expected WxH") from None
    if len(nums) == 1:
        nums = nums * 2
    if len(nums) != 2 or min(nums) <= 0:
        raise InvalidConfig(f"bad image size {text!r}; expected WxH")
    return nums[0], nums[1]


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise InvalidConfig(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class DataSpec:
    dataset: str = SYNTHETIC
    format: str = "auto"
    split: str = "train"
    data_seed: int = 0
    num_videos: int = 8
    frames_per_video: int = 300
    heavy: bool = False

    @property
    def is_synthetic(self) -> bool:
        return self.dataset == SYNTHETIC or self.format == SYNTHETIC

    @property
    def synthetic_seed(self) -> int:
        return self.data_seed + (SYNTHETIC_TEST_SEED_OFFSET if self.split == "test" else 0)


@dataclass(frozen=True)
class RunConfig:
    data: DataSpec = field(default_factory=DataSpec)
    preset: str = "desk"
    context_radius: int = 2
    image_size: tuple[int, int] | None = None  # None: preset default
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    post: PostprocessConfig = field(default_factory=PostprocessConfig)
    out_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if self.context_radius < 0:
            raise InvalidConfig("context_radius must be >= 0")
        if self.preset not in PRESETS:
            raise InvalidConfig(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.data.format not in FORMATS:
            raise InvalidConfig(f"unknown format {self.data.format!r}; choose from {FORMATS}")
        if self.data.split not in ("train", "test"):
            raise InvalidConfig("split must be train or test")

    def model_config(self, class_names=None) -> ModelConfig:
        make = ModelConfig.desk if self.preset == "desk" else ModelConfig.paper
        kw = {}
        if self.image_size is not None:
            kw["image_size"] = tuple(self.image_size)
        base = make(self.context_radius, **kw)
        if class_names is not None and tuple(class_names) != base.class_names:
            base = replace(base, class_names=tuple(class_names),
                           head=replace(base.head, num_classes=len(class_names)))
        return base

    def check_paths(self):
        """Raise FileNotFoundError for a dataset directory that does not exist."""
        if not self.data.is_synthetic and not Path(self.data.dataset).exists():
            raise FileNotFoundError(f"dataset path {self.data.dataset} does not exist")

    def to_ini(self) -> str:
        """Serialise in the same layout ``load_run_config`` reads."""
        cp = configparser.ConfigParser()
        cp["data"] = {f.name: _fmt(getattr(self.data, f.name)) for f in fields(DataSpec)}
        cp["model"] = {"preset": self.preset, "context_radius": str(self.context_radius),
                       "image_size": "" if self.image_size is None else f"{self.image_size[0]}x{self.image_size[1]}"}
        cp["train"] = {f.name: _fmt(getattr(self.train, f.name)) for f in fields(TrainConfig)}
        cp["post"] = {f.name: _fmt(getattr(self.post, f.name)) for f in fields(PostprocessConfig)}
        cp["run"] = {"out_dir": self.out_dir, "seed": str(self.seed)}
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ";".join(",".join(_fmt(x) for x in item) if isinstance(item, tuple) else _fmt(item) for item in v)
    return str(v)


def _parse_ranges(text: str) -> tuple:
    try:
        bands = tuple(tuple(float(x) for x in band.split(",")) for band in str(text).split(";"))
    except ValueError:
        raise InvalidConfig(f"bad size ranges {text!r}; expected lo,hi;lo,hi;lo,hi") from None
    if any(len(b) != 2 for b in bands):
        raise InvalidConfig(f"bad size ranges {text!r}")
    return bands


def _coerce(cls, name: str, value):
    """Convert a string value to the declared type of ``cls.name``."""
    known = {f.name: f for f in fields(cls)}
    if name not in known:
        raise InvalidConfig(f"unknown key {name!r} for {cls.__name__}")
    default = getattr(cls(), name)
    if not isinstance(value, str):
        return value
    if name == "size_ranges":
        return _parse_ranges(value)
    try:
        if isinstance(default, bool):
            return _parse_bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise InvalidConfig(f"bad value {value!r} for {name}") from None
    return value


def read_ini(path) -> dict[str, dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise InvalidConfig(f"config file {path} not found")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise InvalidConfig(f"cannot parse {path}: {exc}") from None
    known = {"data", "model", "train", "post", "run"}
    extra = set(cp.sections()) - known
    if extra:
        raise InvalidConfig(f"unknown config sections {sorted(extra)}")
    return {s: dict(cp[s]) for s in cp.sections()}


def build_run_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge ``{section: {key: value}}`` from a file with flag overrides (same shape).

    Override values of ``None`` are ignored so unset flags fall through.
    """
    merged: dict[str, dict] = {s: {} for s in ("data", "model", "train", "post", "run")}
    for source in (file_values or {}, overrides or {}):
        for section, values in source.items():
            if section not in merged:
                raise InvalidConfig(f"unknown config section {section!r}")
            merged[section].update({k: v for k, v in values.items() if v is not None and v != ""})

    data = DataSpec(**{k: _coerce(DataSpec, k, v) for k, v in merged["data"].items()})
    model = merged["model"]
    run = merged["run"]
    preset = model.get("preset", "desk")
    seed = int(run.get("seed", 0))

    train_kw = {k: _coerce(TrainConfig, k, v) for k, v in merged["train"].items()}
    if "target_fps" in run:
        train_kw.setdefault("target_fps", float(run["target_fps"]))
    train_kw.setdefault("seed", seed)
    train_cfg = TrainConfig.desk(**train_kw) if preset == "desk" else TrainConfig(**train_kw)
    post = PostprocessConfig(**{k: _coerce(PostprocessConfig, k, v) for k, v in merged["post"].items()})

    size = model.get("image_size")
    try:
        radius = int(model.get("context_radius", 2))
    except ValueError:
        raise InvalidConfig(f"bad context_radius {model['context_radius']!r}") from None
    extra = set(run) - {"out_dir", "seed", "target_fps"}
    if extra:
        raise InvalidConfig(f"unknown [run] keys {sorted(extra)}")
    extra = set(model) - {"preset", "context_radius", "image_size"}
    if extra:
        raise InvalidConfig(f"unknown [model] keys {sorted(extra)}")
    return RunConfig(data=data, preset=preset, context_radius=radius,
                     image_size=parse_size(size) if size else None, train=train_cfg, post=post,
                     out_dir=str(run.get("out_dir", "runs/default")), seed=seed)


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    return build_run_config(read_ini(path) if path else None, overrides)
