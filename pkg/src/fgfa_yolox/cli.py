"""``fgfa-yolox`` command line: train, eval, render and make-synthetic.

Exit codes: 0 success, 1 configuration error, 2 data error (missing or
malformed dataset), 3 training diverged, 4 checkpoint problem.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_model, save_model
from .config import RunConfig, build_run_config, read_ini
from .datamodel import make_window
from .datasets import generate_synthetic_dataset, load_dataset, write_coco, write_voc, write_yolo
from .datasets.coco import coco_image_ids
from .datasets.index import DatasetIndex, frame_stem
from .datasets.synthetic import SyntheticConfig
from .detector import FGFAYOLOX, PostprocessConfig, detect, detections_from_coco, detections_to_coco
from .errors import CheckpointError, DivergenceError, FGFAError, InvalidConfig, ParseError, ValidationError
from .evaluation import evaluate
from .pipeline import predict_dataset
from .training import train, write_history

log = logging.getLogger("fgfa_yolox")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_CHECKPOINT = 0, 1, 2, 3, 4
WRITERS = {"yolo": write_yolo, "coco": write_coco, "voc": write_voc}
BOX_COLORS = [(230, 60, 60), (60, 200, 80), (70, 110, 240), (240, 200, 40), (200, 80, 220), (40, 200, 200)]


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# -- argument plumbing -------------------------------------------------------

def _add_common(p: argparse.ArgumentParser):
    g = p.add_argument_group("run")
    g.add_argument("--config", help="INI file with [data]/[model]/[train]/[post]/[run] sections")
    g.add_argument("--out-dir", help="directory for every output file (default runs/default)")
    g.add_argument("--seed", type=int, help="seed for initialisation, shuffling and flips (default 0)")
    g.add_argument("--device", help="torch device, e.g. cpu or cuda (default cpu)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    d = p.add_argument_group("data")
    d.add_argument("--dataset", help="dataset directory, or 'synthetic' (default)")
    d.add_argument("--format", choices=["auto", "yolo", "coco", "voc", "synthetic"],
                   help="annotation format of --dataset (default auto-detect)")
    d.add_argument("--split", choices=["train", "test"], help="synthetic split to generate (default train)")
    d.add_argument("--data-seed", type=int, help="synthetic generator seed (default 0)")
    d.add_argument("--num-videos", type=int, help="synthetic videos (default 8)")
    d.add_argument("--frames-per-video", type=int, help="synthetic frames per video (default 300)")
    d.add_argument("--heavy", action="store_const", const=True,
                   help="synthetic data with heavy motion blur and occlusion")
    m = p.add_argument_group("model")
    m.add_argument("--preset", choices=["desk", "paper"], help="model size preset (default desk)")
    m.add_argument("--context-radius", "-N", type=int, help="temporal neighbours per side (default 2)")
    m.add_argument("--image-size", help="network input size WxH (default from preset)")
    m.add_argument("--target-fps", type=float, help="frame sampling rate for training windows (default 10)")


def _add_post(p: argparse.ArgumentParser, score_default_note: str = "0.01"):
    g = p.add_argument_group("post-processing")
    g.add_argument("--score-thr", type=float, help=f"minimum detection score (default {score_default_note})")
    g.add_argument("--nms-thr", type=float, help="class-wise NMS IoU threshold (default 0.65)")
    g.add_argument("--max-det", type=int, help="detections kept per frame (default 100)")


def _overrides(args) -> dict:
    o = {
        "data": {"dataset": args.dataset, "format": args.format, "split": args.split,
                 "data_seed": args.data_seed, "num_videos": args.num_videos,
                 "frames_per_video": args.frames_per_video, "heavy": args.heavy},
        "model": {"preset": args.preset, "context_radius": args.context_radius, "image_size": args.image_size},
        "run": {"out_dir": args.out_dir, "seed": args.seed, "target_fps": args.target_fps},
        "train": {"device": args.device},
        "post": {},
    }
    for flag, key in (("score_thr", "score_threshold"), ("nms_thr", "nms_iou_threshold"),
                      ("max_det", "max_detections")):
        if getattr(args, flag, None) is not None:
            o["post"][key] = getattr(args, flag)
    for flag, key in (("epochs", "epochs"), ("lr", "learning_rate"), ("momentum", "momentum"),
                      ("weight_decay", "weight_decay"), ("warmup", "warmup_iters"),
                      ("batch", "batch_windows"), ("hflip", "hflip"), ("ema_decay", "ema_decay")):
        if getattr(args, flag, None) is not None:
            o["train"][key] = getattr(args, flag)
    return o


def resolve_config(args) -> RunConfig:
    file_values = read_ini(args.config) if args.config else None
    return build_run_config(file_values, _overrides(args))


def load_data(cfg: RunConfig) -> DatasetIndex:
    d = cfg.data
    if d.is_synthetic:
        synth = SyntheticConfig.heavy() if d.heavy else SyntheticConfig()
        return generate_synthetic_dataset(d.synthetic_seed, d.num_videos, d.frames_per_video, config=synth)
    return load_dataset(d.dataset, d.format)


def _load_checkpoint(path) -> FGFAYOLOX:
    model, _ = load_model(path)
    return model


def _check_classes(model: FGFAYOLOX, index: DatasetIndex, path):
    if tuple(model.config.class_names) != tuple(index.class_names):
        raise CheckpointError(f"checkpoint {path} was trained for classes {list(model.config.class_names)}, "
                              f"dataset has {list(index.class_names)}")


# -- commands ----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    cfg.check_paths()
    index = load_data(cfg)
    index.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.ini").write_text(cfg.to_ini())
    model = FGFAYOLOX(cfg.model_config(index.class_names), seed=cfg.seed)

    def checkpoint(epoch, m):
        save_model(out / f"checkpoint_epoch{epoch + 1}.npz", m, {"epoch": epoch + 1})

    result = train(index, cfg.train, model, on_epoch_end=checkpoint)
    save_model(out / "checkpoint.npz", result.model, {"epoch": cfg.train.epochs})
    write_history(result.history, out / "loss.csv")
    print(f"trained {len(result.history)} iterations; checkpoint {out / 'checkpoint.npz'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    cfg.check_paths()
    index = load_data(cfg)
    index.validate()
    if args.predictions:
        ids = coco_image_ids(index)
        inverse = {v: k for k, v in ids.items()}
        try:
            results = json.loads(Path(args.predictions).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read predictions: {exc}", args.predictions) from None
        by_id = detections_from_coco(results, category_offset=1)
        unknown = sorted(set(by_id) - set(inverse))
        if unknown:
            raise ValidationError(f"predictions reference unknown image ids {unknown[:5]}")
        dets = {inverse[i]: d for i, d in by_id.items()}
        gts = {k: list(index.ground_truth(*k)) for k in index.frame_keys()}
    else:
        if not args.checkpoint:
            raise InvalidConfig("eval needs --checkpoint or --predictions")
        model = _load_checkpoint(args.checkpoint)
        _check_classes(model, index, args.checkpoint)
        dets, gts = predict_dataset(model, index, post=cfg.post)
    report = evaluate(dets, gts, index.class_names, confusion_iou_threshold=args.iou_thr,
                      confusion_score_threshold=args.conf_score_thr)
    out = Path(cfg.out_dir)
    report.write(out)
    if args.export_predictions:
        ids = coco_image_ids(index)
        results = detections_to_coco({ids[k]: v for k, v in dets.items()}, category_offset=1)
        (out / "predictions.json").write_text(json.dumps(results, indent=1) + "\n")
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _draw(image: np.ndarray, dets, class_names, scale: int, title: str | None):
    from PIL import Image, ImageDraw

    img = Image.fromarray(image).resize((image.shape[1] * scale, image.shape[0] * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for d in dets:
        color = BOX_COLORS[d.label % len(BOX_COLORS)]
        b = d.box
        draw.rectangle([b.x_min * scale, b.y_min * scale, b.x_max * scale - 1, b.y_max * scale - 1],
                       outline=color, width=max(1, scale // 2))
        name = class_names[d.label] if 0 <= d.label < len(class_names) else str(d.label)
        draw.text((b.x_min * scale + 2, max(0, b.y_min * scale - 11)), f"{name} {d.score:.2f}", fill=color)
    if title:
        draw.text((3, 2), title, fill=(255, 255, 255))
    return img


def cmd_render(args) -> int:
    from PIL import Image

    cfg = resolve_config(args)
    cfg.check_paths()
    index = load_data(cfg)
    model = _load_checkpoint(args.checkpoint)
    _check_classes(model, index, args.checkpoint)
    other = None
    if args.compare:
        other = _load_checkpoint(args.compare)
        _check_classes(other, index, args.compare)
    video_id = args.video or index.videos[0].video_id
    try:
        clip = index.clip(video_id)
    except KeyError:
        raise ValidationError(f"no video {video_id!r} in dataset") from None
    post = cfg.post if args.score_thr is not None else PostprocessConfig(
        0.3, cfg.post.nms_iou_threshold, cfg.post.max_detections)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stop = min(len(clip), args.start + args.num_frames)
    caches = {id(model): {}, id(other): {}}
    written = 0
    for t in range(args.start, stop):
        panels = []
        for m in (model, other) if other is not None else (model,):
            dets = detect(make_window(clip, t, m.context_radius), m, post, feature_cache=caches[id(m)])
            title = f"N={m.context_radius}" if other is not None else None
            panels.append(_draw(index.pixels(video_id, t), dets, index.class_names, args.scale, title))
        canvas = Image.new("RGB", (sum(p.width for p in panels) + 4 * (len(panels) - 1), panels[0].height))
        x = 0
        for p in panels:
            canvas.paste(p, (x, 0))
            x += p.width + 4
        canvas.save(out / f"{frame_stem(video_id, t)}.png")
        written += 1
    print(f"wrote {written} frames to {out}")
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    cfg = resolve_config(args)
    index = load_data(cfg) if cfg.data.is_synthetic else None
    if index is None:
        raise InvalidConfig("make-synthetic only generates synthetic data; drop --dataset")
    out = Path(cfg.out_dir)
    WRITERS[args.write_format](index, out)
    counts = index.class_counts()
    print(f"wrote {len(index.videos)} videos ({sum(v.num_frames for v in index.videos)} frames) "
          f"as {args.write_format} to {out}; boxes per class {counts}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fgfa-yolox", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write checkpoints plus loss.csv")
    _add_common(p)
    t = p.add_argument_group("optimisation")
    t.add_argument("--epochs", type=int, help="passes over the sampled windows (default 3)")
    t.add_argument("--lr", type=float, help="base learning rate (desk default 0.02, paper 1e-4)")
    t.add_argument("--momentum", type=float, help="SGD momentum (default 0.9)")
    t.add_argument("--weight-decay", type=float, help="decoupled weight decay (default 1e-5)")
    t.add_argument("--warmup", type=int, help="linear warm-up iterations (desk default 50, paper 500)")
    t.add_argument("--batch", type=int, help="windows per optimiser step (default 8)")
    t.add_argument("--hflip", action=argparse.BooleanOptionalAction, default=None,
                   help="random horizontal flips of whole windows (desk default on)")
    t.add_argument("--ema-decay", type=float,
                   help="moving-average decay of the returned weights, 0 disables (desk default 0.995, paper 0)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint (or a predictions file) on a dataset")
    _add_common(p)
    _add_post(p)
    p.add_argument("--checkpoint", help="model checkpoint (.npz)")
    p.add_argument("--predictions", help="score this COCO results file instead of running a model")
    p.add_argument("--iou-thr", type=float, default=0.5, help="IoU threshold of the confusion matrix (default 0.5)")
    p.add_argument("--conf-score-thr", type=float, default=0.3,
                   help="score threshold of the confusion matrix (default 0.3)")
    p.add_argument("--export-predictions", action="store_true",
                   help="also write predictions.json in COCO results format")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="draw detections on frames and save PNGs")
    _add_common(p)
    _add_post(p, "0.3 here")
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.npz)")
    p.add_argument("--compare", help="second checkpoint drawn side by side (e.g. an N=0 model)")
    p.add_argument("--video", help="video id (default: first video)")
    p.add_argument("--start", type=int, default=0, help="first frame index (default 0)")
    p.add_argument("--num-frames", type=int, default=10, help="frames to render (default 10)")
    p.add_argument("--scale", type=int, default=4, help="integer upscaling of the drawn frames (default 4)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("make-synthetic", help="generate sprite videos and write them to disk")
    _add_common(p)
    p.add_argument("--write-format", choices=sorted(WRITERS), default="yolo",
                   help="annotation format to write (default yolo)")
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except InvalidConfig as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ParseError, ValidationError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except FGFAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
