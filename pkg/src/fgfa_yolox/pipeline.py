"""Dataset-level inference glue between the detector and the evaluator."""

from __future__ import annotations

from .datasets.index import DatasetIndex
from .datasets.sampling import sample_positions
from .datamodel import make_window
from .detector import FGFAYOLOX, PostprocessConfig, detect
from .evaluation import EvalReport, evaluate


def predict_dataset(model: FGFAYOLOX, index: DatasetIndex, target_fps: float | None = None,
                    post: PostprocessConfig | None = None) -> tuple[dict, dict]:
    """Run ``detect`` on every sampled current frame.

    Returns ({(video_id, t): [Detection]}, {(video_id, t): [GroundTruthInstance]}).
    ``target_fps=None`` evaluates every frame.
    """
    post = post or PostprocessConfig()
    if target_fps is None:
        positions = list(index.frame_keys())
    else:
        positions = sample_positions(index, target_fps)
    model.eval()
    dets, gts = {}, {}
    clip_id, clip, cache = None, None, None
    for vid, t in positions:
        if vid != clip_id:
            clip_id, clip, cache = vid, index.clip(vid), {}
        window = make_window(clip, t, model.context_radius)
        dets[(vid, t)] = detect(window, model, post, feature_cache=cache)
        gts[(vid, t)] = list(index.ground_truth(vid, t))
    return dets, gts


def evaluate_model(model: FGFAYOLOX, index: DatasetIndex, target_fps: float | None = None,
                   post: PostprocessConfig | None = None, **eval_kw) -> EvalReport:
    dets, gts = predict_dataset(model, index, target_fps, post)
    return evaluate(dets, gts, index.class_names, **eval_kw)
