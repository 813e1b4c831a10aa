import math

import numpy as np
import pytest
import torch

from fgfa_yolox.aggregation import AggregationConfig, TemporalAggregator
from fgfa_yolox.backbone import extract_features, wrap_levels
from fgfa_yolox.datamodel import BoundingBox, Detection, Frame, iou, make_window
from fgfa_yolox.detector import (FGFAYOLOX, DecoupledHead, HeadConfig, HeadOutput, ModelConfig, NeckConfig, PAFPN,
                                 PostprocessConfig, decode_arrays, decode_boxes, detect, detect_single_frame,
                                 detections_from_coco, detections_to_coco, head_forward, head_outputs_from_batch,
                                 neck_forward, nms, postprocess)
from fgfa_yolox.errors import InvalidConfig, InvalidInputShape

from conftest import random_clip, random_frame

STRIDES = (8, 16, 32)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def random_head_output(rng, k=3, sizes=(8, 4, 2), scale=1.0):
    return [HeadOutput(torch.from_numpy(rng.standard_normal((k, s, s)) * 3),
                       torch.from_numpy(rng.standard_normal((1, s, s)) * 3),
                       torch.from_numpy(rng.standard_normal((4, s, s)) * scale), st)
            for s, st in zip(sizes, STRIDES)]


# -- neck and head -----------------------------------------------------------

@pytest.fixture(scope="module")
def neck():
    torch.manual_seed(0)
    return PAFPN(NeckConfig((16, 32, 64), 32)).eval()


def test_neck_shapes(neck):
    rng = np.random.default_rng(0)
    g = wrap_levels([torch.from_numpy(rng.standard_normal(s)).float() for s in ((16, 8, 8), (32, 4, 4), (64, 2, 2))])
    out = neck_forward(g, neck)
    assert [o.shape for o in out] == [(32, 8, 8), (32, 4, 4), (32, 2, 2)]
    assert [o.stride for o in out] == [8, 16, 32]


def test_neck_zero_input_finite(neck):
    g = wrap_levels([torch.zeros(s) for s in ((16, 8, 8), (32, 4, 4), (64, 2, 2))])
    assert all(torch.isfinite(o.data).all() for o in neck_forward(g, neck))


def test_neck_top_down_flow(neck):
    rng = np.random.default_rng(1)
    levels = [torch.from_numpy(rng.standard_normal(s)).float() for s in ((16, 8, 8), (32, 4, 4), (64, 2, 2))]
    base = neck_forward(wrap_levels(levels), neck)[0].data
    levels[2] = levels[2] + 1.0
    moved = neck_forward(wrap_levels(levels), neck)[0].data
    assert (moved - base).abs().max().item() > 1e-4


def test_neck_rejects_wrong_channels(neck):
    with pytest.raises(InvalidInputShape):
        neck([torch.zeros(1, 8, 8, 8), torch.zeros(1, 32, 4, 4), torch.zeros(1, 64, 2, 2)])


@pytest.fixture(scope="module")
def head():
    torch.manual_seed(0)
    return DecoupledHead(32, HeadConfig(3, 32, 2)).eval()


def test_head_shapes(head):
    feats = wrap_levels([torch.randn(32, s, s) for s in (8, 4, 2)])
    out = head_forward(feats, head)
    assert tuple(out[0].cls_logits.shape) == (3, 8, 8)
    assert tuple(out[0].obj_logits.shape) == (1, 8, 8)
    assert tuple(out[0].box_reg.shape) == (4, 8, 8)


def test_prior_initialisation(head):
    bias = -math.log((1 - 0.01) / 0.01)
    for conv in list(head.cls_preds) + list(head.obj_preds):
        torch.testing.assert_close(conv.bias.detach(), torch.full_like(conv.bias, bias))
    assert sigmoid(bias) == pytest.approx(0.01, abs=1e-12)
    feats = wrap_levels([torch.randn(32, s, s) for s in (8, 4, 2)])
    obj = torch.sigmoid(head_forward(feats, head)[0].obj_logits)
    # weights start at std 0.01, so the output stays near the prior
    assert (obj - 0.01).abs().max().item() < 0.005


def test_zero_cls_layer_gives_half(head):
    import copy

    h = copy.deepcopy(head)
    for conv in h.cls_preds:
        torch.nn.init.zeros_(conv.weight)
        torch.nn.init.zeros_(conv.bias)
    feats = wrap_levels([torch.randn(32, s, s) for s in (8, 4, 2)])
    for ho in head_forward(feats, h):
        assert torch.equal(torch.sigmoid(ho.cls_logits), torch.full_like(ho.cls_logits, 0.5))


def test_head_output_shape_check():
    with pytest.raises(InvalidInputShape):
        HeadOutput(torch.zeros(3, 4, 4), torch.zeros(1, 4, 4), torch.zeros(4, 2, 2), 8)


# -- decoding ----------------------------------------------------------------

def _single_level(reg_values, stride=8, size=1, k=1):
    reg = torch.zeros(4, size, size, dtype=torch.float64)
    reg[:, 0, 0] = torch.tensor(reg_values, dtype=torch.float64)
    return HeadOutput(torch.full((k, size, size), 10.0, dtype=torch.float64),
                      torch.full((1, size, size), 10.0, dtype=torch.float64), reg, stride)


def test_decode_cell_zero():
    boxes, _, _ = decode_arrays([_single_level([0.5, 0.5, 0.0, 0.0], size=4)], [8])
    np.testing.assert_allclose(boxes[0], [0, 0, 8, 8])


def test_decode_exp_law():
    boxes, _, _ = decode_arrays([_single_level([2.0, 2.0, math.log(2), 0.0], size=4)], [8])
    assert boxes[0, 2] - boxes[0, 0] == pytest.approx(16.0, abs=1e-9)
    assert boxes[0, 3] - boxes[0, 1] == pytest.approx(8.0, abs=1e-9)


def test_decode_matches_per_cell_oracle():
    rng = np.random.default_rng(2)
    for _ in range(5):
        head_out = random_head_output(rng)
        boxes, scores, labels = decode_arrays(head_out, STRIDES)
        row = 0
        for ho in head_out:
            s = ho.stride
            k, h, w = ho.cls_logits.shape
            for i in range(h):
                for j in range(w):
                    dx, dy, dw, dh = (float(v) for v in ho.box_reg[:, i, j])
                    cx, cy = (j + dx) * s, (i + dy) * s
                    bw, bh = math.exp(min(dw, 10.0)) * s, math.exp(min(dh, 10.0)) * s
                    exp_box = [min(max(cx - bw / 2, 0), 64), min(max(cy - bh / 2, 0), 64),
                               min(max(cx + bw / 2, 0), 64), min(max(cy + bh / 2, 0), 64)]
                    probs = [sigmoid(float(ho.cls_logits[c, i, j])) for c in range(k)]
                    best = max(range(k), key=lambda c: (probs[c], -c))
                    exp_score = sigmoid(float(ho.obj_logits[0, i, j])) * probs[best]
                    np.testing.assert_allclose(boxes[row], exp_box, rtol=1e-12, atol=1e-9)
                    assert scores[row] == pytest.approx(exp_score, rel=1e-12)
                    assert labels[row] == best
                    row += 1
        assert row == len(scores)


def test_decode_boxes_drops_degenerate_after_clipping():
    # a box entirely left of the image collapses to zero width and is dropped
    ho = _single_level([-5.0, 0.5, 0.0, 0.0], size=2)
    assert [d for d in decode_boxes([ho], [8]) if d.box.x_max <= 0] == []
    dets = decode_boxes(random_head_output(np.random.default_rng(3)), STRIDES)
    assert all(d.box.width > 0 and d.box.height > 0 for d in dets)


def test_decode_stride_mismatch():
    with pytest.raises(InvalidConfig):
        decode_arrays(random_head_output(np.random.default_rng(0)), (8, 16, 64))


# -- NMS ---------------------------------------------------------------------

def brute_force_nms(dets, thr, max_det):
    """Repeatedly take the best remaining detection and drop its same-class overlaps."""
    remaining = list(range(len(dets)))
    kept = []
    while remaining and len(kept) < max_det:
        best = min(remaining, key=lambda i: (-dets[i].score, dets[i].box.x_min, dets[i].box.y_min, i))
        kept.append(best)
        remaining = [i for i in remaining if i != best and not (
            dets[i].label == dets[best].label and iou(dets[i].box, dets[best].box) > thr)]
    return [dets[i] for i in kept]


def random_dets(rng, n, tie_heavy=False):
    out = []
    for _ in range(n):
        if tie_heavy:
            x, y = rng.integers(0, 6, 2) * 4.0
            w, h = rng.integers(2, 5, 2) * 4.0
            score = float(rng.choice([0.3, 0.5, 0.9]))
        else:
            x, y = rng.uniform(0, 40, 2)
            w, h = rng.uniform(2, 20, 2)
            score = float(rng.random())
        out.append(Detection(BoundingBox(float(x), float(y), float(x + w), float(y + h)), int(rng.integers(0, 3)),
                             score))
    return out


def test_nms_single_detection_unchanged():
    d = Detection(BoundingBox(0, 0, 5, 5), 1, 0.4)
    assert nms([d]) == [d]
    assert nms([]) == []


def test_nms_suppresses_heavy_overlap():
    hi = Detection(BoundingBox(0, 0, 10, 10), 0, 0.9)
    lo = Detection(BoundingBox(0, 0, 10, 8), 0, 0.8)
    assert iou(hi.box, lo.box) == pytest.approx(0.8)
    assert nms([lo, hi], PostprocessConfig(nms_iou_threshold=0.5)) == [hi]


def test_nms_is_class_wise():
    a = Detection(BoundingBox(0, 0, 10, 10), 0, 0.9)
    b = Detection(BoundingBox(0, 0, 10, 10), 1, 0.8)
    assert nms([a, b]) == [a, b]


@pytest.mark.parametrize("tie_heavy", [False, True])
def test_nms_matches_brute_force(tie_heavy):
    rng = np.random.default_rng(4 + tie_heavy)
    for _ in range(100):
        dets = random_dets(rng, 20, tie_heavy)
        thr = float(rng.choice([0.3, 0.5, 0.65]))
        max_det = int(rng.choice([3, 100]))
        cfg = PostprocessConfig(0.0, thr, max_det)
        assert nms(dets, cfg) == brute_force_nms(dets, thr, max_det)


def test_nms_idempotent():
    rng = np.random.default_rng(6)
    for _ in range(50):
        once = nms(random_dets(rng, 25))
        assert nms(once) == once


def test_score_threshold_monotone():
    rng = np.random.default_rng(7)
    head_out = random_head_output(rng)
    previous = None
    for thr in (0.0, 0.05, 0.2, 0.5, 0.8, 0.95):
        out = postprocess(head_out, STRIDES, PostprocessConfig(thr, 0.65, 1000))
        keys = {(d.box.as_tuple(), d.label, d.score) for d in out}
        if previous is not None:
            assert keys <= previous
        previous = keys


def test_postprocess_config_validation():
    with pytest.raises(InvalidConfig):
        PostprocessConfig(score_threshold=1.5)
    with pytest.raises(InvalidConfig):
        PostprocessConfig(nms_iou_threshold=0.0)
    with pytest.raises(InvalidConfig):
        PostprocessConfig(max_detections=-1)


# -- full pipeline -----------------------------------------------------------

def test_n0_detect_equals_single_frame_pipeline():
    model = FGFAYOLOX(ModelConfig(context_radius=0), seed=3).eval()
    post = PostprocessConfig(score_threshold=0.0, max_detections=50)
    rng = np.random.default_rng(8)
    for _ in range(5):
        clip = random_clip(rng, 3)
        assert detect(make_window(clip, 1, 0), model, post) == detect_single_frame(clip[1], model, post)


def test_untrained_model_scores_below_half():
    model = FGFAYOLOX(ModelConfig(context_radius=2), seed=0).eval()
    rng = np.random.default_rng(9)
    clip = random_clip(rng, 5)
    dets = detect(make_window(clip, 2, 2), model, PostprocessConfig(score_threshold=0.0))
    assert dets and max(d.score for d in dets) < 0.5
    # objectness and class both start at the 0.01 prior
    assert max(d.score for d in dets) < 0.01


def test_identical_frames_with_trained_flow_match_single_frame(trained_single_frame_model, trained_flownet):
    base = trained_single_frame_model
    cfg = ModelConfig(context_radius=2, fusion_init_noise=0.0)
    model = FGFAYOLOX(cfg, seed=0)
    # share every weight with the single-frame model; fusion is the plain average
    for name in ("backbone", "neck", "head"):
        getattr(model, name).load_state_dict(getattr(base, name).state_dict())
    model.flownet.load_state_dict(trained_flownet.state_dict())
    model.eval()
    from fgfa_yolox.datasets.synthetic import generate_synthetic_dataset

    data = generate_synthetic_dataset(5, 1, 20)
    clip = data.clip(data.videos[0].video_id)
    post = PostprocessConfig(score_threshold=0.3)
    checked = 0
    for t in range(0, 20, 4):
        frame = clip[t]
        window = make_window([frame] * 5, 2, 2)
        image = torch.from_numpy(np.ascontiguousarray(frame.image.transpose(2, 0, 1)))[None]
        with torch.no_grad():
            # the premise: a trained flow net sees no motion between a frame and itself
            assert trained_flownet(image, image).abs().max().item() < 0.25
        # reference taken at a lower cut so boxes scoring near 0.3 are not lost to the threshold
        ref = detect_single_frame(frame, base, PostprocessConfig(score_threshold=0.15))
        for d in detect(window, model, post):
            assert any(r.label == d.label and iou(r.box, d.box) >= 0.95 for r in ref)
            checked += 1
    assert checked > 0


def test_random_inputs_give_valid_detections():
    model = FGFAYOLOX(ModelConfig(context_radius=1), seed=4).eval()
    with torch.no_grad():
        for p in model.head.reg_preds.parameters():
            p.normal_(0, 2.0)
    rng = np.random.default_rng(10)
    for _ in range(3):
        clip = random_clip(rng, 3)
        for d in detect(make_window(clip, 1, 1), model, PostprocessConfig(score_threshold=0.0)):
            assert math.isfinite(d.score) and 0 <= d.score <= 1
            assert d.box.width > 0 and d.box.height > 0
            assert 0 <= d.box.x_min and d.box.x_max <= 64 and 0 <= d.box.y_min and d.box.y_max <= 64


def test_letterboxed_input_maps_back_to_frame():
    model = FGFAYOLOX(ModelConfig(context_radius=1), seed=5).eval()
    rng = np.random.default_rng(11)
    clip = random_clip(rng, 3, h=48, w=96)
    dets = detect(make_window(clip, 1, 1), model, PostprocessConfig(score_threshold=0.0))
    assert dets
    for d in dets:
        assert 0 <= d.box.x_min < d.box.x_max <= 96
        assert 0 <= d.box.y_min < d.box.y_max <= 48


def test_batched_forward_agrees_with_detect():
    model = FGFAYOLOX(ModelConfig(context_radius=2), seed=6).eval()
    with torch.no_grad():
        for conv in model.aggregator.fuse:
            conv.weight.add_(0.05 * torch.randn_like(conv.weight))
    rng = np.random.default_rng(12)
    clip = random_clip(rng, 6)
    window = make_window(clip, 3, 2)
    x = torch.stack([torch.from_numpy(f.image.transpose(2, 0, 1).copy()) for f in window.frames])[None]
    post = PostprocessConfig(score_threshold=0.0, max_detections=30)
    with torch.no_grad():
        raw = model(x)
    batched = postprocess(head_outputs_from_batch(raw, model.config.strides), model.config.strides, post)
    single = detect(window, model, post)
    assert len(batched) == len(single)
    for a, b in zip(batched, single):
        assert a.label == b.label
        assert a.score == pytest.approx(b.score, rel=1e-4)
        np.testing.assert_allclose(a.box.as_tuple(), b.box.as_tuple(), atol=1e-3)


def test_window_radius_must_match_model():
    model = FGFAYOLOX(ModelConfig(context_radius=1), seed=0).eval()
    clip = random_clip(np.random.default_rng(0), 5)
    with pytest.raises(InvalidConfig):
        detect(make_window(clip, 2, 2), model)
    with pytest.raises(InvalidInputShape):
        model(torch.zeros(1, 5, 3, 64, 64))


def test_model_config_round_trip_and_presets():
    cfg = ModelConfig.desk(context_radius=1)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    paper = ModelConfig.paper()
    assert paper.image_size == (640, 640)
    assert paper.backbone.base_channels == (320, 640, 1280)
    assert ModelConfig.from_dict(paper.to_dict()) == paper
    with pytest.raises(InvalidConfig):
        ModelConfig(image_size=(60, 64))
    with pytest.raises(InvalidConfig):
        ModelConfig(head=HeadConfig(num_classes=2))


def test_model_seed_determinism():
    a = FGFAYOLOX(ModelConfig(), seed=11).state_dict()
    b = FGFAYOLOX(ModelConfig(), seed=11).state_dict()
    c = FGFAYOLOX(ModelConfig(), seed=12).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert any(not torch.equal(a[k], c[k]) for k in a)


def test_coco_results_round_trip():
    rng = np.random.default_rng(13)
    dets = {1: random_dets(rng, 4), 7: random_dets(rng, 2)}
    back = detections_from_coco(detections_to_coco(dets, category_offset=1), category_offset=1)
    assert set(back) == {1, 7}
    for k in dets:
        for a, b in zip(dets[k], back[k]):
            assert a.label == b.label and a.score == b.score
            np.testing.assert_allclose(a.box.as_tuple(), b.box.as_tuple(), atol=1e-12)
