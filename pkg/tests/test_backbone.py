import numpy as np
import pytest
import torch

from fgfa_yolox.backbone import (BackboneConfig, CSPDarknet, FeatureMap, extract_features,
                                 extract_window_features)
from fgfa_yolox.datamodel import Frame, make_window
from fgfa_yolox.errors import InvalidConfig, InvalidInputShape

from conftest import random_clip, random_frame


@pytest.fixture(scope="module")
def backbone():
    torch.manual_seed(0)
    return CSPDarknet(BackboneConfig.desk()).eval()


def test_desk_shapes(backbone):
    feats = extract_features(random_frame(np.random.default_rng(0)), backbone)
    assert [f.shape for f in feats] == [(16, 8, 8), (32, 4, 4), (64, 2, 2)]
    assert [f.scale_id for f in feats] == ["C1", "C2", "C3"]
    assert [f.stride for f in feats] == [8, 16, 32]


def test_paper_config_shapes():
    cfg = BackboneConfig.paper()
    assert cfg.output_shapes(640, 640) == [(320, 80, 80), (640, 40, 40), (1280, 20, 20)]
    # channel counts of a real forward pass (small input keeps the test fast)
    net = CSPDarknet(cfg).eval()
    with torch.no_grad():
        out = net(torch.rand(1, 3, 64, 64))
    assert [tuple(o.shape[1:]) for o in out] == [(320, 8, 8), (640, 4, 4), (1280, 2, 2)]


def test_all_zero_frame_is_finite(backbone):
    feats = extract_features(Frame(np.zeros((64, 64, 3))), backbone)
    assert all(torch.isfinite(f.data).all() for f in feats)


@pytest.mark.parametrize("h,w", [(32, 32), (64, 96), (96, 32), (128, 64)])
def test_shape_contract_random_sizes(backbone, h, w):
    feats = extract_features(random_frame(np.random.default_rng(h * w), h, w), backbone)
    for f, c, s in zip(feats, (16, 32, 64), (8, 16, 32)):
        assert f.shape == (c, h // s, w // s)


def test_indivisible_input_rejected(backbone):
    with pytest.raises(InvalidInputShape):
        extract_features(random_frame(np.random.default_rng(0), 60, 64), backbone)


def test_config_validation():
    with pytest.raises(InvalidConfig):
        BackboneConfig(base_channels=(32, 16, 64))
    with pytest.raises(InvalidConfig):
        BackboneConfig(strides=(4, 8, 16))
    with pytest.raises(InvalidConfig):
        BackboneConfig(widen_factor=0)


def test_feature_map_validation():
    with pytest.raises(InvalidInputShape):
        FeatureMap(torch.zeros(2, 2), "C1", 8)
    with pytest.raises(InvalidConfig):
        FeatureMap(torch.zeros(1, 2, 2), "C9", 8)


def test_window_of_identical_frames_gives_identical_features(backbone):
    f = random_frame(np.random.default_rng(5))
    window = make_window([f, f, f], 1, 1)
    feats = extract_window_features(window, backbone)
    assert len(feats) == 3
    for other in feats[1:]:
        for a, b in zip(feats[0], other):
            assert torch.equal(a.data, b.data)


def test_n0_window_matches_single_frame(backbone):
    clip = random_clip(np.random.default_rng(6), 3)
    feats = extract_window_features(make_window(clip, 1, 0), backbone)
    alone = extract_features(clip[1], backbone)
    assert len(feats) == 1
    for a, b in zip(feats[0], alone):
        assert torch.equal(a.data, b.data)


def test_parameter_sharing_and_edge_replication(backbone):
    clip = random_clip(np.random.default_rng(7), 4)
    window = make_window(clip, 0, 2)  # frames f0 f0 f0 f1 f2
    feats = extract_window_features(window, backbone)
    for k, frame in enumerate(window.frames):
        alone = extract_features(frame, backbone)
        for a, b in zip(feats[k], alone):
            assert torch.equal(a.data, b.data)
    for a, b in zip(feats[0], feats[2]):
        assert torch.equal(a.data, b.data)


def test_shared_cache_reuses_entries(backbone):
    clip = random_clip(np.random.default_rng(8), 5)
    cache = {}
    first = extract_window_features(make_window(clip, 1, 1), backbone, cache)
    second = extract_window_features(make_window(clip, 2, 1), backbone, cache)
    assert len(cache) == 4
    assert first[1] is second[0] and first[2] is second[1]


def test_batched_forward_matches_per_frame(backbone):
    rng = np.random.default_rng(9)
    frames = [random_frame(rng) for _ in range(3)]
    x = torch.stack([torch.from_numpy(f.image.transpose(2, 0, 1).copy()) for f in frames])
    with torch.no_grad():
        batched = backbone(x)
    for i, f in enumerate(frames):
        alone = extract_features(f, backbone)
        for level, fm in zip(batched, alone):
            torch.testing.assert_close(level[i], fm.data, rtol=1e-5, atol=1e-5)


def test_finite_difference_gradients():
    torch.manual_seed(1)
    net = CSPDarknet(BackboneConfig.desk()).double().eval()
    x = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    params = dict(net.named_parameters())
    names = ["stem.conv.conv.weight", "dark3.0.conv.weight", "dark5.2.conv3.conv.weight"]

    def loss():
        return sum(o.sum() for o in net(x))

    net.zero_grad()
    loss().backward()
    rng = np.random.default_rng(2)
    eps = 1e-6
    for name in names:
        p = params[name]
        flat = p.data.view(-1)
        for idx in rng.choice(flat.numel(), size=4, replace=False):
            analytic = p.grad.view(-1)[idx].item()
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + eps
                up = loss().item()
                flat[idx] = orig - eps
                down = loss().item()
                flat[idx] = orig
            numeric = (up - down) / (2 * eps)
            assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), abs(analytic), 1e-4), name
