import numpy as np
import pytest
import torch

from fgfa_yolox.datamodel import Frame


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


def random_frame(rng: np.random.Generator, h: int = 64, w: int = 64, t: int = 0, video: str = "v") -> Frame:
    return Frame(rng.random((h, w, 3), dtype=np.float32), t, video)


def random_clip(rng: np.random.Generator, length: int, h: int = 64, w: int = 64, video: str = "v"):
    return [random_frame(rng, h, w, t, video) for t in range(length)]


def smooth_textures(n: int, rng: np.random.Generator, size: int = 72) -> np.ndarray:
    """(n, size, size, 3) smooth random colour textures in [0, 1]."""
    import cv2

    out = []
    for _ in range(n):
        t = rng.random((size // 4, size // 4, 3)).astype(np.float32)
        out.append(np.clip(cv2.resize(t, (size, size), interpolation=cv2.INTER_CUBIC), 0, 1))
    return np.stack(out)


def shifted_pairs(tex: np.ndarray, shift: int):
    """64x64 (reference, neighbour) tensors; the neighbour's content sits ``shift`` px further right."""
    ref = tex[:, 4:68, 4:68]
    nb = tex[:, 4:68, 4 - shift:68 - shift]
    to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))
    return to_t(ref), to_t(nb)


@pytest.fixture(scope="session")
def trained_flownet():
    """Small flow net fitted on static and +4 px shifted texture pairs.

    Static pairs of synthetic scene frames (seed 6) are mixed in so the net
    also sees flat backgrounds with sprites, where texture-only training
    leaves over half a pixel of spurious flow.
    """
    from fgfa_yolox.datasets.synthetic import generate_synthetic_dataset
    from fgfa_yolox.flow import FlowNetSimple, fit_flownet

    rng = np.random.default_rng(0)
    tex = smooth_textures(64, rng)
    r0, n0 = shifted_pairs(tex[:32], 0)
    r4, n4 = shifted_pairs(tex[32:], 4)
    scenes = generate_synthetic_dataset(6, 2, 40)
    still = torch.stack([torch.from_numpy(np.ascontiguousarray(f.image.transpose(2, 0, 1)))
                         for v in scenes.videos for f in scenes.clip(v.video_id)[::5]])
    target = torch.zeros(64 + len(still), 2, 64, 64)
    target[32:64, 0] = 4.0
    torch.manual_seed(0)
    net = FlowNetSimple()
    losses = fit_flownet(net, torch.cat([r0, r4, still]), torch.cat([n0, n4, still]), target,
                         steps=300, lr=2e-3)
    assert losses[-1] < losses[0]
    return net


@pytest.fixture(scope="session")
def trained_single_frame_model():
    """Desk model with N=0 briefly trained on a small synthetic set."""
    from fgfa_yolox.datasets.synthetic import generate_synthetic_dataset
    from fgfa_yolox.detector import FGFAYOLOX, ModelConfig
    from fgfa_yolox.training import TrainConfig, train

    data = generate_synthetic_dataset(5, 4, 60)
    model = FGFAYOLOX(ModelConfig(context_radius=0), seed=0)
    train(data, TrainConfig.desk(epochs=4, warmup_iters=20), model)
    return model.eval()
