"""Parameter checkpoints as flat key -> array containers.

A checkpoint is a NumPy ``.npz`` archive.  Each entry is named by the dotted
module path of a parameter or buffer (``backbone.dark3.0.conv.weight``) and
holds a row-major array with its shape.  The reserved entry ``__meta__``
holds a JSON string with the model configuration and free-form metadata.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .detector import FGFAYOLOX, ModelConfig
from .errors import CheckpointError

META_KEY = "__meta__"


def state_to_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(arrays)
    payload[META_KEY] = np.array(json.dumps(meta or {}, sort_keys=True))
    # fixed member timestamps keep the bytes reproducible
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(payload):
            info = zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(payload[key]), allow_pickle=False)
            zf.writestr(info, buf.getvalue())
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    meta_raw = arrays.pop(META_KEY, None)
    meta = json.loads(str(meta_raw.reshape(-1)[0])) if meta_raw is not None else {}
    return arrays, meta


def load_into(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = ""):
    """Copy arrays into ``module``'s state; every key and shape must match."""
    state = module.state_dict()
    wanted = {k: v for k, v in arrays.items() if k.startswith(prefix)}
    wanted = {k[len(prefix):]: v for k, v in wanted.items()}
    missing = sorted(set(state) - set(wanted))
    extra = sorted(set(wanted) - set(state))
    if missing or extra:
        raise CheckpointError(f"checkpoint keys mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, v in wanted.items():
        if tuple(state[k].shape) != tuple(v.shape):
            raise CheckpointError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(state[k].shape)}")
    module.load_state_dict({k: torch.from_numpy(np.asarray(v)) for k, v in wanted.items()})


def save_model(path, model: FGFAYOLOX, extra_meta: dict | None = None) -> Path:
    meta = {"model_config": model.config.to_dict()}
    meta.update(extra_meta or {})
    return save_arrays(path, state_to_arrays(model), meta)


def load_model(path) -> tuple[FGFAYOLOX, dict]:
    arrays, meta = load_arrays(path)
    if "model_config" not in meta:
        raise CheckpointError(f"{path} carries no model configuration")
    try:
        config = ModelConfig.from_dict(meta["model_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad model configuration in {path}: {exc}") from None
    model = FGFAYOLOX(config)
    load_into(model, arrays)
    model.eval()
    return model, meta
