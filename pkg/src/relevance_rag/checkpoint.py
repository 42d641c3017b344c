"""Checkpoint archive: a single ``.npz`` with the model config and float32 parameter arrays."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, TinyLM

CONFIG_KEY = "__config__"
FORMAT_KEY = "__format__"
FORMAT = "relevance_rag.checkpoint/1"


class CheckpointError(ValueError):
    pass


def state_arrays(model: TinyLM) -> dict[str, np.ndarray]:
    return {
        name: np.ascontiguousarray(t.detach().cpu().numpy().astype(np.float32))
        for name, t in model.state_dict().items()
    }


def save_checkpoint(model: TinyLM, path: str | Path, extra: dict | None = None) -> None:
    meta = {"model": model.config.to_dict(), **(extra or {})}
    arrays = state_arrays(model)
    clash = {CONFIG_KEY, FORMAT_KEY} & set(arrays)
    if clash:
        raise CheckpointError(f"parameter names collide with reserved keys: {clash}")
    with open(path, "wb") as f:
        np.savez(f, **{CONFIG_KEY: np.array(json.dumps(meta)), FORMAT_KEY: np.array(FORMAT)}, **arrays)


def read_metadata(path: str | Path) -> dict:
    with np.load(path, allow_pickle=False) as archive:
        return json.loads(str(archive[CONFIG_KEY]))


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> TinyLM:
    """Rebuild the model; any missing, extra, or mis-shaped array raises ``CheckpointError``."""
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        if FORMAT_KEY not in archive or str(archive[FORMAT_KEY]) != FORMAT:
            raise CheckpointError(f"{path} is not a {FORMAT} archive")
        meta = json.loads(str(archive[CONFIG_KEY]))
        config = ModelConfig.from_dict(meta["model"])
        if expected is not None and expected != config:
            raise CheckpointError(f"checkpoint config {config} does not match expected {expected}")
        model = TinyLM(config)
        state = model.state_dict()
        stored = set(archive.files) - {CONFIG_KEY, FORMAT_KEY}
        missing, extra = set(state) - stored, stored - set(state)
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        loaded = {}
        for name, ref in state.items():
            arr = archive[name]
            if tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointError(f"{name}: stored shape {arr.shape} != expected {tuple(ref.shape)}")
            loaded[name] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(loaded)
    model.eval()
    return model
