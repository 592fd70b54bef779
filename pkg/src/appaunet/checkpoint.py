"""Portable model checkpoints.

A checkpoint is an ``.npz`` archive. Each entry maps a canonical parameter
path (the ``state_dict`` key, e.g. ``encoders.0.0.weight``) to its array;
arrays carry their own shape and dtype. The reserved entry ``__meta__`` holds
a JSON document::

    {"format": "appaunet-checkpoint", "version": 1,
     "kind": "segmentor" | "discriminator",
     "config": {...},                       # the model config fields
     "shapes": {"<path>": [d0, d1, ...]}}
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path
from typing import Union

import numpy as np
import torch

from .discriminator import Discriminator, DiscriminatorConfig
from .segmentor import Segmentor, SegmentorConfig

FORMAT = "appaunet-checkpoint"
VERSION = 1
META_KEY = "__meta__"

_KINDS = {
    "segmentor": (Segmentor, SegmentorConfig),
    "discriminator": (Discriminator, DiscriminatorConfig),
}


class CheckpointError(RuntimeError):
    pass


def _kind_of(model) -> str:
    for kind, (cls, _) in _KINDS.items():
        if isinstance(model, cls):
            return kind
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_model(model: torch.nn.Module, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if META_KEY in state:
        raise CheckpointError(f"parameter path collides with {META_KEY}")
    meta = dict(
        format=FORMAT,
        version=VERSION,
        kind=_kind_of(model),
        config=asdict(model.cfg),
        shapes={k: list(v.shape) for k, v in state.items()},
    )
    with open(path, "wb") as fh:
        np.savez(fh, **state, **{META_KEY: np.array(json.dumps(meta, sort_keys=True))})
    return path


def read_meta(path: Union[str, Path]) -> dict:
    with np.load(path, allow_pickle=False) as z:
        if META_KEY not in z:
            raise CheckpointError(f"{path}: not a checkpoint (no {META_KEY})")
        meta = json.loads(str(z[META_KEY]))
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown format {meta.get('format')!r}")
    if meta.get("version", 0) > VERSION:
        raise CheckpointError(f"{path}: checkpoint version {meta['version']} is newer than supported {VERSION}")
    return meta


def load_model(path: Union[str, Path]) -> torch.nn.Module:
    meta = read_meta(path)
    cls, cfg_cls = _KINDS[meta["kind"]]
    cfg = meta["config"]
    if "side_weights" in cfg:
        cfg["side_weights"] = tuple(cfg["side_weights"])
    model = cls(cfg_cls(**cfg))
    load_weights(model, path, meta)
    return model


def load_weights(model: torch.nn.Module, path: Union[str, Path], meta=None) -> None:
    meta = meta or read_meta(path)
    expected = model.state_dict()
    with np.load(path, allow_pickle=False) as z:
        state = {}
        for key, ref in expected.items():
            if key not in z:
                raise CheckpointError(f"{path}: missing parameter {key}")
            arr = z[key]
            if list(arr.shape) != list(ref.shape) or list(arr.shape) != meta["shapes"].get(key):
                raise CheckpointError(f"{path}: {key} has shape {arr.shape}, model expects {tuple(ref.shape)}")
            state[key] = torch.from_numpy(np.array(arr))
        extra = set(z.files) - set(expected) - {META_KEY}
        if extra:
            raise CheckpointError(f"{path}: unexpected parameters {sorted(extra)[:3]}")
    model.load_state_dict(state)


def state_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in model.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
