"""Versioned checkpoint container: npz of named tensors plus a JSON header."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Optional

import numpy as np

from .layers import EncoderConfig
from .matchers import Matcher, build_model
from .tokenizer import Vocab

CHECKPOINT_VERSION = 1
_META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_checkpoint(model: Matcher, path, extra: Optional[dict] = None) -> str:
    """Write ``model`` to ``path`` atomically and return its fingerprint."""
    fingerprint = model.fingerprint()
    meta = {
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "shared": bool(getattr(model, "shared", False)),
        "phase": getattr(model, "phase", None),
        "config": model.config.to_dict(),
        "vocab": model.vocab.to_list(),
        "fingerprint": fingerprint,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays[_META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return fingerprint


def read_checkpoint_meta(path) -> dict:
    with np.load(path) as z:
        if _META_KEY not in z.files:
            raise CheckpointError(f"{path}: not a checkpoint (no header)")
        meta = json.loads(bytes(z[_META_KEY]).decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    return meta


def load_checkpoint(path) -> tuple[Matcher, dict]:
    meta = read_checkpoint_meta(path)
    vocab = Vocab(meta["vocab"])
    config = EncoderConfig(**meta["config"])
    kwargs = {}
    if meta["arch"] == "poly":
        kwargs["shared"] = meta["shared"]
    if meta["arch"] == "cdv":
        kwargs["phase"] = meta["phase"] or "frozen"
    model = build_model(meta["arch"], vocab, config, **kwargs)
    with np.load(path) as z:
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    model.load_state_dict(state)
    if model.fingerprint() != meta["fingerprint"]:
        raise CheckpointError(f"{path}: fingerprint mismatch after load (corrupt file?)")
    return model, meta
