"""Checkpoints: a JSON manifest plus a little-endian float64 blob.

Layout of a checkpoint directory::

    manifest.json   {"format", "config", "vocab", "seed", "meta",
                     "parameters": [{"name", "shape", "offset", "count"}]}
    params.bin      concatenated parameters, '<f8', offsets in bytes
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from carformer.data.vocab import Vocab
from carformer.model import CarModel, ModelConfig

CHECKPOINT_FORMAT = "carformer-ckpt/1"
MANIFEST = "manifest.json"
BLOB = "params.bin"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: CarModel, path: str | Path, vocab: Vocab | None = None,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / BLOB, "wb") as fh:
        for name, p in model.named_parameters():
            raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(p.shape), "offset": offset, "count": int(p.size)})
            offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "seed": model.seed,
        "vocab": vocab.itos if vocab is not None else None,
        "meta": meta or {},
        "parameters": entries,
    }
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[CarModel, Vocab | None, dict]:
    """Rebuild the model; returns ``(model, vocab, manifest)``."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no {MANIFEST} in {path}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    cfg = ModelConfig.from_dict(manifest["config"])
    model = CarModel(cfg, seed=manifest.get("seed", 0))
    blob = (path / BLOB).read_bytes()
    state = {}
    for e in manifest["parameters"]:
        end = e["offset"] + 8 * e["count"]
        if end > len(blob):
            raise CheckpointError(f"parameter {e['name']} runs past the end of {BLOB}")
        arr = np.frombuffer(blob, dtype="<f8", count=e["count"], offset=e["offset"])
        state[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
    model.load_state_dict(state)
    vocab = Vocab.from_itos(manifest["vocab"]) if manifest.get("vocab") else None
    return model, vocab, manifest
