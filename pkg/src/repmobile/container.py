"""On-disk model container: ``manifest.json`` plus a flat ``weights.bin``.

``weights.bin`` holds every stored array (parameters and BN running stats) as
little-endian float32, row-major, concatenated in manifest order. Models built
in float64 are narrowed to float32 on save.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import INPUT_SHAPE, ModelGraph, build_model

FORMAT = "repmobile-container"
VERSION = 1
_LE_F32 = np.dtype("<f4")


def manifest_for(model: ModelGraph) -> dict:
    tensors, offset = [], 0
    for name, arr in model.named_tensors():
        nbytes = int(arr.size) * 4
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset, "nbytes": nbytes})
        offset += nbytes
    return {
        "format": FORMAT,
        "version": VERSION,
        "mode": model.mode,
        "architecture": {
            "base_channels": model.base_channels,
            "branch_set": list(model.branch_set),
            "num_classes": model.num_classes,
            "expansion": 3,
            "input_shape": list(INPUT_SHAPE),
        },
        "meta": model.meta,
        "tensors": tensors,
    }


def save_model(model: ModelGraph, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = manifest_for(model)
    with open(path / "weights.bin", "wb") as f:
        for _, arr in model.named_tensors():
            f.write(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _skeleton(arch: dict, mode: str) -> ModelGraph:
    from .reparam import reparameterize_model

    m = build_model(arch["base_channels"], arch["branch_set"], seed=0, num_classes=arch.get("num_classes", 10))
    return reparameterize_model(m) if mode == "merged" else m


def load_model(path) -> ModelGraph:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable manifest ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise DataError(f"{path}: not a {FORMAT} directory")
    blob = (path / "weights.bin").read_bytes()
    model = _skeleton(manifest["architecture"], manifest["mode"])
    model.meta = manifest.get("meta", {})
    targets = dict(model.named_tensors())
    if [t["name"] for t in manifest["tensors"]] != list(targets):
        raise DataError(f"{path}: tensor table does not match the declared architecture")
    for t in manifest["tensors"]:
        dst = targets[t["name"]]
        if list(dst.shape) != t["shape"] or t["offset"] + t["nbytes"] > len(blob):
            raise DataError(f"{path}: bad entry for {t['name']}")
        src = np.frombuffer(blob, dtype=_LE_F32, count=int(np.prod(t["shape"], dtype=np.int64)), offset=t["offset"])
        dst[...] = src.reshape(dst.shape)
    return model
