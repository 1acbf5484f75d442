"""Checkpoint directories: ``manifest.json`` plus parameter arrays in ``params.npz``."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
PARAMS_FILE = "params.npz"
MANIFEST_FILE = "manifest.json"


def state_hash(module: torch.nn.Module, config: dict) -> str:
    """sha256 over the config and every named parameter/buffer (name, dtype, shape, bytes)."""
    h = hashlib.sha256()
    h.update(json.dumps(config, sort_keys=True).encode())
    for name, tensor in sorted(module.state_dict().items()):
        arr = tensor.detach().cpu().contiguous().numpy()
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


def _write_npz(path: Path, arrays: dict) -> None:
    # np.savez stamps entries with the wall clock; a fixed date keeps reruns byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


def save(directory, module: torch.nn.Module, kind: str, config: dict, **extra) -> str:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    _write_npz(directory / PARAMS_FILE, {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()})
    model_hash = state_hash(module, config)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "model_hash": model_hash,
        **extra,
    }
    (directory / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return model_hash


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST_FILE
    if not path.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version {manifest.get('format_version')}")
    return manifest


def load_state(directory, module: torch.nn.Module) -> dict:
    """Fill ``module`` from ``directory`` and verify the stored hash."""
    manifest = read_manifest(directory)
    with np.load(Path(directory) / PARAMS_FILE) as data:
        state = {k: torch.from_numpy(data[k].copy()) for k in data.files}
    module.load_state_dict(state)
    got = state_hash(module, manifest["config"])
    if got != manifest["model_hash"]:
        raise ValueError(f"checkpoint {directory} is corrupt: hash {got} != manifest {manifest['model_hash']}")
    return manifest
