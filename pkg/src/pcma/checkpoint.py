"""Checkpoint directories: a JSON manifest plus one container file per
parameter tensor."""

from __future__ import annotations

import json
from pathlib import Path

from .container import read_tensor, write_tensor
from .decoder import NetworkConfig, NetworkParams, init_network
from .tensor import ContractError

__all__ = ["save_checkpoint", "load_checkpoint", "CHECKPOINT_MANIFEST"]

CHECKPOINT_MANIFEST = "manifest.json"
FORMAT_VERSION = 1


def save_checkpoint(path, config: NetworkConfig, params: NetworkParams) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, tensor in sorted(params.named().items()):
        filename = f"{name}.pcmt"
        write_tensor(root / filename, tensor.data)
        entries[name] = {
            "file": filename,
            "shape": list(tensor.shape),
            "dtype": str(tensor.data.dtype),
        }
    manifest = {
        "format": FORMAT_VERSION,
        "config": config.to_dict(),
        "parameters": entries,
    }
    (root / CHECKPOINT_MANIFEST).write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n"
    )


def load_checkpoint(path) -> tuple[NetworkConfig, NetworkParams]:
    root = Path(path)
    manifest_path = root / CHECKPOINT_MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"{root} has no checkpoint manifest")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format {manifest.get('format')}")
    config = NetworkConfig.from_dict(manifest["config"])
    params = init_network(config, seed=0)
    tensors = params.named()
    stored = manifest["parameters"]
    if set(stored) != set(tensors):
        missing = sorted(set(tensors) ^ set(stored))
        raise ContractError(f"checkpoint parameter names disagree with config: {missing}")
    for name, entry in stored.items():
        arr = read_tensor(root / entry["file"])
        if list(arr.shape) != entry["shape"] or list(arr.shape) != list(tensors[name].shape):
            raise ContractError(
                f"parameter {name}: stored shape {list(arr.shape)}, manifest {entry['shape']},"
                f" expected {list(tensors[name].shape)}"
            )
        tensors[name].data = arr.astype(tensors[name].data.dtype, copy=False)
        tensors[name].grad = None
    return config, params
