"""Self-describing checkpoint container shared by the VAE and the trainer.

A checkpoint is an uncompressed .npz holding named float arrays (module
state dicts flattened to "<group>.<param>" keys, optimizer state under
"optim.<param>.<slot>") plus one "__meta__" entry: a JSON document with a
schema version, the config snapshot, and scalar metadata.  Everything needed
to rebuild the run is inside the file; no external config is required.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

SCHEMA_VERSION = 1

__all__ = ["save_container", "load_container", "state_to_arrays", "arrays_to_state",
           "SCHEMA_VERSION"]


def save_container(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    meta = dict(meta)
    meta.setdefault("schema_version", SCHEMA_VERSION)
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    if "__meta__" in payload:
        raise ValueError("'__meta__' is a reserved key")
    payload["__meta__"] = np.array(json.dumps(meta))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **payload)


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as f:
        if "__meta__" not in f:
            raise ValueError(f"{path}: missing checkpoint metadata")
        meta = json.loads(str(f["__meta__"][()]))
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(
                f"{path}: unsupported checkpoint schema {meta.get('schema_version')}")
        arrays = {k: f[k] for k in f.files if k != "__meta__"}
    return arrays, meta


def state_to_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy()
            for k, v in module.state_dict().items()}


def arrays_to_state(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, torch.Tensor]:
    head = prefix + "."
    return {k[len(head):]: torch.as_tensor(v)
            for k, v in arrays.items() if k.startswith(head)}
