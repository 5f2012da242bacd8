"""JSON parameter checkpoints: named blocks with shapes and row-major values."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import ContractError
from .autodiff import Tensor
from .layers import NetworkParams

MAGIC = "AIRPHYS-CKPT-1"


def params_to_dict(params: NetworkParams, meta: dict[str, Any] | None = None) -> dict[str, Any]:
    block = lambda name, arr, trainable: {  # noqa: E731
        "name": name,
        "shape": list(arr.shape),
        "trainable": trainable,
        "values": [float(x) for x in np.asarray(arr).reshape(-1)],
    }
    return {
        "magic": MAGIC,
        "seed": params.seed,
        "blocks": [block(n, t.value, True) for n, t in params.blocks.items()]
        + [block(n, a, False) for n, a in params.buffers.items()],
        "meta": meta or {},
    }


def params_from_dict(doc: dict[str, Any]) -> tuple[NetworkParams, dict[str, Any]]:
    if doc.get("magic") != MAGIC:
        raise ContractError(f"not a checkpoint (expected magic {MAGIC})")
    params = NetworkParams(seed=int(doc.get("seed", 0)))
    for b in doc["blocks"]:
        arr = np.asarray(b["values"], float).reshape(b["shape"])
        if b["trainable"]:
            params.add(b["name"], Tensor(arr, requires_grad=True))
        else:
            params.buffers[b["name"]] = arr
    return params, doc.get("meta", {})


def save_checkpoint(params: NetworkParams, path: str | Path, meta: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(params_to_dict(params, meta), sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[NetworkParams, dict[str, Any]]:
    return params_from_dict(json.loads(Path(path).read_text()))
