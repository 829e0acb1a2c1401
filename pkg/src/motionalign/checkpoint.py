"""Checkpoint directory format.

A checkpoint is a directory containing ``manifest.json`` plus one raw
little-endian row-major binary blob per parameter.  The manifest maps
parameter name -> {shape, dtype, file} and carries an arbitrary JSON
``meta`` block (model config, vocabulary).  Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import os
from typing import Any

import numpy as np

from .autodiff import Tensor

_DTYPES = {"float64": "<f8", "float32": "<f4"}


def save_checkpoint(path: str, params: dict[str, Tensor],
                    meta: dict[str, Any] | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    entries = {}
    for i, name in enumerate(sorted(params)):
        arr = params[name].data
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported checkpoint dtype: {dtype}")
        fname = f"p{i:04d}.bin"
        with open(os.path.join(path, fname), "wb") as f:
            f.write(np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tobytes())
        entries[name] = {"shape": list(arr.shape), "dtype": dtype, "file": fname}
    manifest = {"params": entries, "meta": meta or {}}
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path: str) -> tuple[dict[str, Tensor], dict[str, Any]]:
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    params: dict[str, Tensor] = {}
    for name, entry in manifest["params"].items():
        with open(os.path.join(path, entry["file"]), "rb") as f:
            raw = f.read()
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]]).astype(entry["dtype"])
        params[name] = Tensor(arr.reshape(entry["shape"]), requires_grad=True)
    return params, manifest.get("meta", {})
