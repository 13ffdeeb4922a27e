"""Checkpoints: one binary blob of tensor records plus a JSON manifest.

Every parameter and BN running buffer is stored as a tensor-format record
(16-byte n,c,h,w header + float32 data).  Tensors of rank < 4 are padded
with leading ones; the manifest keeps their true shapes and byte offsets.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from embanet.network import Network, NetworkSpec
from embanet.tensor import HEADER_BYTES, tensor_from_bytes, tensor_to_bytes

__all__ = ["FORMAT", "CheckpointError", "save_checkpoint", "load_checkpoint"]

FORMAT = "embanet-checkpoint/1"
MANIFEST = "manifest.json"
BLOB = "weights.bin"


class CheckpointError(ValueError):
    pass


def _as4(a: np.ndarray) -> np.ndarray:
    return a.reshape((1,) * (4 - a.ndim) + a.shape)


def _entries(model: Network):
    for name, p in model.named_parameters():
        yield name, "param", p.data
    for name, b in model.named_buffers():
        yield name, "buffer", b


def save_checkpoint(model: Network, directory: str | os.PathLike, *, seed: int | None = None) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    tensors, offset = [], 0
    with open(out / BLOB, "wb") as fh:
        for name, kind, arr in _entries(model):
            rec = tensor_to_bytes(_as4(np.asarray(arr)))
            fh.write(rec)
            tensors.append({"name": name, "kind": kind, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(rec)})
            offset += len(rec)
    manifest = {"format": FORMAT, "blob": BLOB, "seed": seed, "spec": model.spec.to_dict(), "tensors": tensors}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return out


def load_checkpoint(directory: str | os.PathLike) -> Network:
    root = Path(directory)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise CheckpointError(f"cannot read manifest in {root}: {err}") from err
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    spec = NetworkSpec.from_dict(manifest["spec"])
    model = Network(spec)
    blob = (root / manifest["blob"]).read_bytes()
    params = dict(model.named_parameters())
    owners = {}
    for m_name, m in _named_modules(model):
        for key in m._buffers:
            owners[f"{m_name}{key}"] = (m, key)
    seen = set()
    for t in manifest["tensors"]:
        start, stop = t["offset"], t["offset"] + t["nbytes"]
        if stop > len(blob) or t["nbytes"] < HEADER_BYTES:
            raise CheckpointError(f"tensor {t['name']} runs past the end of the blob")
        arr = tensor_from_bytes(blob[start:stop]).reshape(t["shape"])
        if t["kind"] == "param":
            p = params.get(t["name"])
            if p is None or p.data.shape != arr.shape:
                raise CheckpointError(f"checkpoint tensor {t['name']} does not match the model")
            p.data = arr.astype(p.data.dtype)
        else:
            if t["name"] not in owners:
                raise CheckpointError(f"checkpoint buffer {t['name']} does not match the model")
            m, key = owners[t["name"]]
            setattr(m, key, arr.astype(getattr(m, key).dtype))
        seen.add(t["name"])
    missing = (set(params) | set(owners)) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} tensors, e.g. {sorted(missing)[0]}")
    return model


def _named_modules(module, prefix: str = ""):
    yield prefix, module
    for key, child in module.named_children():
        yield from _named_modules(child, f"{prefix}{key}.")
