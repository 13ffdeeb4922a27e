"""Grad-CAM heatmaps and PGM output."""

from __future__ import annotations

import os

import numpy as np

from embanet import ops
from embanet.autodiff import Tape, backward

__all__ = ["UnknownLayer", "gradcam", "write_pgm", "read_pgm"]


class UnknownLayer(KeyError):
    def __str__(self) -> str:
        return self.args[0]


def gradcam(model, image: np.ndarray, target: int, layer: str | None = None) -> np.ndarray:
    """Class-activation map of ``target`` at ``layer`` for one image.

    Per-channel weights are the spatial means of d(score)/d(activation); the
    map is relu(sum_c weight_c * A_c) divided by its maximum.  A map with no
    positive entry stays all zero.
    """
    x = np.asarray(image)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"expected one image (c, h, w) or (1, c, h, w), got {x.shape}")
    layer = layer or model.default_cam_layer
    if layer not in model.layer_names:
        raise UnknownLayer(f"unknown layer {layer!r}; available: {', '.join(model.layer_names)}")
    model.eval()
    tape = Tape()
    with tape.recording():
        inp = tape.leaf(x)
        tape.inputs = [inp]
        logits = model(inp)
        act = model.activations[layer]
        k = np.shape(logits.data)[1]
        if not 0 <= target < k:
            raise ValueError(f"target class {target} outside [0, {k})")
        onehot = np.zeros_like(logits.data)
        onehot[0, target] = 1
        tape.output = ops.weighted_sum(logits, weights=onehot)
    g = backward(tape, wrt=[act])[act]
    a = act.data
    weights = g.mean(axis=(2, 3), keepdims=True)
    cam = np.maximum((weights * a).sum(axis=1)[0], 0.0)
    peak = cam.max()
    return (cam / peak if peak > 0 else np.zeros_like(cam)).astype(np.float64)


def write_pgm(path: str | os.PathLike, heatmap: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) of a map with values in [0, 1]."""
    h = np.asarray(heatmap, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got {h.shape}")
    px = np.rint(np.clip(h, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{h.shape[1]} {h.shape[0]}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_pgm(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end].decode("ascii"))
        pos = end
    if fields[0] != "P5":
        raise ValueError(f"not a binary PGM: magic {fields[0]!r}")
    w, h, maxval = (int(v) for v in fields[1:])
    px = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)
    return px.copy(), maxval
