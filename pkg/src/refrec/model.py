"""Encoder/decoder/head networks and checkpoint serialization.

The encoder is a per-point MLP (shared weights across points, ReLU) followed
by a max-pool over the point axis, which makes the global descriptor exactly
permutation invariant. No batch normalization anywhere: plain affine+ReLU
keeps train/eval behavior identical and gradients exactly checkable; the
deviation from the classic backbone is recorded in checkpoint metadata.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Value
from .geometry import stream
from .metricspace import EmbeddingTable

CHECKPOINT_FORMAT = "RRCK v1"


def _init_layer(rng, fan_in, fan_out):
    bound = np.sqrt(1.0 / fan_in)
    w = ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    b = ad.parameter(rng.uniform(-bound, bound, size=(1, fan_out)))
    return w, b


@dataclass
class MLPParams:
    """A stack of affine layers stored as (weight, bias) Values."""

    layers: list  # [(Value W, Value b), ...]

    def params(self):
        out = []
        for w, b in self.layers:
            out.append(w)
            out.append(b)
        return out

    def widths(self):
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    def copy(self) -> "MLPParams":
        return MLPParams(
            layers=[(ad.parameter(w.data), ad.parameter(b.data)) for w, b in self.layers]
        )


def init_mlp(widths, rng) -> MLPParams:
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        layers.append(_init_layer(rng, fan_in, fan_out))
    return MLPParams(layers=layers)


def init_encoder(d: int, hidden, seed: int, tag: str) -> MLPParams:
    """Per-point MLP 3 -> hidden... -> d."""
    return init_mlp([3, *hidden, d], stream(seed, "init", tag))


def init_decoder(d: int, hidden, m_points: int, seed: int, tag: str) -> MLPParams:
    """Three affine layers d -> h1 -> h2 -> 3*m.

    The final bias starts as a sphere-shaped template: reconstructions that
    begin collapsed at the origin stall the matching-based loss and make its
    assignment problems degenerate.
    """
    if len(hidden) != 2:
        raise ValueError("decoder takes exactly two hidden widths (3 layers total)")
    dec = init_mlp([d, *hidden, 3 * m_points], stream(seed, "init", tag))
    rng = stream(seed, "init", tag, "template")
    tpl = rng.standard_normal((m_points, 3))
    tpl /= np.linalg.norm(tpl, axis=1, keepdims=True)
    dec.layers[-1][1].data[...] = (0.5 * tpl).reshape(1, -1)
    return dec


def init_head(d: int, hidden: int, k: int, seed: int, tag: str) -> MLPParams:
    """Two affine layers d -> hidden -> k."""
    return init_mlp([d, hidden, k], stream(seed, "init", tag))


def encode(enc: MLPParams, clouds: np.ndarray) -> Value:
    """Global descriptors for a batch of clouds (B, n, 3) -> Value (B, d)."""
    clouds = np.asarray(clouds, dtype=np.float64)
    if clouds.ndim == 2:
        clouds = clouds[None]
    bsz, n, _ = clouds.shape
    x = ad.constant(clouds.reshape(bsz * n, 3))
    for w, b in enc.layers:
        x = ad.relu(ad.add(ad.matmul(x, w), b))
    return ad.max_over_groups(x, n)


def decode(dec: MLPParams, z: Value) -> Value:
    """Reconstruct flattened clouds: Value (B, d) -> Value (B*m, 3)."""
    x = z
    last = len(dec.layers) - 1
    for i, (w, b) in enumerate(dec.layers):
        x = ad.add(ad.matmul(x, w), b)
        if i < last:
            x = ad.relu(x)
    bsz = z.shape[0]
    m = x.shape[1] // 3
    return ad.reshape(x, bsz * m, 3)


def head_logits(head: MLPParams, z: Value) -> Value:
    """Raw class scores: Value (B, d) -> Value (B, k)."""
    x = z
    last = len(head.layers) - 1
    for i, (w, b) in enumerate(head.layers):
        x = ad.add(ad.matmul(x, w), b)
        if i < last:
            x = ad.relu(x)
    return x


def classify(head: MLPParams, z: Value) -> Value:
    """Softmax class probabilities."""
    return ad.softmax(head_logits(head, z))


def lambda_argmax(probs: np.ndarray):
    """(label, confidence) from softmax scores; ties go to the lowest index.

    Accepts a single probability vector or a (B, k) batch.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty probability vector")
    if p.ndim == 1:
        label = int(p.argmax())
        return label, float(p[label])
    labels = p.argmax(axis=1)
    return labels, p[np.arange(len(p)), labels]


def transfer_encoder(src: MLPParams, dst: MLPParams) -> None:
    """Deep-copy all tensors of src into dst; architectures must match."""
    if src.widths() != dst.widths():
        raise ValueError(f"encoder architecture mismatch: {src.widths()} vs {dst.widths()}")
    for (ws, bs), (wd, bd) in zip(src.layers, dst.layers):
        np.copyto(wd.data, ws.data)
        np.copyto(bd.data, bs.data)


def compute_embeddings(enc: MLPParams, clouds: np.ndarray, ids) -> EmbeddingTable:
    """Descriptor table under a fixed encoder (no graph)."""
    with ad.no_grad():
        z = encode(enc, clouds)
    return EmbeddingTable(vectors=z.data, ids=list(ids))


# ---------------------------------------------------------------------------
# RRCK v1 checkpoints: one JSON header line (names, shapes, metadata),
# then little-endian float64 payloads concatenated in header order.

def save_checkpoint(path, tensors: dict, metadata: dict) -> None:
    names = list(tensors.keys())
    header = {
        "format": CHECKPOINT_FORMAT,
        "metadata": metadata,
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (tensors, metadata); payload round-trips bit-exactly."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not an {CHECKPOINT_FORMAT} checkpoint")
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"truncated checkpoint payload in {path}")
            tensors[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return tensors, header["metadata"]


def mlp_tensors(prefix: str, mlp: MLPParams) -> dict:
    out = {}
    for i, (w, b) in enumerate(mlp.layers):
        out[f"{prefix}.{i}.weight"] = w.data
        out[f"{prefix}.{i}.bias"] = b.data
    return out


def mlp_from_tensors(prefix: str, tensors: dict) -> MLPParams:
    layers = []
    i = 0
    while f"{prefix}.{i}.weight" in tensors:
        w = ad.parameter(tensors[f"{prefix}.{i}.weight"])
        b = ad.parameter(tensors[f"{prefix}.{i}.bias"])
        layers.append((w, b))
        i += 1
    if not layers:
        raise ValueError(f"no tensors found under prefix '{prefix}'")
    return MLPParams(layers=layers)
