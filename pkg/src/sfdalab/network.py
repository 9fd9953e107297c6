"""Small fully-convolutional per-pixel classifier and its checkpoint format."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .ioutil import atomic_write_bytes

CHECKPOINT_MAGIC = b"SFDA-MDL1"
DEFAULT_WIDTHS = (8, 16)


class CheckpointError(ValueError):
    pass


@dataclass
class ModelParams:
    """Network weights: one (kernel, bias) pair per 3x3 conv layer.

    ``widths`` lists the hidden channel counts; the last layer always maps to
    ``n_classes`` outputs and class 0 is background.
    """

    kernels: list
    biases: list
    n_classes: int
    widths: tuple = DEFAULT_WIDTHS
    in_channels: int = 1
    seed: Optional[int] = None

    def arch(self) -> dict:
        return {"in_channels": self.in_channels, "widths": list(self.widths),
                "n_classes": self.n_classes}

    def arrays(self) -> list:
        """Flat list [k0, b0, k1, b1, ...] in layer order."""
        out = []
        for k, b in zip(self.kernels, self.biases):
            out.extend([k, b])
        return out

    def names(self) -> list:
        out = []
        for i in range(len(self.kernels)):
            out.extend([f"conv{i}.kernel", f"conv{i}.bias"])
        return out

    def copy(self) -> "ModelParams":
        return ModelParams([k.copy() for k in self.kernels], [b.copy() for b in self.biases],
                           self.n_classes, tuple(self.widths), self.in_channels, self.seed)

    def with_arrays(self, arrays) -> "ModelParams":
        return ModelParams(list(arrays[0::2]), list(arrays[1::2]), self.n_classes,
                           tuple(self.widths), self.in_channels, self.seed)

    def to_bytes(self) -> bytes:
        return checkpoint_bytes(self)


def _channel_chain(in_channels: int, widths, n_classes: int) -> list:
    chans = [in_channels, *widths, n_classes]
    return list(zip(chans[:-1], chans[1:]))


def init(n_classes: int = 2, seed: int = 0, widths=DEFAULT_WIDTHS,
         in_channels: int = 1) -> ModelParams:
    """Uniform(-sqrt(6/fan_in), sqrt(6/fan_in)) kernels, zero biases."""
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if any(int(w) < 1 for w in widths):
        raise ValueError(f"layer widths must be positive: {widths}")
    rng = np.random.default_rng(seed)
    kernels, biases = [], []
    for c_in, c_out in _channel_chain(in_channels, widths, n_classes):
        bound = np.sqrt(6.0 / (c_in * 9))
        kernels.append(rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3)))
        biases.append(np.zeros(c_out))
    return ModelParams(kernels, biases, n_classes, tuple(int(w) for w in widths),
                       in_channels, seed)


def logits(layers, image: ad.Tensor, trace: Optional[list] = None) -> ad.Tensor:
    """Forward pass to K x H x W logits.  ``layers`` holds (kernel, bias) tensors.

    If ``trace`` is a list, the hidden pre-activation arrays are appended to it.
    """
    h = image
    last = len(layers) - 1
    for i, (k, b) in enumerate(layers):
        h = ad.bias_add(ad.conv2d_same(h, k), b)
        if i != last:
            if trace is not None:
                trace.append(h.data)
            h = ad.relu(h)
    return h


def forward(layers, image: ad.Tensor) -> ad.Tensor:
    return ad.softmax(logits(layers, image), axis=0)


def tracked_layers(params: ModelParams, graph: ad.Graph) -> list:
    """Register the parameters as leaves of ``graph``."""
    return [(graph.param(k, name=f"conv{i}.kernel"), graph.param(b, name=f"conv{i}.bias"))
            for i, (k, b) in enumerate(zip(params.kernels, params.biases))]


def constant_layers(params: ModelParams) -> list:
    return [(ad.Tensor(k), ad.Tensor(b)) for k, b in zip(params.kernels, params.biases)]


def predict(params: ModelParams, image) -> np.ndarray:
    """Softmax prediction (K, H, W) for a (1, H, W) image, no gradient tape."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    return forward(constant_layers(params), ad.Tensor(img)).data


def segment(params: ModelParams, image) -> np.ndarray:
    """Hard label map (argmax over classes)."""
    return np.argmax(predict(params, image), axis=0).astype(np.uint8)


# ---------------------------------------------------------------------------
# checkpoint file: magic, u32 manifest length + JSON manifest, then per tensor
# u32 ndim, ndim x u32 extents, little-endian float64 payload


def checkpoint_bytes(params: ModelParams) -> bytes:
    manifest = json.dumps({"arch": params.arch(), "K": params.n_classes, "seed": params.seed},
                          sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(manifest)))
    buf.write(manifest)
    for arr in params.arrays():
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def params_from_bytes(raw: bytes, source: str = "<bytes>") -> ModelParams:
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{source}: bad magic, not an SFDA-MDL1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{source}: truncated checkpoint")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (mlen,) = struct.unpack("<I", take(4))
    try:
        manifest = json.loads(take(mlen).decode("utf-8"))
        arch = manifest["arch"]
        n_classes = int(manifest["K"])
        widths = tuple(int(w) for w in arch["widths"])
        in_ch = int(arch.get("in_channels", 1))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{source}: malformed manifest ({exc})") from None
    arrays = []
    for c_in, c_out in _channel_chain(in_ch, widths, n_classes):
        for expected in ((c_out, c_in, 3, 3), (c_out,)):
            (ndim,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            if tuple(shape) != expected:
                raise CheckpointError(f"{source}: tensor shape {shape}, manifest implies {expected}")
            n = int(np.prod(shape))
            arrays.append(np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape))
    if pos != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - pos} trailing bytes")
    return ModelParams(arrays[0::2], arrays[1::2], n_classes, widths, in_ch, manifest.get("seed"))


def save(params: ModelParams, path) -> None:
    atomic_write_bytes(Path(path), checkpoint_bytes(params))


def load(path) -> ModelParams:
    path = Path(path)
    return params_from_bytes(path.read_bytes(), str(path))
