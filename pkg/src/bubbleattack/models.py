"""Classifiers, the denoising autoencoder, and checkpoint files.

Class index 0 is Mark and index 1 is NonMark throughout.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .tensor import FULL64, PrecisionMode, Tensor

IMAGE_SHAPE = (40, 50)
MARK, NONMARK = 0, 1


class ShapeError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


class CheckpointCompatibilityError(ValueError):
    pass


def _image_array(image) -> np.ndarray:
    px = getattr(image, "pixels", image)
    px = px.numpy() if isinstance(px, Tensor) else np.asarray(px, dtype=np.float64)
    if px.shape[-2:] != IMAGE_SHAPE:
        raise ShapeError(f"expected {IMAGE_SHAPE[0]}x{IMAGE_SHAPE[1]} image(s), got shape {px.shape}")
    return px


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """Common parameter bookkeeping.

    Parameters live as float64 arrays in ``params`` (name -> array). Forward
    passes wrap them as leaf tensors in the requested precision mode.
    """

    tag = "model"
    param_order: tuple[str, ...] = ()

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def parameter_count(self) -> int:
        return int(sum(self.params[k].size for k in self.param_order))

    def leaves(self, mode: PrecisionMode, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(self.params[k], requires_grad, mode) for k in self.param_order}

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.param_order])

    def load_flat(self, blob: np.ndarray):
        if blob.size != self.parameter_count():
            raise CheckpointCompatibilityError(
                f"{self.tag} expects {self.parameter_count()} parameters, blob has {blob.size}")
        pos = 0
        for k in self.param_order:
            n = self.params[k].size
            self.params[k] = blob[pos:pos + n].reshape(self.params[k].shape).copy()
            pos += n

    def config(self) -> dict:
        return {}

    def copy(self):
        other = type(self)(**self.config())
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other


# ---------------------------------------------------------------- SVM

class TwoLogitWrapper:
    """Fixed linear layer mapping a scalar score p to ``[1 - p, p]``."""

    weights = np.array([[-1.0], [1.0]])
    bias = np.array([1.0, 0.0])

    def __call__(self, p: Tensor) -> Tensor:
        mode = p.mode
        return ops.linear(p, Tensor(self.weights, mode=mode), Tensor(self.bias, mode=mode))


class LinearSvmModel(Model):
    """Linear score ``p = w.x + b`` over the flattened image.

    p > 1/2 reads as NonMark. The wrapper turns p into logits so the same
    CE/DLR attack code applies to the SVM and the CNN.
    """

    tag = "svm"
    param_order = ("weights", "bias")

    def __init__(self, n_features: int = IMAGE_SHAPE[0] * IMAGE_SHAPE[1]):
        super().__init__()
        self.n_features = n_features
        self.params = {"weights": np.zeros(n_features), "bias": np.zeros(1)}
        self.wrapper = TwoLogitWrapper()

    def config(self):
        return {"n_features": self.n_features}

    def score(self, x: np.ndarray) -> np.ndarray:
        """Raw score in float64 (reference path, no tape)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.n_features)
        return x @ self.params["weights"] + self.params["bias"][0]

    def logits(self, x: Tensor, leaves: dict[str, Tensor] | None = None, training=False, rng=None) -> Tensor:
        leaves = leaves or self.leaves(x.mode)
        flat = ops.reshape(x, (-1, self.n_features))
        p = ops.linear(flat, ops.reshape(leaves["weights"], (1, self.n_features)), leaves["bias"])
        return self.wrapper(p)


# ---------------------------------------------------------------- SimpleCNN

class SimpleCnnModel(Model):
    tag = "simplecnn"
    param_order = ("c1.w", "c1.b", "c2.w", "c2.b", "c3.w", "c3.b", "fc.w", "fc.b")
    fc_in = 32 * 3 * 4

    def __init__(self, dropout: float = 0.5, seed: int = 0):
        super().__init__()
        self.dropout = dropout
        self.seed = seed
        rng = np.random.default_rng(seed)
        shapes = [("c1", (32, 1, 3, 3)), ("c2", (48, 32, 3, 3)), ("c3", (32, 48, 3, 3))]
        for name, shp in shapes:
            fan_in = shp[1] * 9
            self.params[f"{name}.w"] = kaiming_uniform(rng, shp, fan_in)
            self.params[f"{name}.b"] = np.zeros(shp[0])
        self.params["fc.w"] = kaiming_uniform(rng, (2, self.fc_in), self.fc_in)
        self.params["fc.b"] = np.zeros(2)

    def config(self):
        return {"dropout": self.dropout, "seed": self.seed}

    def logits(self, x: Tensor, leaves=None, training: bool = False, rng=None) -> Tensor:
        leaves = leaves or self.leaves(x.mode)
        if x.ndim == 2:
            x = ops.reshape(x, (1, 1) + x.shape)
        elif x.ndim == 3:
            x = ops.reshape(x, (x.shape[0], 1) + x.shape[1:])
        h = x
        for name in ("c1", "c2", "c3"):
            h = ops.maxpool2(ops.relu(ops.conv2d(h, leaves[f"{name}.w"], leaves[f"{name}.b"])))
        h = ops.flatten(h)
        h = ops.dropout(h, self.dropout, rng, training)
        return ops.linear(h, leaves["fc.w"], leaves["fc.b"])


def confidence(model: Model, images, mode: PrecisionMode = FULL64) -> np.ndarray:
    """Softmax confidences, shape (N, 2); dropout disabled."""
    x = Tensor(_image_array(images).reshape((-1,) + IMAGE_SHAPE), mode=mode)
    return ops.softmax(model.logits(x)).data


def svm_confidence(model: LinearSvmModel, image, mode: PrecisionMode = FULL64) -> np.ndarray:
    return confidence(model, image, mode)


def cnn_confidence(model: SimpleCnnModel, image, mode: PrecisionMode = FULL64,
                   training: bool = False, rng=None) -> np.ndarray:
    x = Tensor(_image_array(image).reshape((-1,) + IMAGE_SHAPE), mode=mode)
    return ops.softmax(model.logits(x, training=training, rng=rng)).data


def predict(model: Model, images, mode: PrecisionMode = FULL64, batch: int = 256) -> np.ndarray:
    """Argmax labels (ties resolve to index 0, i.e. Mark)."""
    px = _image_array(images).reshape((-1,) + IMAGE_SHAPE)
    out = []
    for i in range(0, len(px), batch):
        z = model.logits(Tensor(px[i:i + batch], mode=mode)).data
        out.append(np.argmax(z, axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------- denoiser

class DenoiserModel(Model):
    """Convolutional autoencoder; raw decode is 42x50, trimmed to 40x50."""

    tag = "denoiser"
    param_order = ("e1.w", "e1.b", "e2.w", "e2.b", "e3.w", "e3.b",
                   "d1.w", "d1.b", "d2.w", "d2.b", "d3.w", "d3.b", "d4.w", "d4.b")

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed
        rng = np.random.default_rng(seed)
        for name, (f, c) in {"e1": (32, 1), "e2": (16, 32), "e3": (8, 16)}.items():
            self.params[f"{name}.w"] = kaiming_uniform(rng, (f, c, 3, 3), c * 9)
            self.params[f"{name}.b"] = np.zeros(f)
        # transpose kernels are (C_in, F_out, kh, kw)
        for name, (c, f, k) in {"d1": (8, 8, 3), "d2": (8, 16, 2), "d3": (16, 32, 2), "d4": (32, 1, 3)}.items():
            self.params[f"{name}.w"] = kaiming_uniform(rng, (c, f, k, k), c * k * k)
            self.params[f"{name}.b"] = np.zeros(f)

    def config(self):
        return {"seed": self.seed}

    def raw_decode(self, x: Tensor, leaves=None) -> Tensor:
        leaves = leaves or self.leaves(x.mode)
        if x.ndim == 3:
            x = ops.reshape(x, (x.shape[0], 1) + x.shape[1:])
        h = x
        for name in ("e1", "e2", "e3"):
            h = ops.maxpool2(ops.relu(ops.conv2d(h, leaves[f"{name}.w"], leaves[f"{name}.b"], padding=1)))
        # 5x6 -> 11x13, crop to 10x12 so the stride-2 stages land on 40x48
        h = ops.relu(ops.conv_transpose2d(h, leaves["d1.w"], leaves["d1.b"], stride=2))
        h = ops.crop(h, (slice(None), slice(None), slice(0, -1), slice(0, -1)))
        h = ops.relu(ops.conv_transpose2d(h, leaves["d2.w"], leaves["d2.b"], stride=2))
        h = ops.relu(ops.conv_transpose2d(h, leaves["d3.w"], leaves["d3.b"], stride=2))
        return ops.conv_transpose2d(h, leaves["d4.w"], leaves["d4.b"], stride=1)

    def forward(self, x: Tensor, leaves=None) -> Tensor:
        raw = self.raw_decode(x, leaves)
        return ops.crop(raw, (slice(None), 0, slice(1, -1), slice(None)))


def denoise(model: DenoiserModel, images, batch: int = 128) -> np.ndarray:
    px = _image_array(images)
    single = px.ndim == 2
    px = px.reshape((-1,) + IMAGE_SHAPE)
    out = np.empty_like(px)
    for i in range(0, len(px), batch):
        out[i:i + batch] = model.forward(Tensor(px[i:i + batch])).data
    out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


# ---------------------------------------------------------------- checkpoints

MAGIC = b"BBLM"
VERSION = 1
ARCHITECTURES = {cls.tag: cls for cls in (LinearSvmModel, SimpleCnnModel, DenoiserModel)}


@dataclass
class CheckpointMeta:
    dataset: str = ""
    seed: int = 0
    epoch: int = 0
    extra: dict = field(default_factory=dict)


def save_checkpoint(model: Model, path, meta: CheckpointMeta | None = None):
    meta = meta or CheckpointMeta()
    tag = model.tag.encode()
    info = json.dumps({"config": model.config(), "dataset": meta.dataset, "seed": meta.seed,
                       "epoch": meta.epoch, "extra": meta.extra}, sort_keys=True).encode()
    blob = model.flat().astype("<f8").tobytes()
    body = b"".join([
        MAGIC, bytes([VERSION]),
        struct.pack("<H", len(tag)), tag,
        struct.pack("<I", len(info)), info,
        struct.pack("<Q", model.parameter_count()), blob,
    ])
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path, expect: type[Model] | str | None = None):
    """Read a checkpoint; returns ``(model, CheckpointMeta)``."""
    raw = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointFormatError(f"truncated checkpoint: need {n} bytes for {what} at offset {pos}")
        out = raw[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic at offset 0 (not a BBLM checkpoint)")
    version = take(1, "version")[0]
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} at offset 4")
    (tlen,) = struct.unpack("<H", take(2, "tag length"))
    tag = take(tlen, "tag").decode()
    (ilen,) = struct.unpack("<I", take(4, "metadata length"))
    info = json.loads(take(ilen, "metadata"))
    (count,) = struct.unpack("<Q", take(8, "parameter count"))
    blob = np.frombuffer(take(8 * count, "parameters"), dtype="<f8").astype(np.float64)
    (crc,) = struct.unpack("<I", take(4, "crc"))
    if pos != len(raw):
        raise CheckpointFormatError(f"{len(raw) - pos} trailing bytes at offset {pos}")
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointFormatError("CRC-32 mismatch")

    want = expect if isinstance(expect, str) or expect is None else expect.tag
    if want is not None and want != tag:
        raise CheckpointCompatibilityError(f"checkpoint holds a {tag!r} model, expected {want!r}")
    if tag not in ARCHITECTURES:
        raise CheckpointCompatibilityError(f"unknown architecture tag {tag!r}")
    model = ARCHITECTURES[tag](**info["config"])
    model.load_flat(blob)
    meta = CheckpointMeta(info["dataset"], info["seed"], info["epoch"], info["extra"])
    return model, meta
