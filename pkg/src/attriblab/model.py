"""Small convolutional classifier: config, init, SGD training, checkpoints.

The reference architecture is

    conv3x3x8 -> relu -> maxpool2 -> conv3x3x16 -> relu -> maxpool2
    -> dense 64 -> relu (embedding) -> dense classCount

Checkpoint files are ``b"ACLB"`` + little-endian u16 version + u32 header
length + UTF-8 JSON header + little-endian float64 parameter blocks.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .diffcore import Tape

log = logging.getLogger(__name__)

MAGIC = b"ACLB"
FORMAT_VERSION = 1
LAYER_KINDS = ("conv", "relu", "maxpool", "dense")
SCORE_MODES = ("logit", "log-probability")


class ConfigError(ValueError):
    """Inconsistent model or training configuration."""


@dataclass(frozen=True)
class Layer:
    kind: str
    width: int = 0  # conv output channels / dense units
    kernel: int = 3
    in_features: int | None = None  # optional dense fan-in, checked against the chain

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("conv", "dense"):
            d["width"] = self.width
        if self.kind == "conv":
            d["kernel"] = self.kernel
        if self.in_features is not None:
            d["in_features"] = self.in_features
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Layer":
        return cls(d["kind"], d.get("width", 0), d.get("kernel", 3), d.get("in_features"))


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int]
    layers: tuple[Layer, ...]
    class_count: int
    seed: int = 1860867

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
            "class_count": self.class_count,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(tuple(d["input_shape"]), tuple(Layer.from_dict(x) for x in d["layers"]), d["class_count"], d["seed"])


def reference_config(input_shape=(1, 28, 28), class_count: int = 10, seed: int = 1860867) -> ModelConfig:
    layers = (
        Layer("conv", 8, 3), Layer("relu"), Layer("maxpool"),
        Layer("conv", 16, 3), Layer("relu"), Layer("maxpool"),
        Layer("dense", 64), Layer("relu"),
        Layer("dense", class_count),
    )
    return ModelConfig(tuple(input_shape), layers, class_count, seed)


def linear_config(input_shape, class_count: int, seed: int = 0) -> ModelConfig:
    """Single affine layer; its input gradient is the weight column of the class."""
    return ModelConfig(tuple(input_shape), (Layer("dense", class_count),), class_count, seed)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Walk the layer chain, validating it, and return every parameter's shape."""
    if len(config.input_shape) != 3 or min(config.input_shape) < 1:
        raise ConfigError(f"input_shape must be (channels, height, width), got {config.input_shape}")
    if config.class_count < 1:
        raise ConfigError("class_count must be positive")
    if not config.layers or config.layers[-1].kind != "dense":
        raise ConfigError("the last layer must be dense")
    if not 0 <= config.seed < 2**64:
        raise ConfigError("seed must be a 64-bit unsigned integer")
    shapes: dict[str, tuple[int, ...]] = {}
    c, h, w = config.input_shape
    flat: int | None = None
    counts = {"conv": 0, "dense": 0}
    for i, layer in enumerate(config.layers):
        if layer.kind not in LAYER_KINDS:
            raise ConfigError(f"layer {i}: unknown kind {layer.kind!r}")
        if layer.kind == "conv":
            if flat is not None:
                raise ConfigError(f"layer {i}: conv after dense")
            if layer.width < 1 or layer.kernel < 1 or layer.kernel % 2 == 0:
                raise ConfigError(f"layer {i}: conv needs positive width and odd kernel")
            counts["conv"] += 1
            name = f"conv{counts['conv']}"
            shapes[name + ".weight"] = (layer.width, c, layer.kernel, layer.kernel)
            shapes[name + ".bias"] = (layer.width,)
            c = layer.width
        elif layer.kind == "maxpool":
            if flat is not None or h % 2 or w % 2:
                raise ConfigError(f"layer {i}: maxpool needs an even spatial map, got {h}x{w}")
            h, w = h // 2, w // 2
        elif layer.kind == "dense":
            fan_in = c * h * w if flat is None else flat
            if layer.in_features is not None and layer.in_features != fan_in:
                raise ConfigError(f"layer {i}: dense expects {layer.in_features} inputs but the chain provides {fan_in}")
            if layer.width < 1:
                raise ConfigError(f"layer {i}: dense needs positive width")
            counts["dense"] += 1
            name = f"dense{counts['dense']}"
            shapes[name + ".weight"] = (fan_in, layer.width)
            shapes[name + ".bias"] = (layer.width,)
            flat = layer.width
    if flat != config.class_count:
        raise ConfigError(f"final dense width {flat} != class_count {config.class_count}")
    return shapes


@dataclass(frozen=True)
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = parameter_shapes(self.config)
        if set(shapes) != set(self.params):
            raise ConfigError(f"parameter names {sorted(self.params)} do not match config {sorted(shapes)}")
        frozen = {}
        for name, shape in shapes.items():
            arr = np.array(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ConfigError(f"parameter {name} has shape {arr.shape}, config requires {shape}")
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "params", frozen)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.config.input_shape

    @property
    def class_count(self) -> int:
        return self.config.class_count

    def to_bytes(self) -> bytes:
        manifest, offset = [], 0
        names = list(parameter_shapes(self.config))
        for name in names:
            arr = self.params[name]
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.size * 8
        header = json.dumps(
            {"config": self.config.to_dict(), "train_meta": self.train_meta, "parameters": manifest},
            sort_keys=True,
        ).encode("utf-8")
        blob = b"".join(self.params[name].astype("<f8").tobytes() for name in names)
        return MAGIC + struct.pack("<HI", FORMAT_VERSION, len(header)) + header + blob

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:4] != MAGIC:
            raise ValueError("not a checkpoint file: bad magic bytes")
        version, hlen = struct.unpack_from("<HI", raw, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        start = 10 + hlen
        header = json.loads(raw[10:start].decode("utf-8"))
        params = {}
        for entry in header["parameters"]:
            count = math.prod(entry["shape"])
            lo = start + entry["offset"]
            if lo + count * 8 > len(raw):
                raise ValueError(f"checkpoint truncated inside parameter {entry['name']}")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=lo).reshape(entry["shape"])
        return cls(ModelConfig.from_dict(header["config"]), params, header["train_meta"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def init_model(config: ModelConfig) -> Checkpoint:
    """He-normal weights drawn from ``config.seed``; zero biases."""
    shapes = parameter_shapes(config)
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = math.prod(shape[1:]) if name.startswith("conv") else shape[0]
            params[name] = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
    return Checkpoint(config, params, {"epochs": 0, "batches": 0})


def zero_model(config: ModelConfig) -> Checkpoint:
    return Checkpoint(config, {n: np.zeros(s) for n, s in parameter_shapes(config).items()}, {})


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def _record_forward(tape: Tape, ckpt: Checkpoint, x, param_vars=None):
    """Record the network on ``tape``; returns (logits, embedding) vars."""
    if param_vars is None:
        param_vars = {n: tape.constant(v) for n, v in ckpt.params.items()}
    h = x
    counts = {"conv": 0, "dense": 0}
    n_layers = len(ckpt.config.layers)
    embedding = None
    for i, layer in enumerate(ckpt.config.layers):
        if i == n_layers - 1:
            embedding = h
        if layer.kind == "conv":
            counts["conv"] += 1
            name = f"conv{counts['conv']}"
            h = tape.conv2d(h, param_vars[name + ".weight"], param_vars[name + ".bias"], padding=layer.kernel // 2)
        elif layer.kind == "dense":
            counts["dense"] += 1
            name = f"dense{counts['dense']}"
            h = tape.dense(h, param_vars[name + ".weight"], param_vars[name + ".bias"])
        elif layer.kind == "relu":
            h = tape.relu(h)
        else:
            h = tape.maxpool2(h)
    return h, embedding


def _as_batch(ckpt: Checkpoint, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    shape = tuple(ckpt.input_shape)
    if x.shape == shape:
        return x[None], True
    if x.ndim == 4 and x.shape[1:] == shape:
        return x, False
    raise ValueError(f"input shape {x.shape} does not match model input {shape}")


def logits(ckpt: Checkpoint, x) -> np.ndarray:
    batch, single = _as_batch(ckpt, x)
    tape = Tape()
    out, _ = _record_forward(tape, ckpt, tape.constant(batch))
    return out.value[0] if single else out.value


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predict(ckpt: Checkpoint, x) -> np.ndarray:
    """Class probabilities for one image (c,h,w) or a batch (n,c,h,w)."""
    return _softmax(logits(ckpt, x))


def embedding(ckpt: Checkpoint, x) -> np.ndarray:
    """Activations feeding the final dense layer, flattened per image."""
    batch, single = _as_batch(ckpt, x)
    tape = Tape()
    _, emb = _record_forward(tape, ckpt, tape.constant(batch))
    out = emb.value.reshape(len(batch), -1)
    return out[0] if single else out


def accuracy(ckpt: Checkpoint, images: np.ndarray, labels: np.ndarray, batch_size: int = 500) -> float:
    correct = 0
    for lo in range(0, len(images), batch_size):
        z = logits(ckpt, images[lo:lo + batch_size])
        correct += int((z.argmax(axis=1) == labels[lo:lo + batch_size]).sum())
    return correct / len(images)


def input_gradients(ckpt: Checkpoint, xs, labels, score_mode: str = "logit") -> np.ndarray:
    """Per-image gradients of the class score for a batch (n,c,h,w).

    Images in a batch do not interact, so differentiating the batch sum
    yields each image's own gradient.
    """
    if score_mode not in SCORE_MODES:
        raise ValueError(f"score_mode must be one of {SCORE_MODES}, got {score_mode!r}")
    xs, _ = _as_batch(ckpt, xs)
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (len(xs),))
    if labels.size and (labels.min() < 0 or labels.max() >= ckpt.class_count):
        raise ValueError(f"class index outside [0, {ckpt.class_count})")
    tape = Tape()
    x = tape.leaf(xs)
    out, _ = _record_forward(tape, ckpt, x)
    if score_mode == "logit":
        score = tape.select_logit(out, labels)
    else:
        score = tape.scale(tape.softmax_xent(out, labels, reduction="sum"), -1.0)
    return tape.backward(score)[x]


def input_gradient(ckpt: Checkpoint, x, y: int, score_mode: str = "logit") -> np.ndarray:
    """Gradient of f(x, y) with respect to a single image x, same shape as x."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(ckpt.input_shape):
        raise ValueError(f"input shape {x.shape} does not match model input {ckpt.input_shape}")
    if not 0 <= int(y) < ckpt.class_count:
        raise ValueError(f"class index {y} outside [0, {ckpt.class_count})")
    return input_gradients(ckpt, x[None], [int(y)], score_mode)[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    gaussian_sigma_range: tuple[float, float] = (0.1, 0.3)
    luminance_range: tuple[float, float] = (0.1, 0.9)

    def __post_init__(self):
        for name in ("gaussian_sigma_range", "luminance_range"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ConfigError(f"{name} must satisfy 0 <= low <= high, got {(lo, hi)}")

    def apply(self, images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = len(images)
        sigma = rng.uniform(*self.gaussian_sigma_range, size=n)
        lum = rng.uniform(*self.luminance_range, size=n)
        noise = rng.standard_normal(images.shape)
        shape = (n,) + (1,) * (images.ndim - 1)
        return np.clip(images * lum.reshape(shape) + noise * sigma.reshape(shape), 0.0, 1.0)


@dataclass(frozen=True)
class TrainSpec:
    learning_rate: float = 0.05
    batch_size: int = 32
    epochs: int | None = 3
    batch_count: int | None = None
    augmentation: AugmentSpec | None = None
    seed: int = 1860867

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if (self.epochs is None) == (self.batch_count is None):
            raise ConfigError("set exactly one of epochs / batch_count")
        if (self.epochs or 0) < 0 or (self.batch_count or 0) < 0:
            raise ConfigError("epochs / batch_count must be nonnegative")


def _batches(n: int, spec: TrainSpec) -> Iterable[tuple[int, np.ndarray]]:
    order_rng = np.random.default_rng([spec.seed, 0])
    total = spec.batch_count if spec.batch_count is not None else spec.epochs * math.ceil(n / spec.batch_size)
    done, epoch = 0, 0
    while done < total:
        perm = order_rng.permutation(n)
        for lo in range(0, n, spec.batch_size):
            if done == total:
                return
            yield epoch, perm[lo:lo + spec.batch_size]
            done += 1
        epoch += 1


def train(
    ckpt: Checkpoint,
    images: np.ndarray,
    labels: np.ndarray,
    spec: TrainSpec,
    eval_set: tuple[np.ndarray, np.ndarray] | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> Checkpoint:
    """Plain minibatch SGD on mean softmax cross-entropy."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if images.shape[1:] != tuple(ckpt.input_shape) or len(labels) != len(images):
        raise ValueError(f"dataset shape {images.shape} does not match model input {ckpt.input_shape}")
    aug_rng = np.random.default_rng([spec.seed, 1])
    params = {n: v.copy() for n, v in ckpt.params.items()}
    epoch_losses: list[float] = []
    running, count, current, n_batches = 0.0, 0, 0, 0

    def close_epoch():
        epoch_losses.append(running / count)
        if on_epoch:
            on_epoch(len(epoch_losses), epoch_losses[-1])

    for epoch, idx in _batches(len(images), spec):
        if epoch != current and count:
            close_epoch()
            running, count, current = 0.0, 0, epoch
        xb = images[idx]
        if spec.augmentation is not None:
            xb = spec.augmentation.apply(xb, aug_rng)
        tape = Tape()
        pvars = {n: tape.leaf(v) for n, v in params.items()}
        out, _ = _record_forward(tape, ckpt, tape.constant(xb), pvars)
        loss = tape.softmax_xent(out, labels[idx])
        grads = tape.backward(loss)
        for n, var in pvars.items():
            params[n] = params[n] - spec.learning_rate * grads[var]
        running += float(loss.value) * len(idx)
        count += len(idx)
        n_batches += 1
    if count:
        close_epoch()

    meta = dict(ckpt.train_meta)
    meta["epochs"] = meta.get("epochs", 0) + len(epoch_losses)
    meta["batches"] = meta.get("batches", 0) + n_batches
    meta["epoch_losses"] = meta.get("epoch_losses", []) + epoch_losses
    trained = Checkpoint(ckpt.config, params, meta)
    meta["train_accuracy"] = accuracy(trained, images, labels)
    if eval_set is not None:
        meta["test_accuracy"] = accuracy(trained, *eval_set)
    return replace(trained, train_meta=meta)
