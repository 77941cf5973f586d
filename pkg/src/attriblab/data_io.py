"""Dataset loading: IDX (MNIST-style) files and raw RGB image directories."""
from __future__ import annotations

import gzip
import re
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, c, h, w) in [0, 1]
    labels: np.ndarray  # (n,) int64
    name: str = "dataset"

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (n, c, h, w), got shape {images.shape}")
        if len(labels) != len(images):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        if images.size and (images.min() < 0 or images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be nonnegative")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def class_count(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedFileError(f"{what}: file shorter than the 4-byte magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{what}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFileError(f"{what}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise TruncatedFileError(f"{what}: expected {count} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_idx(images_path, labels_path, name: str | None = None) -> Dataset:
    """Load an IDX image/label pair; gzip-compressed files are accepted too."""
    pixels = parse_idx(_read_bytes(images_path), IMAGE_MAGIC, "images")
    labels = parse_idx(_read_bytes(labels_path), LABEL_MAGIC, "labels")
    if len(pixels) != len(labels):
        raise CountMismatchError(f"{len(pixels)} images but {len(labels)} labels")
    images = pixels[:, None, :, :].astype(np.float64) / 255.0
    return Dataset(images, labels.astype(np.int64), name or Path(images_path).name.split(".")[0])


def encode_idx(array: np.ndarray) -> bytes:
    """Serialize a uint8 array as IDX (images when 3-D, labels when 1-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


_RGB_NAME = re.compile(r"^(\d+)_(\d+)\.rgb$")


def load_rgb_dir(directory, width: int, height: int, name: str | None = None) -> Dataset:
    """Load ``<index>_<label>.rgb`` files of interleaved 8-bit RGB, ordered by index."""
    entries = []
    for path in Path(directory).iterdir():
        m = _RGB_NAME.match(path.name)
        if m:
            entries.append((int(m.group(1)), int(m.group(2)), path))
    entries.sort()
    expected = width * height * 3
    images, labels = [], []
    for _, label, path in entries:
        raw = path.read_bytes()
        if len(raw) != expected:
            raise TruncatedFileError(f"{path.name}: expected {expected} bytes, found {len(raw)}")
        img = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3).transpose(2, 0, 1)
        images.append(img.astype(np.float64) / 255.0)
        labels.append(label)
    if not images:
        raise ValueError(f"no <index>_<label>.rgb files in {directory}")
    return Dataset(np.stack(images), np.array(labels), name or Path(directory).name)


def subsample(data: Dataset, n: int, seed: int) -> tuple[Dataset, np.ndarray]:
    """Uniform sample without replacement; returns the subset and the chosen indices."""
    if not 0 <= n <= len(data):
        raise ValueError(f"cannot draw {n} items from a dataset of {len(data)}")
    idx = np.random.default_rng(seed).permutation(len(data))[:n]
    return Dataset(data.images[idx], data.labels[idx], f"{data.name}[{n}@{seed}]"), idx


def reference_dir() -> Path:
    return Path(str(resources.files("attriblab") / "reference"))


def load_reference(split: str = "test") -> Dataset:
    """The bundled 28x28 digit corpus (4000 train / 1000 test, class-balanced)."""
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    d = reference_dir()
    return load_idx(d / f"{split}-images-idx3-ubyte.gz", d / f"{split}-labels-idx1-ubyte.gz", f"digits-{split}")
