"""Sampling distributions q(x) for gradient integration.

Randomness is counter-based: every uniform draw is a SplitMix64 output
keyed on (seed, stream, sample index, pixel index), so sample ``i`` can be
produced on its own, in any order, on any worker.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

_GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1

# stream tags separating the draws of different uses
_STREAM_DROP = 1
_STREAM_NORMAL_A = 2
_STREAM_NORMAL_B = 3


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _mix_int(z: int) -> int:
    z = (z + _GAMMA) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def stream_key(seed: int, stream: int, index: int) -> int:
    """Derive the 64-bit key of one (seed, stream, sample index) triple."""
    return _mix_int(_mix_int(_mix_int(seed & _MASK) ^ stream) ^ (index & _MASK))


def uniforms(key: int, count: int) -> np.ndarray:
    """``count`` doubles in [0, 1); element j depends only on (key, j)."""
    with np.errstate(over="ignore"):
        counters = np.arange(1, count + 1, dtype=np.uint64) * np.uint64(_GAMMA) + np.uint64(key)
        bits = _mix64(counters)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def derive_seed(seed: int, *path: int) -> int:
    """Child seed for a nested experiment coordinate, e.g. (image index,)."""
    key = seed & _MASK
    for p in path:
        key = _mix_int(key ^ (p & _MASK))
    return key


class SamplerKind(str, enum.Enum):
    BERNOULLI_DROP = "bernoulli"
    GAUSSIAN_NOISE = "gaussian"
    LINEAR_SCALE = "linear"
    IDENTITY = "identity"


@dataclass(frozen=True)
class SamplerSpec:
    kind: SamplerKind
    p: float = 0.0
    sigma: float = 0.0
    clamp: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", SamplerKind(self.kind))
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"drop probability must be in [0, 1], got {self.p}")
        if not self.sigma >= 0.0 or not math.isfinite(self.sigma):
            raise ValueError(f"sigma must be finite and nonnegative, got {self.sigma}")

    @classmethod
    def bernoulli(cls, p: float) -> "SamplerSpec":
        return cls(SamplerKind.BERNOULLI_DROP, p=p)

    @classmethod
    def gaussian(cls, sigma: float, clamp: bool = True) -> "SamplerSpec":
        return cls(SamplerKind.GAUSSIAN_NOISE, sigma=sigma, clamp=clamp)

    @classmethod
    def linear(cls) -> "SamplerSpec":
        return cls(SamplerKind.LINEAR_SCALE)

    @classmethod
    def identity(cls) -> "SamplerSpec":
        return cls(SamplerKind.IDENTITY)

    @property
    def name(self) -> str:
        if self.kind is SamplerKind.BERNOULLI_DROP:
            return f"bernoulli(p={self.p:g})"
        if self.kind is SamplerKind.GAUSSIAN_NOISE:
            return f"gaussian(sigma={self.sigma:g}{'' if self.clamp else ',unclamped'})"
        return self.kind.value

    @property
    def token(self) -> str:
        """Round-trippable text form accepted by :meth:`parse`."""
        if self.kind is SamplerKind.BERNOULLI_DROP:
            return f"bernoulli:{self.p!r}"
        if self.kind is SamplerKind.GAUSSIAN_NOISE:
            return f"gaussian:{self.sigma!r}" + ("" if self.clamp else ":unclamped")
        return self.kind.value

    @property
    def deterministic(self) -> bool:
        """True when every sample equals the input."""
        return (
            self.kind is SamplerKind.IDENTITY
            or (self.kind is SamplerKind.BERNOULLI_DROP and self.p == 0.0)
            or (self.kind is SamplerKind.GAUSSIAN_NOISE and self.sigma == 0.0)
        )

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind.value}
        if self.kind is SamplerKind.BERNOULLI_DROP:
            d["p"] = self.p
        elif self.kind is SamplerKind.GAUSSIAN_NOISE:
            d["sigma"] = self.sigma
            d["clamp"] = self.clamp
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerSpec":
        return cls(SamplerKind(d["kind"]), p=d.get("p", 0.0), sigma=d.get("sigma", 0.0), clamp=d.get("clamp", True))

    @classmethod
    def parse(cls, text: str) -> "SamplerSpec":
        """Parse ``bernoulli:0.7``, ``gaussian:0.15``, ``gaussian:0.15:unclamped``, ``linear``, ``identity``."""
        head, *rest = text.strip().lower().split(":")
        kind = SamplerKind(head)
        if kind is SamplerKind.BERNOULLI_DROP:
            if len(rest) != 1:
                raise ValueError(f"expected bernoulli:<p>, got {text!r}")
            return cls.bernoulli(float(rest[0]))
        if kind is SamplerKind.GAUSSIAN_NOISE:
            if len(rest) not in (1, 2) or (len(rest) == 2 and rest[1] not in ("clamped", "unclamped")):
                raise ValueError(f"expected gaussian:<sigma>[:unclamped], got {text!r}")
            return cls.gaussian(float(rest[0]), clamp=not (len(rest) == 2 and rest[1] == "unclamped"))
        if rest:
            raise ValueError(f"{kind.value} takes no parameters, got {text!r}")
        return cls(kind)


@dataclass(frozen=True)
class SampleStream:
    spec: SamplerSpec
    base: np.ndarray  # (c, h, w) or (h, w)
    seed: int
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("a sample stream needs count >= 1")
        base = np.asarray(self.base, dtype=np.float64)
        base.setflags(write=False)
        object.__setattr__(self, "base", base)

    def draw(self, index: int) -> np.ndarray:
        return draw_sample(self, index)


def _spatial_size(base: np.ndarray) -> int:
    return int(np.prod(base.shape[-2:])) if base.ndim >= 2 else base.size


def draw_sample(stream: SampleStream, index: int) -> np.ndarray:
    """Sample ``index`` of the stream; a pure function of (spec, base, seed, index)."""
    if not 0 <= index < stream.count:
        raise IndexError(f"sample index {index} outside [0, {stream.count})")
    spec, x = stream.spec, stream.base
    if spec.kind is SamplerKind.IDENTITY:
        return x.copy()
    if spec.kind is SamplerKind.LINEAR_SCALE:
        return x * ((index + 1) / stream.count)
    if spec.kind is SamplerKind.BERNOULLI_DROP:
        # one trial per spatial site, shared across channels
        sites = _spatial_size(x)
        u = uniforms(stream_key(stream.seed, _STREAM_DROP, index), sites)
        keep = (u >= spec.p).reshape(x.shape[-2:] if x.ndim >= 2 else x.shape)
        return np.where(keep, x, 0.0)
    u1 = uniforms(stream_key(stream.seed, _STREAM_NORMAL_A, index), x.size)
    u2 = uniforms(stream_key(stream.seed, _STREAM_NORMAL_B, index), x.size)
    normal = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
    out = x + spec.sigma * normal.reshape(x.shape)
    return np.clip(out, 0.0, 1.0) if spec.clamp else out


def kept_fraction(sample: np.ndarray, base: np.ndarray) -> float:
    """Fraction of the nonzero support of ``base`` left untouched in ``sample``."""
    sample, base = np.asarray(sample), np.asarray(base)
    if sample.shape != base.shape:
        raise ValueError(f"shape mismatch: sample {sample.shape} vs base {base.shape}")
    support = base != 0
    n = int(support.sum())
    if n == 0:
        raise ValueError("base has no nonzero coordinates")
    return float(((sample == base) & support).sum() / n)
