"""Explanation certainty: binned plug-in mutual information between an input
image and its attribution map, and the bound exp(I(x;z) - H(x)).

All quantities are in nats. Both axes are binned into ``bins`` equal-width
cells over [0, 1]; a value of exactly 1.0 falls in the last cell.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attribution import AttributionMap, integrate, normalize_min_max
from .data_io import Dataset, subsample
from .model import Checkpoint
from .samplers import SamplerKind, SamplerSpec, derive_seed

LUMA = np.array([0.299, 0.587, 0.114])
BOUND_SLACK = 1e-9


@dataclass(frozen=True)
class HistogramConfig:
    bins: int = 32
    pooling: str = "per_image"  # or "corpus"

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.pooling not in ("per_image", "corpus"):
            raise ValueError(f"pooling must be 'per_image' or 'corpus', got {self.pooling!r}")


@dataclass(frozen=True)
class MIEstimate:
    mi_nats: float
    entropy_x_nats: float
    entropy_z_nats: float
    conditional_entropy_nats: float
    certainty_lower_bound: float
    sample_count: int
    config: HistogramConfig

    def to_dict(self) -> dict:
        return {
            "mi_nats": self.mi_nats,
            "entropy_x_nats": self.entropy_x_nats,
            "entropy_z_nats": self.entropy_z_nats,
            "conditional_entropy_nats": self.conditional_entropy_nats,
            "certainty_lower_bound": self.certainty_lower_bound,
            "sample_count": self.sample_count,
        }


def _plane(x) -> np.ndarray:
    """Single-channel view of an image; RGB is reduced to luminance."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        if x.shape[0] == 1:
            return x[0]
        if x.shape[0] == 3:
            return np.tensordot(LUMA, x, axes=1)
        raise ValueError(f"expected 1 or 3 channels, got {x.shape[0]}")
    return x


def _check_range(v: np.ndarray, what: str) -> None:
    if v.size and (not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0):
        raise ValueError(f"{what} values must lie in [0, 1]")


def bin_index(v: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((np.asarray(v) * bins).astype(np.int64), bins - 1)


def _entropy_from_counts(counts: np.ndarray) -> float:
    n = counts.sum()
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def mi_from_joint_counts(joint: np.ndarray) -> float:
    """Plug-in MI of a contingency table of counts, with 0 ln 0 = 0."""
    joint = np.asarray(joint, dtype=np.float64)
    n = joint.sum()
    pxy = joint / n
    px = pxy.sum(axis=1, keepdims=True)
    pz = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    return float((pxy[nz] * np.log(pxy[nz] / (px * pz)[nz])).sum())


def entropy(x, cfg: HistogramConfig = HistogramConfig()) -> float:
    v = np.asarray(x, dtype=np.float64).ravel()
    _check_range(v, "input")
    return _entropy_from_counts(np.bincount(bin_index(v, cfg.bins), minlength=cfg.bins))


def certainty_bound(mi: float, hx: float) -> float:
    """exp(I(x;z) - H(x)), the lower bound on Pr(x | z)."""
    if mi > hx + BOUND_SLACK:
        raise ValueError(f"mutual information {mi} exceeds input entropy {hx}: inconsistent estimate")
    return math.exp(min(mi - hx, 0.0))


def _pairs(x, z) -> tuple[np.ndarray, np.ndarray]:
    zv = z.values if isinstance(z, AttributionMap) else np.asarray(z, dtype=np.float64)
    xv = _plane(x)
    zv = _plane(zv)
    if xv.shape != zv.shape:
        raise ValueError(f"shape mismatch: input {xv.shape} vs explanation {zv.shape}")
    _check_range(xv, "input")
    _check_range(zv, "explanation")
    return xv.ravel(), zv.ravel()


def _estimate(xs: np.ndarray, zs: np.ndarray, cfg: HistogramConfig) -> MIEstimate:
    b = cfg.bins
    joint = np.bincount(bin_index(xs, b) * b + bin_index(zs, b), minlength=b * b).reshape(b, b)
    hx = _entropy_from_counts(joint.sum(axis=1))
    hz = _entropy_from_counts(joint.sum(axis=0))
    mi = min(max(mi_from_joint_counts(joint), 0.0), hx, hz)
    return MIEstimate(mi, hx, hz, hx - mi, math.exp(mi - hx), int(xs.size), cfg)


def estimate_mi(x, z, cfg: HistogramConfig = HistogramConfig()) -> MIEstimate:
    """MI between paired pixels of one image and its explanation."""
    xs, zs = _pairs(x, z)
    return _estimate(xs, zs, cfg)


def estimate_mi_pooled(xs: Sequence, zs: Sequence, cfg: HistogramConfig = HistogramConfig()) -> MIEstimate:
    """MI over pixel pairs pooled across a corpus of (image, explanation) pairs."""
    if len(xs) != len(zs) or not len(xs):
        raise ValueError("need equally many, and at least one, images and explanations")
    pairs = [_pairs(x, z) for x, z in zip(xs, zs)]
    return _estimate(np.concatenate([p[0] for p in pairs]), np.concatenate([p[1] for p in pairs]), cfg)


# ---------------------------------------------------------------------------
# cross-method benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Method:
    sampler: SamplerSpec
    multiply_by_input: bool = False

    @property
    def name(self) -> str:
        return self.sampler.name + ("*input" if self.multiply_by_input else "")

    @property
    def token(self) -> str:
        return self.sampler.token + ("*input" if self.multiply_by_input else "")

    @classmethod
    def parse(cls, text: str) -> "Method":
        text = text.strip()
        mult = text.endswith("*input")
        return cls(SamplerSpec.parse(text[:-6] if mult else text), mult)


@dataclass
class BenchmarkRow:
    method: Method
    per_image: list[MIEstimate]

    @property
    def mi_values(self) -> np.ndarray:
        return np.array([e.mi_nats for e in self.per_image])

    @property
    def mean_mi(self) -> float:
        return float(self.mi_values.mean())

    @property
    def stddev(self) -> float:
        v = self.mi_values
        return float(v.std(ddof=1)) if len(v) > 1 else 0.0


@dataclass
class BenchmarkTable:
    rows: list[BenchmarkRow]
    image_indices: list[int]
    labels: list[int]
    normalized_to: str | None = None
    corpus: list[MIEstimate] = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    def normalized_score(self, row: BenchmarkRow) -> float | None:
        if self.normalized_to is None:
            return None
        ref = next(r for r in self.rows if r.method.sampler.kind is SamplerKind.LINEAR_SCALE)
        return row.mean_mi / ref.mean_mi if ref.mean_mi > 0 else math.nan

    def row(self, name: str) -> BenchmarkRow:
        for r in self.rows:
            if r.method.name == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "meanMI_nats", "normalizedToIG", "stddev", "imageCount"])
        for r in self.rows:
            score = self.normalized_score(r)
            w.writerow([r.method.name, f"{r.mean_mi:.17g}", "" if score is None else f"{score:.17g}",
                        f"{r.stddev:.17g}", len(r.per_image)])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "settings": self.settings,
            "image_indices": self.image_indices,
            "labels": self.labels,
            "methods": [
                {
                    "method": r.method.name,
                    "sampler": r.method.sampler.to_dict(),
                    "multiply_by_input": r.method.multiply_by_input,
                    "mean_mi_nats": r.mean_mi,
                    "normalized_to_ig": self.normalized_score(r),
                    "stddev": r.stddev,
                    "per_image": [e.to_dict() for e in r.per_image],
                    "corpus": self.corpus[i].to_dict() if self.corpus else None,
                }
                for i, r in enumerate(self.rows)
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def explain_and_score(
    ckpt: Checkpoint,
    x: np.ndarray,
    y: int,
    method: Method,
    n_samples: int,
    seed: int,
    cfg: HistogramConfig,
    workers: int = 1,
) -> tuple[AttributionMap, MIEstimate]:
    z = normalize_min_max(integrate(ckpt, x, y, method.sampler, n_samples, seed, method.multiply_by_input, workers=workers))
    return z, estimate_mi(x, z, cfg)


def benchmark(
    ckpt: Checkpoint,
    data: Dataset,
    methods: Sequence[Method],
    n_samples: int = 100,
    image_count: int = 100,
    seed: int = 1860867,
    cfg: HistogramConfig = HistogramConfig(),
    normalize: bool = True,
    workers: int = 1,
) -> BenchmarkTable:
    """Mean explanation MI per method over a seeded random subset of images.

    Every method sees the same images and the same per-image sampler seeds.
    The normalized column divides by the LinearScale (IG-style) method.
    """
    methods = list(methods)
    if not methods:
        raise ValueError("no methods to benchmark")
    if normalize and not any(m.sampler.kind is SamplerKind.LINEAR_SCALE for m in methods):
        raise ValueError("normalization requested but no LinearScale method is present")
    subset, idx = subsample(data, image_count, seed)

    def score_image(j: int) -> list[tuple[np.ndarray, MIEstimate]]:
        x, y = subset.images[j], int(subset.labels[j])
        img_seed = derive_seed(seed, int(idx[j]))
        out = []
        for m in methods:
            z, est = explain_and_score(ckpt, x, y, m, n_samples, img_seed, cfg)
            out.append((z.values, est))
        return out

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_image = list(pool.map(score_image, range(len(subset))))
    else:
        per_image = [score_image(j) for j in range(len(subset))]

    rows = [BenchmarkRow(m, [per_image[j][k][1] for j in range(len(subset))]) for k, m in enumerate(methods)]
    corpus = []
    if cfg.pooling == "corpus":
        for k in range(len(methods)):
            corpus.append(estimate_mi_pooled(list(subset.images), [per_image[j][k][0] for j in range(len(subset))], cfg))
    settings = {
        "n_samples": n_samples, "image_count": image_count, "seed": seed,
        "bins": cfg.bins, "pooling": cfg.pooling, "dataset": data.name,
    }
    return BenchmarkTable(rows, [int(i) for i in idx], [int(v) for v in subset.labels],
                          "linear" if normalize else None, corpus, settings)
