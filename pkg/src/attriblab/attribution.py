"""Gradient integration: average absolute input gradients over a sample stream."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import Checkpoint, input_gradient, input_gradients
from .samplers import SamplerSpec, SampleStream, draw_sample

# Samples are differentiated in fixed chunks of this many indices; the chunk
# layout never depends on the worker count, so results are bit-stable.
CHUNK = 25


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, index: int):
        super().__init__(f"non-finite input gradient at sample index {index}")
        self.index = index


@dataclass(frozen=True)
class AttributionMap:
    values: np.ndarray  # (h, w)
    raw: np.ndarray  # (h, w), before min-max normalization
    meta: dict = field(default_factory=dict)

    @property
    def normalized(self) -> bool:
        return bool(self.meta.get("normalized", False))

    def to_csv(self) -> str:
        return "".join(",".join(f"{v:.17g}" for v in row) + "\n" for row in self.values)

    def save(self, csv_path) -> None:
        """Write the CSV grid plus a ``.json`` meta sidecar next to it."""
        csv_path = Path(csv_path)
        csv_path.write_text(self.to_csv())
        csv_path.with_suffix(".json").write_text(json.dumps(self.meta, sort_keys=True, indent=2) + "\n")


def pairwise_sum(stack: np.ndarray) -> np.ndarray:
    """Sum over axis 0 with a fixed balanced binary tree."""
    n = len(stack)
    if n == 1:
        return stack[0].copy()
    if n == 2:
        return stack[0] + stack[1]
    mid = n // 2
    return pairwise_sum(stack[:mid]) + pairwise_sum(stack[mid:])


def channel_reduce(g: np.ndarray) -> np.ndarray:
    """Per-location max of absolute channel values: (c,h,w) -> (h,w)."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 2:
        return np.abs(g)
    if g.ndim != 3 or g.shape[0] < 1:
        raise ValueError(f"expected (c, h, w), got {g.shape}")
    return np.abs(g).max(axis=0)


def normalize_min_max(m: AttributionMap) -> AttributionMap:
    v = m.values
    lo, hi = v.min(), v.max()
    if hi > lo:
        out = (v - lo) / (hi - lo)
    else:
        out = np.full_like(v, 0.5)
    return replace(m, values=out, meta={**m.meta, "normalized": True})


def sample_gradients(
    ckpt: Checkpoint,
    stream: SampleStream,
    y: int,
    score_mode: str = "logit",
    workers: int = 1,
) -> np.ndarray:
    """Input gradients of every sample in the stream, stacked in index order."""
    chunks = [range(lo, min(lo + CHUNK, stream.count)) for lo in range(0, stream.count, CHUNK)]

    def run(idx: range) -> np.ndarray:
        batch = np.stack([draw_sample(stream, i) for i in idx])
        try:
            grads = input_gradients(ckpt, batch, np.full(len(idx), y), score_mode)
        except FloatingPointError:
            # overflow in the batched pass; redo one by one to name the sample
            singles = []
            for k, i in enumerate(idx):
                try:
                    singles.append(input_gradients(ckpt, batch[k:k + 1], [y], score_mode))
                except FloatingPointError:
                    raise NonFiniteGradientError(i) from None
            grads = np.concatenate(singles)
        bad = ~np.isfinite(grads).reshape(len(idx), -1).all(axis=1)
        if bad.any():
            raise NonFiniteGradientError(idx[int(np.argmax(bad))])
        return grads

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts)


def aggregate(x: np.ndarray, grads: np.ndarray, multiply_by_input: bool = False) -> tuple[np.ndarray, float]:
    """Combine stacked per-sample gradients into an unreduced map and its standard error."""
    n = len(grads)
    terms = grads if multiply_by_input else np.abs(grads)
    # shifting by the first term makes the mean of identical terms exact
    mean = terms[0] + pairwise_sum(terms - terms[0]) / n
    full = np.abs(x * mean) if multiply_by_input else mean
    if n > 1:
        centered = terms - mean
        var = pairwise_sum(centered * centered) / (n - 1)
        stderr = math.sqrt(float(var.mean()) / n)
    else:
        stderr = 0.0
    return full, stderr


def integrate(
    ckpt: Checkpoint,
    x: np.ndarray,
    y: int,
    spec: SamplerSpec,
    n_samples: int,
    seed: int,
    multiply_by_input: bool = False,
    score_mode: str = "logit",
    workers: int = 1,
) -> AttributionMap:
    """Attribution map z = mean_i |grad f(x_i, y)| over samples x_i ~ q(x).

    With ``multiply_by_input`` the signed gradients are averaged first, gated
    by the input, and only then made absolute. Results are deterministic in
    ``seed`` and independent of ``workers``.
    """
    x = np.asarray(x, dtype=np.float64)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if x.shape != tuple(ckpt.input_shape):
        raise ValueError(f"input shape {x.shape} does not match model input {ckpt.input_shape}")
    if not 0 <= int(y) < ckpt.class_count:
        raise ValueError(f"class index {y} outside [0, {ckpt.class_count})")

    # a point-mass sampler needs a single gradient: the mean of N equal terms is that term
    effective = 1 if spec.deterministic else n_samples
    stream = SampleStream(spec, x, seed, effective)
    grads = sample_gradients(ckpt, stream, int(y), score_mode, workers)
    full, stderr = aggregate(x, grads, multiply_by_input)

    raw = channel_reduce(full)
    meta = {
        "model": ckpt.train_meta.get("id", "unnamed"),
        "sampler": spec.to_dict(),
        "n_samples": n_samples,
        "seed": seed,
        "multiply_by_input": multiply_by_input,
        "score_mode": score_mode,
        "label": int(y),
        "stderr": stderr,
        "normalized": False,
    }
    return AttributionMap(raw, raw.copy(), meta)


def vanilla_gradient_map(ckpt: Checkpoint, x: np.ndarray, y: int, score_mode: str = "logit") -> np.ndarray:
    """|grad f(x, y)| channel-reduced, computed directly without a sample stream."""
    return channel_reduce(np.abs(input_gradient(ckpt, x, y, score_mode)))
