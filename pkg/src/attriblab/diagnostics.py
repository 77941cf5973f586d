"""Analysis experiments: sample-alignment projection, drop-probability sweep,
and augmentation fragility."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .attribution import AttributionMap, aggregate, channel_reduce, normalize_min_max, sample_gradients
from .certainty import BenchmarkTable, HistogramConfig, Method, benchmark, estimate_mi
from .data_io import Dataset, subsample
from .model import AugmentSpec, Checkpoint, TrainSpec, embedding, train
from .samplers import SamplerSpec, SampleStream, derive_seed, draw_sample


class EigenSolveError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# cosine-kernel PCA
# ---------------------------------------------------------------------------


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"expected an (n, d) matrix, got shape {v.shape}")
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"zero vector at row {int(np.argmax(norms == 0))}: cosine kernel undefined")
    return v / norms[:, None]


def centered_cosine_kernel(vectors: np.ndarray) -> np.ndarray:
    u = _unit_rows(vectors)
    k = u @ u.T
    return k - k.mean(axis=0, keepdims=True) - k.mean(axis=1, keepdims=True) + k.mean()


def power_iteration(
    matvec: Callable[[np.ndarray], np.ndarray],
    n: int,
    k: int,
    tol: float = 1e-10,
    max_iter: int = 10_000,
) -> tuple[np.ndarray, np.ndarray]:
    """Top-k eigenpairs of a symmetric PSD operator by power iteration with
    Gram-Schmidt deflation. Returns (eigenvalues, eigenvectors as columns)."""
    rng = np.random.default_rng(0)
    vals: list[float] = []
    vecs: list[np.ndarray] = []

    def deflate(w: np.ndarray) -> np.ndarray:
        for u in vecs:
            w = w - (u @ w) * u
        return w

    for j in range(k):
        v = deflate(rng.standard_normal(n))
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = deflate(matvec(v))
            lam = float(v @ w)
            norm = np.linalg.norm(w)
            if norm == 0.0:
                lam = 0.0
                break
            if np.linalg.norm(w - lam * v) <= tol * abs(lam):
                v = w / norm
                break
            v = w / norm
        else:
            raise EigenSolveError(f"eigenvector {j} did not converge in {max_iter} iterations")
        vals.append(lam)
        vecs.append(v)
    return np.array(vals), np.stack(vecs, axis=1)


def fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude coordinate is positive."""
    out = vecs.copy()
    for j in range(out.shape[1]):
        i = int(np.argmax(np.abs(out[:, j])))
        if out[i, j] < 0:
            out[:, j] = -out[:, j]
    return out


@dataclass
class ProjectionResult:
    points: np.ndarray  # (n, out_dim)
    group_labels: list[str]
    eigenvalues: np.ndarray
    centroids: dict[str, np.ndarray] = field(default_factory=dict)
    centroid_distance_to_natural: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.group_labels) != len(self.points):
            raise ValueError("one group label per point required")
        if not self.centroids:
            for g in dict.fromkeys(self.group_labels):
                mask = np.array([lab == g for lab in self.group_labels])
                self.centroids[g] = self.points[mask].mean(axis=0)
        if "natural" in self.centroids and not self.centroid_distance_to_natural:
            ref = self.centroids["natural"]
            self.centroid_distance_to_natural = {
                g: float(np.linalg.norm(c - ref)) for g, c in self.centroids.items()
            }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "group"])
        for (px, py), g in zip(self.points[:, :2], self.group_labels):
            w.writerow([f"{px:.17g}", f"{py:.17g}", g])
        return buf.getvalue()

    def centroids_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "cx", "cy", "distanceToNatural"])
        for g, c in self.centroids.items():
            d = self.centroid_distance_to_natural.get(g)
            w.writerow([g, f"{c[0]:.17g}", f"{c[1]:.17g}", "" if d is None else f"{d:.17g}"])
        return buf.getvalue()


def cosine_kernel_pca(vectors: np.ndarray, out_dim: int = 2, group_labels: Sequence[str] | None = None,
                      tol: float = 1e-10, max_iter: int = 10_000) -> ProjectionResult:
    """Project rows onto the top components of the double-centered cosine kernel.

    The kernel is the Gram matrix of the unit-normalized rows, so it is
    applied through that rank-d factorization instead of being stored.
    """
    u = _unit_rows(vectors)
    n = len(u)
    if n < out_dim + 1:
        raise ValueError(f"need at least {out_dim + 1} vectors, got {n}")

    def matvec(v: np.ndarray) -> np.ndarray:
        v = v - v.mean()
        w = u @ (u.T @ v)
        return w - w.mean()

    vals, vecs = power_iteration(matvec, n, out_dim, tol, max_iter)
    vecs = fix_signs(vecs)
    points = vecs * np.sqrt(np.maximum(vals, 0.0))
    labels = list(group_labels) if group_labels is not None else ["all"] * n
    return ProjectionResult(points, labels, vals)


def _embed(ckpt: Checkpoint, images: np.ndarray, batch: int = 500) -> np.ndarray:
    return np.concatenate([embedding(ckpt, images[lo:lo + batch]) for lo in range(0, len(images), batch)])


def alignment_study(
    ckpt: Checkpoint,
    data: Dataset,
    samplers: Sequence[SamplerSpec],
    per_group: int = 1000,
    seed: int = 1860867,
) -> ProjectionResult:
    """Embed natural images and one sample per image from each sampler, then
    project everything jointly with cosine-kernel PCA.

    Sample j of each group is index j of a stream of length ``per_group``
    over natural image j, so LinearScale sweeps its full range of scales.
    """
    if per_group < 1:
        raise ValueError("per_group must be >= 1")
    subset, idx = subsample(data, per_group, seed)
    blocks = [_embed(ckpt, subset.images)]
    labels = ["natural"] * per_group
    for spec in samplers:
        imgs = np.stack([
            draw_sample(SampleStream(spec, subset.images[j], derive_seed(seed, int(idx[j])), per_group), j)
            for j in range(per_group)
        ])
        blocks.append(_embed(ckpt, imgs))
        labels += [spec.name] * per_group
    return cosine_kernel_pca(np.concatenate(blocks), 2, labels)


# ---------------------------------------------------------------------------
# drop-probability sweep
# ---------------------------------------------------------------------------


def unimodality_violations(curve: Sequence[float]) -> int:
    """Steps that move away from the peak: rises after it, falls before it."""
    c = np.asarray(curve, dtype=np.float64)
    peak = int(np.argmax(c))
    before = int((np.diff(c[: peak + 1]) < 0).sum())
    after = int((np.diff(c[peak:]) > 0).sum())
    return before + after


@dataclass
class SweepResult:
    grid: list[float]
    mean_grad_norm: list[float]
    mean_mi: list[float]
    per_image_grad_norm: list[list[float]] = field(default_factory=list)
    per_image_mi: list[list[float]] = field(default_factory=list)

    @property
    def argmax_grad_norm(self) -> float:
        return self.grid[int(np.argmax(self.mean_grad_norm))]

    @property
    def argmax_mi(self) -> float:
        return self.grid[int(np.argmax(self.mean_mi))]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["p", "gradNorm", "miNats"])
        for p, g, m in zip(self.grid, self.mean_grad_norm, self.mean_mi):
            w.writerow([f"{p:.17g}", f"{g:.17g}", f"{m:.17g}"])
        return buf.getvalue()


def p_sweep(
    ckpt: Checkpoint,
    data: Dataset,
    grid: Sequence[float],
    n_samples: int = 50,
    image_count: int = 100,
    seed: int = 1860867,
    cfg: HistogramConfig = HistogramConfig(),
    workers: int = 1,
) -> SweepResult:
    """Mean input-gradient L2 norm over Bernoulli samples and mean MI of the
    resulting attribution maps, for each drop probability in ``grid``."""
    grid = [float(p) for p in grid]
    if any(not 0.0 <= p <= 1.0 for p in grid):
        raise ValueError("grid values must lie in [0, 1]")
    subset, idx = subsample(data, image_count, seed)

    def one_image(j: int) -> tuple[list[float], list[float]]:
        x, y = subset.images[j], int(subset.labels[j])
        img_seed = derive_seed(seed, int(idx[j]))
        norms, mis = [], []
        for p in grid:
            spec = SamplerSpec.bernoulli(p)
            count = 1 if spec.deterministic else n_samples
            grads = sample_gradients(ckpt, SampleStream(spec, x, img_seed, count), y)
            norms.append(float(np.linalg.norm(grads.reshape(count, -1), axis=1).mean()))
            full, _ = aggregate(x, grads)
            z = normalize_min_max(AttributionMap(channel_reduce(full), channel_reduce(full)))
            mis.append(estimate_mi(x, z, cfg).mi_nats)
        return norms, mis

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one_image, range(len(subset))))
    else:
        results = [one_image(j) for j in range(len(subset))]
    norms = np.array([r[0] for r in results])
    mis = np.array([r[1] for r in results])
    return SweepResult(grid, norms.mean(axis=0).tolist(), mis.mean(axis=0).tolist(),
                       norms.T.tolist(), mis.T.tolist())


# ---------------------------------------------------------------------------
# augmentation fragility
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchSettings:
    n_samples: int = 100
    image_count: int = 100
    seed: int = 1860867
    histogram: HistogramConfig = HistogramConfig()


@dataclass
class FragilityReport:
    before: BenchmarkTable
    after: BenchmarkTable
    fine_tuned: Checkpoint

    def changes(self) -> list[dict]:
        out = []
        for b, a in zip(self.before.rows, self.after.rows):
            delta = a.mean_mi - b.mean_mi
            out.append({
                "method": b.method.name,
                "before_mi_nats": b.mean_mi,
                "after_mi_nats": a.mean_mi,
                "absolute_change": delta,
                "relative_change": delta / b.mean_mi if b.mean_mi else float("nan"),
            })
        return out

    def relative_drop(self, method_name: str) -> float:
        for c in self.changes():
            if c["method"] == method_name:
                return -c["relative_change"]
        raise KeyError(method_name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "beforeMI_nats", "afterMI_nats", "absoluteChange", "relativeChange"])
        for c in self.changes():
            w.writerow([c["method"]] + [f"{c[k]:.17g}" for k in
                                        ("before_mi_nats", "after_mi_nats", "absolute_change", "relative_change")])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"changes": self.changes(), "fine_tune_meta": self.fine_tuned.train_meta},
                          indent=2, sort_keys=True) + "\n"


def augmentation_fragility(
    base: Checkpoint,
    train_data: Dataset,
    augment: AugmentSpec,
    fine_tune: TrainSpec,
    methods: Sequence[Method],
    bench: BenchSettings = BenchSettings(),
    bench_data: Dataset | None = None,
    workers: int = 1,
) -> FragilityReport:
    """Benchmark, fine-tune with augmentation, benchmark again."""
    bench_data = bench_data if bench_data is not None else train_data
    run = lambda ck: benchmark(ck, bench_data, methods, bench.n_samples, bench.image_count, bench.seed,
                               bench.histogram, normalize=False, workers=workers)
    before = run(base)
    spec = TrainSpec(fine_tune.learning_rate, fine_tune.batch_size, fine_tune.epochs, fine_tune.batch_count,
                     augment, fine_tune.seed)
    tuned = train(base, train_data.images, train_data.labels, spec)
    return FragilityReport(before, run(tuned), tuned)
