import numpy as np
import pytest

from attriblab.attribution import vanilla_gradient_map
from attriblab.certainty import HistogramConfig, Method
from attriblab.diagnostics import (
    BenchSettings, EigenSolveError, ProjectionResult, alignment_study, augmentation_fragility, centered_cosine_kernel,
    cosine_kernel_pca, p_sweep, power_iteration, unimodality_violations,
)
from attriblab.model import AugmentSpec, TrainSpec, input_gradient
from attriblab.data_io import subsample
from attriblab.samplers import SamplerSpec


def dense_kernel_pca(vectors: np.ndarray, k: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Oracle: explicit double-centred cosine Gram matrix and a full eigendecomposition."""
    u = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    n = len(u)
    h = np.eye(n) - np.full((n, n), 1.0 / n)
    vals, vecs = np.linalg.eigh(h @ (u @ u.T) @ h)
    order = np.argsort(vals)[::-1][:k]
    vals, vecs = vals[order], vecs[:, order]
    for j in range(k):
        if vecs[np.argmax(np.abs(vecs[:, j])), j] < 0:
            vecs[:, j] *= -1
    return vals, vecs * np.sqrt(np.maximum(vals, 0.0))


def fixture_vectors(seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    # three anisotropic clusters keep the top eigenvalues well separated
    centers = rng.normal(size=(3, 6)) * np.array([4.0, 2.0, 1.0, 0.5, 0.3, 0.1])
    return np.concatenate([c + 0.3 * rng.normal(size=(15, 6)) for c in centers])


class TestKernelPCA:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_eigendecomposition(self, seed):
        v = fixture_vectors(seed)
        vals, pts = dense_kernel_pca(v)
        res = cosine_kernel_pca(v)
        np.testing.assert_allclose(res.eigenvalues, vals, atol=1e-8)
        np.testing.assert_allclose(res.points, pts, atol=1e-8)

    def test_kernel_helper_matches_oracle_matrix(self):
        v = fixture_vectors(0)
        u = v / np.linalg.norm(v, axis=1, keepdims=True)
        h = np.eye(len(v)) - 1.0 / len(v)
        np.testing.assert_allclose(centered_cosine_kernel(v), h @ (u @ u.T) @ h, atol=1e-12)

    def test_scale_invariance(self):
        v = fixture_vectors(1)
        scaled = v * np.random.default_rng(0).uniform(0.5, 3.0, size=(len(v), 1))
        np.testing.assert_allclose(cosine_kernel_pca(v).points, cosine_kernel_pca(scaled).points, atol=1e-8)

    def test_duplicate_rows_coincide(self):
        v = fixture_vectors(2)
        v = np.concatenate([v, v[:1] * 2.0])
        pts = cosine_kernel_pca(v).points
        np.testing.assert_allclose(pts[-1], pts[0], atol=1e-10)

    def test_row_order_invariance(self):
        v = fixture_vectors(3)
        perm = np.random.default_rng(1).permutation(len(v))
        np.testing.assert_allclose(cosine_kernel_pca(v[perm]).points, cosine_kernel_pca(v).points[perm], atol=1e-8)

    def test_zero_vector_rejected(self):
        v = fixture_vectors(0)
        v[4] = 0.0
        with pytest.raises(ValueError, match="zero vector at row 4"):
            cosine_kernel_pca(v)

    def test_non_convergence_reported(self):
        with pytest.raises(EigenSolveError):
            power_iteration(lambda x: x[::-1].copy(), 4, 1, tol=1e-14, max_iter=3)

    def test_centroids_and_distances(self):
        res = ProjectionResult(np.array([[0.0, 0.0], [2.0, 0.0], [3.0, 4.0], [3.0, 4.0]]),
                               ["natural", "natural", "b", "b"], np.ones(2))
        np.testing.assert_array_equal(res.centroids["natural"], [1.0, 0.0])
        assert res.centroid_distance_to_natural["b"] == pytest.approx(np.hypot(2.0, 4.0))
        assert res.centroids_csv().splitlines()[0] == "group,cx,cy,distanceToNatural"

    def test_alignment_identity_group_sits_on_natural(self, reference_ckpt, test_set):
        res = alignment_study(reference_ckpt, test_set, [SamplerSpec.identity(), SamplerSpec.bernoulli(0.5)], 40, 2)
        assert len(res.points) == 120
        assert res.centroid_distance_to_natural["identity"] == pytest.approx(0.0, abs=1e-8)
        assert res.centroid_distance_to_natural["bernoulli(p=0.5)"] > 0.0


class TestSweep:
    def test_unimodality_counter(self):
        assert unimodality_violations([0, 1, 2, 3, 2, 1]) == 0
        assert unimodality_violations([0, 2, 1, 3, 2]) == 1
        assert unimodality_violations([3, 1, 2, 0]) == 1

    def test_p_zero_matches_vanilla_norms(self, reference_ckpt, test_set):
        sweep = p_sweep(reference_ckpt, test_set, [0.0, 0.5], n_samples=4, image_count=3, seed=5)
        sub, _ = subsample(test_set, 3, 5)
        expected = [np.linalg.norm(input_gradient(reference_ckpt, x, int(y))) for x, y in zip(sub.images, sub.labels)]
        np.testing.assert_allclose(sweep.per_image_grad_norm[0], expected, rtol=1e-12)

    def test_p_one_sees_only_the_zero_image(self, reference_ckpt, test_set):
        sweep = p_sweep(reference_ckpt, test_set, [1.0], n_samples=3, image_count=2, seed=5)
        sub, _ = subsample(test_set, 2, 5)
        expected = [np.linalg.norm(input_gradient(reference_ckpt, np.zeros((1, 28, 28)), int(y))) for y in sub.labels]
        np.testing.assert_allclose(sweep.per_image_grad_norm[0], expected, rtol=1e-12)

    def test_csv_layout(self, reference_ckpt, test_set):
        sweep = p_sweep(reference_ckpt, test_set, [0.0, 0.3], n_samples=2, image_count=2)
        lines = sweep.to_csv().splitlines()
        assert lines[0] == "p,gradNorm,miNats" and len(lines) == 3
        assert sweep.argmax_mi in (0.0, 0.3)

    def test_rejects_bad_grid(self, reference_ckpt, test_set):
        with pytest.raises(ValueError):
            p_sweep(reference_ckpt, test_set, [1.5], 2, 2)

    def test_p_zero_vanilla_map(self, reference_ckpt, test_set):
        from attriblab.attribution import integrate

        x, y = test_set.images[3], int(test_set.labels[3])
        np.testing.assert_array_equal(integrate(reference_ckpt, x, y, SamplerSpec.bernoulli(0.0), 9, 1).values,
                                      vanilla_gradient_map(reference_ckpt, x, y))


class TestFragility:
    def test_no_op_fine_tune_changes_nothing(self, reference_ckpt, train_set, test_set):
        report = augmentation_fragility(
            reference_ckpt, train_set, AugmentSpec(), TrainSpec(learning_rate=0.0, batch_size=8, epochs=None, batch_count=2),
            [Method(SamplerSpec.bernoulli(0.7)), Method(SamplerSpec.gaussian(0.15))],
            BenchSettings(n_samples=4, image_count=3, seed=1, histogram=HistogramConfig()), bench_data=test_set,
        )
        for change in report.changes():
            assert change["absolute_change"] == 0.0
        assert report.relative_drop("bernoulli(p=0.7)") == 0.0
        assert report.to_csv().splitlines()[0] == "method,beforeMI_nats,afterMI_nats,absoluteChange,relativeChange"
        with pytest.raises(KeyError):
            report.relative_drop("identity")


class TestSpecExamples:
    def test_four_point_fixture(self):
        v = np.array([[1.0, 0.0, 0.0], [0.9, 0.3, 0.0], [0.0, 1.0, 0.2], [0.1, 0.1, 1.0]])
        vals, pts = dense_kernel_pca(v)
        res = cosine_kernel_pca(v)
        np.testing.assert_allclose(res.points, pts, atol=1e-8)
        np.testing.assert_allclose(res.eigenvalues, vals, atol=1e-8)

    def test_projection_is_deterministic(self, reference_ckpt, test_set):
        samplers = [SamplerSpec.bernoulli(0.7), SamplerSpec.gaussian(0.5)]
        a = alignment_study(reference_ckpt, test_set, samplers, 30, 4)
        b = alignment_study(reference_ckpt, test_set, samplers, 30, 4)
        assert a.to_csv() == b.to_csv() and a.centroids_csv() == b.centroids_csv()

    def test_all_dropped_samples_carry_little_information(self, reference_ckpt, test_set):
        sweep = p_sweep(reference_ckpt, test_set, [0.7, 1.0], n_samples=10, image_count=10, seed=2)
        assert sweep.mean_mi[1] < 0.1
        assert sweep.mean_mi[1] < sweep.mean_mi[0] / 3

    def test_sweep_is_deterministic(self, reference_ckpt, test_set):
        a = p_sweep(reference_ckpt, test_set, [0.2, 0.6], n_samples=3, image_count=2, seed=8)
        b = p_sweep(reference_ckpt, test_set, [0.2, 0.6], n_samples=3, image_count=2, seed=8, workers=2)
        assert a.to_csv() == b.to_csv()

    def test_zero_effect_pipeline(self, reference_ckpt, train_set, test_set):
        report = augmentation_fragility(
            reference_ckpt, train_set, AugmentSpec((0.0, 0.0), (1.0, 1.0)),
            TrainSpec(batch_size=8, epochs=None, batch_count=0), [Method(SamplerSpec.gaussian(0.15))],
            BenchSettings(n_samples=3, image_count=2, seed=1), bench_data=test_set,
        )
        assert report.before.to_json() == report.after.to_json()
        for name, value in reference_ckpt.params.items():
            np.testing.assert_array_equal(report.fine_tuned.params[name], value)
