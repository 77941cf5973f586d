"""End-to-end acceptance checks on the bundled reference model.

Each test records one PASS/FAIL line that is printed in the terminal
summary, then asserts. The heavy experiments (benchmark, sweep, alignment,
fine-tuning) run once per module at full scale.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from attriblab.attribution import integrate, normalize_min_max, vanilla_gradient_map
from attriblab.certainty import HistogramConfig, Method, benchmark, estimate_mi
from attriblab.cli import main as cli_main
from attriblab.diagnostics import (
    BenchSettings, alignment_study, augmentation_fragility, cosine_kernel_pca, p_sweep, unimodality_violations,
)
from attriblab.diffcore import Tape
from attriblab.model import AugmentSpec, TrainSpec, init_model, input_gradient, linear_config
from attriblab.render import bwr, render_heatmap
from attriblab.samplers import SampleStream, SamplerSpec, draw_sample

from _oracles import brute_force_mi, central_difference, forward_numpy, gradients_agree, random_network
from test_certainty import pairs_from_table
from test_diagnostics import dense_kernel_pca, fixture_vectors

SEED = 1860867
GOLDEN = Path(__file__).parent / "golden"

BERNOULLI = Method(SamplerSpec.bernoulli(0.7))
GAUSSIAN = Method(SamplerSpec.gaussian(0.15))
IDENTITY = Method(SamplerSpec.identity())
LINEAR = Method(SamplerSpec.linear())


@pytest.fixture(scope="module")
def fig4_table(reference_ckpt, test_set):
    return benchmark(reference_ckpt, test_set, [BERNOULLI, GAUSSIAN, IDENTITY, LINEAR],
                     n_samples=100, image_count=100, seed=SEED, cfg=HistogramConfig(bins=32), workers=4)


# ---------------------------------------------------------------------------
# 1. autodiff
# ---------------------------------------------------------------------------


def _projected(tape: Tape, out, proj: np.ndarray):
    """Reduce any tensor to a scalar through a fixed random linear functional."""
    return tape.sum(tape.dense(out, tape.constant(proj), tape.constant(np.zeros(1))))


def _primitive_cases(rng):
    """(name, builder(tape, *vars) -> scalar var, inputs)."""
    x4 = rng.normal(size=(2, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    proj_conv = rng.normal(size=(3 * 16, 1))
    proj_dense = rng.normal(size=(4, 1))
    proj_flat = rng.normal(size=(2 * 16, 1))
    proj_pool = rng.normal(size=(2 * 4, 1))
    proj_valid = rng.normal(size=(3 * 4, 1))
    labels = np.array([1, 3])
    return [
        ("conv2d", lambda t, a, k, c: _projected(t, t.conv2d(a, k, c, padding=1), proj_conv), [x4, w, b]),
        ("conv2d(valid)", lambda t, a, k, c: _projected(t, t.conv2d(a, k, c, padding=0), proj_valid), [x4, w, b]),
        ("dense", lambda t, a, k, c: _projected(t, t.dense(a, k, c), proj_dense),
         [rng.normal(size=(2, 5)), rng.normal(size=(5, 4)), rng.normal(size=4)]),
        ("relu", lambda t, a: _projected(t, t.relu(a), proj_flat), [x4]),
        ("maxpool2", lambda t, a: _projected(t, t.maxpool2(a), proj_pool), [x4]),
        ("add", lambda t, a, c: _projected(t, t.add(a, c), proj_flat), [x4, rng.normal(size=x4.shape)]),
        ("scale", lambda t, a: _projected(t, t.scale(a, -1.7), proj_flat), [x4]),
        ("sum", lambda t, a: t.sum(a), [x4]),
        ("softmax_xent", lambda t, a: t.softmax_xent(a, labels), [rng.normal(size=(2, 4))]),
        ("softmax_xent(sum)", lambda t, a: t.softmax_xent(a, labels, reduction="sum"), [rng.normal(size=(2, 4))]),
        ("select_logit", lambda t, a: t.select_logit(a, labels), [rng.normal(size=(2, 4))]),
    ]


def _check_primitive(build, inputs) -> float:
    tape = Tape()
    vars_ = [tape.leaf(v) for v in inputs]
    grads = tape.backward(build(tape, *vars_))
    worst = 0.0
    for k, v in enumerate(inputs):
        def fn(value, k=k):
            t = Tape()
            args = [t.leaf(value if j == k else inputs[j]) for j in range(len(inputs))]
            return build(t, *args).value.item()

        ok, err = gradients_agree(grads[vars_[k]], central_difference(fn, v))
        assert ok, f"input {k}: relative error {err:.3g}"
        worst = max(worst, err)
    return worst


def test_c01_autodiff_matches_finite_differences(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(SEED)
    failures, worst = [], 0.0
    cases = _primitive_cases(rng)
    for name, build, inputs in cases:
        try:
            worst = max(worst, _check_primitive(build, inputs))
        except AssertionError as exc:
            failures.append(f"{name}: {exc}")
    for seed in range(20):
        ckpt = random_network(seed)
        x = np.random.default_rng(seed).random(ckpt.input_shape)
        mode = "logit" if seed % 2 == 0 else "log-probability"
        y = seed % ckpt.class_count

        def score(v, ckpt=ckpt, y=y, mode=mode):
            z = forward_numpy(ckpt, v)
            return z[y] if mode == "logit" else z[y] - z.max() - math.log(np.exp(z - z.max()).sum())

        ok, err = gradients_agree(input_gradient(ckpt, x, y, mode), central_difference(score, x))
        worst = max(worst, err)
        if not ok:
            failures.append(f"network {seed}: relative error {err:.3g}")
    elapsed = time.perf_counter() - start
    passed = not failures and elapsed < 60
    criterion("1 autodiff vs finite differences", passed,
              f"{len(cases)} primitive cases + 20 networks, worst rel err {worst:.2e}, {elapsed:.1f}s")
    assert not failures, failures
    assert elapsed < 60


# ---------------------------------------------------------------------------
# 2. MI estimator
# ---------------------------------------------------------------------------


def test_c02_mi_estimator_oracle(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(50):
        bins = int(rng.integers(2, 9))
        joint = rng.integers(0, 8, size=(bins, bins)) * (rng.random((bins, bins)) < 0.7)
        joint[rng.integers(bins), rng.integers(bins)] += 1
        xs, zs = pairs_from_table(joint)
        worst = max(worst, abs(estimate_mi(xs, zs, HistogramConfig(bins=bins)).mi_nats - brute_force_mi(joint)))
    v = np.repeat([0.1, 0.3, 0.6, 0.9], 250)
    ln4_err = abs(estimate_mi(v, v, HistogramConfig(bins=4)).mi_nats - math.log(4))
    ind = np.random.default_rng(1)
    independent = estimate_mi(ind.random(100_000), ind.random(100_000), HistogramConfig(bins=16)).mi_nats
    elapsed = time.perf_counter() - start
    passed = worst <= 1e-12 and ln4_err <= 1e-12 and independent < 0.05 and elapsed < 60
    criterion("2 MI estimator oracle", passed,
              f"max table err {worst:.1e}, ln4 err {ln4_err:.1e}, independent {independent:.4f} nats, {elapsed:.1f}s")
    assert passed


# ---------------------------------------------------------------------------
# 3. certainty bound
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c03_certainty_bound_identity(criterion, fig4_table):
    estimates = [e for row in fig4_table.rows for e in row.per_image]
    err = max(abs(e.certainty_lower_bound - math.exp(e.mi_nats - e.entropy_x_nats)) for e in estimates)
    passed = err <= 1e-12
    criterion("3 certainty bound identity", passed, f"{len(estimates)} benchmark estimates, max err {err:.1e}")
    assert passed


# ---------------------------------------------------------------------------
# 4. sampler statistics
# ---------------------------------------------------------------------------


def test_c04_sampler_statistics(criterion):
    start = time.perf_counter()
    base = np.random.default_rng(0).uniform(0.01, 1.0, size=(1, 100, 100))
    rates, support_ok = {}, True
    for p in (0.3, 0.5, 0.7):
        stream = SampleStream(SamplerSpec.bernoulli(p), base, SEED, 100)
        kept = 0
        for i in range(100):
            s = draw_sample(stream, i)
            support_ok &= bool(np.all((s == base) | (s == 0.0)))
            kept += int((s == base).sum())
        rates[p] = kept / 1_000_000
    elapsed = time.perf_counter() - start
    rate_ok = all(abs(r - (1 - p)) <= 0.01 for p, r in rates.items())
    passed = rate_ok and support_ok and elapsed < 60
    criterion("4 sampler statistics", passed,
              ", ".join(f"p={p}: kept {r:.4f}" for p, r in rates.items()) + f", support ok={support_ok}, {elapsed:.1f}s")
    assert passed


# ---------------------------------------------------------------------------
# 5. degenerate equivalence
# ---------------------------------------------------------------------------


def test_c05_degenerate_equivalence(criterion, reference_ckpt, test_set):
    identity_ok = all(
        np.array_equal(integrate(reference_ckpt, test_set.images[i], int(test_set.labels[i]), SamplerSpec.identity(),
                                 100, SEED).values,
                       vanilla_gradient_map(reference_ckpt, test_set.images[i], int(test_set.labels[i])))
        for i in range(20)
    )
    samplers = [SamplerSpec.identity(), SamplerSpec.linear(), SamplerSpec.bernoulli(0.0), SamplerSpec.bernoulli(0.7),
                SamplerSpec.bernoulli(1.0), SamplerSpec.gaussian(0.15), SamplerSpec.gaussian(0.5),
                SamplerSpec.gaussian(0.9, clamp=False)]
    linear_ok = True
    for channels in (1, 3):
        model = init_model(linear_config((channels, 5, 5), 4, seed=channels))
        x = np.random.default_rng(channels).random((channels, 5, 5))
        expected = np.abs(model.params["dense1.weight"][:, 2].reshape(channels, 5, 5)).max(axis=0)
        for spec in samplers:
            for n in (1, 7, 100):
                linear_ok &= bool(np.array_equal(integrate(model, x, 2, spec, n, 3).values, expected))
    passed = identity_ok and linear_ok
    criterion("5 degenerate equivalence", passed, f"identity==vanilla: {identity_ok}, linear==|w|: {linear_ok}")
    assert passed


# ---------------------------------------------------------------------------
# 6. determinism of CLI artifacts
# ---------------------------------------------------------------------------

CLI_CONFIGS = {
    "explain": "[explain]\nimage_index = 3\nsampler = gaussian:0.15\nsamples = 60\n",
    "bench": "[bench]\nsamples = 10\nimages = 5\n",
    "sweep": "[sweep]\ngrid = 0:1:0.25\nsamples = 6\nimages = 3\n",
    "project": "[project]\nper_group = 60\n",
}


def _artifacts(directory: Path) -> dict[str, bytes]:
    doc = json.loads((directory / "manifest.json").read_text())
    return {name: (directory / name).read_bytes() for name in doc["artifacts"]}


def test_c06_cli_artifacts_are_deterministic(criterion, tmp_path, capsys):
    mismatched = []
    for command, text in CLI_CONFIGS.items():
        ini = tmp_path / f"{command}.ini"
        ini.write_text(text)
        runs = []
        for workers in (1, 1, 4, 4):
            out = tmp_path / f"{command}-{len(runs)}-w{workers}"
            code = cli_main([command, "--config", str(ini), "--workers", str(workers), "--out", str(out)])
            assert code == 0, capsys.readouterr().err
            runs.append(_artifacts(out))
        if any(r != runs[0] for r in runs[1:]):
            mismatched.append(command)
    capsys.readouterr()
    passed = not mismatched
    criterion("6 determinism across runs and workers {1,4}", passed,
              f"commands {', '.join(CLI_CONFIGS)}; mismatched: {mismatched or 'none'}")
    assert passed


# ---------------------------------------------------------------------------
# 7. benchmark direction
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c07_bernoulli_beats_baselines(criterion, fig4_table):
    ours = fig4_table.row(BERNOULLI.name)
    parts, passed = [], True
    for base in (GAUSSIAN, IDENTITY, LINEAR):
        other = fig4_table.row(base.name)
        win = float(np.mean(ours.mi_values > other.mi_values))
        passed &= ours.mean_mi > other.mean_mi and win >= 0.70
        parts.append(f"vs {base.name}: {ours.mean_mi:.4f}>{other.mean_mi:.4f}, wins {win:.0%}")
    criterion("7 BernoulliDrop(0.7) has highest mean MI", passed, "; ".join(parts))
    golden = json.loads((GOLDEN / "reference_bench.json").read_text())
    for row in fig4_table.rows:
        assert row.mean_mi == pytest.approx(golden[row.method.name], rel=1e-9)
    assert passed


# ---------------------------------------------------------------------------
# 8. drop-probability sweep
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c08_sweep_has_interior_peak(criterion, reference_ckpt, test_set):
    start = time.perf_counter()
    grid = [round(0.1 * i, 10) for i in range(11)]
    sweep = p_sweep(reference_ckpt, test_set, grid, n_samples=50, image_count=100, seed=SEED, workers=4)
    elapsed = time.perf_counter() - start
    checks = {
        "mi": (sweep.argmax_mi, unimodality_violations(sweep.mean_mi)),
        "gradNorm": (sweep.argmax_grad_norm, unimodality_violations(sweep.mean_grad_norm)),
    }
    passed = all(0.4 <= peak <= 0.9 and bad <= 1 for peak, bad in checks.values()) and elapsed < 900
    criterion("8 sweep peaks inside [0.4, 0.9], unimodal", passed,
              "; ".join(f"{k} argmax p={p:g}, {v} violations" for k, (p, v) in checks.items()) + f", {elapsed:.0f}s")
    assert passed


# ---------------------------------------------------------------------------
# 9. sample alignment
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c09_bernoulli_samples_align_with_natural(criterion, reference_ckpt, test_set):
    oracle_err = 0.0
    for seed in range(5):
        vals, pts = dense_kernel_pca(fixture_vectors(seed))
        oracle_err = max(oracle_err, float(np.abs(cosine_kernel_pca(fixture_vectors(seed)).points - pts).max()))
    samplers = [SamplerSpec.bernoulli(0.7), SamplerSpec.gaussian(0.5), SamplerSpec.gaussian(0.9)]
    res = alignment_study(reference_ckpt, test_set, samplers, per_group=1000, seed=SEED)
    d = res.centroid_distance_to_natural
    ours = d[samplers[0].name]
    passed = oracle_err <= 1e-8 and all(ours < d[s.name] for s in samplers[1:])
    criterion("9 BernoulliDrop(0.7) centroid nearest natural", passed,
              ", ".join(f"{k}: {v:.4f}" for k, v in d.items() if k != "natural") + f"; PCA oracle err {oracle_err:.1e}")
    assert passed


# ---------------------------------------------------------------------------
# 10. augmentation fragility
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c10_gaussian_degrades_more_after_augmentation(criterion, reference_ckpt, train_set, test_set):
    start = time.perf_counter()
    report = augmentation_fragility(
        reference_ckpt, train_set, AugmentSpec((0.1, 0.3), (0.1, 0.9)),
        TrainSpec(learning_rate=1e-3, batch_size=8, epochs=None, batch_count=5000, seed=SEED),
        [BERNOULLI, GAUSSIAN], BenchSettings(n_samples=100, image_count=100, seed=SEED), bench_data=test_set, workers=4,
    )
    elapsed = time.perf_counter() - start
    gauss, ours = report.relative_drop(GAUSSIAN.name), report.relative_drop(BERNOULLI.name)
    passed = gauss > ours and elapsed < 1200
    criterion("10 GaussianNoise(0.15) drops more than BernoulliDrop(0.7)", passed,
              f"relative drop gaussian {gauss:+.4f}, bernoulli {ours:+.4f}, {elapsed:.0f}s")
    assert passed


# ---------------------------------------------------------------------------
# 11. rendering
# ---------------------------------------------------------------------------


def test_c11_rendering(criterion, reference_ckpt, test_set, tmp_path):
    ends = bwr(np.array([0.0, 0.5, 1.0])).tolist()
    ends_ok = ends == [[0, 0, 255], [255, 255, 255], [255, 0, 0]]
    z = normalize_min_max(integrate(reference_ckpt, test_set.images[0], int(test_set.labels[0]),
                                    SamplerSpec.bernoulli(0.7), 50, SEED))
    png = render_heatmap(z.values, tmp_path / "fixture.png").read_bytes()
    golden_ok = png == (GOLDEN / "explanation_fixture.png").read_bytes()
    passed = ends_ok and golden_ok
    criterion("11 colormap endpoints and golden PNG", passed, f"endpoints {ends}, golden PNG match: {golden_ok}")
    assert passed
