"""Regenerate the frozen files under tests/golden/ from the bundled reference model.

Run only after an intentional numerical change; the tests compare against
these files byte for byte (or to 1e-9 relative for benchmark means).
"""
import json
from pathlib import Path

from attriblab.attribution import integrate, normalize_min_max
from attriblab.certainty import HistogramConfig, Method, benchmark
from attriblab.data_io import load_reference, reference_dir, subsample
from attriblab.model import load_checkpoint
from attriblab.render import render_heatmap
from attriblab.samplers import SamplerSpec

SEED = 1860867
GOLDEN = Path(__file__).resolve().parents[1] / "tests" / "golden"


def main() -> None:
    GOLDEN.mkdir(exist_ok=True)
    ckpt = load_checkpoint(reference_dir() / "reference.aclb")
    test = load_reference("test")

    _, idx = subsample(test, 100, SEED)
    (GOLDEN / "subsample_1860867_100.json").write_text(
        json.dumps({"seed": SEED, "n": 100, "population": len(test), "indices": [int(i) for i in idx]}))

    z = normalize_min_max(integrate(ckpt, test.images[0], int(test.labels[0]), SamplerSpec.bernoulli(0.7), 50, SEED))
    (GOLDEN / "explanation_fixture.csv").write_text(z.to_csv())
    render_heatmap(z.values, GOLDEN / "explanation_fixture.png")
    (GOLDEN / "explanation_fixture.pgm").unlink()

    methods = [Method.parse(t) for t in ("bernoulli:0.7", "gaussian:0.15", "identity", "linear")]
    table = benchmark(ckpt, test, methods, 100, 100, SEED, HistogramConfig(bins=32), workers=4)
    (GOLDEN / "reference_bench.json").write_text(
        json.dumps({r.method.name: r.mean_mi for r in table.rows}, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
