"""Build the bundled digit corpus from mlxtend's ``mnist_5k.csv.gz``.

The CSV holds 5000 MNIST training digits (500 per class, sorted by class),
one row of 784 pixel bytes followed by the label. The first 400 of each
class go to the train split and the last 100 to the test split; each split
is then shuffled with a fixed seed and written as gzipped IDX files.

    pip download --no-deps mlxtend -d /tmp/mlx
    python scripts/build_reference_corpus.py /tmp/mlx/mlxtend-*.whl
"""
import argparse
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from attriblab.data_io import encode_idx, reference_dir

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("source", help="mlxtend wheel or the extracted mnist_5k.csv(.gz)")
    ap.add_argument("--out", default=str(reference_dir()))
    args = ap.parse_args()

    src = Path(args.source)
    if src.suffix == ".whl":
        raw = zipfile.ZipFile(src).read(MEMBER)
    else:
        raw = src.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    table = np.loadtxt(io.StringIO(raw.decode()), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :784].astype(np.uint8), table[:, 784]

    train_idx, test_idx = [], []
    for c in range(10):
        members = np.flatnonzero(labels == c)
        train_idx.extend(members[:400])
        test_idx.extend(members[400:])
    rng = np.random.default_rng(1860867)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", np.array(train_idx)), ("test", np.array(test_idx))):
        idx = idx[rng.permutation(len(idx))]
        imgs = pixels[idx].reshape(-1, 28, 28)
        for kind, arr in (("images-idx3", imgs), ("labels-idx1", labels[idx].astype(np.uint8))):
            path = out / f"{split}-{kind}-ubyte.gz"
            path.write_bytes(gzip.compress(encode_idx(arr), mtime=0))
            print(path, arr.shape)


if __name__ == "__main__":
    main()
