"""Convert the digits bundled with the npm ``mnist`` package to IDX files.

The package (``npm pack mnist``) ships 10,000 MNIST digits as
``src/digits/<label>.json`` with pixels already scaled to [0, 1].  This
script restores 8-bit pixels, shuffles with a fixed seed and writes an
8000/2000 train/test split in the standard IDX layout.

    python tools/npm_digits_to_idx.py path/to/package/src/digits data/mnist
"""

import json
import sys
from pathlib import Path

import numpy as np

from evodrop.datasets import write_idx


def main(src, dst, n_test=2000, seed=0):
    images, labels = [], []
    for label in range(10):
        with open(Path(src) / f"{label}.json") as fh:
            flat = np.asarray(json.load(fh)["data"], dtype=np.float64)
        rows = flat.reshape(-1, 784)
        images.append(np.rint(rows * 255.0).clip(0, 255).astype(np.uint8))
        labels.append(np.full(len(rows), label, dtype=np.uint8))
    images = np.concatenate(images).reshape(-1, 28, 28)
    labels = np.concatenate(labels)
    order = np.random.default_rng(seed).permutation(len(labels))
    images, labels = images[order], labels[order]
    dst = Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    write_idx(images[n_test:], labels[n_test:], dst / "train-images-idx3-ubyte", dst / "train-labels-idx1-ubyte")
    write_idx(images[:n_test], labels[:n_test], dst / "t10k-images-idx3-ubyte", dst / "t10k-labels-idx1-ubyte")
    print(f"wrote {len(labels) - n_test} train / {n_test} test digits to {dst}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
