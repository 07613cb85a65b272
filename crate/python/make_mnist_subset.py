"""Convert a 5000-row MNIST CSV (label, 784 pixels per row) into IDX files.

Rows are shuffled with a fixed seed and split 4000 train / 1000 val.

    python python/make_mnist_subset.py mnist_5k.csv.gz data/mnist5k
"""

import gzip
import struct
import sys
from pathlib import Path

import numpy as np


def write_idx(path, images, labels):
    n = images.shape[0]
    with open(path / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        f.write(images.astype(np.uint8).tobytes())
    with open(path / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    opener = gzip.open if src.suffix == ".gz" else open
    with opener(src, "rt") as f:
        rows = np.loadtxt(f, delimiter=",", dtype=np.int64)
    rows = rows[np.random.default_rng(0).permutation(len(rows))]
    labels, images = rows[:, 0], rows[:, 1:]
    for name, sl in (("train", slice(0, 4000)), ("val", slice(4000, 5000))):
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        write_idx(d, images[sl], labels[sl])


if __name__ == "__main__":
    main()
