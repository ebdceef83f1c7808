"""Convert the 5000-image MNIST sample bundled with mlxtend into IDX files.

Usage:
    python scripts/prepare_mnist_subset.py PATH/TO/mnist_5k.csv.gz [OUT_DIR]

The CSV holds 784 pixel columns followed by the label. Rows are sorted by
class, so they are shuffled with a fixed seed before the 4000/1000
train/test split.
"""

import gzip
import sys
from pathlib import Path

import numpy as np

from trap.data import write_idx


def main(argv):
    src = Path(argv[1])
    out = Path(argv[2]) if len(argv) > 2 else Path("data/mnist5k")
    out.mkdir(parents=True, exist_ok=True)
    table = np.loadtxt(gzip.open(src, "rt"), delimiter=",", dtype=np.int64)
    images = table[:, :-1].reshape(-1, 28, 28).astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    order = np.random.default_rng(20210901).permutation(len(labels))
    images, labels = images[order], labels[order]
    write_idx(out / "train-images-idx3-ubyte.gz", images[:4000])
    write_idx(out / "train-labels-idx1-ubyte.gz", labels[:4000])
    write_idx(out / "test-images-idx3-ubyte.gz", images[4000:])
    write_idx(out / "test-labels-idx1-ubyte.gz", labels[4000:])
    print(f"wrote {len(labels)} images to {out}")


if __name__ == "__main__":
    main(sys.argv)
