"""Write the 5000-image MNIST subset bundled with mlxtend as gzipped IDX files.

The subset holds 500 images per digit.  The first 400 of each digit (in the
subset's order) become the train file, the remaining 100 the test file.

    pip install --no-deps mlxtend
    python scripts/build_mnist_subset.py data/mnist5k
"""

import argparse
from pathlib import Path

import numpy as np

from ganomaly.datasets import write_idx


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--train-per-digit", type=int, default=400)
    args = ap.parse_args()

    from mlxtend.data import mnist_data

    X, y = mnist_data()
    X = X.reshape(-1, 28, 28).astype(np.uint8)
    train_idx, test_idx = [], []
    for d in range(10):
        idx = np.flatnonzero(y == d)
        train_idx += idx[: args.train_per_digit].tolist()
        test_idx += idx[args.train_per_digit :].tolist()
    train_idx.sort()
    test_idx.sort()

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for name, idx in (("train", train_idx), ("t10k", test_idx)):
        write_idx(
            X[idx],
            y[idx],
            args.out_dir / f"{name}-images-idx3-ubyte.gz",
            args.out_dir / f"{name}-labels-idx1-ubyte.gz",
        )
        print(f"{name}: {len(idx)} images")


if __name__ == "__main__":
    main()
