"""Write MNIST IDX files for desk-scale runs.

No download host is needed: the 5000 MNIST digits bundled with ``mlxtend``
(500 per class) are split 400/100 per class into train and test files::

    python scripts/make_mnist_idx.py data/mnist

Full MNIST IDX files, if you have them, can be passed to the CLI directly.
"""

import argparse
import os

import numpy as np

from spinforge.dataset import write_idx


def bundled_mnist(train_per_class: int = 400):
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    X = X.reshape(-1, 28, 28).astype(np.uint8)
    train, test = [], []
    for d in range(10):
        idx = np.flatnonzero(y == d)
        train.append(idx[:train_per_class])
        test.append(idx[train_per_class:])
    # interleave classes so file order is not sorted by digit
    rng = np.random.default_rng(0)
    train = rng.permutation(np.concatenate(train))
    test = rng.permutation(np.concatenate(test))
    return (X[train], y[train]), (X[test], y[test])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--train-per-class", type=int, default=400)
    args = ap.parse_args()
    os.makedirs(args.out_dir, exist_ok=True)
    (xtr, ytr), (xte, yte) = bundled_mnist(args.train_per_class)
    for name, x, y in (("train", xtr, ytr), ("t10k", xte, yte)):
        with open(os.path.join(args.out_dir, f"{name}-images-idx3-ubyte"), "wb") as fi, \
                open(os.path.join(args.out_dir, f"{name}-labels-idx1-ubyte"), "wb") as fl:
            write_idx(x, y, fi, fl)
        print(f"{name}: {len(y)} examples")


if __name__ == "__main__":
    main()
