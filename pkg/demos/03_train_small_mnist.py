"""Train a small sparse Boltzmann machine on 100 MNIST digits and watch it learn to label them.

Every pixel is a visible spin. So are 50 label spins: five replicas of a
ten-way one-hot code. One sparse hidden layer sits behind them. Each update
has two phases. The positive phase clamps a batch of images with their
labels and measures the hidden moments. The negative phase runs a persistent
free chain. Weights move toward the difference, with momentum. To classify,
the demo clamps the pixels only and reads which label spins turn on.

The positive phase can use Gibbs sampling or a mean-field solver. Pass
``nmft`` or ``hmft`` as the first argument to swap it in.

Needs the IDX files from ``python scripts/make_mnist_idx.py data/mnist``.

    python demos/03_train_small_mnist.py [gibbs|nmft|hmft] [epochs]
"""

import sys
from pathlib import Path

from spinforge.dataset import binarize, load_idx, subsample
from spinforge.topology import generate_sparse_dbm
from spinforge.training import TrainConfig, train

DATA = Path(__file__).resolve().parent.parent / "data" / "mnist"


def load(prefix: str, count: int):
    raw = load_idx(str(DATA / f"{prefix}-images-idx3-ubyte"), str(DATA / f"{prefix}-labels-idx1-ubyte"))
    return binarize(raw)[subsample(len(raw), count, seed=0)]


def main():
    method = sys.argv[1] if len(sys.argv) > 1 else "gibbs"
    epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 60
    topo = generate_sparse_dbm(834, [166], 15, seed=1, label_replicas=5, label_degree=15)
    print(f"network: {topo.node_count} nodes, {topo.edge_count} edges, {topo.n_colors} colors")
    train_set, test_set = load("train", 100), load("t10k", 100)
    config = TrainConfig(positive_method=method, negative_sweeps=1000, positive_sweeps=100, batch_size=10,
                         epochs=epochs, learning_rate=0.06, learning_rate_end=0.006, momentum=0.6,
                         eval_every=10, eval_sweeps=1000)

    def report(rec, state):
        if rec.train_accuracy is not None:
            print(f"epoch {rec.epoch:4d}  lr {rec.learning_rate:.4f}  "
                  f"train {rec.train_accuracy:.2f}  test {rec.test_accuracy:.2f}")

    train(topo, train_set, config, test=test_set, on_epoch=report)


if __name__ == "__main__":
    main()
