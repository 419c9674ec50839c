"""Write a stratified MNIST subset as IDX files for offline runs.

The 5000-image MNIST sample bundled with mlxtend (500 per digit) is split
into a stratified training set of ``--train`` images and a test set holding
the rest. Point a config's dataset block at the output:

    {"kind": "idx", "train_images": "mnist/train-images-idx3-ubyte", ...}

Run: python3 scripts/make_mnist_idx.py --out mnist --train 2000
"""
import argparse
from pathlib import Path

import numpy as np

from splitguard.data import Dataset, write_idx


def mnist_split(train_count=2000, seed=0):
    from mlxtend.data import mnist_data

    pixels, labels = mnist_data()
    images = (pixels / 255.0).reshape(-1, 1, 28, 28)
    full = Dataset(images, labels, 10)
    rng = np.random.default_rng(seed)
    per_class = train_count // 10
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(full.labels == c))
        train_idx.append(idx[:per_class])
        test_idx.append(idx[per_class:])
    train = full.subset(rng.permutation(np.concatenate(train_idx)), "train")
    test = full.subset(rng.permutation(np.concatenate(test_idx)), "test")
    return train, test


def write_split(out, train_count=2000, seed=0):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = mnist_split(train_count, seed)
    paths = {
        "train_images": out / "train-images-idx3-ubyte", "train_labels": out / "train-labels-idx1-ubyte",
        "test_images": out / "t10k-images-idx3-ubyte", "test_labels": out / "t10k-labels-idx1-ubyte",
    }
    write_idx(train, paths["train_images"], paths["train_labels"])
    write_idx(test, paths["test_images"], paths["test_labels"])
    return {"kind": "idx", "classes": 10, **{k: str(v) for k, v in paths.items()}}


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--out", default="mnist")
    parser.add_argument("--train", type=int, default=2000, help="training images (multiple of 10)")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    desc = write_split(args.out, args.train, args.seed)
    print(desc)


if __name__ == "__main__":
    main()
