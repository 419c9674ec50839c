"""Compiled vs numpy unfolding kernels, plus one training step of each backend.

Run: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from splitguard import _kernels_py

try:
    from splitguard import _kernels as compiled
except ImportError:
    compiled = None

CASES = [
    # (batch, channels, height, width, kernel, stride)
    (32, 1, 30, 30, 3, 1),
    (32, 8, 30, 30, 3, 1),
    (32, 16, 16, 16, 3, 1),
    (32, 16, 28, 28, 2, 2),
    (128, 32, 9, 9, 3, 1),
]

STEP = """
import numpy as np
from splitguard import tensor_core as tc
from splitguard.models import build_convnet
net = build_convnet((1, 28, 28), 10, rng=np.random.default_rng(0))
x = np.random.default_rng(1).random((32, 1, 28, 28)).astype(np.float32)
y = np.arange(32) % 10
def step():
    out, caches = net.forward(x)
    _, g = tc.loss_cross_entropy(out, y)
    net.backward(caches, g.astype(np.float32))
"""


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    for n, c, h, w, k, s in CASES:
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        cols = _kernels_py.im2col(x, k, k, s, s).copy()
        row = [f"{n}x{c}x{h}x{w} k{k} s{s}"]
        for impl in (_kernels_py, compiled):
            if impl is None:
                row += [float("nan")] * 2
                continue
            row.append(best(lambda: impl.im2col(x, k, k, s, s), repeat))
            row.append(best(lambda: impl.col2im(cols, c, h, w, k, k, s, s), repeat))
        yield row


def training_step(pure, repeat):
    env = dict(os.environ, SPLITGUARD_PURE="1" if pure else "0")
    code = STEP + f"import timeit; print(min(timeit.repeat(step, number=1, repeat={repeat})))"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=7)
    args = parser.parse_args()
    print(f"{'case':24s} {'np im2col':>10s} {'np col2im':>10s} {'cy im2col':>10s} {'cy col2im':>10s}  (ms)")
    for name, *times in kernel_rows(args.repeat):
        print(f"{name:24s} " + " ".join(f"{1e3 * t:10.3f}" for t in times))
    numpy_step = training_step(True, args.repeat)
    cython_step = training_step(False, args.repeat)
    print(f"\nConvNet-4 forward+backward, batch 32 of 28x28: numpy {1e3 * numpy_step:.1f} ms, "
          f"compiled {1e3 * cython_step:.1f} ms, speedup {numpy_step / cython_step:.2f}x")


if __name__ == "__main__":
    main()
