"""Compare the compiled and numpy convolution kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Also times a per-sample-gradient pass of the toy CNN under each backend.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from gradshield._kernels import available_backends

SHAPES = [
    # (batch, in_ch, h, w, out_ch, k)
    (8, 3, 8, 8, 4, 3),
    (32, 4, 8, 8, 4, 3),
    (16, 8, 16, 16, 8, 3),
    (4, 3, 32, 32, 16, 5),
]

PSG_SNIPPET = """
from gradshield.nn import zoo, per_sample_gradients
from gradshield.datagen import gen_images
import timeit
d = gen_images(32, 3, 8, 8, 1.0, seed=0)
m = zoo.toy_cnn(seed=0)
print(min(timeit.repeat(lambda: per_sample_gradients(m, d.inputs, d.labels), number=1, repeat=5)))
"""


def bench_kernels(repeat: int) -> None:
    backends = available_backends()
    rng = np.random.default_rng(0)
    print(f"{'shape':<28}" + "".join(f"{name + ' fwd':>14}{name + ' bwd':>14}" for name in backends))
    for b, c, h, w, o, k in SHAPES:
        x = rng.normal(size=(b, c, h, w))
        wt = rng.normal(size=(o, c, k, k))
        bias = rng.normal(size=o)
        pad = k // 2
        g = rng.normal(size=(b, o, h, w))
        row = f"{str((b, c, h, w, o, k)):<28}"
        for impl in backends.values():
            fwd = min(timeit.repeat(lambda: impl.conv2d_forward(x, wt, bias, 1, pad), number=1, repeat=repeat))
            bwd = min(timeit.repeat(lambda: impl.conv2d_backward(x, wt, g, 1, pad), number=1, repeat=repeat))
            row += f"{fwd * 1e3:>12.3f}ms{bwd * 1e3:>12.3f}ms"
        print(row)


def bench_end_to_end() -> None:
    for label, env in (("default", {}), ("pure-python", {"GRADSHIELD_PURE_PYTHON": "1"})):
        out = subprocess.run([sys.executable, "-c", PSG_SNIPPET], env={**os.environ, **env},
                             capture_output=True, text=True, check=True).stdout.strip()
        print(f"per-sample gradients, toy CNN, B=32 [{label}]: {float(out) * 1e3:.1f} ms")


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    bench_kernels(args.repeat)
    bench_end_to_end()
