"""Time each row kernel under the numpy and numba backends.

    python benchmarks/bench_kernels.py [--rows 4096] [--cols 64] [--repeat 20]

Also times one backbone forward pass over a batch of images with each
backend.  Numba compile time is excluded by a warm-up call.
"""

import argparse
import timeit

import numpy as np

from vitgzsl import _kernels as K
from vitgzsl.vit import VisionTransformer, VitConfig


def kernel_cases(rows, cols, rng):
    x = rng.standard_normal((rows, cols))
    g = rng.standard_normal((rows, cols))
    gain, bias = rng.standard_normal(cols), rng.standard_normal(cols)
    y = K.softmax_rows_np(x)
    _, xhat, rstd, _ = K.layer_norm_np(x, gain, bias, 1e-5)
    return {
        "softmax_rows": lambda: K.softmax_rows(x),
        "softmax_rows_bwd": lambda: K.softmax_rows_bwd(y, g),
        "layer_norm": lambda: K.layer_norm(x, gain, bias, 1e-5),
        "layer_norm_bwd": lambda: K.layer_norm_bwd(g, xhat, rstd, gain),
        "gelu": lambda: K.gelu(x),
        "gelu_bwd": lambda: K.gelu_bwd(x, g),
        "leaky_relu": lambda: K.leaky_relu(x, 0.2),
        "leaky_relu_bwd": lambda: K.leaky_relu_bwd(x, g, 0.2),
    }


def best_of(fn, repeat):
    fn()  # warm-up / JIT compile
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--cols", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not K.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    cases = kernel_cases(args.rows, args.cols, rng)
    model = VisionTransformer(VitConfig(), np.random.default_rng(0), dtype=np.float64)
    images = rng.standard_normal((128, 1, 32, 32))
    cases["backbone forward (128 images)"] = lambda: model.forward_all_layers(images)

    previous = K.backend()
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    try:
        for name, fn in cases.items():
            K.set_backend("numpy")
            t_np = best_of(fn, args.repeat)
            K.set_backend("numba")
            t_nb = best_of(fn, args.repeat)
            print(f"{name:32s} {1e3 * t_np:10.3f} {1e3 * t_nb:10.3f} {t_np / t_nb:7.2f}x")
    finally:
        K.set_backend(previous)


if __name__ == "__main__":
    main()
