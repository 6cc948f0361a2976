"""Compiled vs numpy kernels on the shapes the toy network actually uses.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Reports the best-of-N wall time per kernel and a full forward/backward step
of the dual variant on a 16-image batch with each backend swapped in.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from dualattn import _kernels_py, kernels
from dualattn.toynet import TrainConfig, forward, init_params, loss

SHAPES = {
    "conv1": ((16, 1, 66, 66), 2),
    "conv2": ((16, 16, 34, 34), 2),
    "conv3": ((16, 32, 18, 18), 2),
}


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_rows(backend, repeat, rng):
    rows = {}
    for name, (shape, stride) in SHAPES.items():
        x = rng.standard_normal(shape)
        cols = backend.im2col(x, 3, 3, stride)
        g = rng.standard_normal(cols.shape)
        rows[f"im2col {name}"] = best(lambda: backend.im2col(x, 3, 3, stride), repeat)
        rows[f"col2im {name}"] = best(lambda: backend.col2im(g, shape, 3, 3, stride), repeat)
    rel = (rng.random(4096) < 0.04).astype(np.float64)
    rows["average precision 64x64"] = best(lambda: backend.ranked_average_precision(rel), repeat)
    return rows


def train_step_time(backend, repeat, rng):
    saved = kernels.im2col, kernels.col2im
    kernels.im2col, kernels.col2im = backend.im2col, backend.col2im
    try:
        config = TrainConfig(variant="dual")
        params = init_params(config)
        images = rng.random((16, 64, 64))
        labels = rng.integers(0, 2, 16)

        def step():
            for p in params.values():
                p.grad = None
            loss(forward(params, config, images), labels, config)[0].backward()

        return best(step, max(3, repeat // 4))
    finally:
        kernels.im2col, kernels.col2im = saved


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if kernels.compiled_backend is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    backends = {"numpy": _kernels_py, "compiled": kernels.compiled_backend}
    results = {name: kernel_rows(b, args.repeat, np.random.default_rng(0)) for name, b in backends.items()}
    for name, b in backends.items():
        results[name]["dual train step (batch 16)"] = train_step_time(b, args.repeat, np.random.default_rng(1))
    width = max(map(len, results["numpy"]))
    print(f"{'kernel':<{width}}  {'numpy ms':>10}  {'compiled ms':>11}  {'speedup':>7}")
    for key in results["numpy"]:
        a, c = results["numpy"][key] * 1e3, results["compiled"][key] * 1e3
        print(f"{key:<{width}}  {a:>10.3f}  {c:>11.3f}  {a / c:>6.1f}x")


if __name__ == "__main__":
    main()
