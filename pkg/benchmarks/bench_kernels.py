"""Compare the compiled kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--batch 32] [--side 32] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from atnlab import nets
from atnlab.tensor import _fallback, kernels

try:
    from atnlab.tensor import _ckernels
except ImportError:
    _ckernels = None


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(batch, side):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(batch, 16, side, side)).astype(np.float32)
    cols = _fallback.im2col(x, 3, 1, 1)
    pooled, arg = _fallback.maxpool2_forward(x)
    return {
        "im2col 3x3": lambda m: m.im2col(x, 3, 1, 1),
        "col2im 3x3": lambda m: m.col2im(cols, x.shape, 3, 1, 1),
        "maxpool2 fwd": lambda m: m.maxpool2_forward(x),
        "maxpool2 bwd": lambda m: m.maxpool2_backward(pooled, arg, x.shape),
    }


def train_step(batch, side):
    m = nets.build_classifier("cnn-a", 10, (1, side, side), seed=0)
    x = np.random.default_rng(1).uniform(0, 255, size=(batch, 1, side, side)).astype(np.float32)
    labels = np.arange(batch) % 10

    def step():
        probs = m.graph.forward(x)
        _, g = nets.softmax_xent_grad(probs, labels)
        m.graph.backward(x, {m.logits_node: g})

    return step


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--side", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return
    print(f"{'case':<22}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    rows = [(name, lambda mod, f=f: f(mod)) for name, f in kernel_cases(args.batch, args.side).items()]
    step = train_step(args.batch, args.side)

    def full(mod):
        kernels._impl = mod
        step()

    rows.append(("cnn-a fwd+bwd", full))
    for name, run in rows:
        t_np = _best(lambda: run(_fallback), args.repeat) * 1e3
        t_c = _best(lambda: run(_ckernels), args.repeat) * 1e3
        print(f"{name:<22}{t_np:>10.2f}{t_c:>11.2f}{t_np / t_c:>8.1f}x")


if __name__ == "__main__":
    main()
