"""Central finite-difference check of reverse-mode gradients."""

import numpy as np

from ..errors import ValidationError


def _rel(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)


def grad_check(graph, x, step=1e-3, *, sample=None, seed=0):
    """Largest relative error between backward() and central differences.

    Both sides run on a float64 copy of ``graph``. The graph output must be a
    single scalar. ``sample`` limits the number of coordinates probed per
    tensor (chosen with ``seed``); by default every coordinate is probed.
    """
    g64 = graph.astype(np.float64)
    x64 = np.array(x, dtype=np.float64)
    out = g64.forward(x64, cache=False)
    if np.size(out) != 1:
        raise ValidationError(f"grad_check needs a scalar output, got shape {np.shape(out)}")
    analytic = g64.backward(x64, np.ones_like(out))
    rng = np.random.default_rng(seed)

    def f():
        return float(np.sum(g64.forward(x64, cache=False)))

    def probe(arr, grad):
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        idx = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            idx = rng.choice(flat.size, size=sample, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = f()
            flat[i] = orig - step
            down = f()
            flat[i] = orig
            worst = max(worst, float(_rel(gflat[i], (up - down) / (2 * step))))
        return worst

    worst = 0.0
    for name in sorted(g64.params):
        worst = max(worst, probe(g64.params[name], analytic.params[name]))
    worst = max(worst, probe(x64, analytic.input))
    return worst
