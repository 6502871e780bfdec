"""Training-time robustness augmentation between the generator and targets.

Modes: ``none``, ``random_noise`` (uniform noise of mean magnitude beta),
``pretrained_filter`` and ``training_filter`` (per batch, the filter with
probability ``filter_choice_prob``, noise otherwise). At eval time every mode
is the identity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .budget import clip_pixel
from .errors import ShapeError, ValidationError
from .nets import FilterModel
from .optim import Adam

log = logging.getLogger(__name__)

MODES = ("none", "random_noise", "pretrained_filter", "training_filter")
FILTER_MODES = ("pretrained_filter", "training_filter")


class RngStream:
    """Counter-based random stream: draw ``k`` depends only on (seed, k)."""

    def __init__(self, seed, counter=0):
        self.seed = int(seed)
        self.counter = int(counter)

    def next(self) -> np.random.Generator:
        gen = np.random.default_rng([self.seed, self.counter])
        self.counter += 1
        return gen


@dataclass
class RobustConfig:
    mode: str = "none"
    beta: float = 6.0
    filter: FilterModel | None = None
    seed: int = 0
    filter_choice_prob: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"robust mode must be one of {MODES}, got {self.mode!r}")
        if not self.beta >= 0:
            raise ValidationError(f"beta must be >= 0, got {self.beta}")
        if not 0.0 <= self.filter_choice_prob <= 1.0:
            raise ValidationError("filter_choice_prob must lie in [0, 1]")
        if self.mode in FILTER_MODES and self.filter is None:
            raise ValidationError(f"mode {self.mode!r} needs a filter model")
        if self.mode not in FILTER_MODES and self.filter is not None:
            raise ValidationError(f"mode {self.mode!r} takes no filter")


def _noise(shape, beta, gen):
    # uniform on [-2b, 2b] has mean absolute value b
    return gen.uniform(-2.0 * beta, 2.0 * beta, size=shape).astype(np.float32)


def apply_random_noise(image, beta, rng: RngStream):
    if beta < 0:
        raise ValidationError(f"beta must be >= 0, got {beta}")
    x = np.asarray(image, dtype=np.float32)
    if beta == 0:
        return x.copy()
    return clip_pixel(x + _noise(x.shape, beta, rng.next()))


def apply_filter(image, filt: FilterModel):
    x = np.asarray(image, dtype=np.float32)
    if x.shape != filt.input_shape and x.shape[1:] != filt.input_shape:
        raise ShapeError("filter input", filt.input_shape, x.shape)
    return clip_pixel(filt.graph.forward(x, cache=False))


def robust_enhance(image, cfg: RobustConfig, rng: RngStream, phase="train"):
    if phase not in ("train", "eval"):
        raise ValidationError(f"phase must be 'train' or 'eval', got {phase!r}")
    if phase == "eval" or cfg.mode == "none":
        return np.asarray(image, dtype=np.float32).copy()
    out, _ = enhance_forward(image, cfg, rng)
    return out


# --- differentiable path used by ATN training -----------------------------------


@dataclass
class _Ctx:
    branch: str
    mask: np.ndarray | None
    x: np.ndarray | None


def enhance_forward(x, cfg: RobustConfig, rng: RngStream):
    """One training-time pass; returns the output and a backward context.

    Noise and the branch choice are constants of the pass.
    """
    x = np.asarray(x, dtype=np.float32)
    if cfg.mode == "none":
        return x, _Ctx("none", None, None)
    gen = rng.next()
    use_filter = cfg.mode in FILTER_MODES and gen.random() < cfg.filter_choice_prob
    if use_filter:
        raw = cfg.filter.graph.forward(x)
        return clip_pixel(raw), _Ctx("filter", (raw > 0) & (raw < 255), x)
    raw = x + _noise(x.shape, cfg.beta, gen) if cfg.beta > 0 else x
    return clip_pixel(raw), _Ctx("noise", (raw > 0) & (raw < 255), None)


def enhance_backward(ctx: _Ctx, g, cfg: RobustConfig, need_filter_params=False):
    """Gradient w.r.t. the module input, plus filter gradients when asked."""
    if ctx.branch == "none":
        return g, None
    g = g * ctx.mask
    if ctx.branch == "noise":
        return g, None
    res = cfg.filter.graph.backward(ctx.x, g, need_params=need_filter_params)
    return res.input, (res.params if need_filter_params else None)


def pretrain_filter(filt: FilterModel, images, beta=6.0, epochs=3, lr=1e-3, batch_size=64, seed=0):
    """Fit the filter as a denoiser: map ``clip(x + noise)`` back to ``x``.

    Returns per-epoch mean squared error on the [0, 1] scale.
    """
    rng = np.random.default_rng(seed)
    stream = RngStream(seed)
    g = filt.graph
    opt = Adam(g.params, lr=lr)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for i in range(0, len(order), batch_size):
            xb = images[order[i : i + batch_size]]
            noisy = apply_random_noise(xb, beta, stream)
            out = g.forward(noisy)
            diff = (out - xb) / 255.0
            total += float((diff**2).sum())
            grad = 2.0 * diff / (255.0 * diff.size)
            opt.step(g.backward(noisy, grad).params)
        history.append(total / images.size)
        log.info("filter epoch %d mse %.6f", epoch, history[-1])
    return history
