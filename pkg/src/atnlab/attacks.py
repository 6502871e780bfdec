"""Gradient baselines (FGSM, PGD, MI-FGSM) and ATN generator training.

All baselines maximize the cross-entropy of the *clean predicted* label, and
every output is projected onto the L-inf ball and the pixel range.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .budget import project
from .errors import DivergenceError, ValidationError
from .losses import LossConfig
from .nets import ClassifierModel, GeneratorModel, generate_adversarial, generate_with_mask, predict
from .optim import SGD, Adam
from .robust import RngStream, RobustConfig, enhance_backward, enhance_forward

log = logging.getLogger(__name__)

_CHUNK = 256
OPTIMIZERS = {"sgd": SGD, "adam": Adam}


@dataclass
class AttackConfig:
    epsilon: float
    steps: int = 10
    alpha: float | None = None
    mu: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.epsilon) or self.epsilon <= 0:
            raise ValidationError(f"epsilon must be > 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if self.alpha is None:
            self.alpha = 2.0 * self.epsilon / self.steps
        if self.alpha <= 0:
            raise ValidationError(f"alpha must be > 0, got {self.alpha}")
        if self.mu < 0:
            raise ValidationError(f"mu must be >= 0, got {self.mu}")


def ce_input_grad(model: ClassifierModel, x, labels):
    """Gradient of the summed cross-entropy w.r.t. the input batch."""
    probs = model.graph.forward(x)
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1
    return model.graph.backward(x, {model.logits_node: g}, need_params=False).input


def _batched(fn):
    """Run ``fn(model, batch, cfg)`` over chunks; accepts one image or a batch."""

    def run(model, image, cfg):
        x = np.asarray(image, dtype=np.float32)
        if x.ndim == 3:
            return run(model, x[None], cfg)[0]
        return np.concatenate([fn(model, x[i : i + _CHUNK], cfg) for i in range(0, len(x), _CHUNK)])

    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


def _sign_step(x_t, grad, alpha):
    return x_t + np.float32(alpha) * np.sign(grad).astype(np.float32)


@_batched
def fgsm(model, x, cfg: AttackConfig):
    """One signed-gradient step of size epsilon."""
    labels = predict(model, x)
    return project(_sign_step(x, ce_input_grad(model, x, labels), cfg.epsilon), x, cfg.epsilon)


@_batched
def pgd(model, x, cfg: AttackConfig):
    """Iterated signed steps projected back each time; starts at ``x``."""
    labels = predict(model, x)
    x_t = x
    for _ in range(cfg.steps):
        x_t = project(_sign_step(x_t, ce_input_grad(model, x_t, labels), cfg.alpha), x, cfg.epsilon)
    return x_t


@_batched
def mi_fgsm(model, x, cfg: AttackConfig):
    """Momentum iterative FGSM with per-example L1-normalized gradients."""
    labels = predict(model, x)
    x_t = x
    g = np.zeros(x.shape, dtype=np.float64)
    for _ in range(cfg.steps):
        grad = ce_input_grad(model, x_t, labels).astype(np.float64)
        norm = np.abs(grad).reshape(len(x), -1).sum(axis=1).reshape(-1, *([1] * (x.ndim - 1)))
        g = cfg.mu * g + np.divide(grad, norm, out=np.zeros_like(grad), where=norm > 0)
        x_t = project(_sign_step(x_t, g, cfg.alpha), x, cfg.epsilon)
    return x_t


BASELINES = {"fgsm": fgsm, "pgd": pgd, "mifgsm": mi_fgsm}


# --- ATN training ---------------------------------------------------------------


@dataclass
class AtnTrainConfig:
    targets: list
    loss: LossConfig = field(default_factory=LossConfig)
    robust: RobustConfig = field(default_factory=RobustConfig)
    epsilon: float = 16.0
    lr: float = 1e-3
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    filter_lr: float | None = None
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {sorted(OPTIMIZERS)}")
        if not self.targets:
            raise ValidationError("at least one target model is required")
        if len(self.loss.weights) == 1 and len(self.targets) > 1:
            self.loss.weights = [self.loss.weights[0]] * len(self.targets)
        if len(self.loss.weights) != len(self.targets):
            raise ValidationError(f"{len(self.loss.weights)} weights for {len(self.targets)} targets")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be > 0")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("lr, epochs and batch_size must be positive")

    @property
    def gamma(self):
        # the threshold only matters when several targets compete
        if self.loss.kind == "prediction" and len(self.targets) > 1:
            return self.loss.gamma
        return None


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)

    def record(self, epoch, loss, fooling):
        self.epochs.append({"epoch": epoch, "loss": loss, "fooling_rates": fooling})

    @property
    def final_fooling(self):
        return self.epochs[-1]["fooling_rates"] if self.epochs else None


@dataclass
class StepResult:
    loss: float
    per_target: list
    gen_grads: dict
    filter_grads: dict | None


def atn_step(gen, targets, weights, kind, x, labels, eps, *, gamma=None,
             robust=None, rng=None, need_filter_grads=False):
    """Fused loss and generator gradients for one batch.

    ``labels[n]`` holds target n's clean predictions for ``x`` (or true labels
    for ``kind="true_prob"``). The batch loss is the mean over examples of
    the weighted sum of per-target losses.
    """
    robust = robust or RobustConfig()
    rng = rng or RngStream(0)
    bsz = len(x)
    clean_feats = []
    if kind == "feature":
        for t in targets:
            xc, _ = enhance_forward(x, robust, rng)
            clean_feats.append(t.graph.forward(xc, cache=False, node=t.feature_tap))
    x_adv, dmask = generate_with_mask(gen, x, eps)
    r, rctx = enhance_forward(x_adv, robust, rng)

    grad_r = np.zeros_like(r)
    fused = np.zeros(bsz)
    per_target = []
    for n, (t, w) in enumerate(zip(targets, weights)):
        if kind == "feature":
            feat = t.graph.forward(r, node=t.feature_tap)
            vals, gv = losses.feature_loss_batch(clean_feats[n], feat)
            seed_node = t.feature_tap
        else:
            probs = t.graph.forward(r)
            if kind == "prediction":
                vals, gv = losses.prediction_loss_batch(labels[n], probs)
            elif kind == "true_prob":
                rows = np.arange(bsz)
                vals = probs[rows, labels[n]].astype(np.float64)
                gv = np.zeros_like(probs)
                gv[rows, labels[n]] = 1.0
            else:
                raise ValidationError(f"unknown loss kind {kind!r}")
            if gamma is not None:
                vals, mask = losses.threshold_batch(vals, gamma)
                gv = gv * mask[:, None].astype(gv.dtype)
            seed_node = t.graph.output
        per_target.append(float(vals.mean()))
        fused += w * vals
        seed = (gv * np.float32(w / bsz)).astype(np.float32)
        grad_r += t.graph.backward(r, {seed_node: seed}, need_params=False).input

    grad_xadv, fgrads = enhance_backward(rctx, grad_r, robust, need_filter_params=need_filter_grads)
    res = gen.graph.backward(x, grad_xadv * dmask)
    return StepResult(float(fused.mean()), per_target, res.params, fgrads)


def _clean_labels(targets, images):
    return [predict(t, images) for t in targets]


def _fooling(gen, targets, images, labels, eps):
    x_adv = generate_dataset(gen, images, eps)
    return [float((predict(t, x_adv) != lab).mean()) for t, lab in zip(targets, labels)]


def generate_dataset(gen, images, eps, batch_size=_CHUNK):
    return np.concatenate(
        [generate_adversarial(gen, images[i : i + batch_size], eps) for i in range(0, len(images), batch_size)]
    )


def _train_loop(gen, targets, weights, kind, images, label_sets, cfg_eps, lr, epochs,
                batch_size, seed, gamma=None, robust=None, filter_lr=None, optimizer="sgd"):
    robust = robust or RobustConfig()
    order_rng = np.random.default_rng(seed)
    stream = RngStream(seed)
    opt = OPTIMIZERS[optimizer](gen.graph.params, lr=lr)
    train_filter = robust.mode == "training_filter"
    fopt = SGD(robust.filter.graph.params, lr=filter_lr or lr, sign=+1.0) if train_filter else None
    history = TrainingLog()
    for epoch in range(epochs):
        order = order_rng.permutation(len(images))
        total = 0.0
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            step = atn_step(
                gen, targets, weights, kind, images[idx], [lab[idx] for lab in label_sets], cfg_eps,
                gamma=gamma, robust=robust, rng=stream, need_filter_grads=train_filter,
            )
            if not np.isfinite(step.loss):
                raise DivergenceError(f"ATN loss became non-finite at epoch {epoch}")
            opt.step(step.gen_grads)
            if train_filter:
                fopt.step(step.filter_grads)
            total += step.loss * len(idx)
        refs = label_sets if kind != "true_prob" else _clean_labels(targets, images)
        fooling = _fooling(gen, targets, images, refs, cfg_eps)
        history.record(epoch, total / len(images), fooling)
        log.info("atn epoch %d loss %.4f fooling %s", epoch, total / len(images), fooling)
    return history


def train_atn(gen: GeneratorModel, cfg: AtnTrainConfig, data):
    """Train ``gen`` in place against ``cfg.targets``; returns ``(gen, log)``.

    Target parameters are never touched; in ``training_filter`` mode the
    filter takes one ascent step on the same loss per generator step.
    """
    images = data.images
    label_sets = _clean_labels(cfg.targets, images)
    history = _train_loop(
        gen, cfg.targets, cfg.loss.weights, cfg.loss.kind, images, label_sets, cfg.epsilon,
        cfg.lr, cfg.epochs, cfg.batch_size, cfg.seed, gamma=cfg.gamma, robust=cfg.robust,
        filter_lr=cfg.filter_lr, optimizer=cfg.optimizer,
    )
    gen.metadata.update({"seed": cfg.seed, "epochs": cfg.epochs, "loss": cfg.loss.kind,
                         "robust": cfg.robust.mode, "epsilon": cfg.epsilon})
    return gen, history


def atn_modified_baseline(gen: GeneratorModel, target: ClassifierModel, data, cfg: AtnTrainConfig):
    """Non-targeted ATN baseline: minimize the true-label probability.

    No threshold and no robust module; ``cfg`` supplies epsilon and the
    optimizer schedule.
    """
    history = _train_loop(
        gen, [target], [1.0], "true_prob", data.images, [np.asarray(data.labels)], cfg.epsilon,
        cfg.lr, cfg.epochs, cfg.batch_size, cfg.seed, optimizer=cfg.optimizer,
    )
    gen.metadata.update({"seed": cfg.seed, "epochs": cfg.epochs, "loss": "true_prob", "epsilon": cfg.epsilon})
    return gen, history
