"""ATN training losses.

* feature loss: ``1 - mean|k_f(x) - k_f(x')|`` over the pre-pool feature map
* prediction loss: signed top-2 margin of the adversarial prediction
* threshold: ``max(gamma, l)``, applied per target before fusion
* ensemble: positive weighted sum of per-target losses

Each loss comes as a scalar function (one example), a batched kernel returning
per-example values and gradients, and a graph-fragment builder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError
from .tensor import top2_indices


@dataclass(frozen=True)
class PredictionSummary:
    probs: np.ndarray
    fir: int
    sec: int
    p_fir: float
    p_sec: float


@dataclass
class LossConfig:
    kind: str = "prediction"
    gamma: float | None = None
    weights: list = field(default_factory=lambda: [1.0])

    def __post_init__(self):
        if self.kind not in ("feature", "prediction"):
            raise ValidationError(f"loss kind must be 'feature' or 'prediction', got {self.kind!r}")
        _check_weights(self.weights)
        if self.gamma is not None and not -1.0 <= self.gamma <= 0.0:
            raise ValidationError(f"gamma must lie in [-1, 0], got {self.gamma}")


def _check_weights(weights):
    for w in weights:
        if not np.isfinite(w) or w <= 0:
            raise ValidationError(f"ensemble weights must be > 0, got {w}")


# --- scalar API -----------------------------------------------------------------


def top2(probs) -> PredictionSummary:
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if p.size < 2:
        raise ValidationError(f"top2 needs at least 2 classes, got {p.size}")
    fir, sec = top2_indices(p)
    return PredictionSummary(p, int(fir), int(sec), float(p[fir]), float(p[sec]))


def loss_feature(feat_clean, feat_adv) -> float:
    vals, _ = feature_loss_batch(np.asarray(feat_clean)[None], np.asarray(feat_adv)[None])
    return float(vals[0])


def loss_prediction(clean_label, probs_adv) -> float:
    p = np.asarray(probs_adv)
    vals, _ = prediction_loss_batch(np.array([clean_label]), p[None])
    return float(vals[0])


def loss_threshold(l_p, gamma) -> float:
    return float(max(gamma, l_p))


def loss_threshold_grad(l_p, gamma) -> float:
    return 1.0 if l_p > gamma else 0.0


def loss_ensemble(per_target_losses, weights) -> float:
    if len(per_target_losses) != len(weights):
        raise ValidationError(f"{len(per_target_losses)} losses but {len(weights)} weights")
    _check_weights(weights)
    return float(sum(w * l for w, l in zip(weights, per_target_losses)))


# --- batched kernels (value and gradient per example) -----------------------------


def feature_loss_batch(feat_clean, feat_adv):
    """Per-example feature loss and its gradient w.r.t. ``feat_adv``."""
    if feat_clean.shape != feat_adv.shape:
        raise ShapeError("loss_feature", feat_clean.shape, feat_adv.shape)
    n = feat_adv.shape[0]
    d = (feat_adv - feat_clean).reshape(n, -1)
    vals = 1.0 - np.abs(d).mean(axis=1)
    # subgradient +1 at d = 0: with sign(0) = 0 an identity generator would never move
    sgn = np.where(d >= 0, 1.0, -1.0)
    grad = (-sgn / d.shape[1]).reshape(feat_adv.shape).astype(feat_adv.dtype)
    return vals, grad


def prediction_loss_batch(clean_labels, probs_adv):
    """Per-example top-2 margin and its gradient w.r.t. ``probs_adv``.

    The top-2 indices are constants of the forward pass.
    """
    p = np.asarray(probs_adv)
    if p.ndim != 2 or p.shape[1] < 2:
        raise ValidationError(f"probabilities must be [batch, N>=2], got {p.shape}")
    labels = np.asarray(clean_labels, dtype=np.intp).reshape(-1)
    if labels.shape[0] != p.shape[0]:
        raise ValidationError("one clean label per example required")
    if labels.min() < 0 or labels.max() >= p.shape[1]:
        raise ValidationError(f"clean label outside [0, {p.shape[1]})")
    rows = np.arange(p.shape[0])
    fir, sec = top2_indices(p)
    sign = np.where(labels == fir, 1.0, -1.0)
    vals = sign * (p[rows, fir].astype(np.float64) - p[rows, sec])
    grad = np.zeros_like(p)
    grad[rows, fir] = sign
    grad[rows, sec] = -sign
    return vals, grad


def threshold_batch(vals, gamma):
    """``max(gamma, vals)`` and the 0/1 gradient mask (0 at the boundary)."""
    vals = np.asarray(vals)
    return np.maximum(vals, gamma), (vals > gamma).astype(vals.dtype)


# --- graph fragments ------------------------------------------------------------


def add_feature_loss(graph, clean_node, adv_node):
    l1 = graph.add("l1_mean", adv_node, clean_node, name="feature_l1")
    return graph.add("scale_shift", l1, name="feature_loss", scale=-1.0, shift=1.0)


def add_prediction_loss(graph, probs_node, clean_labels):
    return graph.add("margin", probs_node, name="prediction_loss", labels=np.asarray(clean_labels))


def add_threshold(graph, loss_node, gamma):
    return graph.add("clip", loss_node, name="threshold", lo=float(gamma))


def add_ensemble(graph, loss_nodes, weights):
    _check_weights(weights)
    return graph.add("combine", *loss_nodes, name="ensemble", weights=[float(w) for w in weights])
