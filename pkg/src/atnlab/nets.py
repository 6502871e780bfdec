"""Classifier zoo, ATN generator, filter network, and checkpoint I/O.

Every network reads images on the [0, 255] pixel scale and normalizes them
internally with a fixed scale-and-shift node.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import container
from .budget import clip_pixel, linf_bounds
from .errors import ArchMismatchError, CorruptHeaderError, DivergenceError, ShapeError, ValidationError
from .optim import Adam
from .tensor import Graph

log = logging.getLogger(__name__)

ARCHS = ("cnn-a", "cnn-b", "cnn-c")
_NORM = dict(scale=1.0 / 50.0, shift=-128.0 / 50.0)


class _Builder:
    """Seeded He-normal initialization while appending layers to a graph."""

    def __init__(self, graph, seed):
        self.g = graph
        self.rng = np.random.default_rng(seed)
        self.count = 0

    def conv(self, x, out_ch, k, stride=1, zero=False, relu=True):
        self.count += 1
        in_ch = self.g.nodes[x].shape[0]
        std = np.sqrt(2.0 / (in_ch * k * k))
        w = np.zeros((out_ch, in_ch, k, k)) if zero else self.rng.normal(0, std, (out_ch, in_ch, k, k))
        wn = self.g.add_param(f"conv{self.count}.w", w)
        bn = self.g.add_param(f"conv{self.count}.b", np.zeros(out_ch))
        y = self.g.add("conv2d", x, params=(wn, bn), stride=stride, pad=k // 2, name=f"conv{self.count}")
        return self.g.add("relu", y, name=f"relu{self.count}") if relu else y

    def dense(self, x, out):
        d = self.g.nodes[x].shape[0]
        wn = self.g.add_param("fc.w", self.rng.normal(0, np.sqrt(1.0 / d), (out, d)))
        bn = self.g.add_param("fc.b", np.zeros(out))
        return self.g.add("dense", x, params=(wn, bn), name="logits")


@dataclass
class ClassifierModel:
    graph: Graph
    num_classes: int
    feature_tap: int
    logits_node: int
    arch_name: str
    input_shape: tuple
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def descriptor(self):
        return {
            "family": "classifier",
            "arch_name": self.arch_name,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "seed": self.seed,
        }


@dataclass
class GeneratorModel:
    graph: Graph
    epsilon_train: float
    input_shape: tuple
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def descriptor(self):
        return {
            "family": "generator",
            "arch_name": "atn",
            "input_shape": list(self.input_shape),
            "epsilon_train": self.epsilon_train,
            "seed": self.seed,
        }


@dataclass
class FilterModel:
    graph: Graph
    input_shape: tuple
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def descriptor(self):
        return {
            "family": "filter",
            "arch_name": "filter",
            "input_shape": list(self.input_shape),
            "seed": self.seed,
        }


def _check_image_shape(input_shape):
    shape = tuple(int(s) for s in input_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ValidationError(f"image shape must be [channels, H, W], got {list(shape)}")
    return shape


def build_classifier(arch_name, num_classes, input_shape, seed=0):
    """Build one of the three zoo topologies with seeded initialization.

    All three end in global-average-pool -> dense -> softmax; the feature tap
    is the activation feeding the pool.
    """
    if arch_name not in ARCHS:
        raise ValidationError(f"unknown architecture {arch_name!r}; valid names: {', '.join(ARCHS)}")
    if num_classes < 2:
        raise ValidationError("num_classes must be at least 2")
    shape = _check_image_shape(input_shape)
    g = Graph(shape)
    b = _Builder(g, seed)
    x = g.add("scale_shift", 0, name="normalize", **_NORM)
    if arch_name == "cnn-a":
        x = g.add("maxpool2", b.conv(x, 16, 3), name="pool1")
        x = g.add("maxpool2", b.conv(x, 32, 3), name="pool2")
        tap = b.conv(x, 64, 3)
    elif arch_name == "cnn-b":
        x = b.conv(x, 12, 5)
        x = b.conv(x, 24, 3, stride=2)
        x = b.conv(x, 32, 3)
        tap = b.conv(x, 48, 3, stride=2)
    else:
        x = b.conv(b.conv(x, 8, 3), 16, 3)
        x = g.add("maxpool2", x, name="pool1")
        x = g.add("maxpool2", b.conv(x, 32, 3), name="pool2")
        tap = b.conv(b.conv(x, 48, 3), 64, 1)
    pooled = g.add("gap", tap, name="gap")
    logits = b.dense(pooled, num_classes)
    g.add("softmax", logits, name="softmax")
    return ClassifierModel(g, num_classes, tap, logits, arch_name, shape, seed)


def build_generator(input_shape, epsilon_train=16.0, seed=0):
    """Encoder-decoder with three stride-2 convs and three upsample+conv stages.

    The last conv starts at zero, so a fresh generator is the identity map.
    """
    shape = _check_image_shape(input_shape)
    if shape[1] % 8 or shape[2] % 8:
        raise ValidationError(f"generator needs H and W divisible by 8, got {list(shape)}")
    if epsilon_train <= 0:
        raise ValidationError("epsilon_train must be positive")
    g = Graph(shape)
    b = _Builder(g, seed)
    x = g.add("scale_shift", 0, name="normalize", **_NORM)
    x = b.conv(x, 16, 3, stride=2)
    x = b.conv(x, 32, 3, stride=2)
    x = b.conv(x, 64, 3, stride=2)
    x = b.conv(g.add("upsample2", x), 32, 3)
    x = b.conv(g.add("upsample2", x), 16, 3)
    x = b.conv(g.add("upsample2", x), shape[0], 3, zero=True, relu=False)
    g.add("tanh", x, name="direction")
    return GeneratorModel(g, float(epsilon_train), shape, seed)


def build_filter(input_shape, seed=0, hidden=8):
    """Shallow residual image-to-image net, identity at initialization."""
    shape = _check_image_shape(input_shape)
    g = Graph(shape)
    b = _Builder(g, seed)
    x = g.add("scale_shift", 0, name="normalize", **_NORM)
    x = b.conv(x, hidden, 3)
    x = b.conv(x, shape[0], 3, zero=True, relu=False)
    x = g.add("scale_shift", x, name="to_pixels", scale=127.5, shift=0.0)
    g.add("add", 0, x, name="residual")
    return FilterModel(g, shape, seed)


# --- inference ----------------------------------------------------------------


def _validate_images(model, image):
    arr = np.asarray(image, dtype=np.float32)
    shape = tuple(model.input_shape)
    if arr.shape != shape and arr.shape[1:] != shape:
        raise ShapeError("input", shape, arr.shape)
    return arr


def classify(model: ClassifierModel, image) -> np.ndarray:
    """Softmax probabilities for one image [C,H,W] or a batch [B,C,H,W]."""
    return model.graph.forward(_validate_images(model, image), cache=False)


def predict(model: ClassifierModel, images, batch_size=256) -> np.ndarray:
    """Argmax labels for a batch, evaluated in chunks."""
    images = _validate_images(model, images)
    if images.ndim == 3:
        return int(np.argmax(classify(model, images)))
    out = [
        np.argmax(classify(model, images[i : i + batch_size]), axis=1)
        for i in range(0, len(images), batch_size)
    ]
    return np.concatenate(out)


def features(model: ClassifierModel, image) -> np.ndarray:
    """Activation at the feature tap (the map the global pool consumes)."""
    return model.graph.forward(_validate_images(model, image), cache=False, node=model.feature_tap)


def generate_adversarial(gen: GeneratorModel, image, epsilon) -> np.ndarray:
    """x' = clip_pixel(x + epsilon * tanh(raw)); always inside the budget."""
    x_adv, _ = generate_with_mask(gen, image, epsilon, cache=False)
    return x_adv


def generate_with_mask(gen, image, epsilon, cache=True):
    """Like :func:`generate_adversarial`; also returns d x'/d direction.

    The derivative is ``epsilon`` where the pixel clamp is inactive and 0
    where it clamps (boundary included).
    """
    if not np.isfinite(epsilon) or epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    x = _validate_images(gen, image)
    direction = gen.graph.forward(x, cache=cache)
    raw = x + np.float32(epsilon) * direction
    lo, hi = linf_bounds(x, epsilon)
    x_adv = np.minimum(np.maximum(raw, lo), hi)
    inside = (raw > 0) & (raw < 255)
    return x_adv.astype(np.float32), np.float32(epsilon) * inside


# --- checkpoints ----------------------------------------------------------------


def save_checkpoint(model, path, metadata=None):
    """Write ``model`` to ``path``; returns the file's sha256."""
    meta = dict(model.metadata)
    meta.update(metadata or {})
    params = {k: model.graph.params[k] for k in sorted(model.graph.params)}
    return container.save(path, "model", params, model.descriptor(), meta)


def _rebuild(arch):
    family = arch.get("family")
    try:
        if family == "classifier":
            return build_classifier(arch["arch_name"], arch["num_classes"], arch["input_shape"], arch.get("seed", 0))
        if family == "generator":
            return build_generator(arch["input_shape"], arch["epsilon_train"], arch.get("seed", 0))
        if family == "filter":
            return build_filter(arch["input_shape"], arch.get("seed", 0))
    except (KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"corrupt header: incomplete arch descriptor ({exc})") from None
    raise CorruptHeaderError(f"corrupt header: unknown model family {family!r}")


def load_checkpoint(path, arch=None):
    """Load a model; ``arch`` (an arch name or family) asserts what it must be."""
    header, tensors = container.load(path)
    if header.get("kind") != "model":
        raise CorruptHeaderError(f"corrupt header: {path} holds {header.get('kind')!r}, not a model")
    desc = header["arch"]
    if arch is not None and arch not in (desc.get("arch_name"), desc.get("family")):
        raise ArchMismatchError(f"arch mismatch: {path} holds {desc.get('arch_name')!r}, expected {arch!r}")
    model = _rebuild(desc)
    params = model.graph.params
    if set(tensors) != set(params):
        raise ArchMismatchError(f"arch mismatch: parameter names in {path} do not match {desc.get('arch_name')!r}")
    for name, arr in tensors.items():
        if arr.shape != params[name].shape:
            raise ArchMismatchError(f"arch mismatch: {name} has shape {arr.shape}, expected {params[name].shape}")
        params[name] = arr
    model.metadata = dict(header.get("metadata", {}))
    return model


# --- classifier training -------------------------------------------------------


def softmax_xent_grad(probs, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = probs.shape[0]
    rows = np.arange(n)
    loss = float(-np.log(np.maximum(probs[rows, labels], 1e-12)).mean())
    g = probs.copy()
    g[rows, labels] -= 1
    return loss, g / n


def train_classifier(model, images, labels, epochs=10, lr=2e-3, batch_size=32, seed=0, noise_beta=0.0):
    """Minibatch Adam on softmax cross-entropy.

    ``noise_beta > 0`` trains on noise-augmented batches (the same uniform
    noise the robust-enhance module uses), giving a noise-hardened model.
    Returns a list of per-epoch ``(mean loss, train accuracy)``.
    """

    rng = np.random.default_rng(seed)
    g = model.graph
    opt = Adam(g.params, lr=lr)
    history = []
    labels = np.asarray(labels, dtype=np.intp)
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        losses, correct = [], 0
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            xb = images[idx]
            if noise_beta > 0:
                xb = clip_pixel(xb + rng.uniform(-2 * noise_beta, 2 * noise_beta, size=xb.shape))
            probs = g.forward(xb)
            loss, glog = softmax_xent_grad(probs, labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(f"classifier loss diverged at epoch {epoch}")
            opt.step(g.backward(xb, {model.logits_node: glog}).params)
            losses.append(loss * len(idx))
            correct += int((probs.argmax(axis=1) == labels[idx]).sum())
        history.append((sum(losses) / len(images), correct / len(images)))
        log.info("epoch %d loss %.4f acc %.4f", epoch, *history[-1])
    return history
