"""Fooling-rate measurement, transfer grids, defenses and epsilon sweeps."""

from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import __version__
from .attacks import generate_dataset
from .budget import check_budget
from .errors import ValidationError
from .nets import predict
from .robust import RngStream, apply_random_noise

CSV_HEADER = ("attack", "model", "defense", "epsilon", "fooling_rate", "n_images", "seed")
BLACKBOX_MEAN = "blackbox-mean"
INTERPOLATION = "bilinear, half-pixel centers"
DEFAULT_RESIZE_FACTORS = (399 / 299, 199 / 299)


# --- defenses ---------------------------------------------------------------------


@dataclass(frozen=True)
class DefenseSpec:
    kind: str = "none"
    factors: tuple = DEFAULT_RESIZE_FACTORS
    beta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "resize_chain", "random_noise"):
            raise ValidationError(f"unknown defense {self.kind!r}")
        if any(f <= 0 for f in self.factors):
            raise ValidationError("resize factors must be positive")
        if self.beta < 0:
            raise ValidationError("defense beta must be >= 0")

    @property
    def defense_id(self):
        if self.kind == "resize_chain":
            return "resize"
        if self.kind == "random_noise":
            return f"noise:{self.beta:g}"
        return "none"

    def apply(self, images):
        if self.kind == "resize_chain":
            return resize_chain(images, self.factors)
        if self.kind == "random_noise":
            return apply_random_noise(images, self.beta, RngStream(self.seed))
        return images


def _resize_axis(x, out, axis):
    n = x.shape[axis]
    src = (np.arange(out) + 0.5) * (n / out) - 0.5
    src = np.clip(src, 0, n - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    w = (src - i0).astype(x.dtype)
    shape = [1] * x.ndim
    shape[axis] = out
    w = w.reshape(shape)
    a = np.take(x, i0, axis=axis)
    b = np.take(x, i1, axis=axis)
    # a + w * (b - a) keeps constant images exactly constant
    return a + w * (b - a)


def bilinear_resize(images, height, width):
    """Resize the last two axes; sample positions use half-pixel centers."""
    if height < 1 or width < 1:
        raise ValidationError(f"degenerate resize target {height}x{width}")
    x = np.asarray(images, dtype=np.float32)
    return _resize_axis(_resize_axis(x, height, x.ndim - 2), width, x.ndim - 1)


def resize_chain(image, factors=DEFAULT_RESIZE_FACTORS):
    """Resize through ``round(f * H)`` for each factor, then back to H x W."""
    x = np.asarray(image, dtype=np.float32)
    h, w = x.shape[-2:]
    if not factors:
        return x.copy()
    for f in factors:
        if f <= 0:
            raise ValidationError("resize factors must be positive")
        nh, nw = int(round(f * h)), int(round(f * w))
        if nh < 1 or nw < 1:
            raise ValidationError(f"resize factor {f} collapses a {h}x{w} image")
        x = bilinear_resize(x, nh, nw)
    return bilinear_resize(x, h, w)


# --- reports ----------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    attack: str
    model: str
    defense: str
    epsilon: float
    fooling_rate: float
    n_images: int
    seed: int


@dataclass
class FoolingReport:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def cell(self, attack, model, defense=None, epsilon=None):
        for r in self.rows:
            if r.attack == attack and r.model == model and (defense is None or r.defense == defense) \
                    and (epsilon is None or r.epsilon == epsilon):
                return r.fooling_rate
        raise KeyError((attack, model, defense, epsilon))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([r.attack, r.model, r.defense, f"{r.epsilon:g}", repr(r.fooling_rate), r.n_images, r.seed])
        return buf.getvalue()

    def to_json(self):
        return json.dumps({"metadata": self.metadata, "rows": [asdict(r) for r in self.rows]}, indent=2, sort_keys=True)

    def write(self, csv_path=None, json_path=None):
        if csv_path:
            with open(csv_path, "w", encoding="utf-8", newline="") as fh:
                fh.write(self.to_csv())
        if json_path:
            with open(json_path, "w", encoding="utf-8", newline="") as fh:
                fh.write(self.to_json() + "\n")

    def extend(self, other):
        self.rows.extend(other.rows)
        return self


def _metadata(dataset_id=None, **extra):
    meta = {
        "artifact_version": __version__,
        "dataset_id": dataset_id,
        "interpolation": INTERPOLATION,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    meta.update(extra)
    return meta


# --- fooling rate --------------------------------------------------------------------


def fooled_count(model, clean_images, adv_images, defense=None, epsilon=None):
    clean = np.asarray(clean_images, dtype=np.float32)
    adv = np.asarray(adv_images, dtype=np.float32)
    if clean.shape != adv.shape:
        raise ValidationError(f"clean and adversarial batches differ: {clean.shape} vs {adv.shape}")
    if len(clean) == 0:
        raise ValidationError("no images to evaluate")
    if epsilon is not None:
        check_budget(adv, clean, epsilon)
    defense = defense or DefenseSpec()
    ref = predict(model, clean)
    return int((predict(model, defense.apply(adv)) != ref).sum()), len(clean)


def fooling_rate(model, clean_images, adv_images, defense=None, epsilon=None):
    """Fraction of images whose (defended) adversarial label differs from the
    undefended clean label. With ``epsilon`` the budget is validated first."""
    fooled, n = fooled_count(model, clean_images, adv_images, defense, epsilon)
    return fooled / n


# --- attacks under evaluation -----------------------------------------------------------


@dataclass
class AttackSpec:
    """A named attack bound to its white-box targets.

    ``run(images) -> adversarial images`` must stay within ``epsilon``.
    """

    attack_id: str
    targets: tuple
    epsilon: float
    run: Callable


def _threads():
    try:
        return max(1, int(os.environ.get("ATNLAB_THREADS", "1")))
    except ValueError:
        return 1


def transfer_matrix(attacks, models, data, defense=None, seed=0):
    """Fooling rate of every attack on every model, plus a black-box mean.

    ``models`` maps model ids to classifiers. The black-box mean of an attack
    averages the models that are not among its white-box targets; it is
    omitted when every model is a target.
    """
    images = data.images if hasattr(data, "images") else np.asarray(data, dtype=np.float32)
    defense = defense or DefenseSpec()
    report = FoolingReport(metadata=_metadata(getattr(data, "dataset_id", None), defense=defense.defense_id))
    for atk in attacks:
        for t in atk.targets:
            if t not in models:
                raise ValidationError(f"attack {atk.attack_id!r} targets unknown model {t!r}")
        adv = atk.run(images)
        ids = list(models)
        with ThreadPoolExecutor(max_workers=_threads()) as pool:
            counts = list(pool.map(lambda mid: fooled_count(models[mid], images, adv, defense, atk.epsilon), ids))
        black = []
        for mid, (fooled, n) in zip(ids, counts):
            rate = fooled / n
            report.rows.append(ReportRow(atk.attack_id, mid, defense.defense_id, float(atk.epsilon), rate, n, seed))
            if mid not in atk.targets:
                black.append(rate)
        if black:
            report.rows.append(
                ReportRow(atk.attack_id, BLACKBOX_MEAN, defense.defense_id, float(atk.epsilon),
                          float(np.mean(black)), len(images), seed)
            )
    return report


class GeneratorBank:
    """ATN generators trained at a few budgets; other budgets are served by
    the smallest trained budget at or above the request, clipped down."""

    def __init__(self, generators):
        self.generators = {float(k): g for k, g in generators.items()}
        if not self.generators:
            raise ValidationError("generator bank is empty")

    def select(self, epsilon):
        if epsilon <= 0:
            raise ValidationError(f"epsilon must be > 0, got {epsilon}")
        fits = [e for e in sorted(self.generators) if e >= epsilon]
        if not fits:
            raise ValidationError(
                f"requested epsilon {epsilon} exceeds largest trained epsilon {max(self.generators)}"
            )
        return fits[0]

    def generate(self, images, epsilon):
        return generate_dataset(self.generators[self.select(epsilon)], images, epsilon)


def epsilon_sweep(attack_factory, models, data, eps_list, defense=None, seed=0):
    """Run ``attack_factory(eps) -> AttackSpec`` at each budget on all models."""
    eps_list = list(eps_list)
    if any(e <= 0 for e in eps_list):
        raise ValidationError("every epsilon in a sweep must be > 0")
    if eps_list != sorted(eps_list):
        raise ValidationError("eps_list must be ascending")
    report = FoolingReport()
    for eps in eps_list:
        part = transfer_matrix([attack_factory(eps)], models, data, defense, seed)
        report.rows.extend(part.rows)
        report.metadata = part.metadata
    report.metadata["eps_list"] = eps_list
    return report
