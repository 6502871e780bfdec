"""Pixel range and L-infinity budget handling.

Feasibility is checked exactly: the float32 images are widened to float64 and
compared to the float64 budget. Projection bounds are rounded toward the
interior where float32 rounding of ``x +/- eps`` would land outside the ball.
"""

import numpy as np

from .errors import BudgetViolation, ValidationError

PIXEL_MIN = 0.0
PIXEL_MAX = 255.0


def clip_pixel(x):
    return np.clip(x, PIXEL_MIN, PIXEL_MAX).astype(np.float32, copy=False)


def _check_eps(eps):
    if not np.isfinite(eps) or eps <= 0:
        raise ValidationError(f"epsilon must be positive, got {eps}")


def linf_bounds(x, eps):
    """Elementwise float32 bounds [lo, hi] inside both the ball and [0, 255]."""
    _check_eps(eps)
    x64 = np.asarray(x, dtype=np.float32).astype(np.float64)
    lo = (x64 - eps).astype(np.float32)
    hi = (x64 + eps).astype(np.float32)
    # test the exact float64 gap, as violations() does: x64 + eps itself may round
    # outward. float32 rounding is within one ulp, so one step inward suffices.
    lo = np.where(x64 - lo.astype(np.float64) > eps, np.nextafter(lo, np.float32(np.inf)), lo)
    hi = np.where(hi.astype(np.float64) - x64 > eps, np.nextafter(hi, np.float32(-np.inf)), hi)
    return np.maximum(lo, np.float32(PIXEL_MIN)), np.minimum(hi, np.float32(PIXEL_MAX))


def project(x_adv, x, eps):
    """Project onto the intersection of the L-inf ball around ``x`` and [0, 255]."""
    lo, hi = linf_bounds(x, eps)
    return np.minimum(np.maximum(np.asarray(x_adv, dtype=np.float32), lo), hi)


def violations(x_adv, x, eps):
    """Number of elements breaking the budget or the pixel range."""
    a = np.asarray(x_adv, dtype=np.float32).astype(np.float64)
    b = np.asarray(x, dtype=np.float32).astype(np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    bad = (np.abs(a - b) > eps) | (a < PIXEL_MIN) | (a > PIXEL_MAX) | ~np.isfinite(a)
    return int(bad.sum())


def check_budget(x_adv, x, eps):
    n = violations(x_adv, x, eps)
    if n:
        raise BudgetViolation(f"{n} elements outside the eps={eps} budget or pixel range")
