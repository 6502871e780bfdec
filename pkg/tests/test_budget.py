import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from atnlab.budget import check_budget, clip_pixel, linf_bounds, project, violations
from atnlab.errors import BudgetViolation, ValidationError

pixels = arrays(np.float32, st.integers(1, 64), elements=st.floats(0, 255, width=32))
budgets = st.floats(1e-3, 64, allow_nan=False)


def test_clip_pixel():
    out = clip_pixel(np.array([-3.0, 10.0, 300.0], dtype=np.float32))
    assert out.tolist() == [0.0, 10.0, 255.0]
    assert out.dtype == np.float32


def test_project_examples():
    x = np.array([100.0, 2.0, 250.0], dtype=np.float32)
    out = project(np.array([130.0, -40.0, 300.0], dtype=np.float32), x, 16)
    assert out.tolist() == [116.0, 0.0, 255.0]


def test_bad_epsilon():
    with pytest.raises(ValidationError):
        linf_bounds(np.zeros(2), 0)
    with pytest.raises(ValidationError):
        linf_bounds(np.zeros(2), float("nan"))


def test_violations_counts_nonfinite():
    x = np.zeros(3, dtype=np.float32)
    assert violations(np.array([0.0, np.nan, 5.0], dtype=np.float32), x, 4) == 2
    with pytest.raises(BudgetViolation):
        check_budget(np.array([0.0, 0.0, 5.0], dtype=np.float32), x, 4)


def test_bounds_tight_under_float32_rounding():
    # 0.1 is not representable; x + eps rounds above the exact ball edge
    x = np.array([200.3], dtype=np.float32)
    lo, hi = linf_bounds(x, 0.1)
    assert float(hi[0]) - float(x[0]) <= 0.1
    assert float(x[0]) - float(lo[0]) <= 0.1


@settings(max_examples=300, deadline=None)
@given(pixels, budgets, st.integers(0, 2**31 - 1))
def test_projection_always_feasible(x, eps, seed):
    r = np.random.default_rng(seed)
    cand = (x + r.normal(scale=3 * eps + 1, size=x.shape)).astype(np.float32)
    out = project(cand, x, eps)
    assert violations(out, x, eps) == 0


@settings(max_examples=200, deadline=None)
@given(pixels, budgets)
def test_projection_is_idempotent(x, eps):
    out = project(x + np.float32(eps), x, eps)
    np.testing.assert_array_equal(project(out, x, eps), out)


def test_bounds_when_float64_sum_rounds_outward():
    # x + eps rounds to x + 2 in float64, one half-ulp beyond the ball
    x = np.array([100.0, 150.0, 3.0], dtype=np.float32)
    eps = 1.999999999999993
    lo, hi = linf_bounds(x, eps)
    assert violations(hi, x, eps) == 0 and violations(lo, x, eps) == 0
    assert violations(project(x + 5, x, eps), x, eps) == 0
