import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import tv_dp
from projscrub.tv import tv_denoise, tv_dual, tv_lambda_max

signal = arrays(float, st.integers(2, 64), elements=st.floats(-50, 50, allow_nan=False))


def kkt_residual(b, u, lam):
    """Largest violation of the subgradient conditions (0 when optimal)."""
    z = tv_dual(b, u)
    du = u[:-1] - u[1:]
    jump = np.abs(du) > 1e-9 * max(1.0, np.max(np.abs(b)))
    viol = np.maximum(np.abs(z) - lam, 0.0)
    viol = np.where(jump, np.abs(z - lam * np.sign(du)), viol)
    return float(np.max(viol)) if viol.size else 0.0


@settings(max_examples=200, deadline=None)
@given(signal, st.floats(0, 30))
def test_kkt_conditions(b, lam):
    u = tv_denoise(b, lam)
    scale = max(1.0, float(np.max(np.abs(b))))
    assert kkt_residual(b, u, lam) < 1e-8 * scale * b.size
    assert u.mean() == pytest.approx(b.mean(), abs=1e-9 * scale)


@settings(max_examples=200, deadline=None)
@given(signal, st.floats(0.01, 30))
def test_matches_dp_oracle(b, lam):
    assert np.max(np.abs(tv_denoise(b, lam) - tv_dp(b, lam))) < 1e-10 * max(1.0, float(np.max(np.abs(b))))


def test_hand_instances():
    assert np.allclose(tv_denoise([0.0, 1.0], 0.25), [0.25, 0.75])
    assert np.allclose(tv_denoise([0.0, 1.0], 0.5), [0.5, 0.5])
    assert np.allclose(tv_denoise([0.0, 0, 3, 3], 0.5), [0.25, 0.25, 2.75, 2.75])
    assert np.array_equal(tv_denoise([1.0, 5.0, 2.0], 0.0), [1.0, 5.0, 2.0])
    with pytest.raises(ValueError):
        tv_denoise([1.0, 2.0], -1)


@settings(max_examples=100, deadline=None)
@given(signal)
def test_lambda_max_flattens(b):
    lm = tv_lambda_max(b)
    u = tv_denoise(b, lm * 1.000001 + 1e-12)
    assert np.ptp(u) < 1e-8 * max(1.0, float(np.max(np.abs(b))))


def test_step_recovered():
    rng = np.random.default_rng(3)
    b = np.r_[np.zeros(25), np.full(25, 4.0)] + 0.3 * rng.standard_normal(50)
    u = tv_denoise(b, 8.0)
    jumps = np.flatnonzero(np.abs(np.diff(u)) > 1e-8)
    assert list(jumps) == [24]
    assert np.allclose(u, tv_dp(b, 8.0), atol=1e-10)
