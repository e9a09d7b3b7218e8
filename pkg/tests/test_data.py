import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from projscrub.data import (
    MAD_TO_SD,
    RealignmentParams,
    ScanMatrix,
    ValidationError,
    dct_basis,
    dct_max_frequency,
    detrend,
    robust_standardize,
)


def test_scan_validation():
    with pytest.raises(ValidationError):
        ScanMatrix(np.zeros((1, 3)))
    with pytest.raises(ValidationError):
        ScanMatrix(np.array([[1.0, np.nan], [0, 0]]))
    with pytest.raises(ValidationError):
        ScanMatrix(np.zeros((3, 3)), tr_seconds=0)
    s = ScanMatrix(np.arange(6.0).reshape(3, 2), 0.72, "a", "b", "c")
    assert (s.n_volumes, s.n_locations) == (3, 2)
    with pytest.raises(ValueError):
        s.values[0, 0] = 1.0  # read-only


def test_realignment_shape():
    with pytest.raises(ValidationError):
        RealignmentParams(np.zeros((5, 5)))
    rp = RealignmentParams(np.arange(30.0).reshape(5, 6))
    assert rp.translations.shape == (5, 3) and rp.rotations[0, 0] == 3.0


def test_standardize_hand_column():
    out = robust_standardize(np.array([[1.0], [2], [3], [4], [5]]))
    assert out.center[0] == 3.0
    assert out.scale[0] == pytest.approx(MAD_TO_SD)
    assert np.median(out.values) == 0.0


def test_standardize_drops_constant():
    Y = np.column_stack([[7.0, 7, 7, 7], [1.0, 2, 3, 5]])
    out = robust_standardize(Y)
    assert out.dropped_columns == (0,)
    assert out.values.shape == (4, 1)
    full = out.expand_map(np.array([[2.0]]))
    assert np.array_equal(full, [[0.0, 2.0]])
    with pytest.raises(ValidationError, match="no usable locations"):
        robust_standardize(np.ones((4, 2)))


def test_standardize_gaussian_sd():
    x = np.random.default_rng(0).standard_normal((10000, 1))
    sd = robust_standardize(x).values.std(ddof=1)
    assert 0.9 <= sd <= 1.1


finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(float, st.tuples(st.integers(5, 30), st.integers(1, 5)), elements=finite),
       st.floats(0.01, 100), st.floats(-100, 100))
def test_standardize_affine_invariant_and_idempotent(Y, a, b):
    base = robust_standardize(Y) if np.any(_scales(Y) >= 1e-6) else None
    if base is None:
        return
    kept = base.kept_columns
    mapped = robust_standardize(a * Y + b)
    assert np.array_equal(mapped.kept_columns, kept)
    assert np.allclose(mapped.values, base.values, atol=1e-8)
    again = robust_standardize(base.values)
    assert np.allclose(again.values, base.values, atol=1e-8)
    assert np.allclose(np.median(base.values, axis=0), 0, atol=1e-8)
    assert np.allclose(MAD_TO_SD * np.median(np.abs(base.values), axis=0), 1, atol=1e-8)


def _scales(Y):
    return np.median(np.abs(Y - np.median(Y, axis=0)), axis=0)


def test_dct_hand_column():
    B = dct_basis(4, 1).values[:, 0]
    ref = np.cos(np.pi * np.array([0.5, 1.5, 2.5, 3.5]) / 4)
    assert np.allclose(B, ref / np.linalg.norm(ref), atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 300).flatmap(lambda T: st.tuples(st.just(T), st.integers(1, T - 1))))
def test_dct_orthonormal(tk):
    T, K = tk
    B = dct_basis(T, K).values
    assert np.allclose(B.T @ B, np.eye(K), atol=1e-10)


def test_dct_bad_k():
    with pytest.raises(ValidationError):
        dct_basis(5, 5)
    with pytest.raises(ValidationError):
        dct_basis(5, 0)


def test_dct_frequency_matches_fft():
    T, K, tr = 1185, 4, 0.72
    f = dct_max_frequency(T, K, tr)
    assert f == pytest.approx(0.00234, abs=5e-6)
    col = dct_basis(T, K).values[:, -1]
    n = 64 * T
    spec = np.abs(np.fft.rfft(col, n))
    peak = np.fft.rfftfreq(n, tr)[np.argmax(spec)]
    # only K/2 cycles fit in the record, so leakage biases the FFT peak a little
    assert peak == pytest.approx(f, rel=0.05)
    t = (np.arange(T) + 0.5) * tr
    grid = np.linspace(0.5 * f, 1.5 * f, 2001)
    fit = [abs(col @ np.cos(2 * np.pi * g * t)) / np.linalg.norm(np.cos(2 * np.pi * g * t)) for g in grid]
    assert grid[int(np.argmax(fit))] == pytest.approx(f, rel=1e-3)


def test_detrend_removes_trends():
    T = 50
    B = dct_basis(T, 4).values
    y = 3.0 + B @ np.array([1.0, -2, 0.5, 4])
    assert np.allclose(detrend(y), 0, atol=1e-12)
    z = np.random.default_rng(1).standard_normal((T, 3))
    d = detrend(z)
    assert np.allclose(B.T @ d, 0, atol=1e-12) and np.allclose(d.sum(axis=0), 0, atol=1e-12)
