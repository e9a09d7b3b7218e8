"""Per-volume scrubbing traces and the rules that turn them into flags.

Covers projection leverage, framewise displacement (plain and lagged/notch
filtered) and the dual-cutoff DVARS rule.
"""

from __future__ import annotations

import functools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, signal, stats

from .data import RankDeficiencyWarning, RealignmentParams, ScanMatrix, ValidationError, detrend, robust_standardize
from .projection import (
    DimensionCriterion,
    ProjectionResult,
    VarianceFraction,
    kurtosis_null_p99,
    project,
    select_artifact_components,
    select_dimension,
)

log = logging.getLogger(__name__)

DEFAULT_LEVERAGE_MULTIPLE = 3.0
DEFAULT_FD_CUTOFF_MM = 0.3
DEFAULT_MODFD_CUTOFF_MM = 0.2
HEAD_RADIUS_MM = 50.0
HIQR_DENOM = 0.6745

FILTER_KINDS = ("none", "butterworth10", "chebyshev2_20db")
DEFAULT_BANDS = {"butterworth10": (0.2, 0.5), "chebyshev2_20db": (0.31, 0.43)}
CHEBY2_ORDER = 4
CHEBY2_STOPBAND_DB = 20.0


@dataclass(frozen=True)
class ScrubDecision:
    metric: np.ndarray
    flags: np.ndarray
    method: str
    threshold_spec: dict
    median_metric: float
    metric_secondary: np.ndarray | None = None

    @property
    def n_flagged(self) -> int:
        return int(np.sum(self.flags))

    def to_json(self) -> dict:
        out = {
            "method": self.method,
            "threshold_spec": self.threshold_spec,
            "median_metric": float(self.median_metric),
            "metric": [float(x) for x in self.metric],
            "flags": [bool(f) for f in self.flags],
        }
        if self.metric_secondary is not None:
            out["metric_secondary"] = [float(x) for x in self.metric_secondary]
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ScrubDecision":
        sec = obj.get("metric_secondary")
        return cls(
            metric=np.array(obj["metric"], dtype=float),
            flags=np.array(obj["flags"], dtype=bool),
            method=obj["method"],
            threshold_spec=obj["threshold_spec"],
            median_metric=obj["median_metric"],
            metric_secondary=None if sec is None else np.array(sec, dtype=float),
        )


# --- leverage ------------------------------------------------------------


def leverage(proj: ProjectionResult | np.ndarray) -> np.ndarray:
    """Diagonal of the orthogonal projector onto the selected timecourses.

    Accepts a ProjectionResult (its ``selected`` columns are used) or a bare
    T x Q matrix. Linearly dependent columns are dropped with a warning.
    """
    if isinstance(proj, ProjectionResult):
        X = proj.selected_timecourses
    else:
        X = np.atleast_2d(np.asarray(proj, dtype=float))
        if X.shape[0] == 1:
            X = X.T
    T = X.shape[0]
    if X.shape[1] == 0:
        return np.zeros(T)
    Qm, R, _ = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    keep = diag > 1e-10 * diag[0] if diag[0] > 0 else np.zeros_like(diag, bool)
    if not np.all(keep):
        warnings.warn(
            f"dropping {int(np.sum(~keep))} linearly dependent component(s) before leverage",
            RankDeficiencyWarning,
            stacklevel=2,
        )
    Qm = Qm[:, keep]
    return np.sum(Qm * Qm, axis=1)


def threshold_leverage(lev, multiple: float = DEFAULT_LEVERAGE_MULTIPLE) -> ScrubDecision:
    if not multiple > 0:
        raise ValidationError("leverage multiple must be positive")
    lev = np.asarray(lev, dtype=float)
    med = float(np.median(lev))
    flags = lev > multiple * med if med > 0 else np.zeros(lev.size, bool)
    return ScrubDecision(lev, flags, "leverage", {"multiple": float(multiple)}, med)


# --- motion --------------------------------------------------------------


@dataclass(frozen=True)
class NotchFilter:
    kind: str
    band_hz: tuple[float, float] | None
    b: np.ndarray
    a: np.ndarray
    sos: np.ndarray | None = field(default=None, repr=False)
    poles: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    tr_seconds: float | None = None

    @property
    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles) < 1.0))

    def response(self, freqs_hz) -> np.ndarray:
        """Complex frequency response at the given frequencies (Hz)."""
        freqs_hz = np.atleast_1d(np.asarray(freqs_hz, dtype=float))
        if self.kind == "none":
            return np.ones(freqs_hz.size, dtype=complex)
        _, h = signal.sosfreqz(self.sos, worN=freqs_hz, fs=1.0 / self.tr_seconds)
        return h

    @property
    def padlen(self) -> int:
        """Edge extension long enough for the impulse response to decay by 1e-6."""
        base = 3 * max(len(self.a), len(self.b))
        radius = float(np.max(np.abs(self.poles))) if self.poles.size else 0.0
        if radius <= 0:
            return base
        return max(base, int(np.ceil(np.log(1e-6) / np.log(radius))))

    def apply(self, x: np.ndarray, axis: int = 0) -> np.ndarray:
        """Zero-phase forward-backward filtering of each series along ``axis``.

        Both ends are extended by linear prediction before filtering so that
        in-band oscillations do not ring at the edges.
        """
        x = np.asarray(x, dtype=float)
        if self.kind == "none":
            return x.copy()
        x = np.moveaxis(x, axis, 0)
        n = x.shape[0]
        pad = self.padlen
        flat = x.reshape(n, -1)
        out = np.empty_like(flat)
        for j in range(flat.shape[1]):
            ext = linear_prediction_extend(flat[:, j], pad)
            out[:, j] = signal.sosfiltfilt(self.sos, ext, padtype=None)[pad : pad + n]
        return np.moveaxis(out.reshape(x.shape), 0, axis)


def _forward_extrapolate(x: np.ndarray, n: int, order: int) -> np.ndarray | None:
    lagged = np.column_stack([x[order - k - 1 : x.size - k - 1] for k in range(order)])
    coef, *_ = np.linalg.lstsq(lagged, x[order:], rcond=None)
    if coef.any() and np.max(np.abs(np.roots(np.r_[1.0, -coef]))) > 1.0 + 1e-6:
        return None
    buf = list(x[-order:])
    out = np.empty(n)
    for i in range(n):
        out[i] = np.dot(coef, buf[: -order - 1 : -1])
        buf.append(out[i])
    return out


def linear_prediction_extend(x, n: int, order: int = 8) -> np.ndarray:
    """Extend a series by ``n`` samples at each end with least-squares AR prediction.

    The mean is removed before fitting. An end whose fitted predictor is
    unstable falls back to mirror reflection.
    """
    x = np.asarray(x, dtype=float)
    T = x.size
    order = max(1, min(order, (T - 1) // 3))
    mean = x.mean()
    x0 = x - mean
    if T < 3:
        return np.r_[np.full(n, x0[0]), x0, np.full(n, x0[-1])] + mean
    fwd = _forward_extrapolate(x0, n, order)
    bwd = _forward_extrapolate(x0[::-1], n, order)
    mirror = np.pad(x0, n, mode="symmetric") if n <= T else np.pad(x0, n, mode="wrap")
    head = mirror[:n] if bwd is None else bwd[::-1]
    tail = mirror[n + T :] if fwd is None else fwd
    return np.r_[head, x0, tail] + mean


NO_FILTER = NotchFilter("none", None, np.array([1.0]), np.array([1.0]))


def _normalize_kind(kind: str) -> str:
    aliases = {"butter": "butterworth10", "cheby2": "chebyshev2_20db", "chebyshev2": "chebyshev2_20db"}
    kind = aliases.get(kind, kind)
    if kind not in FILTER_KINDS:
        raise ValidationError(f"unknown filter kind {kind!r}")
    return kind


@functools.lru_cache(maxsize=32)
def _design(kind: str, low: float, high: float, tr: float) -> NotchFilter:
    fs = 1.0 / tr
    if kind == "butterworth10":
        z, p, k = signal.butter(10, [low, high], btype="bandstop", fs=fs, output="zpk")
    else:
        z, p, k = signal.cheby2(
            CHEBY2_ORDER, CHEBY2_STOPBAND_DB, [low, high], btype="bandstop", fs=fs, output="zpk"
        )
    b, a = signal.zpk2tf(z, p, k)
    sos = signal.zpk2sos(z, p, k)
    return NotchFilter(kind, (low, high), b, a, sos, p, tr)


def design_notch(kind: str, band_hz=None, tr_seconds: float = 0.72) -> NotchFilter:
    """Band-stop IIR filter from an analog prototype via the prewarped bilinear transform.

    ``butterworth10``: 10th-order Butterworth prototype. ``chebyshev2_20db``:
    4th-order Chebyshev type II prototype with 20 dB stop-band attenuation.
    ``none`` returns the identity filter.
    """
    kind = _normalize_kind(kind)
    if kind == "none":
        return NO_FILTER
    low, high = band_hz if band_hz is not None else DEFAULT_BANDS[kind]
    nyquist = 0.5 / tr_seconds
    if not 0 < low < high < nyquist:
        raise ValidationError(f"band {low}-{high} Hz must lie inside (0, {nyquist:.4g}) Hz")
    return _design(kind, float(low), float(high), float(tr_seconds))


def fd(
    rp: RealignmentParams | np.ndarray,
    lag: int = 1,
    filter: NotchFilter = NO_FILTER,
    radius_mm: float = HEAD_RADIUS_MM,
) -> np.ndarray:
    """Framewise displacement: sum of absolute lag-differences of the six RPs.

    Rotations are converted to arc length on a sphere of ``radius_mm``; each
    RP column is notch filtered (zero phase) before differencing. The first
    ``lag`` entries are 0.
    """
    values = rp.values if isinstance(rp, RealignmentParams) else np.asarray(rp, dtype=float)
    T = values.shape[0]
    if not 1 <= lag < T:
        raise ValidationError(f"lag must be in 1..{T - 1}, got {lag}")
    mm = np.array(values, dtype=float)
    mm[:, 3:] *= radius_mm
    mm = filter.apply(mm, axis=0)
    out = np.zeros(T)
    out[lag:] = np.sum(np.abs(mm[lag:] - mm[:-lag]), axis=1)
    return out


def threshold_fd(values, cutoff_mm: float, lag: int = 1, method: str = "fd", extra: dict | None = None) -> ScrubDecision:
    values = np.asarray(values, dtype=float)
    flags = values > cutoff_mm
    flags[:lag] = False
    spec = {"cutoff_mm": float(cutoff_mm), "lag": int(lag)}
    spec.update(extra or {})
    return ScrubDecision(values, flags, method, spec, float(np.median(values)))


def motion_scrub(
    rp: RealignmentParams,
    method: str = "modfd",
    cutoff_mm: float | None = None,
    lag: int | None = None,
    filter_kind: str | None = None,
    band_hz=None,
    radius_mm: float = HEAD_RADIUS_MM,
) -> ScrubDecision:
    """FD (lag 1, unfiltered, 0.3 mm) or modFD (lag 4, Chebyshev notch, 0.2 mm) flags."""
    if method not in ("fd", "modfd"):
        raise ValidationError(f"unknown motion method {method!r}")
    modified = method == "modfd"
    lag = lag if lag is not None else (4 if modified else 1)
    cutoff_mm = cutoff_mm if cutoff_mm is not None else (
        DEFAULT_MODFD_CUTOFF_MM if modified else DEFAULT_FD_CUTOFF_MM
    )
    kind = filter_kind if filter_kind is not None else ("chebyshev2_20db" if modified else "none")
    filt = design_notch(kind, band_hz, rp.tr_seconds)
    values = fd(rp, lag, filt, radius_mm)
    return threshold_fd(
        values, cutoff_mm, lag, method, {"filter": filt.kind, "band_hz": filt.band_hz}
    )


# --- DVARS ---------------------------------------------------------------


def s_hiqr(d) -> float:
    """Robust SD from the lower half-IQR: (median - Q25) / 0.6745 (linear quantiles)."""
    d = np.asarray(d, dtype=float).ravel()
    if d.size < 4:
        raise ValidationError("s_hiqr needs at least 4 values")
    q25, q50 = np.quantile(d, [0.25, 0.5])
    out = (q50 - q25) / HIQR_DENOM
    if not out > 0:
        raise ValidationError("DVARS variance undefined")
    return float(out)


def _upper_tail_z(x: np.ndarray, df: float) -> np.ndarray:
    """z such that the standard normal upper tail equals the chi-squared upper tail at x."""
    logp = stats.chi2.logsf(x, df)
    z = stats.norm.isf(np.exp(np.maximum(logp, -700.0)))
    deep = np.isfinite(logp) & (logp < -700.0)
    if np.any(deep):
        # Mills-ratio inversion for p below double precision range
        L = -2.0 * logp[deep]
        z[deep] = np.sqrt(L - np.log(L) - np.log(2 * np.pi))
    lost = ~np.isfinite(logp)
    if np.any(lost):
        # log tail underflowed as well: Wilson-Hilferty cube-root normal approximation
        c = 2.0 / (9.0 * df)
        z[lost] = (np.cbrt(x[lost] / df) - (1.0 - c)) / np.sqrt(c)
    return z


def dvars_dual(
    scan: ScanMatrix | np.ndarray, fwer: float = 0.05, pct_cut: float = 5.0
) -> ScrubDecision:
    """Dual-cutoff DVARS: flag volumes with ZDVARS above the one-sided
    Bonferroni z at level ``fwer`` over T tests and Delta%DVARS above ``pct_cut``.

    ZDVARS(t) = Phi^-1[CDF_chi2(2 Dm D(t) / s^2; 2 Dm^2 / s^2)], the z-score of
    the chi-squared upper-tail probability, with Dm the median of D and s the
    half-IQR robust SD of D. Volume 0 is never flagged.
    """
    Y = scan.values if isinstance(scan, ScanMatrix) else np.asarray(scan, dtype=float)
    if Y.ndim != 2 or Y.shape[1] == 0:
        raise ValidationError("DVARS needs at least one location")
    T = Y.shape[0]
    if T < 3:
        raise ValidationError("DVARS needs T >= 3")
    A = np.mean(Y * Y, axis=1)
    D = np.zeros(T)
    D[1:] = np.mean((0.5 * np.diff(Y, axis=0)) ** 2, axis=1)
    Dt = D[1:]
    d_med = float(np.median(Dt))
    mean_a = float(np.mean(A))
    z = np.zeros(T)
    pct = np.zeros(T)
    if mean_a > 0:
        pct[1:] = 100.0 * (Dt - d_med) / mean_a
    try:
        s = s_hiqr(Dt)
    except ValidationError:
        s = 0.0
        log.warning("DVARS: half-IQR of D is zero; ZDVARS set to 0")
    if s > 0 and d_med > 0:
        df = 2.0 * d_med**2 / s**2
        z[1:] = _upper_tail_z(2.0 * d_med * Dt / s**2, df)
    z_cut = float(stats.norm.isf(fwer / T))
    flags = (z > z_cut) & (pct > pct_cut)
    flags[0] = False
    return ScrubDecision(
        z,
        flags,
        "dvars",
        {"zdvars_fwer": float(fwer), "zdvars_cut": z_cut, "pct_cut": float(pct_cut)},
        float(np.median(z[1:])),
        metric_secondary=pct,
    )


# --- projection scrubbing ------------------------------------------------


def projection_scrub(
    scan: ScanMatrix | np.ndarray,
    method: str = "ica",
    multiple: float = DEFAULT_LEVERAGE_MULTIPLE,
    criterion: DimensionCriterion = VarianceFraction(0.5),
    seed: int = 0,
    kappa: float | None = None,
    null_reps: int = 100_000,
    null_seed: int = 0,
    detrend_data: bool = True,
    detrend_components: bool = False,
    strict: bool = False,
) -> tuple[ScrubDecision, ProjectionResult]:
    """Detrend, standardize, project, select high-kurtosis components, threshold leverage.

    ``seed`` drives the ICA initialization; ``null_seed`` the Monte Carlo
    kurtosis null. With ``strict`` an ICA that fails to converge raises
    instead of keeping its best iterate.
    """
    Y = scan.values if isinstance(scan, ScanMatrix) else np.asarray(scan, dtype=float)
    if detrend_data:
        Y = detrend(Y, 4)
    std = robust_standardize(Y)
    Q = select_dimension(std, criterion)
    proj = project(std, method, Q, seed=seed, kappa=kappa, strict=strict)
    null = kurtosis_null_p99(proj.T, n_reps=null_reps, seed=null_seed)
    proj = select_artifact_components(proj, null, detrend_components=detrend_components)
    lev = leverage(proj)
    decision = threshold_leverage(lev, multiple)
    spec = dict(decision.threshold_spec)
    spec.update(
        {
            "projection": method,
            "Q": proj.Q,
            "n_selected": len(proj.selected),
            "kurtosis_p99": null.quantile_p99,
            "converged": proj.converged,
        }
    )
    return (
        ScrubDecision(decision.metric, decision.flags, "leverage", spec, decision.median_metric),
        proj,
    )


def expand_flags(flags, before: int = 0, after: int = 0) -> np.ndarray:
    """Also flag ``before`` volumes preceding and ``after`` volumes following each flag."""
    flags = np.asarray(flags, dtype=bool)
    out = flags.copy()
    idx = np.flatnonzero(flags)
    T = flags.size
    for i in idx:
        out[max(0, i - before) : min(T, i + after + 1)] = True
    return out
