"""Simultaneous nuisance regression with optional spike regressors.

A design holds an intercept, DCT high-pass bases, strategy-specific noise
regressors and one one-hot column per flagged volume. Regressing with spike
columns is equivalent to deleting the flagged volumes from both the data and
the design before fitting.
"""

from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import linalg

from .data import RankDeficiencyWarning, RealignmentParams, ScanMatrix, ValidationError, dct_basis
from .io import encode_csv
from .scrub import ScrubDecision, dvars_dual, motion_scrub, projection_scrub

log = logging.getLogger(__name__)

N_DCT = 4
PIVOT_TOL = 1e-10

STRATEGIES = ("mpp", "dct4", "ccx", "p2", "p9", "p36", "ccx_mp6", "ccx_mp24")


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    column_labels: tuple[str, ...]
    rank: int

    @property
    def M(self) -> int:
        return self.values.shape[1]

    def to_csv(self) -> str:
        return encode_csv(self.values, list(self.column_labels))


@dataclass(frozen=True)
class DenoiseSpec:
    """Which nuisance regressors to include.

    ``x`` is the number of CompCor components per noise ROI (strategies
    ``ccx``, ``ccx_mp6`` and ``ccx_mp24``). Noise ROI timeseries, the global
    signal and realignment parameters are supplied precomputed.
    """

    strategy: str = "ccx_mp6"
    x: int = 2
    include_dct: bool = True
    noise_roi_sources: Mapping[str, np.ndarray] = field(default_factory=dict)
    global_signal_source: np.ndarray | None = None
    realignment: RealignmentParams | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown denoising strategy {self.strategy!r}")
        if self.strategy.startswith("ccx") and not 1 <= self.x <= 10:
            raise ValidationError("CompCor needs 1 <= x <= 10")

    @property
    def name(self) -> str:
        if self.strategy.startswith("ccx"):
            base = f"cc{self.x}"
            return base + {"ccx": "", "ccx_mp6": "mp6", "ccx_mp24": "mp24"}[self.strategy]
        return {"p2": "2p", "p9": "9p", "p36": "36p"}.get(self.strategy, self.strategy)


def denoise_spec(name: str, **sources) -> DenoiseSpec:
    """Parse a short strategy name such as ``cc2mp6``, ``dct4``, ``36p`` or ``mpp``."""
    key = name.lower().replace("+", "").replace("_", "")
    m = re.fullmatch(r"cc(\d+)(mp6|mp24|6p|24p)?", key)
    if m:
        suffix = m.group(2)
        strategy = {None: "ccx", "mp6": "ccx_mp6", "6p": "ccx_mp6", "mp24": "ccx_mp24", "24p": "ccx_mp24"}[suffix]
        return DenoiseSpec(strategy, int(m.group(1)), True, **sources)
    table = {"mpp": ("mpp", False), "dct4": ("dct4", True), "2p": ("p2", True), "9p": ("p9", True), "36p": ("p36", True)}
    if key not in table:
        raise ValidationError(f"unknown denoising strategy {name!r}")
    strategy, dct = table[key]
    return DenoiseSpec(strategy, 2, dct, **sources)


def _one_back_diff(X: np.ndarray) -> np.ndarray:
    out = np.zeros_like(X)
    out[1:] = X[1:] - X[:-1]
    return out


def expand_24(X: np.ndarray, names: list[str]) -> tuple[np.ndarray, list[str]]:
    """Columns, one-back differences (first row 0), squares, squared differences."""
    d = _one_back_diff(X)
    cols = np.hstack([X, d, X**2, d**2])
    labels = (
        [f"{n}" for n in names]
        + [f"{n}_derivative" for n in names]
        + [f"{n}_square" for n in names]
        + [f"{n}_square_derivative" for n in names]
    )
    return cols, labels


def rp_expansion(rp: RealignmentParams | np.ndarray, order: int = 6) -> tuple[np.ndarray, list[str]]:
    values = rp.values if isinstance(rp, RealignmentParams) else np.asarray(rp, dtype=float)
    names = [f"rp({i})" for i in range(values.shape[1])]
    if order == 6:
        return values.copy(), names
    if order == 24:
        cols, _ = expand_24(values, names)
        labels = (
            names
            + [f"rp_derivative({i})" for i in range(6)]
            + [f"rp_square({i})" for i in range(6)]
            + [f"rp_square_derivative({i})" for i in range(6)]
        )
        return cols, labels
    raise ValidationError("RP expansion order must be 6 or 24")


def acompcor_regressors(
    roi_timeseries: Mapping[str, np.ndarray], x: int
) -> tuple[np.ndarray, list[str]]:
    """Top-``x`` left singular vectors of each column-centered noise ROI."""
    cols, labels = [], []
    for name in sorted(roi_timeseries):
        R = np.asarray(roi_timeseries[name], dtype=float)
        if R.ndim == 1:
            R = R[:, None]
        Rc = R - R.mean(axis=0)
        U, s, _ = np.linalg.svd(Rc, full_matrices=False)
        rank = int(np.sum(s > s[0] * max(Rc.shape) * np.finfo(float).eps)) if s.size and s[0] > 0 else 0
        if x > rank:
            raise ValidationError(f"ROI {name!r} has rank {rank} < x={x}")
        for j in range(x):
            u = U[:, j]
            # deterministic sign: largest-magnitude entry positive
            u = u * (1.0 if u[np.argmax(np.abs(u))] >= 0 else -1.0)
            cols.append(u)
            labels.append(f"noise_pc({name},{j + 1})")
    if not cols:
        raise ValidationError("CompCor needs at least one noise ROI")
    return np.column_stack(cols), labels


def _roi_means(spec: DenoiseSpec, T: int) -> tuple[np.ndarray, list[str]]:
    if not spec.noise_roi_sources:
        raise ValidationError(f"strategy {spec.name} needs noise ROI timeseries")
    cols, labels = [], []
    for name in sorted(spec.noise_roi_sources):
        R = np.asarray(spec.noise_roi_sources[name], dtype=float)
        cols.append(R.reshape(T, -1).mean(axis=1))
        labels.append(f"mean_roi({name})")
    return np.column_stack(cols), labels


def _require_rp(spec: DenoiseSpec, T: int) -> RealignmentParams:
    if spec.realignment is None:
        raise ValidationError(f"strategy {spec.name} needs realignment parameters")
    if spec.realignment.n_volumes != T:
        raise ValidationError("realignment parameters and scan differ in length")
    return spec.realignment


def strategy_columns(spec: DenoiseSpec, T: int) -> tuple[np.ndarray, list[str]]:
    s = spec.strategy
    blocks: list[tuple[np.ndarray, list[str]]] = []
    if s in ("ccx", "ccx_mp6", "ccx_mp24"):
        for name, R in spec.noise_roi_sources.items():
            if np.asarray(R).shape[0] != T:
                raise ValidationError(f"ROI {name!r} has wrong number of rows")
        blocks.append(acompcor_regressors(spec.noise_roi_sources, spec.x))
        if s == "ccx_mp6":
            blocks.append(rp_expansion(_require_rp(spec, T), 6))
        elif s == "ccx_mp24":
            blocks.append(rp_expansion(_require_rp(spec, T), 24))
    elif s in ("p2", "p9", "p36"):
        means, labels = _roi_means(spec, T)
        cols, names = [means], labels
        if s in ("p9", "p36"):
            rp, rp_labels = rp_expansion(_require_rp(spec, T), 6)
            if spec.global_signal_source is None:
                raise ValidationError(f"strategy {spec.name} needs a global signal")
            gs = np.asarray(spec.global_signal_source, dtype=float).reshape(T, 1)
            cols += [rp, gs]
            names = names + rp_labels + ["global_signal"]
        X = np.hstack(cols)
        if s == "p36":
            X, names = expand_24(X, names)
        blocks.append((X, names))
    if not blocks:
        return np.zeros((T, 0)), []
    return np.hstack([b[0] for b in blocks]), [l for b in blocks for l in b[1]]


def spike_regressors(flags) -> tuple[np.ndarray, list[str]]:
    flags = np.asarray(flags, dtype=bool)
    idx = np.flatnonzero(flags)
    S = np.zeros((flags.size, idx.size))
    S[idx, np.arange(idx.size)] = 1.0
    return S, [f"spike({int(t)})" for t in idx]


def build_design(spec: DenoiseSpec, scan_len: int, flags=None) -> DesignMatrix:
    T = int(scan_len)
    blocks = [np.ones((T, 1))]
    labels = ["intercept"]
    if spec.include_dct or spec.strategy == "dct4":
        blocks.append(dct_basis(T, N_DCT).values)
        labels += [f"dct({k})" for k in range(1, N_DCT + 1)]
    X, names = strategy_columns(spec, T)
    blocks.append(X)
    labels += names
    if flags is not None:
        flags = np.asarray(flags, dtype=bool)
        if flags.size != T:
            raise ValidationError(f"flags length {flags.size} != T={T}")
        S, spike_labels = spike_regressors(flags)
        blocks.append(S)
        labels += spike_labels
    values = np.hstack(blocks)
    if values.shape[1] >= T:
        raise ValidationError("design saturates timepoints")
    if len(set(labels)) != len(labels):
        raise ValidationError("duplicate design column labels")
    rank = int(np.linalg.matrix_rank(values))
    return DesignMatrix(values, tuple(labels), rank)


def _pivoted_basis(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal basis for the column space of X plus the kept-column mask."""
    Qm, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        return np.zeros((X.shape[0], 0)), np.zeros(X.shape[1], bool)
    keep_sorted = diag > PIVOT_TOL * diag[0]
    keep = np.zeros(X.shape[1], bool)
    keep[piv[keep_sorted]] = True
    return Qm[:, keep_sorted], keep


def regress(scan: ScanMatrix | np.ndarray, design: DesignMatrix | np.ndarray) -> ScanMatrix | np.ndarray:
    """Residuals of least-squares regression of every column on the design.

    Uses a pivoted QR factorization; columns whose pivot falls below 1e-10
    of the largest are dropped with a RankDeficiencyWarning.
    """
    Y = scan.values if isinstance(scan, ScanMatrix) else np.asarray(scan, dtype=float)
    X = design.values if isinstance(design, DesignMatrix) else np.asarray(design, dtype=float)
    if X.shape[0] != Y.shape[0]:
        raise ValidationError("design and scan differ in number of volumes")
    Qm, keep = _pivoted_basis(X)
    if Qm.shape[1] == 0:
        raise ValidationError("design has rank 0")
    if not np.all(keep):
        labels = getattr(design, "column_labels", None)
        dropped = [labels[j] if labels else j for j in np.flatnonzero(~keep)]
        warnings.warn(f"dropping dependent design columns {dropped}", RankDeficiencyWarning, stacklevel=2)
    resid = Y - Qm @ (Qm.T @ Y)
    if isinstance(design, DesignMatrix):
        spike_rows = [int(l[6:-1]) for l in design.column_labels if l.startswith("spike(")]
        resid[spike_rows] = 0.0
    return scan.with_values(resid) if isinstance(scan, ScanMatrix) else resid


def censor_then_regress(scan: ScanMatrix | np.ndarray, design: DesignMatrix | np.ndarray, flags) -> np.ndarray:
    """Delete flagged rows from data and design, then regress (no spike columns)."""
    Y = scan.values if isinstance(scan, ScanMatrix) else np.asarray(scan, dtype=float)
    X = design.values if isinstance(design, DesignMatrix) else np.asarray(design, dtype=float)
    keep = ~np.asarray(flags, dtype=bool)
    return regress(Y[keep], X[keep])


@dataclass(frozen=True)
class PipelineResult:
    residuals: ScanMatrix
    decision: object
    preliminary: ScanMatrix
    design: DesignMatrix
    projection: object = None

    @property
    def kept(self) -> np.ndarray:
        return ~np.asarray(self.decision.flags, dtype=bool)

    def censored(self) -> np.ndarray:
        """Final residuals with flagged volumes removed, ready for FC."""
        return self.residuals.values[self.kept]


def preliminary_then_final(
    scan: ScanMatrix,
    spec: DenoiseSpec,
    scrub_method: str = "ica",
    threshold: float | None = None,
    rp: RealignmentParams | None = None,
    seed: int = 0,
    **scrub_kwargs,
) -> PipelineResult:
    """Two-pass cleaning: denoise, compute scrubbing flags, then one final
    regression of the original data with spike regressors added.

    ``scrub_method`` is one of pca, ica, fusedpca (projection leverage with
    ``threshold`` as the median multiple), fd, modfd (``threshold`` in mm), or
    dvars, or ``none``.
    """
    T = scan.n_volumes
    base = build_design(spec, T)
    prelim = regress(scan, base)
    proj = None
    if scrub_method in ("pca", "ica", "fusedpca"):
        kwargs = dict(scrub_kwargs)
        if threshold is not None:
            kwargs["multiple"] = threshold
        decision, proj = projection_scrub(prelim, scrub_method, seed=seed, **kwargs)
    elif scrub_method in ("fd", "modfd"):
        rp = rp if rp is not None else spec.realignment
        if rp is None:
            raise ValidationError(f"{scrub_method} needs realignment parameters")
        if rp.n_volumes != T:
            raise ValidationError("realignment parameters and scan differ in length")
        decision = motion_scrub(rp, scrub_method, cutoff_mm=threshold, **scrub_kwargs)
    elif scrub_method == "dvars":
        decision = dvars_dual(prelim, **scrub_kwargs)
    elif scrub_method == "none":
        decision = ScrubDecision(np.zeros(T), np.zeros(T, bool), "none", {}, 0.0)
    else:
        raise ValidationError(f"unknown scrubbing method {scrub_method!r}")
    if decision.flags.any():
        final_design = build_design(spec, T, decision.flags)
        residuals = regress(scan, final_design)
    else:
        final_design, residuals = base, prelim
    return PipelineResult(residuals, decision, prelim, final_design, proj)
