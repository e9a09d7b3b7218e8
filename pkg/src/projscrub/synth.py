"""Synthetic multi-subject scans with known FC and planted burst artifacts.

Every random draw comes from ``default_rng([seed, subject, run, stream])`` so
that each run can be regenerated on its own and burst parameters never touch
the clean data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.signal import lfilter

from .data import RealignmentParams, ScanMatrix, ValidationError
from .fc import FcMatrix, Parcellation, fisher_z

# rng streams
_SIGNAL, _NOISE, _NUISANCE, _DRIFT, _BURST_TIMES, _BURST_MAPS, _MOTION = range(7)
_SUBJECT_LEVEL = -1
_SHARED = 99


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings; volumes are indexed from 0.

    ``burst_times`` (one list per run, runs ordered subject-major) overrides
    the random placement of ``n_bursts`` bursts.
    """

    T: int = 400
    V: int = 1000
    P: int = 20
    n_subjects: int = 4
    n_runs: int = 2
    tr_seconds: float = 0.72
    signal_rank: int = 4
    signal_sd: float = 0.35
    unique_sd: float = 0.6
    subject_effect: float = 0.5
    ar1_phi: float = 0.3
    nuisance_sd: float = 0.3
    n_nuisance: int = 4
    roi_voxels: int = 50
    drift_amplitude: float = 1.0
    drift_degree: int = 2
    burst_times: tuple | None = None
    n_bursts: int = 10
    burst_amplitude_sd: float = 5.0
    burst_spatial_fraction: float = 0.05
    burst_coherence: float = 0.0
    min_burst_spacing: int = 4
    resp_freq_hz: float = 0.35
    resp_amplitude_mm: float = 0.15
    walk_sd_mm: float = 0.004
    step_mm: float = 0.6
    motion_locked_fraction: float = 1.0
    rp_lag: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.T < 10 or self.V < 2 or not 2 <= self.P <= self.V:
            raise ValidationError("need T >= 10 and 2 <= P <= V")
        if self.n_subjects < 1 or self.n_runs < 1:
            raise ValidationError("need at least one subject and one run")
        if not 0.0 <= self.ar1_phi <= 0.9:
            raise ValidationError("ar1_phi must lie in [0, 0.9]")
        if self.burst_amplitude_sd < 0 or not 0 < self.burst_spatial_fraction <= 1:
            raise ValidationError("invalid burst settings")
        if not 0.0 <= self.burst_coherence <= 1.0:
            raise ValidationError("burst_coherence must lie in [0, 1]")
        if not 0.0 <= self.motion_locked_fraction <= 1.0:
            raise ValidationError("motion_locked_fraction must lie in [0, 1]")
        if self.burst_times is not None:
            bt = tuple(tuple(int(t) for t in run) for run in self.burst_times)
            if len(bt) != self.n_subjects * self.n_runs:
                raise ValidationError("burst_times needs one list per run")
            for run in bt:
                if any(t < 0 or t >= self.T for t in run):
                    raise ValidationError("burst index out of range")
            object.__setattr__(self, "burst_times", bt)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown synth settings: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        if self.burst_times is not None:
            out["burst_times"] = [list(r) for r in self.burst_times]
        return out

    def with_(self, **kw) -> "SynthSpec":
        return replace(self, **kw)


@dataclass(frozen=True)
class SynthRun:
    subject: int
    run: int
    scan: ScanMatrix
    clean_scan: ScanMatrix
    rp: RealignmentParams
    noise_rois: dict
    burst_times: np.ndarray
    motion_locked: np.ndarray


@dataclass(frozen=True)
class GroundTruth:
    true_fc: list
    burst_times: dict
    clean_scan: dict
    parcellation: Parcellation


@dataclass(frozen=True)
class SynthData:
    spec: SynthSpec
    runs: list
    truth: GroundTruth
    parcellation: Parcellation = field(repr=False, default=None)

    def run(self, subject: int, run: int) -> SynthRun:
        return self.runs[subject * self.spec.n_runs + run]


def _rng(spec: SynthSpec, subject: int, run: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, subject + 2, run + 2, stream])


def ar1(rng: np.random.Generator, T: int, n: int, phi: float) -> np.ndarray:
    """Stationary unit-variance AR(1) columns."""
    e = rng.standard_normal((T, n))
    if phi == 0:
        return e
    x = np.empty_like(e)
    x[0] = e[0]
    s = np.sqrt(1 - phi**2)
    x[1:] = lfilter([s], [1.0, -phi], e[1:], axis=0, zi=phi * e[:1])[0]
    return x


def network_of(spec: SynthSpec) -> dict:
    """Parcel id -> network index; networks interleave across parcels."""
    return {p: (p - 1) % spec.signal_rank for p in range(1, spec.P + 1)}


def subject_loadings(spec: SynthSpec, subject: int) -> np.ndarray:
    """P x rank loadings: a strong loading on the parcel's own network, weak
    loadings elsewhere, plus a dense subject-specific offset of relative size
    ``subject_effect``.
    """
    member = np.zeros((spec.P, spec.signal_rank))
    member[np.arange(spec.P), np.arange(spec.P) % spec.signal_rank] = 1.0
    g = np.random.default_rng([spec.seed, 0, 0, _SHARED]).standard_normal((2,) + member.shape)
    shared = member * (1.0 + 0.3 * g[0]) + 0.3 * g[1]
    own = _rng(spec, subject, _SUBJECT_LEVEL, _SIGNAL).standard_normal(member.shape)
    return shared + 0.5 * spec.subject_effect * own


def _nuisance_loadings(spec: SynthSpec, subject: int) -> np.ndarray:
    return _rng(spec, subject, _SUBJECT_LEVEL, _NUISANCE).standard_normal((spec.V, spec.n_nuisance))


def parcellation(spec: SynthSpec) -> Parcellation:
    blocks = Parcellation.blocks(spec.V, spec.P)
    return Parcellation(blocks.assignment, network_of(spec))


def true_fc(spec: SynthSpec, subject: int) -> FcMatrix:
    """Population FC of parcel means of the clean (drift-free) scan."""
    parc = parcellation(spec)
    counts = np.bincount(parc.assignment - 1, minlength=spec.P).astype(float)
    L = subject_loadings(spec, subject)
    cov = spec.signal_sd**2 * (L @ L.T + spec.unique_sd**2 * np.eye(spec.P)) + np.diag(1.0 / counts)
    if spec.nuisance_sd > 0:
        B = _nuisance_loadings(spec, subject)
        onehot = np.zeros((spec.V, spec.P))
        onehot[np.arange(spec.V), parc.assignment - 1] = 1.0 / counts[parc.assignment - 1]
        Bp = onehot.T @ B
        cov += spec.nuisance_sd**2 * (Bp @ Bp.T)
    d = np.sqrt(np.diag(cov))
    z = fisher_z(cov / np.outer(d, d))
    np.fill_diagonal(z, 0.0)
    return FcMatrix(z, subject=f"sub-{subject:02d}")


def location_sd(spec: SynthSpec, subject: int) -> np.ndarray:
    parc = parcellation(spec)
    L = subject_loadings(spec, subject)
    var = spec.signal_sd**2 * (np.sum(L**2, axis=1) + spec.unique_sd**2)[parc.assignment - 1] + 1.0
    if spec.nuisance_sd > 0:
        var = var + spec.nuisance_sd**2 * np.sum(_nuisance_loadings(spec, subject) ** 2, axis=1)
    return np.sqrt(var)


def draw_burst_times(spec: SynthSpec, subject: int, run: int) -> np.ndarray:
    if spec.burst_times is not None:
        return np.array(sorted(spec.burst_times[subject * spec.n_runs + run]), dtype=int)
    rng = _rng(spec, subject, run, _BURST_TIMES)
    margin = max(2, spec.rp_lag + 1)
    out: list[int] = []
    candidates = np.arange(margin, spec.T - margin)
    for _ in range(100 * max(1, spec.n_bursts)):
        if len(out) == spec.n_bursts or candidates.size == 0:
            break
        t = int(rng.choice(candidates))
        if all(abs(t - u) >= spec.min_burst_spacing for u in out):
            out.append(t)
    if len(out) < spec.n_bursts:
        raise ValidationError("cannot place the requested number of bursts")
    return np.array(sorted(out), dtype=int)


def _clean_run(spec: SynthSpec, subject: int, run: int):
    T, V = spec.T, spec.V
    parc = parcellation(spec)
    L = subject_loadings(spec, subject)
    rs = _rng(spec, subject, run, _SIGNAL)
    factors = ar1(rs, T, spec.signal_rank, spec.ar1_phi)
    unique = ar1(rs, T, spec.P, spec.ar1_phi)
    parcel_sig = spec.signal_sd * (factors @ L.T + spec.unique_sd * unique)
    Y = parcel_sig[:, parc.assignment - 1]
    Y = Y + ar1(_rng(spec, subject, run, _NOISE), T, V, spec.ar1_phi)

    rn = _rng(spec, subject, run, _NUISANCE)
    h = ar1(rn, T, spec.n_nuisance, 0.8)
    if spec.nuisance_sd > 0:
        Y = Y + spec.nuisance_sd * h @ _nuisance_loadings(spec, subject).T
    # noise ROIs: white matter sees the first half of the nuisance factors, CSF the rest
    half = max(1, spec.n_nuisance // 2)
    rois = {}
    for name, sl in (("wm", slice(0, half)), ("csf", slice(half, None))):
        k = h[:, sl].shape[1]
        if k == 0:
            sl, k = slice(0, half), half
        mix = rn.standard_normal((k, spec.roi_voxels))
        rois[name] = h[:, sl] @ mix + 0.5 * rn.standard_normal((T, spec.roi_voxels))

    if spec.drift_amplitude > 0:
        x = np.linspace(-1, 1, T)
        poly = np.polynomial.legendre.legvander(x, spec.drift_degree)[:, 1:]
        coef = _rng(spec, subject, run, _DRIFT).standard_normal((spec.drift_degree, V))
        Y = Y + spec.drift_amplitude * poly @ coef
    return Y, rois


def _bursts(spec: SynthSpec, subject: int, run: int, times: np.ndarray) -> np.ndarray:
    """T x V contamination: one sparse random spatial pattern per burst volume.

    With ``burst_coherence`` c > 0 the support is a random set of whole
    parcels and each parcel shares a common amplitude, mixed with
    location-specific values in proportion c : sqrt(1 - c^2).
    """
    B = np.zeros((spec.T, spec.V))
    if spec.burst_amplitude_sd == 0 or times.size == 0:
        return B
    rng = _rng(spec, subject, run, _BURST_MAPS)
    sd = location_sd(spec, subject)
    assign = parcellation(spec).assignment - 1
    c = spec.burst_coherence
    n_on = max(1, int(round(spec.burst_spatial_fraction * spec.V)))
    n_parcels = max(1, int(round(spec.burst_spatial_fraction * spec.P)))
    for t in times:
        if c > 0:
            hit = rng.choice(spec.P, size=n_parcels, replace=False)
            idx = np.flatnonzero(np.isin(assign, hit))
            shared = rng.standard_normal(spec.P)[assign[idx]]
            vals = c * shared + np.sqrt(1 - c * c) * rng.standard_normal(idx.size)
        else:
            idx = rng.choice(spec.V, size=n_on, replace=False)
            vals = rng.standard_normal(n_on)
        B[t, idx] = spec.burst_amplitude_sd * sd[idx] * vals
    return B


def _motion(spec: SynthSpec, subject: int, run: int, times: np.ndarray):
    """Smooth random walk + respiratory pseudo-motion + steps at motion-locked bursts."""
    T = spec.T
    rng = _rng(spec, subject, run, _MOTION)
    scale = np.array([1, 1, 1, 1 / 50, 1 / 50, 1 / 50])  # rotations in rad (mm on a 50 mm sphere)
    steps = rng.standard_normal((T, 6)) * spec.walk_sd_mm
    kernel = np.hanning(7)
    kernel /= kernel.sum()
    walk = np.cumsum(np.apply_along_axis(np.convolve, 0, steps, kernel, mode="same"), axis=0)
    t = np.arange(T) * spec.tr_seconds
    phase = rng.uniform(0, 2 * np.pi)
    resp = np.sin(2 * np.pi * spec.resp_freq_hz * t + phase)
    weights = np.array([0.2, 1.0, 0.6, 0.3, 0.1, 0.1])
    rp = walk + spec.resp_amplitude_mm * np.outer(resp, weights)
    n_locked = int(round(spec.motion_locked_fraction * times.size))
    locked = np.zeros(times.size, bool)
    if n_locked:
        locked[rng.choice(times.size, size=n_locked, replace=False)] = True
    for b in times[locked]:
        s = b + spec.rp_lag
        if 0 <= s < T:
            d = rng.standard_normal(6)
            d *= spec.step_mm / np.linalg.norm(d)
            rp[s:] += d
    return RealignmentParams(rp * scale, spec.tr_seconds), locked


def generate_run(spec: SynthSpec, subject: int, run: int) -> SynthRun:
    Y, rois = _clean_run(spec, subject, run)
    times = draw_burst_times(spec, subject, run)
    labels = dict(subject_id=f"sub-{subject:02d}", session_id=f"ses-{run + 1:02d}", run_id=f"run-{run + 1:02d}")
    clean = ScanMatrix(Y, spec.tr_seconds, **labels)
    scan = clean if spec.burst_amplitude_sd == 0 else ScanMatrix(Y + _bursts(spec, subject, run, times), spec.tr_seconds, **labels)
    rp, locked = _motion(spec, subject, run, times)
    return SynthRun(subject, run, scan, clean, rp, rois, times, locked)


def generate(spec: SynthSpec) -> SynthData:
    """Generate every (subject, run) of ``spec`` deterministically."""
    runs = [generate_run(spec, s, r) for s in range(spec.n_subjects) for r in range(spec.n_runs)]
    parc = parcellation(spec)
    truth = GroundTruth(
        true_fc=[true_fc(spec, s) for s in range(spec.n_subjects)],
        burst_times={(x.subject, x.run): x.burst_times for x in runs},
        clean_scan={(x.subject, x.run): x.clean_scan for x in runs},
        parcellation=parc,
    )
    return SynthData(spec, runs, truth, parc)


def score_flags(flags, burst_times, halo: int = 1) -> dict:
    """Burst sensitivity and specificity of a flag vector.

    A burst counts as detected when any flag lies within ``halo`` volumes of
    it. Specificity is computed over volumes more than ``halo`` volumes from
    every burst.
    """
    if hasattr(flags, "threshold_spec"):
        flags = flags.flags
    flags = np.asarray(flags, dtype=bool)
    times = np.asarray(burst_times, dtype=int)
    T = flags.size
    if times.size and (times.min() < 0 or times.max() >= T):
        raise ValidationError("burst index out of range")
    near = np.zeros(T, bool)
    detected = 0
    for b in times:
        lo, hi = max(0, b - halo), min(T, b + halo + 1)
        near[lo:hi] = True
        detected += bool(flags[lo:hi].any())
    far = ~near
    sens = detected / times.size if times.size else float("nan")
    spec = 1.0 - flags[far].sum() / far.sum() if far.any() else float("nan")
    return {"sensitivity": float(sens), "specificity": float(spec), "n_bursts": int(times.size), "n_flagged": int(flags.sum())}
