"""Parcel functional connectivity and FC quality metrics.

The metrics are ICC(3,1) reliability, fingerprint match rate, RMSE against
a reference FC, and mean absolute change (MAC) relative to random scrubbing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ScanMatrix, ValidationError

log = logging.getLogger(__name__)

R_CLIP = 1.0 - 1e-12


@dataclass(frozen=True)
class Parcellation:
    """Assignment of each location to a parcel id in 1..P."""

    assignment: np.ndarray
    network_of: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=int).ravel()
        object.__setattr__(self, "assignment", a)
        ids = np.unique(a)
        if ids.size < 2:
            raise ValidationError("parcellation needs at least 2 parcels")
        if ids[0] < 1 or not np.array_equal(ids, np.arange(1, ids[-1] + 1)):
            raise ValidationError("parcel ids must cover 1..P with no empty parcel")

    @property
    def P(self) -> int:
        return int(self.assignment.max())

    @classmethod
    def blocks(cls, V: int, P: int) -> "Parcellation":
        """Contiguous near-equal blocks of locations."""
        return cls(np.minimum(np.arange(V) * P // V, P - 1) + 1)

    def network_mask(self, network) -> np.ndarray:
        """P x P boolean mask of connections with both parcels in ``network``."""
        members = np.array([self.network_of.get(p) == network for p in range(1, self.P + 1)])
        return np.outer(members, members)


@dataclass(frozen=True)
class FcMatrix:
    """Symmetric P x P Fisher-z connectivity matrix; the diagonal is unused (0)."""

    z: np.ndarray
    subject: str | None = None
    session: str | None = None
    run: str | None = None
    n_volumes_used: int = 0

    @property
    def P(self) -> int:
        return self.z.shape[0]

    def upper(self, mask: np.ndarray | None = None) -> np.ndarray:
        iu = np.triu_indices(self.P, 1)
        vals = self.z[iu]
        if mask is not None:
            vals = vals[np.asarray(mask, bool)[iu]]
        return vals

    def sidecar(self) -> dict:
        return {
            "subject": self.subject,
            "session": self.session,
            "run": self.run,
            "n_volumes_used": self.n_volumes_used,
            "P": self.P,
        }


def fisher_z(r) -> np.ndarray:
    return np.arctanh(np.clip(r, -R_CLIP, R_CLIP))


def parcel_means(values: np.ndarray, parc: Parcellation) -> np.ndarray:
    if values.shape[1] != parc.assignment.size:
        raise ValidationError("parcellation length does not match number of locations")
    onehot = np.zeros((parc.assignment.size, parc.P))
    onehot[np.arange(parc.assignment.size), parc.assignment - 1] = 1.0
    return values @ onehot / onehot.sum(axis=0)


def fc_from_timeseries(ts: np.ndarray, **labels) -> FcMatrix:
    """Fisher-z Pearson correlation between columns of a T x P matrix."""
    ts = np.asarray(ts, dtype=float)
    d = ts - ts.mean(axis=0)
    norms = np.sqrt(np.sum(d * d, axis=0))
    const = norms <= 1e-12 * max(1.0, float(np.max(np.abs(ts))))
    if np.any(const):
        log.warning("constant parcel timeseries %s; FC rows set to 0", list(np.flatnonzero(const) + 1))
    safe = np.where(const, 1.0, norms)
    r = (d / safe).T @ (d / safe)
    z = fisher_z(r)
    z[const, :] = 0.0
    z[:, const] = 0.0
    z = 0.5 * (z + z.T)
    np.fill_diagonal(z, 0.0)
    return FcMatrix(z, n_volumes_used=ts.shape[0], **labels)


def fc(scan: ScanMatrix | np.ndarray, parc: Parcellation, flags=None) -> FcMatrix:
    """FC of parcel-mean timeseries over unflagged volumes."""
    Y = scan.values if isinstance(scan, ScanMatrix) else np.asarray(scan, dtype=float)
    keep = np.ones(Y.shape[0], bool) if flags is None else ~np.asarray(flags, bool)
    if keep.sum() < 3:
        raise ValidationError("FC needs at least 3 unflagged volumes")
    labels = {}
    if isinstance(scan, ScanMatrix):
        labels = {"subject": scan.subject_id, "session": scan.session_id, "run": scan.run_id}
    return fc_from_timeseries(parcel_means(Y[keep], parc), **labels)


# --- reliability ---------------------------------------------------------


def icc31(z_values) -> float | np.ndarray:
    """ICC(3,1) = (MSB - MSW) / (MSB + (R-1) MSW).

    ``z_values`` has shape (S, R) for one connection or (S, R, P) for P
    connections at once (returns a length-P array).
    """
    z = np.asarray(z_values, dtype=float)
    if z.ndim < 2 or z.shape[0] < 2 or z.shape[1] < 2:
        raise ValidationError("ICC needs at least 2 subjects and 2 runs")
    S, R = z.shape[:2]
    subj_mean = z.mean(axis=1)
    grand = subj_mean.mean(axis=0)
    msb = R / (S - 1) * np.sum((subj_mean - grand) ** 2, axis=0)
    msw = np.sum((z - subj_mean[:, None]) ** 2, axis=(0, 1)) / (S * (R - 1))
    denom = msb + (R - 1) * msw
    if np.any(denom <= 0):
        raise ValidationError("degenerate variance")
    out = (msb - msw) / denom
    return float(out) if np.ndim(out) == 0 else out


def mean_icc(fcs_by_subject: Sequence[Sequence[FcMatrix]], mask=None) -> float:
    """Mean ICC over connections; ``fcs_by_subject[s][r]`` is subject s, run r."""
    z = np.array([[f.upper(mask) for f in runs] for runs in fcs_by_subject])
    return float(np.mean(icc31(z)))


# --- fingerprinting ------------------------------------------------------


def _pearson_rows(q: np.ndarray, db: np.ndarray) -> np.ndarray:
    qc = q - q.mean()
    dc = db - db.mean(axis=1, keepdims=True)
    denom = np.linalg.norm(qc) * np.linalg.norm(dc, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = (dc @ qc) / denom
    return np.where(np.isfinite(sims), sims, -np.inf)


def fingerprint_matches(
    database: Sequence[FcMatrix], query: Sequence[FcMatrix], connection_subset=None, tie_tol: float = 1e-12
) -> np.ndarray:
    """Per-query match indicator (ties for the best similarity count as non-matches)."""
    if not database or not query:
        raise ValidationError("fingerprinting needs non-empty database and query sets")
    P = database[0].P
    mask = np.ones((P, P), bool) if connection_subset is None else np.asarray(connection_subset, bool)
    if np.sum(np.triu(mask, 1)) < 2:
        raise ValidationError("connection subset selects fewer than 2 connections")
    db = np.array([f.upper(mask) for f in database])
    db_subjects = [f.subject for f in database]
    out = np.zeros(len(query), bool)
    for i, qf in enumerate(query):
        sims = _pearson_rows(qf.upper(mask), db)
        best = np.max(sims)
        winners = np.flatnonzero(sims >= best - tie_tol) if np.isfinite(best) else []
        out[i] = len(winners) == 1 and db_subjects[winners[0]] == qf.subject
    return out


def fingerprint(
    database: Sequence[FcMatrix], query: Sequence[FcMatrix], connection_subset=None, swap: bool = False
) -> float:
    """Fraction of queries whose most similar database FC is the same subject.

    With ``swap`` the roles are also exchanged and the two rounds pooled.
    """
    m = fingerprint_matches(database, query, connection_subset)
    if swap:
        m = np.concatenate([m, fingerprint_matches(query, database, connection_subset)])
    return float(np.mean(m))


# --- validity ------------------------------------------------------------


def rmse_validity(estimates, truth) -> float:
    """Mean over (session, subject) of the root-mean-square error over connections.

    Both inputs have shape (A, S, P).
    """
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValidationError(f"shape mismatch {est.shape} vs {tru.shape}")
    if est.ndim == 1:
        est, tru = est[None, None], tru[None, None]
    elif est.ndim == 2:
        est, tru = est[None], tru[None]
    per = np.sqrt(np.mean((est - tru) ** 2, axis=-1))
    return float(np.mean(per))


# --- MAC -----------------------------------------------------------------


def mac(fc_scrubbed, fc_random) -> float:
    """Mean absolute change relative to random scrubbing.

    ``fc_scrubbed`` has shape (R, S, P); ``fc_random`` has shape (R, S, P, Q)
    with Q random-scrubbing permutations of matching censor counts.
    """
    z = np.asarray(fc_scrubbed, dtype=float)
    zr = np.asarray(fc_random, dtype=float)
    if zr.ndim != z.ndim + 1 or zr.shape[:-1] != z.shape:
        raise ValidationError("fc_random must add a trailing permutation axis to fc_scrubbed")
    if zr.shape[-1] < 1:
        raise ValidationError("MAC needs at least one random permutation")
    delta = np.mean(z[..., None] - zr, axis=-1)
    return float(np.mean(np.abs(delta.mean(axis=0))))


def random_flags(T: int, n_censor: int, rng: np.random.Generator, candidates=None) -> np.ndarray:
    """Boolean vector with ``n_censor`` volumes drawn uniformly without replacement."""
    pool = np.arange(T) if candidates is None else np.asarray(candidates)
    if n_censor > pool.size:
        raise ValidationError("cannot censor more volumes than available")
    flags = np.zeros(T, bool)
    flags[rng.choice(pool, size=n_censor, replace=False)] = True
    return flags


def random_scrub_fc(
    residual_fn, parc: Parcellation, T: int, n_censor: int, n_perm: int, rng: np.random.Generator
) -> np.ndarray:
    """Upper-triangle FC for ``n_perm`` random scrubbings; returns (P_pairs, n_perm).

    ``residual_fn(flags)`` must return the cleaned T x V data for the given
    flags (e.g. a spike regression of the original scan).
    """
    if n_perm < 1:
        raise ValidationError("need at least one permutation")
    out = []
    for _ in range(n_perm):
        flags = random_flags(T, n_censor, rng)
        out.append(fc(residual_fn(flags), parc, flags).upper())
    return np.array(out).T
