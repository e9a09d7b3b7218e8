"""Core containers for time-by-location scans and shared preprocessing helpers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAD_TO_SD = 1.4826
_MIN_SCALE = 1e-12


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class RankDeficiencyWarning(UserWarning):
    """Linearly dependent columns were dropped from a least-squares problem."""


def _as_matrix(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScanMatrix:
    """T x V data matrix (rows are volumes, columns are locations)."""

    values: np.ndarray
    tr_seconds: float = 1.0
    subject_id: str | None = None
    session_id: str | None = None
    run_id: str | None = None

    def __post_init__(self):
        values = _as_matrix(self.values, "scan")
        if values.shape[0] < 2:
            raise ValidationError("scan needs at least 2 volumes")
        if values.shape[1] < 1:
            raise ValidationError("scan needs at least 1 location")
        if not (self.tr_seconds > 0 and np.isfinite(self.tr_seconds)):
            raise ValidationError("tr_seconds must be positive")
        object.__setattr__(self, "values", values)

    @property
    def n_volumes(self) -> int:
        return self.values.shape[0]

    @property
    def n_locations(self) -> int:
        return self.values.shape[1]

    def with_values(self, values) -> "ScanMatrix":
        return ScanMatrix(
            values, self.tr_seconds, self.subject_id, self.session_id, self.run_id
        )


@dataclass(frozen=True)
class RealignmentParams:
    """T x 6 rigid-body motion trace.

    Columns 0-2 are translations in mm, columns 3-5 rotations in radians.
    """

    values: np.ndarray
    tr_seconds: float = 1.0

    def __post_init__(self):
        values = _as_matrix(self.values, "realignment parameters")
        if values.shape[1] != 6:
            raise ValidationError(
                f"realignment parameters need 6 columns, got {values.shape[1]}"
            )
        if not self.tr_seconds > 0:
            raise ValidationError("tr_seconds must be positive")
        object.__setattr__(self, "values", values)

    @property
    def n_volumes(self) -> int:
        return self.values.shape[0]

    @property
    def translations(self) -> np.ndarray:
        return self.values[:, :3]

    @property
    def rotations(self) -> np.ndarray:
        return self.values[:, 3:]


@dataclass(frozen=True)
class DctBasis:
    values: np.ndarray

    @property
    def K(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class StandardizedScan:
    """Robustly centered and scaled scan.

    ``values`` holds only the retained columns; ``dropped_columns`` lists the
    original indices of zero-variance locations that were removed.
    """

    values: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    dropped_columns: tuple[int, ...] = ()
    n_locations_original: int = field(default=0)

    @property
    def kept_columns(self) -> np.ndarray:
        dropped = set(self.dropped_columns)
        return np.array(
            [j for j in range(self.n_locations_original) if j not in dropped], dtype=int
        )

    def expand_map(self, spatial: np.ndarray) -> np.ndarray:
        """Re-insert zeros for dropped locations in a (Q, V_kept) spatial map."""
        spatial = np.atleast_2d(spatial)
        full = np.zeros((spatial.shape[0], self.n_locations_original))
        full[:, self.kept_columns] = spatial
        return full


def robust_standardize(scan: ScanMatrix | np.ndarray) -> StandardizedScan:
    """Center each column by its median and scale by MAD x 1.4826.

    Columns whose robust scale is below 1e-12 cannot be scaled and are
    dropped; their indices are kept so spatial maps can be re-expanded.
    """
    Y = scan.values if isinstance(scan, ScanMatrix) else _as_matrix(scan, "scan")
    center = np.median(Y, axis=0)
    scale = MAD_TO_SD * np.median(np.abs(Y - center), axis=0)
    keep = scale >= _MIN_SCALE
    if not np.any(keep):
        raise ValidationError("no usable locations")
    values = (Y[:, keep] - center[keep]) / scale[keep]
    dropped = tuple(int(j) for j in np.flatnonzero(~keep))
    return StandardizedScan(
        values=values,
        center=center[keep],
        scale=scale[keep],
        dropped_columns=dropped,
        n_locations_original=Y.shape[1],
    )


def dct_basis(T: int, K: int) -> DctBasis:
    """Unit-norm type-II DCT columns cos(pi*k*(t+0.5)/T) for k = 1..K."""
    if K < 1 or K >= T:
        raise ValidationError(f"need 1 <= K < T, got K={K}, T={T}")
    t = np.arange(T) + 0.5
    k = np.arange(1, K + 1)
    B = np.cos(np.pi * np.outer(t, k) / T)
    B /= np.linalg.norm(B, axis=0)
    return DctBasis(B)


def dct_max_frequency(T: int, K: int, tr_seconds: float) -> float:
    """Frequency (Hz) of the highest DCT column, K / (2 T tr)."""
    return K / (2.0 * T * tr_seconds)


def detrend(values: np.ndarray, n_dct: int = 4) -> np.ndarray:
    """Remove intercept and the first ``n_dct`` DCT trends from each column."""
    values = np.asarray(values, dtype=float)
    squeeze = values.ndim == 1
    Y = values[:, None] if squeeze else values
    T = Y.shape[0]
    cols = [np.full((T, 1), 1.0 / np.sqrt(T))]
    if n_dct > 0:
        cols.append(dct_basis(T, n_dct).values)
    B = np.hstack(cols)
    out = Y - B @ (B.T @ Y)
    return out[:, 0] if squeeze else out
