"""Projection of a standardized scan onto candidate artifact directions.

Three decompositions are provided (PCA, spatial FastICA and FusedPCA), a
dimension criterion, the excess-kurtosis statistic and its Gaussian null,
and selection of high-kurtosis components.
"""

from __future__ import annotations

import functools
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import stats
from scipy.sparse.linalg import svds

from .data import StandardizedScan, ValidationError, detrend
from .ica import IcaConvergenceError, fastica
from .tv import tv_denoise, tv_lambda_max

log = logging.getLogger(__name__)

METHODS = ("pca", "ica", "fusedpca")
ASYMPTOTIC_MIN_T = 1000


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ProjectionResult:
    timecourses: np.ndarray  # T x Q
    spatial_maps: np.ndarray  # Q x V
    singular_values: np.ndarray | None
    method: str
    kurtosis: np.ndarray
    selected: tuple[int, ...] = ()
    converged: bool = True
    seed: int | None = None
    unmixing: np.ndarray | None = None  # ICA only: Q x T map from data to sources
    objective_history: list = field(default_factory=list, compare=False, repr=False)

    @property
    def Q(self) -> int:
        return self.timecourses.shape[1]

    @property
    def T(self) -> int:
        return self.timecourses.shape[0]

    @property
    def selected_timecourses(self) -> np.ndarray:
        return self.timecourses[:, list(self.selected)]

    def sidecar(self) -> dict:
        return {
            "method": self.method,
            "Q": self.Q,
            "kurtosis": [float(k) for k in self.kurtosis],
            "selected": list(self.selected),
            "seed": self.seed,
            "converged": self.converged,
        }


@dataclass(frozen=True)
class KurtosisNull:
    T: int
    quantile_p99: float
    source: str  # "monte_carlo" or "asymptotic"
    n_reps: int | None = None
    seed: int | None = None


# --- dimension selection -------------------------------------------------


@dataclass(frozen=True)
class VarianceFraction:
    """Smallest Q whose leading components explain at least ``fraction`` of the variance."""

    fraction: float = 0.5

    def __call__(self, singular_values: np.ndarray, shape) -> int:
        if not 0 < self.fraction < 1:
            raise ValidationError("variance fraction must lie in (0, 1)")
        power = singular_values**2
        cum = np.cumsum(power) / power.sum()
        return int(np.searchsorted(cum, self.fraction - 1e-12) + 1)


@dataclass(frozen=True)
class FixedDimension:
    Q: int

    def __call__(self, singular_values: np.ndarray, shape) -> int:
        if not 1 <= self.Q < min(shape):
            raise ValidationError(f"fixed Q must satisfy 1 <= Q < {min(shape)}")
        return self.Q


# Any callable (singular_values, shape) -> int can be used as a criterion;
# a probabilistic-PCA criterion would slot in here.
DimensionCriterion = Callable[[np.ndarray, tuple], int]


def _values(scan) -> np.ndarray:
    return scan.values if hasattr(scan, "values") else np.asarray(scan, dtype=float)


def _numerical_rank(s: np.ndarray, shape) -> int:
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > s[0] * max(shape) * np.finfo(float).eps))


def select_dimension(
    scan: StandardizedScan | np.ndarray, criterion: DimensionCriterion = VarianceFraction(0.5)
) -> int:
    Y = _values(scan)
    s = np.linalg.svd(Y, compute_uv=False)
    rank = _numerical_rank(s, Y.shape)
    if rank == 0:
        raise ValidationError("degenerate scan: rank 0")
    return min(int(criterion(s[:rank], Y.shape)), rank)


# --- kurtosis ------------------------------------------------------------


def kurtosis(x) -> float:
    """Excess kurtosis (1/N) sum(((x - mean)/s)^4) - 3, with s the N-1 sample SD."""
    x = np.asarray(x, dtype=float).ravel()
    if x.size < 4:
        raise ValidationError("kurtosis needs at least 4 values")
    d = x - x.mean()
    s2 = np.dot(d, d) / (x.size - 1)
    if not s2 > 0:
        raise ValidationError("kurtosis undefined for zero variance")
    return float(np.mean((d * d / s2) ** 2) - 3.0)


def _kurtosis_rows(X: np.ndarray) -> np.ndarray:
    d = X - X.mean(axis=-1, keepdims=True)
    s2 = np.sum(d * d, axis=-1, keepdims=True) / (X.shape[-1] - 1)
    return np.mean((d * d / s2) ** 2, axis=-1) - 3.0


def _component_kurtosis(timecourses: np.ndarray) -> np.ndarray:
    out = np.empty(timecourses.shape[1])
    for q in range(timecourses.shape[1]):
        try:
            out[q] = kurtosis(timecourses[:, q])
        except ValidationError:
            out[q] = -3.0  # constant timecourse, never selected
    return out


def kurtosis_moments(T: int) -> tuple[float, float, float, float]:
    """Exact mean, variance, skewness and excess kurtosis of the sampling
    distribution of ``kurtosis`` for i.i.d. Gaussian samples of size T.

    Uses the classical exact moments of b2 = m4/m2^2 (Fisher 1930, Pearson
    1931); ``kurtosis`` equals ((T-1)/T)^2 * b2 - 3.
    """
    n = float(T)
    mean_b2 = 3.0 * (n - 1) / (n + 1)
    var_b2 = 24.0 * n * (n - 2) * (n - 3) / ((n + 1) ** 2 * (n + 3) * (n + 5))
    skew = (
        6.0 * (n * n - 5 * n + 2) / ((n + 7) * (n + 9))
        * np.sqrt(6.0 * (n + 3) * (n + 5) / (n * (n - 2) * (n - 3)))
    )
    exkurt = (
        36.0
        * (15 * n**6 - 36 * n**5 - 628 * n**4 + 982 * n**3 + 5777 * n**2 - 6402 * n + 900)
        / (n * (n - 3) * (n - 2) * (n + 7) * (n + 9) * (n + 11) * (n + 13))
    )
    c = ((n - 1) / n) ** 2
    return c * mean_b2 - 3.0, c * c * var_b2, float(skew), float(exkurt)


def fisher_variance(T: int) -> float:
    n = float(T)
    return 24.0 * n * (n - 2) * (n - 3) / ((n + 1) ** 2 * (n + 3) * (n + 5))


def asymptotic_kurtosis_quantile(T: int, p: float = 0.99, approximation: str = "cornish_fisher") -> float:
    """Large-sample quantile of the Gaussian kurtosis null.

    ``"normal"``: N(0, Fisher variance). ``"cornish_fisher"``: normal quantile
    corrected with the exact mean, variance, skewness and kurtosis of the
    sampling distribution (third-order expansion).
    """
    z = stats.norm.ppf(p)
    if approximation == "normal":
        return float(z * np.sqrt(fisher_variance(T)))
    if approximation != "cornish_fisher":
        raise ValueError(f"unknown approximation {approximation!r}")
    mean, var, g1, g2 = kurtosis_moments(T)
    w = (
        z
        + (z * z - 1) * g1 / 6
        + (z**3 - 3 * z) * g2 / 24
        - (2 * z**3 - 5 * z) * g1 * g1 / 36
    )
    return float(mean + w * np.sqrt(var))


@functools.lru_cache(maxsize=64)
def _mc_quantile(T: int, n_reps: int, seed: int, p: float) -> float:
    rng = np.random.default_rng(seed)
    chunk = max(1, min(n_reps, 4_000_000 // T))
    vals = np.empty(n_reps)
    done = 0
    while done < n_reps:
        m = min(chunk, n_reps - done)
        vals[done : done + m] = _kurtosis_rows(rng.standard_normal((m, T)))
        done += m
    return float(np.quantile(np.sort(vals), p))


def kurtosis_null_p99(
    T: int,
    n_reps: int = 100_000,
    seed: int = 0,
    approximation: str = "cornish_fisher",
    force: str | None = None,
) -> KurtosisNull:
    """0.99 quantile of the kurtosis of T i.i.d. Gaussian values.

    Monte Carlo below T = 1000, large-sample approximation from there on;
    ``force`` ("monte_carlo" or "asymptotic") overrides the switch.
    """
    if T < 20:
        raise ValidationError("kurtosis null needs T >= 20")
    source = force or ("asymptotic" if T >= ASYMPTOTIC_MIN_T else "monte_carlo")
    if source == "asymptotic":
        return KurtosisNull(T, asymptotic_kurtosis_quantile(T, 0.99, approximation), "asymptotic", None, seed)
    return KurtosisNull(T, _mc_quantile(int(T), int(n_reps), int(seed), 0.99), "monte_carlo", n_reps, seed)


def select_artifact_components(
    proj: ProjectionResult, null: KurtosisNull, detrend_components: bool = False, n_dct: int = 4
) -> ProjectionResult:
    """Flag components whose timecourse kurtosis exceeds the null 0.99 quantile.

    With ``detrend_components`` the timecourses are first stripped of mean and
    DCT trends; the detrended timecourses replace the originals so that
    leverage is computed on the same series the kurtosis was measured on.
    """
    if null.T != proj.T:
        raise ValidationError(f"null computed for T={null.T}, projection has T={proj.T}")
    timecourses = proj.timecourses
    kurt = proj.kurtosis
    if detrend_components:
        timecourses = detrend(timecourses, n_dct)
        kurt = _component_kurtosis(timecourses)
    selected = tuple(int(q) for q in np.flatnonzero(kurt > null.quantile_p99))
    return replace(proj, timecourses=timecourses, kurtosis=kurt, selected=selected)


# --- decompositions ------------------------------------------------------


def _sign_fix(timecourses: np.ndarray, maps: np.ndarray, *extra):
    """Flip each component so its largest-magnitude timecourse entry is positive."""
    idx = np.argmax(np.abs(timecourses), axis=0)
    signs = np.sign(timecourses[idx, np.arange(timecourses.shape[1])])
    signs[signs == 0] = 1.0
    out = [timecourses * signs, maps * signs[:, None]]
    for e in extra:
        out.append(None if e is None else e * signs[:, None])
    return out


def pca_project(scan: StandardizedScan | np.ndarray, Q: int) -> ProjectionResult:
    Y = _values(scan)
    U, s, Vt = np.linalg.svd(Y, full_matrices=False)
    rank = _numerical_rank(s, Y.shape)
    if not 1 <= Q <= rank:
        raise ValidationError(f"Q={Q} outside 1..rank={rank}")
    tc, maps = _sign_fix(U[:, :Q], s[:Q, None] * Vt[:Q])
    return ProjectionResult(tc, maps, s[:Q].copy(), "pca", _component_kurtosis(tc))


def ica_project(
    scan: StandardizedScan | np.ndarray,
    Q: int,
    seed: int = 0,
    center_space: bool = True,
    max_iter: int = 500,
    tol: float = 1e-6,
    n_restarts: int = 5,
    strict: bool = True,
) -> ProjectionResult:
    """Spatial ICA: whiten to Q dimensions by SVD, then FastICA over locations.

    Timecourses are the mixing-matrix columns, ordered by decreasing variance.
    Each volume's spatial mean is removed first when ``center_space`` is set.
    Raises ``IcaConvergenceError`` if FastICA fails on every restart; with
    ``strict=False`` the attempt with the smallest final change is kept
    instead, a ConvergenceWarning is emitted and ``converged`` is False.
    """
    Y = _values(scan)
    if center_space:
        Y = Y - Y.mean(axis=1, keepdims=True)
    T, V = Y.shape
    U, s, Vt = np.linalg.svd(Y, full_matrices=False)
    rank = _numerical_rank(s, Y.shape)
    if not 1 <= Q <= rank:
        raise ValidationError(f"Q={Q} outside 1..rank={rank}")
    Z = np.sqrt(V) * Vt[:Q]
    converged = True
    try:
        W, _, _ = fastica(Z, np.random.default_rng(seed), max_iter, tol, n_restarts)
    except IcaConvergenceError as err:
        if strict:
            raise
        warnings.warn(f"{err}; keeping best iterate", ConvergenceWarning, stacklevel=2)
        W, converged = err.diagnostics["best_unmixing"], False
    sources = W @ Z
    mixing = (U[:, :Q] * s[:Q]) @ W.T / np.sqrt(V)
    unmixing = W @ (np.sqrt(V) * (U[:, :Q] / s[:Q]).T)
    order = np.argsort(-mixing.var(axis=0), kind="stable")
    mixing, sources, unmixing = mixing[:, order], sources[order], unmixing[order]
    tc, maps, unmixing = _sign_fix(mixing, sources, unmixing)
    return ProjectionResult(
        tc, maps, None, "ica", _component_kurtosis(tc), converged=converged, seed=seed, unmixing=unmixing
    )


def _leading_right_vector(X: np.ndarray) -> np.ndarray:
    if min(X.shape) <= 1000:
        return np.linalg.svd(X, full_matrices=False)[2][0]
    _, _, vt = svds(X, k=1, v0=np.ones(X.shape[1]) / np.sqrt(X.shape[1]))
    return vt[0]


def fusedpca_objective(X: np.ndarray, u: np.ndarray, v: np.ndarray, kappa: float) -> float:
    """-u'Xv + u'u/2 + kappa * ||Du||_1."""
    return float(-u @ (X @ v) + 0.5 * u @ u + kappa * np.sum(np.abs(np.diff(u))))


def fusedpca_project(
    scan: StandardizedScan | np.ndarray,
    Q: int,
    kappa: float,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> ProjectionResult:
    """Deflation PCA with a total-variation penalty on each temporal factor.

    For each component, v starts at the leading right singular vector of the
    deflated matrix, then u <- TV-denoise(X v, kappa) and v <- X'u/||X'u||
    alternate until the relative change in (u, v) falls below ``tol``. The
    unit-normalized u is used for the scale lambda = u'Xv and for deflation.
    Hitting ``max_iter`` emits a ConvergenceWarning and keeps the last
    iterate (``converged`` is then False).
    """
    if kappa < 0:
        raise ValidationError("kappa must be nonnegative")
    X = np.array(_values(scan), dtype=float)
    T, V = X.shape
    if not 1 <= Q <= min(T, V):
        raise ValidationError(f"Q={Q} outside 1..{min(T, V)}")
    us, vs, lams, histories = [], [], [], []
    converged_all = True
    for k in range(Q):
        v = _leading_right_vector(X)
        u = tv_denoise(X @ v, kappa)
        hist = [fusedpca_objective(X, u, v, kappa)]
        converged = False
        for _ in range(max_iter):
            Xtu = X.T @ u
            nrm = np.linalg.norm(Xtu)
            if nrm == 0:
                converged = True
                break
            v_new = Xtu / nrm
            hist.append(fusedpca_objective(X, u, v_new, kappa))
            u_new = tv_denoise(X @ v_new, kappa)
            hist.append(fusedpca_objective(X, u_new, v_new, kappa))
            du = np.linalg.norm(u_new - u) / max(np.linalg.norm(u), np.finfo(float).tiny)
            dv = np.linalg.norm(v_new - v)
            u, v = u_new, v_new
            if max(du, dv) < tol:
                converged = True
                break
        if not converged:
            converged_all = False
            warnings.warn(
                f"FusedPCA component {k + 1} hit max_iter={max_iter}", ConvergenceWarning, stacklevel=2
            )
        nu = np.linalg.norm(u)
        un = u / nu if nu > 0 else np.full(T, 1.0 / np.sqrt(T))
        lam = float(un @ X @ v)
        if lam < 0:
            un, lam = -un, -lam
        X -= lam * np.outer(un, v)
        us.append(un)
        vs.append(v)
        lams.append(lam)
        histories.append(hist)
    tc = np.column_stack(us)
    maps = np.array(lams)[:, None] * np.vstack(vs)
    tc, maps = _sign_fix(tc, maps)
    return ProjectionResult(
        tc,
        maps,
        np.array(lams),
        "fusedpca",
        _component_kurtosis(tc),
        converged=converged_all,
        objective_history=histories,
    )


def project(
    scan: StandardizedScan | np.ndarray,
    method: str,
    Q: int,
    seed: int = 0,
    kappa: float | None = None,
    strict: bool = True,
) -> ProjectionResult:
    """Dispatch to one of the three decompositions by name."""
    if method == "pca":
        return pca_project(scan, Q)
    if method == "ica":
        return ica_project(scan, Q, seed=seed, strict=strict)
    if method == "fusedpca":
        if kappa is None:
            kappa = default_fusedpca_kappa(scan)
        return fusedpca_project(scan, Q, kappa)
    raise ValidationError(f"unknown projection method {method!r}")


def default_fusedpca_kappa(scan) -> float:
    """A data-scaled penalty: 1/20 of the TV level that flattens the first PC score."""
    Y = _values(scan)
    v = _leading_right_vector(Y)
    return 0.05 * tv_lambda_max(Y @ v)
