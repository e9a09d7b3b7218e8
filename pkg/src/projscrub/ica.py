"""FastICA with symmetric decorrelation and the log-cosh (tanh) contrast."""

from __future__ import annotations

import numpy as np


class IcaConvergenceError(RuntimeError):
    """FastICA failed to converge after all restarts.

    ``diagnostics`` holds per-attempt iteration counts and the final change
    in the unmixing rows, plus the last unmixing matrix tried.
    """

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def symmetric_decorrelation(W: np.ndarray) -> np.ndarray:
    """Return (W W^T)^{-1/2} W."""
    s, u = np.linalg.eigh(W @ W.T)
    s = np.clip(s, np.finfo(float).tiny, None)
    return (u * (1.0 / np.sqrt(s))) @ u.T @ W


def fastica(
    Z: np.ndarray,
    rng: np.random.Generator,
    max_iter: int = 500,
    tol: float = 1e-6,
    n_restarts: int = 5,
) -> tuple[np.ndarray, int, int]:
    """Estimate an orthogonal unmixing matrix for whitened data.

    Args:
        Z: (Q, N) whitened observations, rows uncorrelated with unit variance.
        rng: source of the random initial unmixing matrices.
        max_iter: fixed-point iterations per attempt.
        tol: stop when every row satisfies ``1 - |<w_new, w_old>| < tol``.
        n_restarts: number of random initializations tried before failing.

    Returns:
        (W, n_iter, attempt) with W an orthogonal (Q, Q) unmixing matrix.
    """
    Q, N = Z.shape
    history = []
    W = None
    best = None
    for attempt in range(n_restarts):
        W = symmetric_decorrelation(rng.standard_normal((Q, Q)))
        lim = np.inf
        for it in range(1, max_iter + 1):
            G = np.tanh(W @ Z)
            g_prime = 1.0 - G**2
            W_new = (G @ Z.T) / N - g_prime.mean(axis=1)[:, None] * W
            W_new = symmetric_decorrelation(W_new)
            lim = float(np.max(np.abs(np.abs(np.sum(W_new * W, axis=1)) - 1.0)))
            W = W_new
            if lim < tol:
                return W, it, attempt
        history.append({"attempt": attempt, "n_iter": max_iter, "final_change": lim})
        if best is None or lim < best[0]:
            best = (lim, W, attempt)
    raise IcaConvergenceError(
        f"FastICA did not converge in {n_restarts} attempts of {max_iter} iterations",
        {"attempts": history, "last_unmixing": W, "best_unmixing": best[1], "best_attempt": best[2]},
    )
