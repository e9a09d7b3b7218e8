"""Exact 1-D total-variation denoising (fused-lasso signal approximator).

Solves ``argmin_u 0.5*||u - b||^2 + lam * sum_t |u[t+1] - u[t]|`` with the
direct taut-string style algorithm of Condat (IEEE SPL 2013). The method is
exact up to floating-point rounding and runs in O(T) for typical inputs.
"""

from __future__ import annotations

import numpy as np


def tv_denoise(b, lam: float) -> np.ndarray:
    b = np.asarray(b, dtype=float).ravel()
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    n = b.size
    out = np.empty(n)
    if n == 0:
        return out
    if lam == 0 or n == 1:
        out[:] = b
        return out

    y = b.tolist()
    x = [0.0] * n
    k = k0 = kplus = kminus = 0
    umin, umax = lam, -lam
    vmin, vmax = y[0] - lam, y[0] + lam
    twolam = 2.0 * lam
    while True:
        while k == n - 1:
            if umin < 0.0:
                # vmin too high: negative jump
                while True:
                    x[k0] = vmin
                    k0 += 1
                    if k0 > kminus:
                        break
                k = kminus = k0
                vmin = y[k]
                umin = lam
                umax = vmin + umin - vmax
            elif umax > 0.0:
                # vmax too low: positive jump
                while True:
                    x[k0] = vmax
                    k0 += 1
                    if k0 > kplus:
                        break
                k = kplus = k0
                vmax = y[k]
                umax = -lam
                umin = vmax + umax - vmin
            else:
                vmin += umin / (k - k0 + 1)
                while True:
                    x[k0] = vmin
                    k0 += 1
                    if k0 > k:
                        break
                out[:] = x
                return out
        umin += y[k + 1] - vmin
        if umin < -lam:
            while True:
                x[k0] = vmin
                k0 += 1
                if k0 > kminus:
                    break
            k = kminus = kplus = k0
            vmin = y[k]
            vmax = vmin + twolam
            umin, umax = lam, -lam
            continue
        umax += y[k + 1] - vmax
        if umax > lam:
            while True:
                x[k0] = vmax
                k0 += 1
                if k0 > kplus:
                    break
            k = kminus = kplus = k0
            vmax = y[k]
            vmin = vmax - twolam
            umin, umax = lam, -lam
            continue
        k += 1
        if umin >= lam:
            kminus = k
            vmin += (umin - lam) / (kminus - k0 + 1)
            umin = lam
        if umax <= -lam:
            kplus = k
            vmax += (umax + lam) / (kplus - k0 + 1)
            umax = -lam


def tv_lambda_max(b) -> float:
    """Smallest penalty at which the TV solution is the constant mean(b)."""
    b = np.asarray(b, dtype=float).ravel()
    if b.size < 2:
        return 0.0
    return float(np.max(np.abs(np.cumsum(b - b.mean())[:-1])))


def tv_dual(b, u) -> np.ndarray:
    """Dual variable z with ``b - u = D^T z`` where ``(Du)_t = u_t - u_{t+1}``.

    At an optimum every |z_t| <= lam, and z_t = lam*sign(u_t - u_{t+1})
    wherever the solution jumps.
    """
    r = np.asarray(b, dtype=float) - np.asarray(u, dtype=float)
    return np.cumsum(r)[:-1]
