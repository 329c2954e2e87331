"""Finite-difference helpers and a persistent quasi-Newton step used by the
EM loop."""

from __future__ import annotations

import numpy as np


def central_diff_grad(f, x, rel_step=1e-6, abs_step=None):
    """Central-difference gradient with per-coordinate steps
    ``h_j = max(abs_step, rel_step * |x_j|)``."""
    x = np.asarray(x, dtype=float)
    abs_step = abs_step if abs_step is not None else rel_step
    g = np.zeros_like(x)
    for j in range(x.size):
        h = max(abs_step, rel_step * abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        g[j] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def central_diff_hessian(f, x, step=1e-4):
    """Symmetrised central-difference Hessian with per-coordinate steps
    ``h_j = max(step, step * |x_j|)``."""
    x = np.asarray(x, dtype=float)
    n = x.size
    h = np.maximum(step, step * np.abs(x))
    hess = np.zeros((n, n))
    f0 = f(x)
    for j in range(n):
        xp, xm = x.copy(), x.copy()
        xp[j] += h[j]
        xm[j] -= h[j]
        hess[j, j] = (f(xp) - 2.0 * f0 + f(xm)) / h[j] ** 2
    for j in range(n):
        for k in range(j + 1, n):
            xpp, xpm, xmp, xmm = x.copy(), x.copy(), x.copy(), x.copy()
            xpp[[j, k]] += [h[j], h[k]]
            xpm[[j, k]] += [h[j], -h[k]]
            xmp[[j, k]] += [-h[j], h[k]]
            xmm[[j, k]] += [-h[j], -h[k]]
            val = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (4.0 * h[j] * h[k])
            hess[j, k] = hess[k, j] = val
    return 0.5 * (hess + hess.T)


class BfgsAscentStep:
    """One BFGS ascent step at a time, keeping the inverse-Hessian
    approximation across calls (used for the M-step updates)."""

    def __init__(self, n: int):
        self.h_inv = np.eye(n)
        self._prev = None   # (x, grad)

    def step(self, x, value, grad, f, max_backtrack=25):
        """Take one line-searched quasi-Newton step uphill on ``f``.

        ``value`` and ``grad`` are f and its gradient at ``x``.  Returns the
        new point (possibly ``x`` itself when no uphill step is found).
        """
        x = np.asarray(x, dtype=float)
        grad = np.asarray(grad, dtype=float)
        if self._prev is not None:
            x_old, g_old = self._prev
            s = x - x_old
            yv = grad - g_old
            sy = float(np.dot(s, yv))
            if sy < -1e-10 * np.linalg.norm(s) * np.linalg.norm(yv):
                rho = 1.0 / sy
                eye = np.eye(x.size)
                left = eye - rho * np.outer(s, yv)
                self.h_inv = left @ self.h_inv @ left.T + abs(rho) * np.outer(s, s)
        direction = self.h_inv @ grad
        if not np.all(np.isfinite(direction)) or np.dot(direction, grad) <= 0:
            self.h_inv = np.eye(x.size)
            direction = grad
        if self._prev is None:
            # First call: unit-scale the ascent direction so the line search
            # starts from a sane trial step.
            direction = direction / max(1.0, np.linalg.norm(direction))
        step = 1.0
        for _ in range(max_backtrack):
            cand = x + step * direction
            val = f(cand)
            if np.isfinite(val) and val > value:
                self._prev = (x, grad)
                return cand, val
            step *= 0.5
        self._prev = (x, grad)
        return x, value
