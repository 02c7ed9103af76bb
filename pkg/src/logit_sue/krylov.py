"""Unpreconditioned GMRES driven only by operator applications."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class GmresResult:
    solution: np.ndarray
    relative_residual: float
    iterations: int
    converged: bool
    residual_history: list[float] = field(default_factory=list)


def _givens(a: float, b: float) -> tuple[float, float]:
    if b == 0.0:
        return 1.0, 0.0
    r = np.hypot(a, b)
    return a / r, b / r


def gmres(apply: Callable[[np.ndarray], np.ndarray], b: np.ndarray, tol: float,
          max_dim: int | None = None, max_restarts: int = 5) -> GmresResult:
    """Solve ``A x = b`` from ``x0 = 0``.

    Arnoldi uses modified Gram-Schmidt with a second pass when the new basis
    vector has lost orthogonality beyond 1e-8. The small least-squares
    problem is kept triangular with Givens rotations. If ``max_dim`` steps do
    not suffice the method restarts from the current iterate, at most
    ``max_restarts`` times. ``relative_residual`` is recomputed from scratch.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        raise ValueError("right-hand side is zero; the solution is trivially zero")
    if not 0.0 < tol < 1.0:
        raise ValueError("tol must lie in (0, 1)")
    max_dim = min(n, 200) if max_dim is None else max_dim
    if max_dim < 1:
        raise ValueError("max_dim must be >= 1")

    x = np.zeros(n)
    r = b.copy()
    history = [1.0]
    total = 0
    for _cycle in range(max_restarts + 1):
        beta = float(np.linalg.norm(r))
        if beta == 0.0:
            break
        V = np.zeros((max_dim + 1, n))
        H = np.zeros((max_dim + 1, max_dim))
        cs = np.zeros(max_dim)
        sn = np.zeros(max_dim)
        g = np.zeros(max_dim + 1)
        g[0] = beta
        V[0] = r / beta
        m = 0
        for jj in range(max_dim):
            w = np.array(apply(V[jj]), dtype=float)  # copy: apply may return its input
            total += 1
            for i in range(jj + 1):
                H[i, jj] = V[i] @ w
                w -= H[i, jj] * V[i]
            wn = float(np.linalg.norm(w))
            if wn > 0 and np.max(np.abs(V[:jj + 1] @ w)) > 1e-8 * wn:
                for i in range(jj + 1):
                    corr = V[i] @ w
                    H[i, jj] += corr
                    w -= corr * V[i]
                wn = float(np.linalg.norm(w))
            H[jj + 1, jj] = wn
            for i in range(jj):
                hi, hi1 = H[i, jj], H[i + 1, jj]
                H[i, jj] = cs[i] * hi + sn[i] * hi1
                H[i + 1, jj] = -sn[i] * hi + cs[i] * hi1
            cs[jj], sn[jj] = _givens(H[jj, jj], H[jj + 1, jj])
            H[jj, jj] = cs[jj] * H[jj, jj] + sn[jj] * H[jj + 1, jj]
            H[jj + 1, jj] = 0.0
            g[jj + 1] = -sn[jj] * g[jj]
            g[jj] = cs[jj] * g[jj]
            m = jj + 1
            history.append(abs(g[jj + 1]) / bnorm)
            breakdown = wn <= 1e-14 * beta
            if history[-1] <= tol or breakdown:
                break
            V[jj + 1] = w / wn
        y = np.linalg.solve(np.triu(H[:m, :m]), g[:m]) if m else np.zeros(0)
        x = x + V[:m].T @ y
        r = b - apply(x)
        rel = float(np.linalg.norm(r)) / bnorm
        if rel <= tol * (1 + 1e-10):
            return GmresResult(x, rel, total, True, history)
    rel = float(np.linalg.norm(b - apply(x))) / bnorm
    return GmresResult(x, rel, total, rel <= tol * (1 + 1e-10), history)
