"""One-sided (Hestenes) Jacobi singular values.

Columns are orthogonalised pairwise by plane rotations. Pairs are scheduled
round-robin so that each round touches disjoint columns and can be applied
as one vectorised update; a sweep is ``n - 1`` rounds covering every pair.
"""
from __future__ import annotations

import numpy as np

from .errors import ConvergenceError


def _round_robin(n):
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        rounds.append((np.array(players[:half]), np.array(players[::-1][:half])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_singular_values(a, tol=1e-15, max_sweeps=None, return_left=False):
    """Singular values of ``a`` in descending order.

    Works on the thin side: a wide matrix is transposed first. With
    ``return_left`` the orthonormalised columns (left singular vectors of the
    thin orientation, in matching order) are returned as well.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    if a.ndim != 2 or a.size == 0:
        raise ValueError("expected a non-empty 2-D matrix")
    if a.shape[1] > a.shape[0]:
        a = a.T.copy()
    m, n = a.shape
    if max_sweeps is None:
        max_sweeps = 100 * min(m, n)
    work = a if n % 2 == 0 else np.hstack([a, np.zeros((m, 1))])
    rounds = _round_robin(work.shape[1]) if work.shape[1] > 1 else []

    for sweep in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            up, uq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(active, c * t, 0.0)
            work[:, p] = c * up - s * uq
            work[:, q] = s * up + c * uq
        if not rotated:
            break
    else:
        raise ConvergenceError(f"Jacobi SVD did not converge within {max_sweeps} sweeps", iteration=max_sweeps)

    work = work[:, :n]
    sigma = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    if not return_left:
        return sigma
    safe = np.where(sigma > 0, sigma, 1.0)
    return sigma, work[:, order] / safe
