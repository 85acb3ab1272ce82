"""Euclidean projection onto the l1 ball.

``project_rows`` is the sort-based soft-threshold routine used by the
learners. It works on a 2-D array so that many independent coefficient
vectors can be projected in one call; every row is handled exactly as the
1-D routine would handle it. ``l1_project_oracle`` is a sort-free bisection
on the threshold and shares no code with the main routine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ProjectionResult:
    v: np.ndarray
    lam: float
    was_interior: bool


def _check(u: np.ndarray, R: float) -> None:
    if not R > 0 or not np.isfinite(R):
        raise ValueError(f"radius R must be positive and finite, got {R!r}")
    if not np.all(np.isfinite(u)):
        raise ValueError("input vector has non-finite entries")


def project_rows(U: np.ndarray, R: float):
    """Project every row of ``U`` onto ``{v : ||v||_1 <= R}``.

    Returns ``(V, lam, interior)`` with per-row thresholds and interior flags.
    Rows already inside the ball are returned bit-for-bit unchanged.
    """
    a = np.abs(U)
    l1 = a.sum(axis=1)
    interior = l1 <= R
    if interior.all():
        return U.copy(), np.zeros(U.shape[0]), interior

    J = U.shape[1]
    srt = -np.sort(-a, axis=1)
    csum = np.cumsum(srt, axis=1)
    lam_tmp = (csum - R) / np.arange(1, J + 1)
    # pivot: first j with lam_tmp[j] >= a_(j+1), or the last index
    stop = np.empty(U.shape, dtype=bool)
    stop[:, :-1] = lam_tmp[:, :-1] >= srt[:, 1:]
    stop[:, -1] = True
    rho = np.argmax(stop, axis=1)
    lam = lam_tmp[np.arange(U.shape[0]), rho]
    lam = np.where(interior, 0.0, lam)

    V = np.sign(U) * np.maximum(a - lam[:, None], 0.0)
    V[interior] = U[interior]
    # a - lam cancels badly for large |u|; pull rounding overshoot back inside
    over = np.abs(V).sum(axis=1)
    fix = ~interior & (over > R)
    if fix.any():
        V[fix] *= (R / over[fix])[:, None]
        # shave ulps until the float sum is inside, so reprojection is a no-op
        while True:
            over = np.abs(V).sum(axis=1)
            fix = ~interior & (over > R)
            if not fix.any():
                break
            V[fix] *= 1.0 - 4.0 * np.finfo(np.float64).eps
    return V, lam, interior


def l1_project(u, R: float) -> ProjectionResult:
    """Project ``u`` onto the l1 ball of radius ``R`` (sort + soft-threshold)."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1:
        raise ValueError("u must be one-dimensional")
    _check(u, R)
    if u.size == 0:
        return ProjectionResult(u.copy(), 0.0, True)
    V, lam, interior = project_rows(u[None, :], R)
    return ProjectionResult(V[0], float(lam[0]), bool(interior[0]))


def l1_project_oracle(u, R: float, tol: float = 1e-12, max_iter: int = 500) -> np.ndarray:
    """Reference projection by bisection on the soft-threshold level.

    Solves ``sum(max(|u_i| - lam, 0)) = R`` for ``lam`` on ``[0, max|u_i|]``
    without sorting. Stops once the constraint residual is below ``tol`` or
    the bracket can no longer shrink in floating point.
    """
    u = np.asarray(u, dtype=np.float64)
    _check(u, R)
    a = np.abs(u)
    if a.sum() <= R:
        return u.copy()
    lo, hi = 0.0, float(a.max())
    lam = 0.5 * (lo + hi)
    for _ in range(max_iter):
        lam = 0.5 * (lo + hi)
        if not lo < lam < hi:
            break
        resid = np.maximum(a - lam, 0.0).sum() - R
        if abs(resid) <= tol:
            break
        if resid > 0:
            lo = lam
        else:
            hi = lam
    return np.sign(u) * np.maximum(a - lam, 0.0)
