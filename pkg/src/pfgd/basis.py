"""Centered orthonormal bases on [0, 1] and the additive basis vector.

The coefficient layout used throughout the package is fixed here: slot 0 is
the constant function, followed by ``p`` contiguous blocks of length ``J``,
block ``k`` holding ``psi_1(x_k), ..., psi_J(x_k)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

SQRT2 = math.sqrt(2.0)


class DomainError(ValueError):
    """Raised when a covariate lies outside the unit interval."""


class BasisFamily(str, enum.Enum):
    TRIGONOMETRIC_CENTERED = "trigonometric_centered"


def _trig_block(x: np.ndarray, J: int) -> np.ndarray:
    # j = 2k-1 -> sqrt2 sin(2 pi k x), j = 2k -> sqrt2 cos(2 pi k x)
    K = (J + 1) // 2
    freqs = 2.0 * np.pi * np.arange(1, K + 1, dtype=np.float64)
    ang = x[..., None] * freqs
    out = np.empty(x.shape + (2 * K,), dtype=np.float64)
    out[..., 0::2] = SQRT2 * np.sin(ang)
    out[..., 1::2] = SQRT2 * np.cos(ang)
    return out[..., :J]


_BLOCKS = {BasisFamily.TRIGONOMETRIC_CENTERED: _trig_block}
_SUP_NORMS = {BasisFamily.TRIGONOMETRIC_CENTERED: SQRT2}


@dataclass(frozen=True)
class BasisSpec:
    """Per-dimension centered orthonormal basis shared by all ``p`` covariates.

    Parameters
    ----------
    dims_p : int
        Number of covariates.
    family : BasisFamily
        Univariate family. Only the centered trigonometric family ships.
    """

    dims_p: int
    family: BasisFamily = BasisFamily.TRIGONOMETRIC_CENTERED

    def __post_init__(self):
        if int(self.dims_p) != self.dims_p or self.dims_p < 1:
            raise ValueError(f"dims_p must be a positive integer, got {self.dims_p!r}")
        object.__setattr__(self, "family", BasisFamily(self.family))

    @property
    def sup_norm_M(self) -> float:
        return _SUP_NORMS[self.family]

    def block(self, x, J: int) -> np.ndarray:
        """Evaluate ``psi_1..psi_J`` at every entry of ``x``; shape ``x.shape + (J,)``."""
        if J < 1:
            raise ValueError(f"J must be >= 1, got {J}")
        x = np.asarray(x, dtype=np.float64)
        check_unit(x)
        return _BLOCKS[self.family](x, int(J))

    def design(self, X, J: int) -> np.ndarray:
        """Basis vectors for an array of points ``X`` of shape ``(..., p)``.

        Returns an array of shape ``(..., 1 + p*J)`` in the package layout.
        """
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.dims_p:
            raise ValueError(f"expected {self.dims_p} covariates, got {X.shape[-1]}")
        B = self.block(X, J)
        lead = X.shape[:-1]
        out = np.empty(lead + (1 + self.dims_p * J,), dtype=np.float64)
        out[..., 0] = 1.0
        out[..., 1:] = B.reshape(lead + (self.dims_p * J,))
        return out


def check_unit(x) -> None:
    x = np.asarray(x)
    # NaN fails both comparisons
    ok = (x >= 0.0) & (x <= 1.0)
    if not np.all(ok):
        bad = np.asarray(x)[~ok].ravel()
        raise DomainError(f"covariate outside [0, 1]: {float(bad[0])!r}")


def eval_univariate(spec: BasisSpec, j: int, x: float) -> float:
    """Value of the ``j``-th basis function (``j >= 1``) at ``x``."""
    if int(j) != j or j < 1:
        raise ValueError(f"basis index must be a positive integer, got {j!r}")
    j = int(j)
    return float(spec.block(np.array([x], dtype=np.float64), j)[0, j - 1])


def eval_basis_vector(spec: BasisSpec, J: int, x) -> np.ndarray:
    """The ``(1 + p*J)``-vector ``(1, psi_1(x_1), ..., psi_J(x_p))``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("x must be a single point of shape (p,)")
    return spec.design(x, J)


def _trapezoid_weights(grid_size: int) -> tuple[np.ndarray, np.ndarray]:
    if grid_size < 1000:
        raise ValueError(f"grid_size must be >= 1000, got {grid_size}")
    x = np.linspace(0.0, 1.0, grid_size)
    w = np.full(grid_size, 1.0 / (grid_size - 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    return x, w


def gram_deviation(spec: BasisSpec, J: int, grid_size: int = 100_000) -> float:
    """Max entrywise deviation of the trapezoid Gram matrix from the identity."""
    x, w = _trapezoid_weights(grid_size)
    B = spec.block(x, J)
    G = B.T @ (B * w[:, None])
    return float(np.max(np.abs(G - np.eye(J))))


def centering_residual(spec: BasisSpec, J: int, grid_size: int = 100_000) -> float:
    """Max over ``j <= J`` of the absolute trapezoid integral of ``psi_j``."""
    x, w = _trapezoid_weights(grid_size)
    B = spec.block(x, J)
    return float(np.max(np.abs(w @ B)))
