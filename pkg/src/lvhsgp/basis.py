"""Laplacian eigenbasis on [-L, L] and the truncated covariance approximation.

Under Dirichlet boundary conditions the eigenpairs on the symmetric interval
are

    lambda_j = (j pi / (2 L))^2,
    phi_j(x) = sqrt(1/L) sin(sqrt(lambda_j) (x + L)),      j = 1, 2, ...

and a stationary covariance matrix is approximated by the rank-M form
``Phi diag(S(sqrt(lambda_1)), ..., S(sqrt(lambda_M))) Phi^T`` where ``S`` is
the kernel's spectral density.  The quality of the approximation degrades
near the boundary, so working inputs must sit strictly inside (-L, L); the
`min_basis` heuristic picks a truncation adequate for a given length-scale
prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernels import KernelFamily, KernelHyper, spectral_density

__all__ = [
    "BasisConfig",
    "BasisMatrix",
    "BoundaryViolationError",
    "approx_covariance",
    "build_basis",
    "eigenfunction",
    "eigenvalue",
    "min_basis",
    "sqrt_eigenvalues",
]


class BoundaryViolationError(ValueError):
    """Raised when an input falls on or outside the basis domain [-L, L]."""


@dataclass(frozen=True)
class BasisConfig:
    """Domain half-width L, truncation M and boundary scaling factor c.

    ``L`` must strictly contain the centered working inputs; ``c >= 1`` is
    the factor by which L was inflated relative to the input half-range.
    """

    L: float
    M: int
    c: float = 1.25

    def __post_init__(self):
        if not (math.isfinite(self.L) and self.L > 0):
            raise ValueError(f"boundary half-width L must be positive, got {self.L}")
        if int(self.M) != self.M or self.M < 1:
            raise ValueError(f"number of basis functions M must be a positive integer, got {self.M}")
        if self.c < 1:
            raise ValueError(f"boundary factor c must be >= 1, got {self.c}")

    @classmethod
    def for_range(cls, lo: float, hi: float, M: int, c: float = 1.25) -> "BasisConfig":
        """Config whose domain covers [lo, hi] after centering, L = c * half-range."""
        if not hi > lo:
            raise ValueError(f"need hi > lo, got [{lo}, {hi}]")
        return cls(L=c * 0.5 * (hi - lo), M=M, c=c)


@dataclass(frozen=True)
class BasisMatrix:
    """Eigenfunction evaluations (N x M) and the matching eigenvalues."""

    values: np.ndarray
    eigenvalues: np.ndarray

    @property
    def n_points(self) -> int:
        return self.values.shape[0]

    @property
    def n_basis(self) -> int:
        return self.values.shape[1]


def eigenvalue(j: int, L: float) -> float:
    """Eigenvalue lambda_j = (j pi / (2 L))^2 of the Dirichlet Laplacian."""
    if j < 1 or int(j) != j:
        raise ValueError(f"basis index j must be a positive integer, got {j}")
    if L <= 0:
        raise ValueError(f"boundary half-width L must be positive, got {L}")
    return (j * math.pi / (2.0 * L)) ** 2


def sqrt_eigenvalues(M: int, L: float) -> np.ndarray:
    """Vector (sqrt(lambda_1), ..., sqrt(lambda_M))."""
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    if L <= 0:
        raise ValueError(f"boundary half-width L must be positive, got {L}")
    return np.arange(1, M + 1) * (math.pi / (2.0 * L))


def eigenfunction(j: int, L: float, x):
    """Eigenfunction phi_j(x) = sqrt(1/L) sin(sqrt(lambda_j) (x + L)).

    Vanishes at x = +-L and is bounded by sqrt(1/L) everywhere.
    """
    root = math.sqrt(eigenvalue(j, L))
    x = np.asarray(x, dtype=float)
    out = math.sqrt(1.0 / L) * np.sin(root * (x + L))
    return out if out.ndim else float(out)


def build_basis(x, config: BasisConfig) -> BasisMatrix:
    """Eigenfunction matrix Phi for centered inputs x strictly inside (-L, L).

    Raises `BoundaryViolationError` naming the first offending index when any
    ``|x_i| >= L``.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"x must be a 1-D vector, got shape {x.shape}")
    L = config.L
    bad = np.flatnonzero(~(np.abs(x) < L))
    if bad.size:
        i = int(bad[0])
        raise BoundaryViolationError(
            f"input x[{i}] = {x[i]!r} is on or outside the basis domain (-{L}, {L})"
        )
    roots = sqrt_eigenvalues(config.M, L)
    values = math.sqrt(1.0 / L) * np.sin(np.outer(x + L, roots))
    return BasisMatrix(values=values, eigenvalues=roots**2)


def approx_covariance(basis: BasisMatrix, family: KernelFamily, hyper: KernelHyper) -> np.ndarray:
    """Rank-M covariance approximation Phi diag(S(sqrt(lambda))) Phi^T.

    Symmetric positive semi-definite by construction.
    """
    dens = spectral_density(family, np.sqrt(basis.eigenvalues), hyper)
    weighted = basis.values * np.sqrt(dens)
    K = weighted @ weighted.T
    return 0.5 * (K + K.T)


# Family-specific proportionality constants of the basis-size heuristic
# M_min = ceil(kappa * c * S / mu_rho).
_MIN_BASIS_FACTOR = {
    KernelFamily.SQUARED_EXPONENTIAL: 1.75,
    KernelFamily.MATERN32: 3.42,
    KernelFamily.MATERN52: 2.65,
}


def min_basis(family: KernelFamily, c: float, s_range: float, mu_rho: float) -> int:
    """Minimum basis size for boundary factor c, input range and prior mean length-scale."""
    if c <= 0 or s_range <= 0 or mu_rho <= 0:
        raise ValueError("c, s_range and mu_rho must all be positive")
    return math.ceil(_MIN_BASIS_FACTOR[family] * c * s_range / mu_rho)
