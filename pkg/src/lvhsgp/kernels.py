"""Stationary covariance functions of the Matern class and their spectral densities.

Three families are supported: squared exponential, Matern 3/2 and Matern 5/2.
All evaluations are for one-dimensional inputs, so distances ``r = |x - x'|``
and frequencies ``omega`` are scalars (or arrays thereof).  The spectral
densities are the Fourier duals of the covariance functions,

    S(omega) = 2 * int_0^inf k(r) cos(omega r) dr,

which the test suite verifies by adaptive quadrature.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "KernelFamily",
    "KernelHyper",
    "kernel_eval",
    "kernel_radial_deriv",
    "spectral_density",
]

_SQRT3 = math.sqrt(3.0)
_SQRT5 = math.sqrt(5.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


class KernelFamily(str, enum.Enum):
    """Closed enumeration of the supported covariance families."""

    SQUARED_EXPONENTIAL = "se"
    MATERN32 = "matern32"
    MATERN52 = "matern52"

    @classmethod
    def from_name(cls, name: str) -> "KernelFamily":
        aliases = {
            "se": cls.SQUARED_EXPONENTIAL,
            "squared-exponential": cls.SQUARED_EXPONENTIAL,
            "matern32": cls.MATERN32,
            "m32": cls.MATERN32,
            "matern52": cls.MATERN52,
            "m52": cls.MATERN52,
        }
        try:
            return aliases[name.lower()]
        except KeyError:
            raise ValueError(f"unknown kernel family {name!r}") from None


@dataclass(frozen=True)
class KernelHyper:
    """Length-scale and marginal standard deviation of a stationary kernel.

    Both must be strictly positive and finite; enforced at construction.
    """

    rho: float
    alpha: float

    def __post_init__(self):
        if not (math.isfinite(self.rho) and self.rho > 0):
            raise ValueError(f"length-scale rho must be positive and finite, got {self.rho}")
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"marginal SD alpha must be positive and finite, got {self.alpha}")


def _check_finite(name, value):
    if not np.all(np.isfinite(value)):
        raise ValueError(f"{name} must be finite")


def kernel_eval(family: KernelFamily, r, hyper: KernelHyper):
    """Evaluate the covariance function at distance ``r >= 0``.

    Accepts scalar or array ``r`` and broadcasts.  ``k(0) = alpha**2`` and
    ``k`` is non-increasing in ``r`` for every family.
    """
    r = np.asarray(r, dtype=float)
    _check_finite("r", r)
    if np.any(r < 0):
        raise ValueError("distance r must be non-negative")
    rho, alpha = hyper.rho, hyper.alpha
    a2 = alpha * alpha
    with np.errstate(under="ignore"):
        if family is KernelFamily.SQUARED_EXPONENTIAL:
            out = a2 * np.exp(-0.5 * (r / rho) ** 2)
        elif family is KernelFamily.MATERN32:
            t = _SQRT3 * r / rho
            out = a2 * (1.0 + t) * np.exp(-t)
        elif family is KernelFamily.MATERN52:
            t = _SQRT5 * r / rho
            out = a2 * (1.0 + t + t * t / 3.0) * np.exp(-t)
        else:  # pragma: no cover - closed enumeration
            raise ValueError(f"unhandled kernel family {family}")
    return out if out.ndim else float(out)


def kernel_radial_deriv(family: KernelFamily, r, hyper: KernelHyper):
    """Derivative dk/dr of the covariance function with respect to distance.

    Zero at r = 0 for all three families, so kernels remain differentiable
    through ``r = |x - x'|``.
    """
    r = np.asarray(r, dtype=float)
    _check_finite("r", r)
    if np.any(r < 0):
        raise ValueError("distance r must be non-negative")
    rho, alpha = hyper.rho, hyper.alpha
    a2 = alpha * alpha
    with np.errstate(under="ignore"):
        if family is KernelFamily.SQUARED_EXPONENTIAL:
            out = -(r / rho**2) * a2 * np.exp(-0.5 * (r / rho) ** 2)
        elif family is KernelFamily.MATERN32:
            a = _SQRT3 / rho
            out = -a2 * a * a * r * np.exp(-a * r)
        elif family is KernelFamily.MATERN52:
            a = _SQRT5 / rho
            out = -a2 * (a * a * r / 3.0) * (1.0 + a * r) * np.exp(-a * r)
        else:  # pragma: no cover
            raise ValueError(f"unhandled kernel family {family}")
    return out if out.ndim else float(out)


# Normalizing constant of the univariate Matern spectral density,
#   S(w) = alpha^2 * c_nu / rho^(2 nu) * (2 nu / rho^2 + w^2)^-(nu + 1/2),
# with c_nu = 2 sqrt(pi) Gamma(nu + 1/2) (2 nu)^nu / Gamma(nu).
_M32_CONST = 2.0 * math.sqrt(math.pi) * math.gamma(2.0) * 3.0**1.5 / math.gamma(1.5)
_M52_CONST = 2.0 * math.sqrt(math.pi) * math.gamma(3.0) * 5.0**2.5 / math.gamma(2.5)


def spectral_density(family: KernelFamily, omega, hyper: KernelHyper):
    """Spectral density S(omega) of the covariance function (even in omega).

    Strictly positive, decreasing in ``|omega|``, and scaling as
    ``alpha**2``.  Values that underflow in double precision are returned
    as 0.0.
    """
    omega = np.asarray(omega, dtype=float)
    _check_finite("omega", omega)
    rho, alpha = hyper.rho, hyper.alpha
    w2 = omega * omega
    # unit-alpha density first so S(w; alpha) = alpha^2 * S(w; 1) holds exactly
    with np.errstate(under="ignore"):
        if family is KernelFamily.SQUARED_EXPONENTIAL:
            unit = rho * _SQRT2PI * np.exp(-0.5 * rho * rho * w2)
        elif family is KernelFamily.MATERN32:
            unit = _M32_CONST / rho**3 * (3.0 / rho**2 + w2) ** -2.0
        elif family is KernelFamily.MATERN52:
            unit = _M52_CONST / rho**5 * (5.0 / rho**2 + w2) ** -3.0
        else:  # pragma: no cover
            raise ValueError(f"unhandled kernel family {family}")
        out = (alpha * alpha) * unit
    return out if out.ndim else float(out)


def _dlog_spectral_dlog_rho(family: KernelFamily, omega, rho):
    """d log S / d log rho, used by the model gradient.

    For the Matern families with smoothness nu this is
    ``-2 nu + (2 nu + 1) * (2 nu / rho^2) / (2 nu / rho^2 + omega^2)``;
    for the squared exponential it is ``1 - rho^2 omega^2``.
    """
    omega = np.asarray(omega, dtype=float)
    w2 = omega * omega
    if family is KernelFamily.SQUARED_EXPONENTIAL:
        return 1.0 - rho * rho * w2
    if family is KernelFamily.MATERN32:
        q = 3.0 / rho**2
        return -3.0 + 4.0 * q / (q + w2)
    if family is KernelFamily.MATERN52:
        q = 5.0 / rho**2
        return -5.0 + 6.0 * q / (q + w2)
    raise ValueError(f"unhandled kernel family {family}")  # pragma: no cover
