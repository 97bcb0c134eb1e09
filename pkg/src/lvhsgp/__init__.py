"""Multi-output latent-input Hilbert-space approximate Gaussian processes.

The package provides reduced-rank (Hilbert-space basis) and exact GP models
with correlated multi-dimensional outputs and noisy latent inputs, adaptive
HMC sampling, convergence diagnostics, simulation-based calibration, and the
simulation-scenario generators used to study them.
"""

__version__ = "0.1.0"

from .kernels import KernelFamily, KernelHyper, kernel_eval, spectral_density
from .basis import BasisConfig, BasisMatrix, build_basis, min_basis

__all__ = [
    "__version__",
    "KernelFamily",
    "KernelHyper",
    "kernel_eval",
    "spectral_density",
    "BasisConfig",
    "BasisMatrix",
    "build_basis",
    "min_basis",
]
