"""Joint log-density and analytic gradient of the multi-output latent-input GP.

Model structure (per output dimension d = 1..D, observation i = 1..N):

    x_i ~ Normal(x_tilde_i, s^2)                     latent input, measured noisily
    f_d = mu_d + Phi(x) (sqrt(S_d(sqrt(lambda))) . beta_d)      reduced-rank GP draw
    F*_i = A F_i                                     across-dimension mixing
    y_di ~ Normal(f*_d(x_i), sigma_d^2)

with beta ~ Normal(0, 1) weights, A the Cholesky factor of a correlation
matrix C ~ LKJ(eta), and lower-truncated normal priors on the positive
hyperparameters (rho_d, alpha_d, sigma_d).  The exact-GP reference variant
replaces the basis expansion by f_d = mu_d + chol(K_d + jitter I) beta_d with
K_d the dense kernel Gram matrix at x.

All densities are evaluated on an unconstrained parameter vector (log scales,
partial-correlation coordinates) with the transform Jacobians included.
Additive constants that depend only on the parameterization dimensions (the
standard-normal weight normalization, the LKJ and truncation normalizers) are
dropped, so joint values of models with different weight counts are directly
comparable.  Boundary violations of the basis domain and non-finite
intermediates yield -inf rather than raising, so samplers can reject.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky as _cholesky
from scipy.linalg import solve_triangular

from .basis import BasisConfig, build_basis, sqrt_eigenvalues
from .kernels import (
    KernelFamily,
    KernelHyper,
    _dlog_spectral_dlog_rho,
    kernel_eval,
    kernel_radial_deriv,
    spectral_density,
)

__all__ = [
    "PriorSet",
    "ModelSpec",
    "ParameterLayout",
    "ConstrainedParams",
    "LatentGPPosterior",
    "constrain",
    "unconstrain",
    "gp_functions_hsgp",
    "exact_gp_functions",
    "mix_outputs",
    "log_likelihood",
    "log_latent_prior",
    "log_joint",
    "grad_log_joint",
    "log_joint_and_grad",
    "lkj_log_density",
]

_LOG_2PI = math.log(2.0 * math.pi)

# relative jitter ladder for exact-GP Cholesky factorizations
_JITTER_START = 1e-8
_JITTER_MAX = 1e-4


@dataclass(frozen=True)
class PriorSet:
    """Lower-truncated normal priors on scales, normal prior on means, LKJ shape.

    The truncation point of the scale priors is zero; the mean prior default
    Normal(0, 5^2) is weakly informative at the simulated output scale.
    """

    rho_mean: float
    rho_sd: float
    alpha_mean: float
    alpha_sd: float
    sigma_mean: float
    sigma_sd: float
    mu_mean: float = 0.0
    mu_sd: float = 5.0
    lkj_eta: float = 1.0

    def __post_init__(self):
        for name in ("rho_sd", "alpha_sd", "sigma_sd", "mu_sd"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lkj_eta <= 0:
            raise ValueError("lkj_eta must be positive")


class ParameterLayout:
    """Slices of the flat unconstrained vector: x, log-scales, means, weights, corr."""

    def __init__(self, n: int, d: int, n_weights: int):
        self.n = n
        self.d = d
        self.n_weights = n_weights
        self.n_corr = d * (d - 1) // 2
        o = 0
        self.x = slice(o, o + n); o += n
        self.log_rho = slice(o, o + d); o += d
        self.log_alpha = slice(o, o + d); o += d
        self.log_sigma = slice(o, o + d); o += d
        self.mu = slice(o, o + d); o += d
        self.beta = slice(o, o + n_weights * d); o += n_weights * d
        self.corr = slice(o, o + self.n_corr); o += self.n_corr
        self.size = o

    def beta_matrix(self, v: np.ndarray) -> np.ndarray:
        """View of the weight block as an (n_weights, D) matrix."""
        return v[self.beta].reshape(self.n_weights, self.d, order="F")

    def constrained_names(self) -> list[str]:
        names = [f"x[{i}]" for i in range(1, self.n + 1)]
        for stem in ("rho", "alpha", "sigma", "mu"):
            names += [f"{stem}[{d}]" for d in range(1, self.d + 1)]
        names += [
            f"beta[{j},{d}]"
            for d in range(1, self.d + 1)
            for j in range(1, self.n_weights + 1)
        ]
        names += [
            f"corr[{i},{j}]"
            for i in range(2, self.d + 1)
            for j in range(1, i)
        ]
        return names

    def primary_mask(self) -> np.ndarray:
        """True for the primary parameters (everything except the GP weights)."""
        mask = np.ones(self.size, dtype=bool)
        mask[self.beta] = False
        return mask


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Complete description of one fit: data geometry, kernel, priors, variant."""

    family: KernelFamily
    D: int
    x_tilde: np.ndarray
    s: float
    priors: PriorSet
    variant: str = "hsgp"
    basis: BasisConfig | None = None
    center: float = 0.0

    def __post_init__(self):
        if self.D < 1:
            raise ValueError("D must be >= 1")
        x_tilde = np.asarray(self.x_tilde, dtype=float)
        object.__setattr__(self, "x_tilde", x_tilde)
        if x_tilde.ndim != 1 or x_tilde.size < 2:
            raise ValueError("x_tilde must be a vector of length >= 2")
        if not np.all(np.isfinite(x_tilde)):
            raise ValueError("x_tilde must be finite")
        if not self.s > 0:
            raise ValueError("measurement SD s must be positive")
        if self.variant not in ("hsgp", "exact"):
            raise ValueError(f"variant must be 'hsgp' or 'exact', got {self.variant!r}")
        if self.variant == "hsgp":
            if self.basis is None:
                raise ValueError("hsgp variant requires a basis configuration")
            xc = x_tilde - self.center
            if np.any(np.abs(xc) >= self.basis.L):
                raise ValueError("basis domain does not contain the centered x_tilde")

    @property
    def N(self) -> int:
        return self.x_tilde.size

    @property
    def n_weights(self) -> int:
        return self.basis.M if self.variant == "hsgp" else self.N

    @property
    def layout(self) -> ParameterLayout:
        return ParameterLayout(self.N, self.D, self.n_weights)

    @classmethod
    def hsgp(cls, family, x_tilde, D, M, priors, s, x_range=None, c=1.25) -> "ModelSpec":
        """HSGP spec with the domain centered on the x_tilde prior range.

        ``x_range`` is the prior range of the inputs (e.g. the scenario's
        sampling range); defaults to the observed range of x_tilde.  The
        boundary is L = c * half-range, keeping latent inputs away from the
        Dirichlet zeros.
        """
        x_tilde = np.asarray(x_tilde, dtype=float)
        lo, hi = (float(x_tilde.min()), float(x_tilde.max())) if x_range is None else map(float, x_range)
        config = BasisConfig.for_range(lo, hi, M=M, c=c)
        return cls(
            family=family, D=D, x_tilde=x_tilde, s=s, priors=priors,
            variant="hsgp", basis=config, center=0.5 * (lo + hi),
        )

    @classmethod
    def exact(cls, family, x_tilde, D, priors, s) -> "ModelSpec":
        return cls(family=family, D=D, x_tilde=np.asarray(x_tilde, dtype=float),
                   s=s, priors=priors, variant="exact", basis=None)


@dataclass(eq=False)
class ConstrainedParams:
    """Constrained parameter set plus the transform log-Jacobian."""

    x: np.ndarray
    rho: np.ndarray
    alpha: np.ndarray
    sigma: np.ndarray
    mu: np.ndarray
    beta: np.ndarray  # (n_weights, D)
    A: np.ndarray     # D x D lower-triangular Cholesky of the correlation matrix
    log_jacobian: float

    @property
    def C(self) -> np.ndarray:
        return self.A @ self.A.T


# ---------------------------------------------------------------------------
# correlation-matrix transform (canonical partial correlations through tanh)
# ---------------------------------------------------------------------------

def _corr_forward(z: np.ndarray, d: int):
    """Unconstrained coords -> (A, w, log_jacobian of z -> A).

    Row i of A is built from canonical partial correlations w = tanh(z):
    A[i, j] = w_ij * prod_{k<j} sqrt(1 - w_ik^2), unit row norms by
    construction.
    """
    w = np.tanh(z)
    A = np.eye(d)
    log_jac = 0.0
    idx = 0
    for i in range(1, d):
        w_row = w[idx:idx + i]
        idx += i
        t = 1.0 - w_row * w_row
        cp = np.cumprod(np.sqrt(t))
        u = np.concatenate(([1.0], cp[:-1]))
        A[i, :i] = w_row * u
        A[i, i] = cp[-1]
        log_jac += float(np.sum(np.log(t)) + np.sum(np.log(u)))
    return A, w, log_jac


def _corr_backward(z: np.ndarray, w: np.ndarray, A: np.ndarray, A_bar: np.ndarray,
                   eta: float, with_prior: bool) -> np.ndarray:
    """Gradient wrt z of (objective via A_bar) [+ corr prior and Jacobian terms]."""
    d = A.shape[0]
    z_bar = np.zeros_like(z)
    idx = 0
    for i in range(1, d):
        w_row = w[idx:idx + i]
        t = 1.0 - w_row * w_row
        cp = np.cumprod(np.sqrt(t))
        u = np.concatenate(([1.0], cp[:-1]))
        a_row = A[i, :i]
        abar_row = A_bar[i, :i].copy()
        abar_diag = A_bar[i, i]
        if with_prior:
            # d/dA_ii of [2(eta-1) + (D-1-i)] log A_ii   (LKJ + A->C Jacobian)
            abar_diag = abar_diag + (2.0 * (eta - 1.0) + (d - 1 - i)) / A[i, i]
        # suffix sums over j > m (diagonal included) of A_bar_ij A_ij
        prods = abar_row * a_row
        suffix = np.concatenate((np.cumsum(prods[::-1])[::-1][1:], [0.0]))
        suffix = suffix + abar_diag * A[i, i]
        w_bar = abar_row * u - (w_row / t) * suffix
        if with_prior:
            # z->A Jacobian: sum_j log t_j + log u_j; coefficient of log t_m
            # is 1 + (i-1-m)/2
            coeff = 2.0 + (i - 1 - np.arange(i))
            w_bar = w_bar - coeff * w_row / t
        z_bar[idx:idx + i] = w_bar * t  # d tanh(z)/dz = 1 - w^2
        idx += i
    return z_bar


def _corr_inverse(A: np.ndarray) -> np.ndarray:
    """Recover unconstrained coords from a unit-row lower-triangular factor."""
    d = A.shape[0]
    z = np.zeros(d * (d - 1) // 2)
    idx = 0
    for i in range(1, d):
        u = 1.0
        for j in range(i):
            w = A[i, j] / u
            z[idx] = math.atanh(w)
            u *= math.sqrt(1.0 - w * w)
            idx += 1
    return z


def lkj_log_density(A: np.ndarray, eta: float) -> float:
    """Unnormalized LKJ log-density of C = A A^T, evaluated through A.

    Equals (eta - 1) log det C; identically zero at eta = 1 for every valid
    correlation matrix.
    """
    d = A.shape[0]
    if d == 1:
        return 0.0
    return float(2.0 * (eta - 1.0) * np.sum(np.log(np.diag(A)[1:])))


def _chol_to_corr_log_jacobian(A: np.ndarray) -> float:
    """log |dC/dA| of the map from the unit-row factor A to C = A A^T."""
    d = A.shape[0]
    if d == 1:
        return 0.0
    rows = np.arange(1, d)
    return float(np.sum((d - 1 - rows) * np.log(np.diag(A)[1:])))


# ---------------------------------------------------------------------------
# constrain / unconstrain
# ---------------------------------------------------------------------------

def constrain(v: np.ndarray, spec: ModelSpec) -> ConstrainedParams:
    """Map the unconstrained vector to constrained parameters with log-Jacobian.

    Positive scales use the exponential map (log-Jacobian = sum of the
    unconstrained coordinates); the correlation factor uses the canonical
    partial-correlation construction.
    """
    layout = spec.layout
    v = np.asarray(v, dtype=float)
    if v.shape != (layout.size,):
        raise ValueError(f"parameter vector has length {v.size}, expected {layout.size}")
    log_scales = np.concatenate([v[layout.log_rho], v[layout.log_alpha], v[layout.log_sigma]])
    A, _, corr_jac = _corr_forward(v[layout.corr], spec.D)
    return ConstrainedParams(
        x=v[layout.x].copy(),
        rho=np.exp(v[layout.log_rho]),
        alpha=np.exp(v[layout.log_alpha]),
        sigma=np.exp(v[layout.log_sigma]),
        mu=v[layout.mu].copy(),
        beta=layout.beta_matrix(v).copy(),
        A=A,
        log_jacobian=float(np.sum(log_scales) + corr_jac),
    )


def unconstrain(params: ConstrainedParams, spec: ModelSpec) -> np.ndarray:
    """Inverse of `constrain` (up to the discarded log-Jacobian)."""
    layout = spec.layout
    v = np.empty(layout.size)
    v[layout.x] = params.x
    v[layout.log_rho] = np.log(params.rho)
    v[layout.log_alpha] = np.log(params.alpha)
    v[layout.log_sigma] = np.log(params.sigma)
    v[layout.mu] = params.mu
    v[layout.beta] = params.beta.reshape(-1, order="F")
    v[layout.corr] = _corr_inverse(params.A)
    return v


# ---------------------------------------------------------------------------
# GP function values
# ---------------------------------------------------------------------------

def gp_functions_hsgp(x, beta, hyper: KernelHyper, mu: float, config: BasisConfig,
                      family: KernelFamily, center: float = 0.0) -> np.ndarray:
    """Reduced-rank GP draw mu + Phi(x) (sqrt(S(sqrt(lambda))) . beta) for one dimension."""
    x = np.asarray(x, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (config.M,):
        raise ValueError(f"beta must have length M={config.M}")
    basis = build_basis(x - center, config)
    dens = spectral_density(family, np.sqrt(basis.eigenvalues), hyper)
    return mu + basis.values @ (np.sqrt(dens) * beta)


def _jittered_cholesky(K: np.ndarray, scale: float) -> np.ndarray:
    """Lower Cholesky of K + jitter*I, escalating jitter up to a relative cap."""
    jitter = _JITTER_START * scale
    eye = np.eye(K.shape[0])
    while True:
        try:
            return _cholesky(K + jitter * eye, lower=True)
        except np.linalg.LinAlgError:
            pass
        except Exception:
            pass
        jitter *= 10.0
        if jitter > _JITTER_MAX * scale * 1.000001:
            raise np.linalg.LinAlgError(
                "Cholesky factorization failed after jitter escalation"
            )


def exact_gp_functions(x, beta, family: KernelFamily, hyper: KernelHyper,
                       mu: float) -> np.ndarray:
    """Exact (whitened) GP draw mu + chol(K + jitter I) beta for one dimension."""
    x = np.asarray(x, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != x.shape:
        raise ValueError("whitened beta must match x in length")
    if x.size > 200:
        warnings.warn(
            f"exact GP with N={x.size} > 200 is cubically expensive", RuntimeWarning
        )
    r = np.abs(x[:, None] - x[None, :])
    K = kernel_eval(family, r, hyper)
    L = _jittered_cholesky(K, hyper.alpha**2)
    return mu + L @ beta


def mix_outputs(A: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Across-dimension mixing: row i of the result is A times row i of F."""
    A = np.asarray(A, dtype=float)
    F = np.asarray(F, dtype=float)
    d = A.shape[0]
    if A.shape != (d, d) or F.ndim != 2 or F.shape[1] != d:
        raise ValueError(f"shape mismatch: A {A.shape}, F {F.shape}")
    if np.any(np.triu(A, 1) != 0.0):
        raise ValueError("A must be lower-triangular")
    if np.any(np.diag(A) <= 0):
        raise ValueError("A must have a positive diagonal")
    if not np.allclose(np.sum(A * A, axis=1), 1.0, atol=1e-8):
        raise ValueError("rows of A must have unit norm")
    return F @ A.T


def log_likelihood(Y: np.ndarray, Fstar: np.ndarray, sigma: np.ndarray) -> float:
    """Sum of Gaussian log-densities of y_di with mean f*_di and SD sigma_d."""
    Y = np.asarray(Y, dtype=float)
    Fstar = np.asarray(Fstar, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if Y.shape != Fstar.shape or sigma.shape != (Y.shape[1],):
        raise ValueError("shape mismatch between Y, Fstar and sigma")
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    z = (Y - Fstar) / sigma
    n = Y.shape[0]
    return float(-0.5 * np.sum(z * z) - n * np.sum(np.log(sigma)) - 0.5 * Y.size * _LOG_2PI)


def log_latent_prior(x, x_tilde, s: float) -> float:
    """Gaussian measurement term: sum_i log N(x_tilde_i | x_i, s^2)."""
    x = np.asarray(x, dtype=float)
    x_tilde = np.asarray(x_tilde, dtype=float)
    if x.shape != x_tilde.shape:
        raise ValueError("x and x_tilde must have equal length")
    if not s > 0:
        raise ValueError("s must be positive")
    z = (x - x_tilde) / s
    return float(-0.5 * np.sum(z * z) - x.size * (math.log(s) + 0.5 * _LOG_2PI))


def _normal_logpdf_sum(t: np.ndarray, mean: float, sd: float) -> float:
    """Sum of normal log-densities; truncated priors drop their truncation constant."""
    z = (t - mean) / sd
    return float(-0.5 * np.sum(z * z) - t.size * (math.log(sd) + 0.5 * _LOG_2PI))


# ---------------------------------------------------------------------------
# joint density and gradient
# ---------------------------------------------------------------------------

def _spectral_matrix(family, roots, rho, alpha):
    """S(sqrt(lambda_j); rho_d, alpha_d) as an (M, D) matrix (vectorized)."""
    w2 = roots[:, None] ** 2
    rho = rho[None, :]
    a2 = (alpha * alpha)[None, :]
    with np.errstate(under="ignore"):
        if family is KernelFamily.SQUARED_EXPONENTIAL:
            return a2 * rho * math.sqrt(2 * math.pi) * np.exp(-0.5 * rho * rho * w2)
        if family is KernelFamily.MATERN32:
            return a2 * (2 * math.sqrt(math.pi) * 3.0**1.5 / math.gamma(1.5)) / rho**3 * (3.0 / rho**2 + w2) ** -2.0
        if family is KernelFamily.MATERN52:
            return a2 * (2 * math.sqrt(math.pi) * math.gamma(3.0) * 5.0**2.5 / math.gamma(2.5)) / rho**5 * (5.0 / rho**2 + w2) ** -3.0
    raise ValueError(f"unhandled kernel family {family}")  # pragma: no cover


def _chol_rev(L: np.ndarray, L_bar: np.ndarray) -> np.ndarray:
    """Reverse-mode differentiation through K = L L^T (L lower Cholesky).

    Given the cotangent on L (lower triangle), returns the symmetric
    full-matrix cotangent on K.
    """
    P = np.tril(L.T @ L_bar)
    P[np.diag_indices_from(P)] *= 0.5
    X = solve_triangular(L, P.T, lower=True, trans="T")
    K_bar = solve_triangular(L, X.T, lower=True, trans="T")
    return 0.5 * (K_bar + K_bar.T)


def log_joint_and_grad(v: np.ndarray, spec: ModelSpec, Y: np.ndarray,
                       want_grad: bool = True):
    """Joint log-density and its gradient wrt every unconstrained coordinate.

    Returns (-inf, None) on basis-boundary violations or non-finite
    intermediates; the gradient is None whenever the density is -inf.
    """
    layout = spec.layout
    v = np.asarray(v, dtype=float)
    if v.shape != (layout.size,):
        raise ValueError(f"parameter vector has length {v.size}, expected {layout.size}")
    Y = np.asarray(Y, dtype=float)
    n, d = spec.N, spec.D
    if Y.shape != (n, d):
        raise ValueError(f"Y has shape {Y.shape}, expected {(n, d)}")

    x = v[layout.x]
    lrho, lalpha, lsigma = v[layout.log_rho], v[layout.log_alpha], v[layout.log_sigma]
    mu = v[layout.mu]
    beta = layout.beta_matrix(v)
    z = v[layout.corr]
    pri = spec.priors

    with np.errstate(over="ignore", under="ignore", invalid="ignore", divide="ignore"):
        rho, alpha, sigma = np.exp(lrho), np.exp(lalpha), np.exp(lsigma)
        if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(alpha)) and np.all(np.isfinite(sigma))):
            return -np.inf, None
        A, w, corr_jac = _corr_forward(z, d)
        if not np.isfinite(corr_jac):
            return -np.inf, None

        if spec.variant == "hsgp":
            L = spec.basis.L
            xc = x - spec.center
            if np.any(np.abs(xc) >= L):
                return -np.inf, None
            roots = sqrt_eigenvalues(spec.basis.M, L)
            arg = np.outer(xc + L, roots)
            inv_sqrt_l = math.sqrt(1.0 / L)
            Phi = inv_sqrt_l * np.sin(arg)
            S = _spectral_matrix(spec.family, roots, rho, alpha)
            sqrt_s = np.sqrt(S)
            SB = sqrt_s * beta                      # (M, D)
            F = mu[None, :] + Phi @ SB              # (N, D)
            chol_factors = None
        else:
            diff = x[:, None] - x[None, :]
            r = np.abs(diff)
            F = np.empty((n, d))
            chol_factors = []
            for k in range(d):
                hyper = KernelHyper(float(rho[k]), float(alpha[k]))
                K = kernel_eval(spec.family, r, hyper)
                try:
                    Lk = _jittered_cholesky(K, float(alpha[k]) ** 2)
                except np.linalg.LinAlgError:
                    return -np.inf, None
                chol_factors.append(Lk)
                F[:, k] = mu[k] + Lk @ beta[:, k]

        Fstar = F @ A.T
        resid = Y - Fstar
        zr = resid / sigma[None, :]
        ll = -0.5 * np.sum(zr * zr) - n * np.sum(np.log(sigma)) - 0.5 * n * d * _LOG_2PI

        zx = (x - spec.x_tilde) / spec.s
        latent = -0.5 * np.sum(zx * zx) - n * (math.log(spec.s) + 0.5 * _LOG_2PI)

        prior = (
            _normal_logpdf_sum(rho, pri.rho_mean, pri.rho_sd)
            + _normal_logpdf_sum(alpha, pri.alpha_mean, pri.alpha_sd)
            + _normal_logpdf_sum(sigma, pri.sigma_mean, pri.sigma_sd)
            + _normal_logpdf_sum(mu, pri.mu_mean, pri.mu_sd)
        )
        beta_prior = -0.5 * float(np.sum(beta * beta))
        lkj = lkj_log_density(A, pri.lkj_eta) + _chol_to_corr_log_jacobian(A)
        jac = float(np.sum(lrho) + np.sum(lalpha) + np.sum(lsigma)) + corr_jac

        total = ll + latent + prior + beta_prior + lkj + jac
        if not np.isfinite(total):
            return -np.inf, None
        if not want_grad:
            return float(total), None

        # ---- gradient ----
        grad = np.empty(layout.size)
        E = resid / (sigma * sigma)[None, :]        # d ll / d Fstar
        G = E @ A                                   # d ll / d F

        grad[layout.mu] = G.sum(axis=0) - (mu - pri.mu_mean) / pri.mu_sd**2

        if spec.variant == "hsgp":
            T = Phi.T @ G                           # (M, D)
            grad_beta = sqrt_s * T - beta
            dlog = np.stack(
                [_dlog_spectral_dlog_rho(spec.family, roots, float(rho[k])) for k in range(d)],
                axis=1,
            )                                       # (M, D)
            tsb = T * SB
            grad_lrho_l = 0.5 * np.sum(tsb * dlog, axis=0)
            grad_lalpha_l = np.sum(tsb, axis=0)
            dPhi = inv_sqrt_l * np.cos(arg) * roots[None, :]
            grad_x_l = np.sum(G * (dPhi @ SB), axis=1)
        else:
            grad_beta = np.empty_like(beta)
            grad_lrho_l = np.empty(d)
            grad_lalpha_l = np.empty(d)
            grad_x_l = np.zeros(n)
            for k in range(d):
                hyper = KernelHyper(float(rho[k]), float(alpha[k]))
                Lk = chol_factors[k]
                gbar = G[:, k]
                grad_beta[:, k] = Lk.T @ gbar - beta[:, k]
                K_bar = _chol_rev(Lk, np.tril(np.outer(gbar, beta[:, k])))
                # the factorized matrix K + jitter*I scales as alpha^2 overall
                grad_lalpha_l[k] = 2.0 * float(np.sum(K_bar * (Lk @ Lk.T)))
                kp = kernel_radial_deriv(spec.family, r, hyper)
                grad_lrho_l[k] = -float(np.sum(K_bar * r * kp))
                grad_x_l += np.sum(2.0 * K_bar * kp * np.sign(diff), axis=1)

        grad_x = grad_x_l - zx / spec.s
        grad[layout.x] = grad_x
        grad[layout.beta] = grad_beta.reshape(-1, order="F")

        grad[layout.log_rho] = grad_lrho_l - (rho - pri.rho_mean) / pri.rho_sd**2 * rho + 1.0
        grad[layout.log_alpha] = grad_lalpha_l - (alpha - pri.alpha_mean) / pri.alpha_sd**2 * alpha + 1.0
        zr2 = zr * zr
        grad[layout.log_sigma] = zr2.sum(axis=0) - n - (sigma - pri.sigma_mean) / pri.sigma_sd**2 * sigma + 1.0

        A_bar = np.tril(E.T @ F)
        grad[layout.corr] = _corr_backward(z, w, A, A_bar, pri.lkj_eta, with_prior=True)

        if not np.all(np.isfinite(grad)):
            return -np.inf, None
        return float(total), grad


def log_joint(v: np.ndarray, spec: ModelSpec, Y: np.ndarray) -> float:
    """Joint log-density of data, latent inputs and parameters (unnormalized)."""
    lp, _ = log_joint_and_grad(v, spec, Y, want_grad=False)
    return lp


def grad_log_joint(v: np.ndarray, spec: ModelSpec, Y: np.ndarray) -> np.ndarray:
    """Analytic gradient of `log_joint`; undefined (None) where the density is -inf."""
    _, g = log_joint_and_grad(v, spec, Y, want_grad=True)
    return g


# ---------------------------------------------------------------------------
# posterior object consumed by the sampler
# ---------------------------------------------------------------------------

class LatentGPPosterior:
    """Binds a ModelSpec and a data matrix into a differentiable log-density."""

    def __init__(self, spec: ModelSpec, Y: np.ndarray):
        Y = np.asarray(Y, dtype=float)
        if Y.shape != (spec.N, spec.D):
            raise ValueError(f"Y has shape {Y.shape}, expected {(spec.N, spec.D)}")
        if not np.all(np.isfinite(Y)):
            bad = np.argwhere(~np.isfinite(Y))[0]
            raise ValueError(f"non-finite data value at row {bad[0]}, column {bad[1]}")
        self.spec = spec
        self.Y = Y
        self.layout = spec.layout
        self.dim = self.layout.size

    def logp_and_grad(self, v: np.ndarray):
        return log_joint_and_grad(v, self.spec, self.Y)

    def logp(self, v: np.ndarray) -> float:
        return log_joint(v, self.spec, self.Y)

    def initial_point(self) -> np.ndarray:
        """Latent x at x_tilde, scales at prior-mean transforms, weights at zero."""
        layout, pri = self.layout, self.spec.priors
        v = np.zeros(layout.size)
        v[layout.x] = self.spec.x_tilde
        v[layout.log_rho] = math.log(pri.rho_mean)
        v[layout.log_alpha] = math.log(pri.alpha_mean)
        v[layout.log_sigma] = math.log(pri.sigma_mean)
        v[layout.mu] = pri.mu_mean
        return v

    def constrain_draw(self, v: np.ndarray) -> np.ndarray:
        """Constrained vector in `constrained_names` order (corr block = C entries)."""
        params = constrain(v, self.spec)
        C = params.C
        corr = C[np.tril_indices(self.spec.D, k=-1)]
        return np.concatenate([
            params.x, params.rho, params.alpha, params.sigma, params.mu,
            params.beta.reshape(-1, order="F"), corr,
        ])

    @property
    def constrained_names(self) -> list[str]:
        return self.layout.constrained_names()

    @property
    def primary_mask(self) -> np.ndarray:
        return self.layout.primary_mask()
