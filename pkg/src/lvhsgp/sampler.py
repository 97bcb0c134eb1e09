"""Adaptive Hamiltonian Monte Carlo: dynamic multinomial no-U-turn sampler.

Warmup adapts a step size by dual averaging toward a target acceptance
statistic and a diagonal mass matrix from expanding variance-estimation
windows (25/50/100/... draws, with short step-size-only buffers at both
ends).  Trajectories are built by iterative tree doubling with multinomial
sampling of the proposal, stopping on the generalized U-turn criterion or on
divergence (energy error above 1000).  Chains use independent generator
streams derived from the seed, so runs are reproducible bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["SamplerConfig", "ChainDraws", "leapfrog", "sample"]

_DIVERGENCE_ENERGY = 1000.0

# dual-averaging constants (Hoffman & Gelman defaults)
_DA_GAMMA = 0.05
_DA_T0 = 10.0
_DA_KAPPA = 0.75

# warmup schedule (step-size-only buffers around doubling variance windows)
_INIT_BUFFER = 75
_TERM_BUFFER = 150
_BASE_WINDOW = 25
_MU_RESTART_FACTOR = 10.0
_DA_TERM_GAMMA = 0.3


@dataclass(frozen=True)
class SamplerConfig:
    iterations: int = 2000
    warmup: int = 1000
    chains: int = 1
    target_accept: float = 0.8
    max_treedepth: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup < self.iterations:
            raise ValueError("need 0 <= warmup < iterations")
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target acceptance must lie in (0, 1)")


@dataclass(eq=False)
class ChainDraws:
    """Retained post-warmup draws and per-draw sampler statistics."""

    draws: np.ndarray           # (chains, kept, constrained dim)
    unconstrained: np.ndarray   # (chains, kept, dim)
    divergent: np.ndarray       # (chains, kept) bool
    treedepth: np.ndarray       # (chains, kept) int
    step_size: np.ndarray       # (chains, kept)
    energy: np.ndarray          # (chains, kept)
    accept_stat: np.ndarray     # (chains, kept)
    param_names: list[str] | None = None
    adapted_step_size: np.ndarray | None = None
    warmup_divergences: int = 0

    @property
    def n_kept(self) -> int:
        return self.draws.shape[1]

    @property
    def n_divergent(self) -> int:
        return int(self.divergent.sum())


def leapfrog(position, momentum, step, gradient_fn, inv_mass=None):
    """One symplectic leapfrog step under a diagonal metric.

    ``gradient_fn(q)`` returns the gradient of the log-density.  Momentum is
    advanced half a step, position a full step with the inverse mass, then
    momentum the remaining half.
    """
    q = np.asarray(position, dtype=float)
    p = np.asarray(momentum, dtype=float)
    if inv_mass is None:
        inv_mass = np.ones_like(q)
    p_half = p + 0.5 * step * gradient_fn(q)
    q_new = q + step * inv_mass * p_half
    p_new = p_half + 0.5 * step * gradient_fn(q_new)
    return q_new, p_new


class _Welford:
    """Running mean/variance accumulator for metric estimation."""

    def __init__(self, dim):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def push(self, x):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def variance(self):
        if self.n < 2:
            return np.ones_like(self.mean)
        return self.m2 / (self.n - 1)


@dataclass
class _Leaf:
    q: np.ndarray
    p: np.ndarray
    lp: float
    grad: np.ndarray
    energy: float


class _Tree:
    """One NUTS trajectory tree: endpoints, momentum sum, weighted proposal."""

    __slots__ = ("minus", "plus", "rho", "proposal", "log_weight",
                 "sum_accept", "n_leaves", "divergent", "turned")

    def __init__(self, leaf, log_weight, accept, divergent):
        self.minus = leaf
        self.plus = leaf
        self.rho = leaf.p.copy()
        self.proposal = leaf
        self.log_weight = log_weight
        self.sum_accept = accept
        self.n_leaves = 1
        self.divergent = divergent
        self.turned = False


def _log_add_exp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    m = max(a, b)
    return m + math.log(math.exp(a - m) + math.exp(b - m))


def _uturn(rho, p_minus, p_plus, inv_mass):
    return (np.dot(rho, inv_mass * p_minus) <= 0.0) or (np.dot(rho, inv_mass * p_plus) <= 0.0)


class _NutsChain:
    def __init__(self, model, config, init, rng):
        self.model = model
        self.config = config
        self.rng = rng
        self.inv_mass = np.ones(model.dim)
        lp, grad = model.logp_and_grad(init)
        if not np.isfinite(lp):
            raise ValueError("initial point has non-finite log-density")
        self.q = np.asarray(init, dtype=float).copy()
        self.lp = lp
        self.grad = grad

    # -- hamiltonian pieces -------------------------------------------------
    def _kinetic(self, p):
        return 0.5 * float(np.dot(p, self.inv_mass * p))

    def _draw_momentum(self):
        return self.rng.standard_normal(self.model.dim) / np.sqrt(self.inv_mass)

    # -- step-size heuristic ------------------------------------------------
    def _find_reasonable_step(self, eps=1.0):
        p = self._draw_momentum()
        h0 = -self.lp + self._kinetic(p)
        direction = None
        for _ in range(100):
            q1, p1, lp1, _ = self._leap(self.q, p, self.grad, eps)
            if np.isfinite(lp1):
                h1 = -lp1 + self._kinetic(p1)
                log_ratio = h0 - h1
            else:
                log_ratio = -np.inf
            want_bigger = log_ratio > math.log(0.5)
            if direction is None:
                direction = 1 if want_bigger else -1
            if want_bigger != (direction == 1):
                break
            eps *= 2.0 if direction == 1 else 0.5
            if eps > 1e7 or eps < 1e-10:
                break
        return eps

    def _leap(self, q, p, grad, eps):
        p_half = p + 0.5 * eps * grad
        q_new = q + eps * self.inv_mass * p_half
        lp_new, grad_new = self.model.logp_and_grad(q_new)
        if grad_new is None:
            return q_new, p_half, -np.inf, None
        p_new = p_half + 0.5 * eps * grad_new
        return q_new, p_new, lp_new, grad_new

    # -- tree construction ----------------------------------------------------
    def _build_tree(self, leaf, depth, direction, eps, h0):
        if depth == 0:
            q, p, lp, grad = self._leap(leaf.q, leaf.p, leaf.grad, direction * eps)
            if grad is None or not np.isfinite(lp):
                node = _Leaf(q, p, -np.inf, leaf.grad, np.inf)
                tree = _Tree(node, -np.inf, 0.0, True)
                return tree
            energy = -lp + self._kinetic(p)
            delta = h0 - energy  # log importance weight relative to start
            divergent = (energy - h0) > _DIVERGENCE_ENERGY or not np.isfinite(energy)
            accept = min(1.0, math.exp(min(delta, 0.0))) if np.isfinite(delta) else 0.0
            node = _Leaf(q, p, lp, grad, energy)
            return _Tree(node, delta if not divergent else -np.inf, accept, divergent)

        inner = self._build_tree(leaf, depth - 1, direction, eps, h0)
        if inner.divergent or inner.turned:
            return inner
        edge = inner.plus if direction == 1 else inner.minus
        outer = self._build_tree(edge, depth - 1, direction, eps, h0)

        inner.sum_accept += outer.sum_accept
        inner.n_leaves += outer.n_leaves
        if outer.divergent:
            inner.divergent = True
            return inner
        if outer.turned:
            # an invalid half invalidates the whole subtree; the caller discards it
            inner.turned = True
            return inner
        total = _log_add_exp(inner.log_weight, outer.log_weight)
        # multinomial sampling within the subtree
        if math.log(self.rng.random()) < outer.log_weight - total:
            inner.proposal = outer.proposal
        inner.log_weight = total
        if direction == 1:
            inner.plus = outer.plus
        else:
            inner.minus = outer.minus
        inner.rho = inner.rho + outer.rho
        if _uturn(inner.rho, inner.minus.p, inner.plus.p, self.inv_mass):
            inner.turned = True
        return inner

    def transition(self, eps):
        """One NUTS transition; returns per-draw statistics."""
        p0 = self._draw_momentum()
        h0 = -self.lp + self._kinetic(p0)
        start = _Leaf(self.q, p0, self.lp, self.grad, h0)
        tree = _Tree(start, 0.0, 0.0, False)
        depth = 0
        divergent = False
        sum_accept = 0.0
        n_leaves = 0
        while depth < self.config.max_treedepth:
            direction = 1 if self.rng.random() < 0.5 else -1
            edge = tree.plus if direction == 1 else tree.minus
            sub = self._build_tree(edge, depth, direction, eps, h0)
            sum_accept += sub.sum_accept
            n_leaves += sub.n_leaves
            if sub.divergent:
                divergent = True
                break
            if sub.turned:
                # the doubling is invalid; discard the fresh subtree entirely
                break
            # biased progressive sampling favors the fresh subtree
            if math.log(self.rng.random()) < sub.log_weight - tree.log_weight:
                tree.proposal = sub.proposal
            tree.log_weight = _log_add_exp(tree.log_weight, sub.log_weight)
            if direction == 1:
                tree.plus = sub.plus
            else:
                tree.minus = sub.minus
            tree.rho = tree.rho + sub.rho
            depth += 1
            if _uturn(tree.rho, tree.minus.p, tree.plus.p, self.inv_mass):
                break
        chosen = tree.proposal
        self.q, self.lp, self.grad = chosen.q, chosen.lp, chosen.grad
        accept_stat = sum_accept / max(n_leaves, 1)
        return accept_stat, depth, divergent, chosen.energy


def _variance_windows(warmup):
    """(start, end) pairs of the doubling variance-estimation windows."""
    if warmup < _INIT_BUFFER + _BASE_WINDOW + _TERM_BUFFER:
        return []
    windows = []
    start = _INIT_BUFFER
    size = _BASE_WINDOW
    last = warmup - _TERM_BUFFER
    while True:
        end = start + size
        # extend the final window to the terminal buffer
        if end + 2 * size > last:
            end = last
        windows.append((start, end))
        if end >= last:
            break
        start = end
        size *= 2
    return windows


def sample(model, config: SamplerConfig, init=None) -> ChainDraws:
    """Run NUTS chains against ``model`` (an object with dim / logp_and_grad).

    ``model.constrain_draw`` (optional) maps an unconstrained draw to the
    stored constrained vector; ``model.constrained_names`` labels it.  Draws
    are deterministic given the seed.
    """
    dim = model.dim
    constrain_draw = getattr(model, "constrain_draw", None)
    names = getattr(model, "constrained_names", None)
    if init is None:
        init = model.initial_point()
    init = np.asarray(init, dtype=float)
    if init.shape != (dim,):
        raise ValueError(f"init has shape {init.shape}, expected ({dim},)")

    kept = config.iterations - config.warmup
    cdim = constrain_draw(init).size if constrain_draw is not None else dim
    out = ChainDraws(
        draws=np.empty((config.chains, kept, cdim)),
        unconstrained=np.empty((config.chains, kept, dim)),
        divergent=np.zeros((config.chains, kept), dtype=bool),
        treedepth=np.zeros((config.chains, kept), dtype=int),
        step_size=np.empty((config.chains, kept)),
        energy=np.empty((config.chains, kept)),
        accept_stat=np.empty((config.chains, kept)),
        param_names=list(names) if names is not None else None,
        adapted_step_size=np.empty(config.chains),
    )

    streams = np.random.SeedSequence(config.seed).spawn(config.chains)
    windows = _variance_windows(config.warmup)

    for c in range(config.chains):
        rng = np.random.default_rng(streams[c])
        chain = _NutsChain(model, config, init, rng)

        eps = chain._find_reasonable_step()
        mu_da = math.log(10.0 * eps)
        da_gamma = _DA_GAMMA
        log_eps_bar, h_bar, da_count = 0.0, 0.0, 0
        welford = _Welford(dim)
        window_idx = 0
        warmup_div = 0

        for it in range(config.iterations):
            warming = it < config.warmup
            accept, depth, divergent, energy = chain.transition(eps)

            if warming:
                warmup_div += int(divergent)
                # dual averaging toward the target acceptance statistic
                da_count += 1
                frac = 1.0 / (da_count + _DA_T0)
                h_bar = (1 - frac) * h_bar + frac * (config.target_accept - accept)
                log_eps = mu_da - math.sqrt(da_count) / da_gamma * h_bar
                w = da_count ** -_DA_KAPPA
                log_eps_bar = w * log_eps + (1 - w) * log_eps_bar
                eps = math.exp(log_eps)

                if window_idx < len(windows):
                    start, end = windows[window_idx]
                    if start <= it < end:
                        welford.push(chain.q)
                    if it == end - 1:
                        n = welford.n
                        var = welford.variance()
                        chain.inv_mass = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                        welford = _Welford(dim)
                        window_idx += 1
                        eps = chain._find_reasonable_step(eps)
                        terminal = window_idx == len(windows)
                        da_gamma = _DA_TERM_GAMMA if terminal else _DA_GAMMA
                        mu_da = math.log((1.0 if terminal else _MU_RESTART_FACTOR) * eps)
                        log_eps_bar, h_bar, da_count = 0.0, 0.0, 0
                if it == config.warmup - 1:
                    if warmup_div >= config.warmup:
                        raise RuntimeError(
                            "sampler diverged on every warmup iteration "
                            f"(chain {c}, step size {eps:.3g}); the posterior "
                            "geometry is unusable, check the model or data scale"
                        )
                    eps = math.exp(log_eps_bar)
            else:
                k = it - config.warmup
                out.unconstrained[c, k] = chain.q
                out.draws[c, k] = constrain_draw(chain.q) if constrain_draw is not None else chain.q
                out.divergent[c, k] = divergent
                out.treedepth[c, k] = depth
                out.step_size[c, k] = eps
                out.energy[c, k] = energy
                out.accept_stat[c, k] = accept

        out.adapted_step_size[c] = eps
        out.warmup_divergences += warmup_div

    if not np.all(np.isfinite(out.draws)):
        raise RuntimeError("non-finite values in retained draws")
    return out
