"""Hamiltonian Monte Carlo with dual-averaged step size.

Fixed-length leapfrog trajectories (default 32 steps) with a small
uniform step-size jitter; tuning adapts the step size toward a target
acceptance rate by dual averaging and fits a diagonal mass matrix from
the first adaptation phase. Chains are independent given their seeds.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericalError

LogpGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class HmcOptions:
    leapfrog_steps: int = 32
    target_accept: float = 0.9
    step_jitter: float = 0.2  # step size drawn from eps * U(1-j, 1+j)
    init_step: float | None = None
    adapt_mass: bool = True
    divergence_energy: float = 1000.0
    max_divergence_rate: float = 0.25


@dataclass
class ChainResult:
    draws: np.ndarray  # (n_draws, dim)
    accept_rate: float
    divergences: int
    step_size: float
    logps: np.ndarray = field(default_factory=lambda: np.empty(0))


class _DualAveraging:
    """Nesterov dual averaging of log step size (standard constants)."""

    def __init__(self, initial_step: float, target: float):
        self.mu = np.log(10.0 * initial_step)
        self.target = target
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.t = 0
        self.gamma = 0.05
        self.t0 = 10.0
        self.kappa = 0.75

    def update(self, accept_prob: float) -> float:
        self.t += 1
        frac = 1.0 / (self.t + self.t0)
        self.h_bar = (1 - frac) * self.h_bar + frac * (self.target - accept_prob)
        log_eps = self.mu - np.sqrt(self.t) / self.gamma * self.h_bar
        eta = self.t**-self.kappa
        self.log_eps_bar = eta * log_eps + (1 - eta) * self.log_eps_bar
        return float(np.exp(log_eps))

    @property
    def adapted_step(self) -> float:
        return float(np.exp(self.log_eps_bar))


def _leapfrog(
    logp_grad: LogpGrad,
    x: np.ndarray,
    p: np.ndarray,
    grad: np.ndarray,
    eps: float,
    steps: int,
    inv_mass: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    x = x.copy()
    p = p + 0.5 * eps * grad
    for i in range(steps):
        x = x + eps * inv_mass * p
        logp, grad = logp_grad(x)
        if not np.all(np.isfinite(grad)) or not np.isfinite(logp):
            return x, p, -np.inf, grad
        p = p + (eps if i < steps - 1 else 0.5 * eps) * grad
    return x, p, logp, grad


def _energy(logp: float, p: np.ndarray, inv_mass: np.ndarray) -> float:
    return -logp + 0.5 * float((p * p * inv_mass).sum())


def find_initial_step(
    logp_grad: LogpGrad, x: np.ndarray, rng: np.random.Generator, inv_mass: np.ndarray
) -> float:
    """Double/halve until the one-step acceptance crosses 1/2."""
    eps = 1.0
    logp, grad = logp_grad(x)
    p = rng.standard_normal(x.size) / np.sqrt(inv_mass)
    h0 = _energy(logp, p, inv_mass)
    x1, p1, logp1, _ = _leapfrog(logp_grad, x, p, grad, eps, 1, inv_mass)
    delta = h0 - _energy(logp1, p1, inv_mass) if np.isfinite(logp1) else -np.inf
    direction = 1.0 if delta > np.log(0.5) else -1.0
    for _ in range(50):
        eps *= 2.0**direction
        x1, p1, logp1, _ = _leapfrog(logp_grad, x, p, grad, eps, 1, inv_mass)
        delta = h0 - _energy(logp1, p1, inv_mass) if np.isfinite(logp1) else -np.inf
        if direction * delta <= direction * np.log(0.5):
            break
    return max(eps, 1e-10)


def run_chain(
    logp_grad: LogpGrad,
    x0: np.ndarray,
    n_tune: int,
    n_draws: int,
    rng: np.random.Generator,
    opts: HmcOptions = HmcOptions(),
) -> ChainResult:
    x = np.asarray(x0, dtype=np.float64).copy()
    dim = x.size
    inv_mass = np.ones(dim)
    logp, grad = logp_grad(x)
    if not np.isfinite(logp):
        raise NumericalError("log posterior not finite at the initial point")

    eps = opts.init_step or find_initial_step(logp_grad, x, rng, inv_mass)
    da = _DualAveraging(eps, opts.target_accept)
    phase1 = n_tune // 2 if opts.adapt_mass else n_tune
    window: list[np.ndarray] = []

    def transition(eps_now: float) -> tuple[float, bool]:
        nonlocal x, logp, grad
        use_eps = eps_now * rng.uniform(1 - opts.step_jitter, 1 + opts.step_jitter)
        p = rng.standard_normal(dim) / np.sqrt(inv_mass)
        h0 = _energy(logp, p, inv_mass)
        x1, p1, logp1, grad1 = _leapfrog(logp_grad, x, p, grad, use_eps, opts.leapfrog_steps, inv_mass)
        h1 = _energy(logp1, p1, inv_mass) if np.isfinite(logp1) else np.inf
        diverged = not np.isfinite(h1) or (h1 - h0) > opts.divergence_energy
        accept_prob = 0.0 if diverged else min(1.0, float(np.exp(h0 - h1)))
        if rng.random() < accept_prob:
            x, logp, grad = x1, logp1, grad1
        return accept_prob, diverged

    for t in range(n_tune):
        a, _ = transition(eps)
        eps = da.update(a)
        if opts.adapt_mass and phase1 // 2 <= t < phase1:
            window.append(x.copy())
        if opts.adapt_mass and t == phase1 - 1 and window:
            var = np.var(np.stack(window), axis=0)
            m = len(window)
            inv_mass = (m * var + 5.0 * 1.0) / (m + 5.0)  # shrink toward unit
            inv_mass = np.clip(inv_mass, 1e-8, 1e8)
            eps = find_initial_step(logp_grad, x, rng, inv_mass)
            da = _DualAveraging(eps, opts.target_accept)
    eps = da.adapted_step if n_tune > 0 else eps

    draws = np.empty((n_draws, dim))
    logps = np.empty(n_draws)
    accepts = 0.0
    divergences = 0
    for t in range(n_draws):
        a, div = transition(eps)
        accepts += a
        divergences += int(div)
        draws[t] = x
        logps[t] = logp
    if n_draws > 0 and divergences / n_draws > opts.max_divergence_rate:
        raise NumericalError(
            f"divergence rate {divergences}/{n_draws} exceeds "
            f"{opts.max_divergence_rate:.0%} after tuning (step size {eps:.3g})"
        )
    return ChainResult(
        draws=draws,
        accept_rate=accepts / max(n_draws, 1),
        divergences=divergences,
        step_size=eps,
        logps=logps,
    )


def run_chains(
    logp_grad: LogpGrad,
    x0: np.ndarray,
    chains: int,
    n_tune: int,
    n_draws: int,
    seed: int,
    opts: HmcOptions = HmcOptions(),
    init_spread: float = 0.1,
) -> list[ChainResult]:
    results = []
    for c in range(chains):
        rng = np.random.default_rng(seed + 1000 * c)
        start = np.asarray(x0, dtype=np.float64) + init_spread * rng.standard_normal(np.size(x0))
        results.append(run_chain(logp_grad, start, n_tune, n_draws, rng, opts))
    return results


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def split_rhat(chains: np.ndarray) -> np.ndarray:
    """Classic split-chain potential scale reduction factor, floored at 1.

    `chains` is (m, n) or (m, n, dim); each chain is split in half. Chains
    with zero within-half variance report +inf when their levels disagree
    and NaN (with a warning, not an abort) when fully degenerate.
    """
    a = np.asarray(chains, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    m, n, dim = a.shape
    if m < 2 or n < 2:
        raise ValueError("need at least 2 chains with at least 2 draws each")
    half = n // 2
    halves = np.concatenate([a[:, :half], a[:, half : 2 * half]], axis=0)  # (2m, half, dim)
    means = halves.mean(axis=1)
    w = halves.var(axis=1, ddof=1).mean(axis=0)
    b = half * means.var(axis=0, ddof=1)
    degenerate = w <= 0
    if degenerate.any():
        warnings.warn(
            "zero within-chain variance; R-hat is inf or NaN there", RuntimeWarning
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        var_plus = (half - 1) / half * w + b / half
        out = np.maximum(np.sqrt(var_plus / w), 1.0)
    out[degenerate & (b > 0)] = np.inf
    out[degenerate & (b <= 0)] = np.nan
    return out


def ess(chain: np.ndarray) -> float:
    """Effective sample size via Geyer's initial positive sequence."""
    x = np.asarray(chain, dtype=np.float64).ravel()
    n = x.size
    if n < 4:
        return float(n)
    x = x - x.mean()
    var = float((x * x).sum() / n)
    if var <= 0:
        return float(n)
    f = np.fft.rfft(np.concatenate([x, np.zeros(n)]))
    acov = np.fft.irfft(f * np.conj(f))[:n] / n
    rho = acov / acov[0]
    tau = 1.0
    for k in range(1, n // 2):
        pair = rho[2 * k - 1] + rho[2 * k]
        if pair < 0:
            break
        tau += 2.0 * pair
    return float(n / max(tau, 1.0))
