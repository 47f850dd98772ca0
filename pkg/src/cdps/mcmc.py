"""Preconditioned Crank-Nicolson MCMC with Gelman-Rubin and autocorrelation
diagnostics.

Two modes share one proposal:

``direct-gaussian``
    ``x' = m + sqrt(1 - beta^2) (x - m) + beta L xi`` for a Gaussian prior
    ``N(m, L L^T)``.
``latent-ode``
    ``z' = sqrt(1 - beta^2) z + beta xi`` on a standard-normal latent, with the
    likelihood evaluated at ``G(z)`` for a deterministic generator ``G``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .rng import stream

MODES = ("direct-gaussian", "latent-ode")


@dataclass(frozen=True)
class PcnConfig:
    beta: float = 0.03
    n_iterations: int = 50000
    n_chains: int = 3
    burn_in: float = 0.5
    thin: int = 50
    mode: str = "direct-gaussian"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if self.n_chains < 1 or self.n_iterations < 1 or self.thin < 1:
            raise ValueError("n_chains, n_iterations and thin must be positive")
        if not 0 <= self.burn_in < 1:
            raise ValueError("burn_in must lie in [0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class PcnProblem:
    """Prior plus log-likelihood.

    In direct mode ``mean`` and ``chol`` (a lower factor, or a vector of
    stds) define the prior. In latent mode ``generator`` maps the latent to
    model space; ``mean``/``chol`` are ignored and the latent is ``N(0, I)``.
    """

    log_likelihood: Callable[[np.ndarray], float]
    dim: int
    mean: np.ndarray | None = None
    chol: np.ndarray | None = None
    generator: Callable[[np.ndarray], np.ndarray] | None = None

    @classmethod
    def from_gaussian(cls, prior, log_likelihood) -> "PcnProblem":
        chol = prior._chol
        return cls(log_likelihood, prior.dim, np.asarray(prior.mean), np.asarray(chol))

    def to_model(self, state: np.ndarray) -> np.ndarray:
        return state if self.generator is None else self.generator(state)

    def prior_draw(self, rng) -> np.ndarray:
        xi = rng.standard_normal(self.dim)
        if self.chol is None:
            return xi
        return xi * self.chol if self.chol.ndim == 1 else self.chol @ xi


@dataclass
class ChainState:
    x: np.ndarray
    log_lik: float
    n_accepted: int = 0
    n_steps: int = 0
    samples: list = field(default_factory=list)

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / self.n_steps if self.n_steps else 0.0


def _proposal(state_x, config: PcnConfig, problem: PcnProblem, rng):
    b = config.beta
    xi = problem.prior_draw(rng) if config.mode == "direct-gaussian" else rng.standard_normal(problem.dim)
    c = np.sqrt(1.0 - b * b)
    if config.mode == "direct-gaussian" and problem.mean is not None:
        return problem.mean + c * (state_x - problem.mean) + b * xi
    return c * state_x + b * xi


def pcn_step(state: ChainState, config: PcnConfig, problem: PcnProblem, rng) -> ChainState:
    """One Metropolis step with acceptance ``min(1, L(x') / L(x))``.

    The proposal is drawn (and the uniform consumed) even when ``beta = 0``
    so that random streams stay aligned across settings.
    """
    prop = _proposal(state.x, config, problem, rng)
    u = rng.uniform()
    ll = problem.log_likelihood(problem.to_model(prop))
    log_alpha = min(0.0, ll - state.log_lik)
    state.n_steps += 1
    if np.log(u) < log_alpha or ll == state.log_lik:
        state.x, state.log_lik = prop, ll
        state.n_accepted += 1
    return state


def _run_one(config: PcnConfig, problem: PcnProblem, chain: int, x_init=None) -> ChainState:
    rng = stream(config.seed, chain)
    x0 = problem.prior_draw(rng) if x_init is None else np.asarray(x_init, dtype=np.float64)
    if x_init is None and config.mode == "direct-gaussian" and problem.mean is not None:
        x0 = problem.mean + x0
    state = ChainState(x0, problem.log_likelihood(problem.to_model(x0)))
    start = int(config.burn_in * config.n_iterations)
    for it in range(config.n_iterations):
        pcn_step(state, config, problem, rng)
        if it >= start and (it - start) % config.thin == 0:
            state.samples.append(problem.to_model(state.x).copy())
    return state


@dataclass
class PcnResult:
    samples: np.ndarray  # (n_chains, n_kept, d) in model space
    acceptance: np.ndarray
    rhat: np.ndarray
    rhat_degenerate: np.ndarray
    acf: np.ndarray  # (d, max_lag + 1), averaged over chains
    states: list


def run_chains(config: PcnConfig, problem: PcnProblem, workers: int = 1, max_lag: int = 20) -> PcnResult:
    """Run ``config.n_chains`` independent chains (chain ``c`` uses stream ``(seed, c)``)."""

    def job(c):
        return _run_one(config, problem, c)

    if workers > 1 and config.n_chains > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            states = list(pool.map(job, range(config.n_chains)))
    else:
        states = [job(c) for c in range(config.n_chains)]
    samples = np.stack([np.asarray(s.samples).reshape(len(s.samples), -1) for s in states])
    acc = np.array([s.acceptance_rate for s in states])
    if config.n_chains >= 2 and samples.shape[1] >= 10:
        rhat, deg = gelman_rubin(samples)
    else:
        rhat, deg = np.full(samples.shape[2], np.nan), np.zeros(samples.shape[2], dtype=bool)
    lag = min(max_lag, samples.shape[1] - 1)
    acf = np.zeros((samples.shape[2], lag + 1))
    for ch in samples:
        for j in range(samples.shape[2]):
            acf[j] += _acf_or_flat(ch[:, j], lag)
    acf /= samples.shape[0]
    return PcnResult(samples, acc, rhat, deg, acf, states)


def _acf_or_flat(trace, lag):
    if np.var(trace) == 0:
        out = np.zeros(lag + 1)
        out[0] = 1.0
        return out
    return autocorrelation(trace, lag)


def gelman_rubin(chains) -> tuple[np.ndarray, np.ndarray]:
    """Potential scale reduction per parameter for ``chains`` of shape (m, n) or (m, n, d).

    Uses ``V = W + (1 + 1/m) B / n`` so that identical chains give exactly 1.
    Parameters whose traces all have zero variance return 1 and are flagged
    in the second output.
    """
    c = np.asarray(chains, dtype=np.float64)
    if c.ndim == 2:
        c = c[..., None]
    m, n = c.shape[:2]
    if m < 2 or n < 10:
        raise ValueError("need at least 2 chains of length >= 10")
    w = np.mean(np.var(c, axis=1, ddof=1), axis=0)
    b = n * np.var(np.mean(c, axis=1), axis=0, ddof=1)
    degenerate = w == 0
    v = w + (1.0 + 1.0 / m) * b / n
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(np.where(degenerate, 1.0, v / np.where(degenerate, 1.0, w)))
    return rhat, degenerate


def autocorrelation(trace, max_lag: int) -> np.ndarray:
    """Normalized autocovariance ``c(k) / c(0)`` for ``k = 0..max_lag`` (biased estimator)."""
    x = np.asarray(trace, dtype=np.float64).ravel()
    if x.size <= max_lag:
        raise ValueError("trace must be longer than max_lag")
    x = x - x.mean()
    c0 = np.dot(x, x)
    if c0 == 0:
        raise ValueError("zero-variance trace")
    n = x.size
    return np.array([np.dot(x[: n - k], x[k:]) / c0 for k in range(max_lag + 1)])


def acf_half_life(acf) -> int:
    """First lag at which the autocorrelation drops below 0.5 (len(acf) if never)."""
    below = np.nonzero(np.asarray(acf) < 0.5)[0]
    return int(below[0]) if below.size else len(acf)


def gaussian_log_likelihood(operator, data, sigma_d) -> Callable:
    """``log N(data; F(x), diag(sigma_d^2))`` up to a constant, for a single state ``x``."""
    d = np.asarray(data, dtype=np.float64)
    sd = np.asarray(sigma_d, dtype=np.float64)

    shape = getattr(operator, "grid_shape", None)

    def ll(x):
        x = np.asarray(x, dtype=np.float64)
        if hasattr(operator, "forward"):
            pred = operator.forward(x.reshape((1,) + (shape or x.shape)))[0]
        else:
            pred = operator @ x.ravel()
        return float(-0.5 * np.sum(((pred - d) / sd) ** 2))

    return ll


def edm_generator(score_model, schedule, shape) -> Callable:
    """Deterministic map from a standard-normal latent to the ODE sample ``x_0``."""
    from .samplers import SamplerConfig, _edm_chunk, _Posterior

    post = _Posterior(score_model, [], SamplerConfig("edm", "unconditional", schedule.n_steps), None)
    shape = tuple(shape)

    def gen(z):
        x = schedule.sigma_max * np.asarray(z, dtype=np.float64).reshape((1,) + shape)
        out, div = _edm_chunk(post, x, schedule.sigmas, lambda *_: None)
        if div[0] >= 0:
            raise FloatingPointError(f"generator diverged at step {div[0]}")
        return out[0].ravel()

    return gen
