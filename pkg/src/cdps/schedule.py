"""Noise schedules for variance-exploding (EDM) and DDPM/DDIM sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SIGMA_MAX = 80.0
SIGMA_MIN = 0.002
RHO = 7.0

# Step counts found sufficient for each use.
STEPS_UNCONDITIONAL = 18
STEPS_LINEAR = 32
STEPS_NONLINEAR = 250


@dataclass(frozen=True)
class EdmSchedule:
    """Karras-style sigma ladder ``sigmas[0] = sigma_max ... sigmas[N-1] = sigma_min, sigmas[N] = 0``."""

    n_steps: int = STEPS_UNCONDITIONAL
    sigma_max: float = SIGMA_MAX
    sigma_min: float = SIGMA_MIN
    rho: float = RHO
    sigmas: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.n_steps == 1:
            sig = np.array([self.sigma_max, 0.0])
        else:
            sig = np.array([edm_sigma(self, i) for i in range(self.n_steps + 1)])
        sig.setflags(write=False)
        object.__setattr__(self, "sigmas", sig)

    def to_config(self) -> dict:
        return {"n_steps": self.n_steps, "sigma_max": self.sigma_max, "sigma_min": self.sigma_min, "rho": self.rho}


def edm_sigma(schedule: EdmSchedule, i: int) -> float:
    n = schedule.n_steps
    if not 0 <= i <= n:
        raise IndexError(f"step {i} outside 0..{n}")
    if i == n:
        return 0.0
    if i == 0:
        return float(schedule.sigma_max)
    if n < 2:
        raise ValueError("interior steps need n_steps >= 2")
    if i == n - 1:
        return float(schedule.sigma_min)
    inv = 1.0 / schedule.rho
    a = schedule.sigma_max**inv
    b = schedule.sigma_min**inv
    return float((a + i / (n - 1) * (b - a)) ** schedule.rho)


@dataclass(frozen=True)
class DdpmSchedule:
    """Discrete variance-preserving schedule indexed ``t = 1..T``.

    Arrays are stored with a leading entry for ``t = 0`` (``alpha_bar[0] = 1``,
    ``beta[0] = 0``) so that ``alpha_bars[t]`` reads like the math.
    """

    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64).ravel()
        if b.size < 1:
            raise ValueError("need at least one beta")
        if not np.all((b > 0) & (b < 1)):
            raise ValueError("betas must lie in (0, 1)")
        b = np.concatenate([[0.0], b])
        b.setflags(write=False)
        object.__setattr__(self, "betas", b)
        alphas = 1.0 - b
        abar = np.cumprod(alphas)
        for a in (alphas, abar):
            a.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", abar)

    @property
    def T(self) -> int:
        return self.betas.size - 1

    def ve_sigma(self, t: int) -> float:
        """Noise level of ``x_t / sqrt(alpha_bar_t)`` read as a VE state."""
        ab = self.alpha_bars[t]
        return float(np.sqrt((1.0 - ab) / ab))


def build_linear_beta_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DdpmSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if T == 1:
        return DdpmSchedule(np.array([beta_start]))
    return DdpmSchedule(np.linspace(beta_start, beta_end, T))


def ddpm_sigma_tilde(schedule: DdpmSchedule, t: int, stochastic: bool) -> float:
    """Injected-noise std at step ``t``: 0 for DDIM, the ancestral value for DDPM.

    The ancestral value is ``sqrt((1 - abar_{t-1}) / (1 - abar_t)) * sqrt(1 - abar_t / abar_{t-1})``.
    """
    if not 1 <= t <= schedule.T:
        raise IndexError(f"t={t} outside 1..{schedule.T}")
    if not stochastic:
        return 0.0
    ab_t = schedule.alpha_bars[t]
    ab_prev = schedule.alpha_bars[t - 1]
    return float(np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev))
