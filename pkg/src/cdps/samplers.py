"""Diffusion samplers: unconditional EDM (Heun), DPS and CDPS in the EDM
framework, and CDPS/DPS for DDPM and DDIM.

A score model is any object with ``denoise(x, sigma)`` and
``denoise_and_vjp(x, sigma) -> (x0_hat, vjp)`` acting on batched states
``(n, *event_shape)`` of the variance-exploding process ``x_t = x_0 + sigma z``.

Sampling is batched: ``n`` samples are split into fixed-size chunks (the
unit of work handed to workers); sample ``i`` draws all its randomness from
its own stream ``(seed, i)``. Results are therefore bitwise independent of
the worker count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .denoiser import CalibrationTable
from .forward import NoiseModel
from .rng import stream
from .schedule import DdpmSchedule, EdmSchedule, build_linear_beta_schedule, ddpm_sigma_tilde

logger = logging.getLogger(__name__)

FRAMEWORKS = ("edm", "ddpm", "ddim")
METHODS = ("unconditional", "dps", "cdps")
JAC_MODES = ("exact", "identity")


@dataclass
class LikelihoodTerm:
    """Forward operator, observed data and data-noise model.

    ``refresh`` is the Jacobian refresh interval in sampler steps for
    operators whose data covariance needs a Jacobian (nonlinear ones).
    """

    operator: object
    data: np.ndarray
    noise: NoiseModel
    refresh: int = 1
    name: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).ravel()
        if self.data.size != self.operator.n_data:
            raise ValueError(f"data length {self.data.size} does not match operator output {self.operator.n_data}")
        if self.refresh < 1:
            raise ValueError("refresh interval must be >= 1")
        self.sigma_d = self.noise.stds(self.data, getattr(self.operator, "channels", None))

    def wrmse(self, x) -> np.ndarray:
        pred = self.operator.forward(x)
        return np.sqrt(np.mean(((pred - self.data) / self.sigma_d) ** 2, axis=-1))


@dataclass(frozen=True)
class SamplerConfig:
    framework: str = "edm"
    method: str = "cdps"
    n_steps: int = 32
    jac_mode: str = "exact"
    # Legacy DPS options: weight replacing 1 / sigma_d^2, and the RMSE form.
    rho: float | None = None
    rmse: bool = False
    seed: int = 0
    chunk_size: int = 16

    def __post_init__(self):
        if self.framework not in FRAMEWORKS:
            raise ValueError(f"framework must be one of {FRAMEWORKS}")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.jac_mode not in JAC_MODES:
            raise ValueError(f"jac_mode must be one of {JAC_MODES}")
        if self.framework == "edm" and self.n_steps < 2:
            raise ValueError("EDM sampling needs n_steps >= 2")
        if self.n_steps < 1 or self.chunk_size < 1:
            raise ValueError("n_steps and chunk_size must be positive")
        if (self.rho is not None or self.rmse) and self.method != "dps":
            raise ValueError("legacy rho/rmse options are only valid with method dps")
        if self.rho is not None and self.rho <= 0:
            raise ValueError("rho must be positive")


class SamplerDiverged(FloatingPointError):
    def __init__(self, step: int, msg: str = ""):
        super().__init__(msg or f"non-finite state at step {step}")
        self.step = step


# --------------------------------------------------------------------------- #
# Likelihood scores
# --------------------------------------------------------------------------- #


def _chain(grad_x0, vjp, jac_mode):
    return grad_x0 if jac_mode == "identity" or vjp is None else vjp(grad_x0)


def _x0_gradient(term: LikelihoodTerm, x0, calib_sigma: float, rho=None, rmse=False, jac_cache=None):
    """Gradient w.r.t. ``x0`` of the negative log-likelihood (or a legacy surrogate)."""
    op = term.operator
    if rho is not None or rmse:
        r = op.forward(x0) - term.data
        w = 1.0 if rho is None else rho
        if rmse:
            norm = np.sqrt(np.mean(r**2, axis=-1, keepdims=True))
            v = w * r / (r.shape[-1] * np.where(norm > 0, norm, 1.0))
        else:
            v = 2.0 * w * r
        return op.vjp(x0, v)
    if jac_cache is not None and calib_sigma and not getattr(op, "linear", True):
        return op.quad_grad(x0, term.data, term.sigma_d, calib_sigma, J=jac_cache)
    return op.quad_grad(x0, term.data, term.sigma_d, calib_sigma)


def dps_likelihood_score(term: LikelihoodTerm, x0_hat, x_t=None, jac_mode: str = "exact", vjp=None,
                         rho=None, rmse: bool = False) -> np.ndarray:
    """Gaussian log-likelihood score w.r.t. ``x_t`` using the data noise only.

    ``vjp`` applies ``(d x0_hat / d x_t)^T``; with ``jac_mode="identity"``
    (or no ``vjp``) that Jacobian is taken as the identity. ``rho`` replaces
    ``1 / sigma_d^2`` by a fixed weight on the squared residual; ``rmse``
    differentiates the residual RMS instead.
    """
    g = _x0_gradient(term, x0_hat, 0.0, rho, rmse)
    return -_chain(g, vjp, jac_mode)


def cdps_likelihood_score(term: LikelihoodTerm, x0_hat, x_t=None, calib: CalibrationTable | None = None,
                          sigma_t: float = 0.0, jac_mode: str = "exact", vjp=None, jac_cache=None) -> np.ndarray:
    """Likelihood score with the data covariance widened by the propagated denoiser error.

    The covariance ``J (s^2 I) J^T + Sigma_d`` with ``s = calib(sigma_t)`` is
    held fixed while differentiating.
    """
    if calib is None:
        raise ValueError("CDPS needs a calibration table")
    s = float(calib.query(sigma_t))
    g = _x0_gradient(term, x0_hat, s, jac_cache=jac_cache)
    return -_chain(g, vjp, jac_mode)


# --------------------------------------------------------------------------- #
# Core loops on one chunk
# --------------------------------------------------------------------------- #


@dataclass
class _Posterior:
    """Evaluates prior and likelihood scores for one chunk and records WRMSE."""

    model: object
    terms: Sequence[LikelihoodTerm]
    config: SamplerConfig
    calib: CalibrationTable | None
    hook: Callable | None = None
    jac_caches: list = field(default_factory=list)

    def __post_init__(self):
        self.jac_caches = [None] * len(self.terms)

    def likelihood(self, x0, vjp, sigma, step):
        cfg = self.config
        out = []
        for j, term in enumerate(self.terms):
            if cfg.method == "dps":
                out.append(dps_likelihood_score(term, x0, None, cfg.jac_mode, vjp, cfg.rho, cfg.rmse))
                continue
            cache = None
            op = term.operator
            if term.refresh > 1 and not getattr(op, "linear", True):
                if step % term.refresh == 0 or self.jac_caches[j] is None:
                    self.jac_caches[j] = op.trace_jacobians(x0)
                cache = self.jac_caches[j]
            out.append(cdps_likelihood_score(term, x0, None, self.calib, sigma, cfg.jac_mode, vjp, cache))
        return out

    def evaluate(self, x, sigma, step, stage):
        """Posterior score at VE state ``x``; returns (score, x0_hat, summed likelihood score)."""
        use_lik = self.config.method != "unconditional" and self.terms
        if use_lik and self.config.jac_mode == "exact":
            x0, vjp = self.model.denoise_and_vjp(x, sigma)
        else:
            x0, vjp = self.model.denoise(x, sigma), None
        prior = (x0 - x) / sigma**2
        liks = self.likelihood(x0, vjp, sigma, step) if use_lik else []
        lik = 0.0
        for s in liks:
            lik = lik + s
        post = prior + lik
        if self.hook is not None:
            self.hook(dict(step=step, stage=stage, sigma=sigma, x=x, x0=x0, prior=prior, likelihoods=liks, posterior=post))
        return post, x0, lik


def _finite_rows(a):
    return np.all(np.isfinite(a.reshape(a.shape[0], -1)), axis=1)


def _edm_chunk(post: _Posterior, x, sigmas, traj):
    """Heun integration of the probability-flow ODE for a chunk; returns (x, div_step)."""
    n = x.shape[0]
    div = np.full(n, -1)
    for i in range(len(sigmas) - 1):
        s, s_next = float(sigmas[i]), float(sigmas[i + 1])
        score, x0, _ = post.evaluate(x, s, i, "predictor")
        traj(i, x0)
        slope = -s * score  # dx / dsigma
        x_new = x + (s_next - s) * slope
        if s_next != 0.0:
            score2, _, _ = post.evaluate(x_new, s_next, i, "corrector")
            x_new = x + (s_next - s) * 0.5 * (slope - s_next * score2)
        x = _quarantine(x_new, div, i)
    return x, div


def _quarantine(x, div, step):
    # Diverged samples keep a zero state so the chunk's array shapes never change.
    bad = ~_finite_rows(x) & (div < 0)
    if np.any(bad):
        div[bad] = step
        logger.warning("%d sample(s) diverged at step %d", int(bad.sum()), step)
    dead = div >= 0
    if np.any(dead):
        x = x.copy()
        x[dead] = 0.0
    return x


def _ddpm_chunk(post: _Posterior, x, sched: DdpmSchedule, stochastic, rngs, traj):
    n = x.shape[0]
    div = np.full(n, -1)
    for step, t in enumerate(range(sched.T, 0, -1)):
        ab, ab_prev = sched.alpha_bars[t], sched.alpha_bars[t - 1]
        sq, sq1 = np.sqrt(ab), np.sqrt(1.0 - ab)
        s_ve = sched.ve_sigma(t)
        # VE view of the VP state: x_ve = x / sqrt(abar), noise level s_ve.
        _, x0, lik_ve = post.evaluate(x / sq, s_ve, step, "ddpm")
        traj(step, x0)
        eps = (x - sq * x0) / sq1
        # Scores w.r.t. the VP state carry an extra 1 / sqrt(abar).
        eps_hat = eps - sq1 * (lik_ve / sq)
        x0_hat = (x - sq1 * eps_hat) / sq
        st = ddpm_sigma_tilde(sched, t, stochastic)
        x_new = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(1.0 - ab_prev - st**2, 0.0)) * eps_hat
        if st > 0:
            x_new = x_new + st * np.stack([r.standard_normal(x.shape[1:]) for r in rngs])
        x = _quarantine(x_new, div, step)
    return x, div


# --------------------------------------------------------------------------- #
# Batch runner
# --------------------------------------------------------------------------- #


@dataclass
class SampleSet:
    samples: np.ndarray
    diverged_at: np.ndarray
    wrmse: np.ndarray  # (n, n_terms) at the final samples
    trajectory: np.ndarray  # (n, n_steps, n_terms) WRMSE of x0_hat per step
    config: SamplerConfig
    seeds: list

    @property
    def diverged(self) -> np.ndarray:
        return self.diverged_at >= 0

    def converged_fraction(self, threshold: float = 1.1) -> float:
        ok = ~self.diverged & np.all(self.wrmse <= threshold, axis=1)
        return float(np.mean(ok))


def _event_shape(model, terms, shape):
    if shape is not None:
        return tuple(shape)
    es = getattr(model, "event_shape", None)
    if es:
        return tuple(es)
    for t in terms:
        if hasattr(t.operator, "grid_shape"):
            return tuple(t.operator.grid_shape)
    raise ValueError("cannot infer the state shape; pass shape=")


def _run_chunk(model, terms, config, calib, schedule, idx, shape, hook):
    rngs = [stream(config.seed, int(i)) for i in idx]
    z = np.stack([r.standard_normal(shape) for r in rngs])
    post = _Posterior(model, terms, config, calib, hook)
    n_terms = len(terms)
    n_steps = schedule.n_steps if config.framework == "edm" else schedule.T
    traj_arr = np.full((len(idx), n_steps, n_terms), np.nan)

    def traj(step, x0):
        for j, t in enumerate(terms):
            with np.errstate(all="ignore"):
                traj_arr[:, step, j] = t.wrmse(x0)

    if config.framework == "edm":
        x, div = _edm_chunk(post, schedule.sigma_max * z, schedule.sigmas, traj)
    else:
        x, div = _ddpm_chunk(post, z, schedule, config.framework == "ddpm", rngs, traj)
    x = x.copy()
    x[div >= 0] = np.nan
    return x, div, traj_arr


def run_sampler(model, config: SamplerConfig, n: int, terms: Sequence[LikelihoodTerm] = (),
                calib: CalibrationTable | None = None, schedule=None, workers: int = 1,
                shape=None, hook: Callable | None = None) -> SampleSet:
    """Draw ``n`` samples; sample ``i`` uses stream ``(config.seed, i)``.

    ``schedule`` defaults to an :class:`EdmSchedule` with ``config.n_steps``
    (EDM) or the linear-beta DDPM schedule with ``T = config.n_steps``.
    """
    terms = list(terms) if config.method != "unconditional" else []
    if config.method == "cdps" and terms and calib is None:
        raise ValueError("CDPS needs a calibration table")
    if schedule is None:
        schedule = EdmSchedule(config.n_steps) if config.framework == "edm" else build_linear_beta_schedule(config.n_steps)
    if config.framework == "edm" and not isinstance(schedule, EdmSchedule):
        raise TypeError("EDM sampling needs an EdmSchedule")
    if config.framework != "edm" and not isinstance(schedule, DdpmSchedule):
        raise TypeError("DDPM/DDIM sampling needs a DdpmSchedule")
    shape = _event_shape(model, terms, shape)
    chunks = [np.arange(a, min(a + config.chunk_size, n)) for a in range(0, n, config.chunk_size)]

    def job(idx):
        return _run_chunk(model, terms, config, calib, schedule, idx, shape, hook)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, chunks))
    else:
        parts = [job(c) for c in chunks]
    n_steps = schedule.n_steps if config.framework == "edm" else schedule.T
    if parts:
        samples = np.concatenate([p[0] for p in parts])
        div = np.concatenate([p[1] for p in parts])
        traj = np.concatenate([p[2] for p in parts])
    else:
        samples = np.empty((0,) + shape)
        div = np.empty(0, dtype=int)
        traj = np.empty((0, n_steps, len(terms)))
    if terms and n:
        with np.errstate(all="ignore"):
            final = np.stack([t.wrmse(np.nan_to_num(samples)) for t in terms], axis=1)
        final[div >= 0] = np.inf
    else:
        final = np.zeros((n, len(terms)))
    return SampleSet(samples, div, final, traj, config, [(config.seed, i) for i in range(n)])


# --------------------------------------------------------------------------- #
# Single-sample entry points
# --------------------------------------------------------------------------- #


def _single(model, config, terms, calib, schedule, seed, index, shape):
    cfg = replace(config, seed=seed)
    idx = np.array([index])
    x, div, _ = _run_chunk(model, list(terms), cfg, calib, schedule, idx, _event_shape(model, terms, shape), None)
    if div[0] >= 0:
        raise SamplerDiverged(int(div[0]))
    return x[0]


def sample_unconditional_edm(score_model, schedule: EdmSchedule, seed: int, index: int = 0, shape=None) -> np.ndarray:
    """One prior sample by Heun integration of the probability-flow ODE."""
    cfg = SamplerConfig("edm", "unconditional", schedule.n_steps)
    return _single(score_model, cfg, (), None, schedule, seed, index, shape)


def cdps_sample_edm(score_model, calib, terms, schedule: EdmSchedule, seed: int, index: int = 0,
                    jac_mode: str = "exact", shape=None) -> np.ndarray:
    cfg = SamplerConfig("edm", "cdps", schedule.n_steps, jac_mode)
    return _single(score_model, cfg, terms, calib, schedule, seed, index, shape)


def dps_sample_edm(score_model, terms, schedule: EdmSchedule, seed: int, index: int = 0,
                   jac_mode: str = "exact", rho=None, rmse=False, shape=None) -> np.ndarray:
    cfg = SamplerConfig("edm", "dps", schedule.n_steps, jac_mode, rho, rmse)
    return _single(score_model, cfg, terms, None, schedule, seed, index, shape)


def cdps_sample_ddpm(score_model, calib, terms, schedule: DdpmSchedule, stochastic: bool, seed: int,
                     index: int = 0, jac_mode: str = "exact", shape=None) -> np.ndarray:
    """One CDPS sample with the DDPM (``stochastic``) or DDIM update."""
    cfg = SamplerConfig("ddpm" if stochastic else "ddim", "cdps", schedule.T, jac_mode)
    return _single(score_model, cfg, terms, calib, schedule, seed, index, shape)


class EpsilonModel:
    """Noise predictor of a VE score model: ``eps = (x - sqrt(abar) D(x / sqrt(abar), s)) / sqrt(1 - abar)``."""

    def __init__(self, score_model, schedule: DdpmSchedule):
        self.model = score_model
        self.schedule = schedule

    def __call__(self, x, t: int) -> np.ndarray:
        ab = self.schedule.alpha_bars[t]
        x0 = self.model.denoise(x / np.sqrt(ab), self.schedule.ve_sigma(t))
        return (x - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
