"""Analytic priors with closed-form scores, denoisers and posteriors.

States are batched arrays of shape ``(n, *event_shape)``; the analytic
models flatten the event dimensions internally. A single unbatched vector of
length ``d`` is also accepted by the module-level functions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

logger = logging.getLogger(__name__)

LOG2PI = np.log(2.0 * np.pi)


def _as_cov(cov, d):
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim == 0:
        return np.full(d, float(cov))
    return cov


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    """Multivariate normal ``N(mean, cov)``; ``cov`` may be dense (d, d) or diagonal (d,).

    Symmetry is checked to 1e-10. When the Cholesky factorization fails a
    jitter of ``1e-8 * trace / d`` is added to the diagonal and recorded in
    :attr:`jitter`.
    """

    mean: np.ndarray
    cov: np.ndarray
    event_shape: tuple = None
    jitter: float = field(default=0.0, init=False)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        d = mean.size
        cov = _as_cov(self.cov, d)
        if cov.ndim == 1:
            if cov.size != d or np.any(cov < 0):
                raise ValueError("diagonal covariance must be nonnegative with length d")
            jitter = 0.0
            if np.any(cov == 0):
                jitter = _jitter_amount(cov.sum(), d)
                cov = cov + jitter
            evals, evecs = cov.copy(), None
            chol = np.sqrt(cov)
        else:
            if cov.shape != (d, d):
                raise ValueError(f"covariance shape {cov.shape} does not match mean length {d}")
            if not np.allclose(cov, cov.T, rtol=0, atol=1e-10 * max(1.0, np.abs(cov).max())):
                raise ValueError("covariance is not symmetric")
            cov = 0.5 * (cov + cov.T)
            jitter = 0.0
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                jitter = _jitter_amount(np.trace(cov), d)
                logger.warning("covariance not positive definite; adding jitter %.3g", jitter)
                cov = cov + jitter * np.eye(d)
                chol = np.linalg.cholesky(cov)
            evals, evecs = np.linalg.eigh(cov)
            evals = np.clip(evals, 0.0, None)
        shape = tuple(self.event_shape) if self.event_shape is not None else (d,)
        if int(np.prod(shape)) != d:
            raise ValueError(f"event_shape {shape} incompatible with dimension {d}")
        for a in (mean, cov, chol, evals) + ((evecs,) if evecs is not None else ()):
            a.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "event_shape", shape)
        object.__setattr__(self, "jitter", jitter)
        object.__setattr__(self, "_chol", chol)
        object.__setattr__(self, "_evals", evals)
        object.__setattr__(self, "_evecs", evecs)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def is_diagonal(self) -> bool:
        return self.cov.ndim == 1

    def dense_cov(self) -> np.ndarray:
        return np.diag(self.cov) if self.is_diagonal else np.array(self.cov)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        if self.is_diagonal:
            out = self.mean + z * self._chol
        else:
            out = self.mean + z @ self._chol.T
        return out.reshape((n,) + self.event_shape)

    # Marginal of x_t = x_0 + sigma z is N(mean, cov + sigma^2 I). In the
    # eigenbasis every sigma-dependent operator is diagonal.
    def _apply(self, r: np.ndarray, weights: np.ndarray) -> np.ndarray:
        if self._evecs is None:
            return r * weights
        return ((r @ self._evecs) * weights) @ self._evecs.T

    def _shrink(self, sigma: float) -> np.ndarray:
        s2 = float(sigma) ** 2
        lam = self._evals
        if s2 == 0.0:
            return np.ones_like(lam)
        return lam / (lam + s2)

    def score(self, x, sigma: float) -> np.ndarray:
        x, shape = _flatten(x, self.dim)
        denom = self._evals + float(sigma) ** 2
        if np.any(denom <= 0):
            raise np.linalg.LinAlgError("singular marginal covariance")
        return (-self._apply(x - self.mean, 1.0 / denom)).reshape(shape)

    def denoise(self, x, sigma: float) -> np.ndarray:
        x, shape = _flatten(x, self.dim)
        return (self.mean + self._apply(x - self.mean, self._shrink(sigma))).reshape(shape)

    def denoise_vjp(self, x, sigma: float, v) -> np.ndarray:
        v, shape = _flatten(v, self.dim)
        return self._apply(v, self._shrink(sigma)).reshape(shape)

    def denoise_and_vjp(self, x, sigma: float):
        x0 = self.denoise(x, sigma)
        return x0, lambda v: self.denoise_vjp(x, sigma, v)

    def log_density(self, x, sigma: float = 0.0) -> np.ndarray:
        x, shape = _flatten(x, self.dim)
        lam = self._evals + float(sigma) ** 2
        r = x - self.mean
        proj = r if self._evecs is None else r @ self._evecs
        quad = np.sum(proj**2 / lam, axis=-1)
        out = -0.5 * (quad + np.sum(np.log(lam)) + self.dim * LOG2PI)
        return out if x.ndim > 1 else float(out)

    def denoiser_error_rms(self, sigma: float) -> float:
        """Closed-form RMS denoising error ``sqrt(sigma^2 tr(S (S + sigma^2 I)^-1) / d)``."""
        return float(np.sqrt(float(sigma) ** 2 * np.sum(self._shrink(sigma)) / self.dim))


def _jitter_amount(trace: float, d: int) -> float:
    j = 1e-8 * float(trace) / d
    return j if j > 0 else 1e-8


def _flatten(x, d):
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape
    if x.size == d:
        return x.reshape(d), shape
    return x.reshape(-1, d), shape


@dataclass(frozen=True, eq=False)
class GmmPrior:
    """Gaussian mixture ``sum_k w_k N(mean_k, cov_k)``."""

    weights: np.ndarray
    components: Sequence[GaussianPrior]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        comps = tuple(self.components)
        if len(comps) < 1 or len(comps) != w.size:
            raise ValueError("need one weight per component and at least one component")
        if np.any(w <= 0) or abs(w.sum() - 1.0) >= 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        d = comps[0].dim
        if any(c.dim != d for c in comps):
            raise ValueError("components have different dimensions")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def event_shape(self) -> tuple:
        return self.components[0].event_shape

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        ks = rng.choice(len(self.components), size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for k, comp in enumerate(self.components):
            idx = np.flatnonzero(ks == k)
            if idx.size:
                out[idx] = comp.sample(rng, idx.size).reshape(idx.size, -1)
        return out.reshape((n,) + self.event_shape)

    def responsibilities(self, x, sigma: float) -> np.ndarray:
        x, _ = _flatten(x, self.dim)
        logp = np.stack(
            [np.log(w) + c.log_density(x, sigma) for w, c in zip(self.weights, self.components)], axis=-1
        )
        top = np.max(logp, axis=-1, keepdims=True)
        if not np.all(np.isfinite(top)):
            raise FloatingPointError("all mixture responsibilities underflow")
        logr = logp - logsumexp(logp, axis=-1, keepdims=True)
        return np.exp(logr)

    def log_density(self, x, sigma: float = 0.0):
        x, _ = _flatten(x, self.dim)
        logp = np.stack(
            [np.log(w) + c.log_density(x, sigma) for w, c in zip(self.weights, self.components)], axis=-1
        )
        out = logsumexp(logp, axis=-1)
        return out if x.ndim > 1 else float(out)

    def _parts(self, x, sigma):
        xf, shape = _flatten(x, self.dim)
        r = self.responsibilities(xf, sigma)
        g = np.stack([c.score(xf, sigma) for c in self.components], axis=-1)
        return xf, shape, r, g

    def score(self, x, sigma: float) -> np.ndarray:
        _, shape, r, g = self._parts(x, sigma)
        return np.sum(g * r[..., None, :], axis=-1).reshape(shape)

    def denoise(self, x, sigma: float) -> np.ndarray:
        xf, shape, r, g = self._parts(x, sigma)
        return (xf + float(sigma) ** 2 * np.sum(g * r[..., None, :], axis=-1)).reshape(shape)

    def denoise_vjp(self, x, sigma: float, v) -> np.ndarray:
        # d x0 / dx = I + sigma^2 H, H = sum_k r_k (-P_k + g_k g_k^T) - gbar gbar^T
        xf, shape, r, g = self._parts(x, sigma)
        vf = np.asarray(v, dtype=np.float64).reshape(xf.shape)
        s2 = float(sigma) ** 2
        gbar = np.sum(g * r[..., None, :], axis=-1)
        hv = -np.sum(gbar * vf, axis=-1, keepdims=True) * gbar
        for k, c in enumerate(self.components):
            pv = c._apply(vf, 1.0 / (c._evals + s2))
            gk = g[..., k]
            rk = r[..., k : k + 1]
            hv = hv + rk * (-pv + gk * np.sum(gk * vf, axis=-1, keepdims=True))
        return (vf + s2 * hv).reshape(shape)

    def denoise_and_vjp(self, x, sigma: float):
        x0 = self.denoise(x, sigma)
        return x0, lambda v: self.denoise_vjp(x, sigma, v)


# --------------------------------------------------------------------------- #
# Module-level operations
# --------------------------------------------------------------------------- #


def gaussian_score(prior: GaussianPrior, x_t, sigma_t: float) -> np.ndarray:
    """``grad log N(x_t; mean, cov + sigma_t^2 I)``."""
    if sigma_t < 0:
        raise ValueError("sigma_t must be >= 0")
    return prior.score(x_t, sigma_t)


def gaussian_denoise(prior: GaussianPrior, x_t, sigma_t: float) -> np.ndarray:
    """Posterior mean ``E[x_0 | x_t]`` under a Gaussian prior."""
    if sigma_t < 0:
        raise ValueError("sigma_t must be >= 0")
    return prior.denoise(x_t, sigma_t)


def gmm_score(prior: GmmPrior, x_t, sigma_t: float) -> np.ndarray:
    if sigma_t < 0:
        raise ValueError("sigma_t must be >= 0")
    return prior.score(x_t, sigma_t)


def gmm_denoise(prior: GmmPrior, x_t, sigma_t: float) -> np.ndarray:
    return prior.denoise(x_t, sigma_t)


def _data_cov(sigma_d, m):
    sd = np.asarray(sigma_d, dtype=np.float64)
    if sd.ndim == 0:
        return np.eye(m) * float(sd)
    if sd.ndim == 1:
        return np.diag(sd)
    return sd


def linear_gaussian_posterior(prior, F, d, Sigma_d):
    """Exact posterior of ``x`` given ``d = F x + e``, ``e ~ N(0, Sigma_d)``.

    ``Sigma_d`` is a covariance: scalar variance, vector of variances, or
    full matrix. Returns a :class:`GaussianPrior` for a Gaussian prior and a
    :class:`GmmPrior` (component posteriors reweighted by their evidences) for
    a mixture.
    """
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    d = np.asarray(d, dtype=np.float64).ravel()
    Sd = _data_cov(Sigma_d, F.shape[0])
    if isinstance(prior, GmmPrior):
        posts, logev = [], []
        for w, comp in zip(prior.weights, prior.components):
            post, le = _gaussian_update(comp, F, d, Sd)
            posts.append(post)
            logev.append(np.log(w) + le)
        logev = np.array(logev)
        wpost = np.exp(logev - logsumexp(logev))
        wpost = wpost / wpost.sum()
        return GmmPrior(wpost, posts)
    return _gaussian_update(prior, F, d, Sd)[0]


def _gaussian_update(prior: GaussianPrior, F, d, Sd):
    S = prior.dense_cov()
    SFt = S @ F.T
    G = F @ SFt + Sd
    try:
        cf = linalg.cho_factor(G, lower=True)
    except linalg.LinAlgError:
        raise np.linalg.LinAlgError("singular data covariance") from None
    r = d - F @ prior.mean
    K_r = SFt @ linalg.cho_solve(cf, r)
    mean = prior.mean + K_r
    cov = S - SFt @ linalg.cho_solve(cf, SFt.T)
    cov = 0.5 * (cov + cov.T)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    log_evidence = -0.5 * (r @ linalg.cho_solve(cf, r) + logdet + r.size * LOG2PI)
    return GaussianPrior(mean, cov, prior.event_shape), float(log_evidence)


def fit_gaussian_prior(samples, mode: str = "diagonal") -> GaussianPrior:
    """Empirical Gaussian from grids or arrays of identical shape.

    ``mode`` is ``"diagonal"`` (off-diagonal terms dropped) or ``"dense"``.
    """
    arrs = [np.asarray(getattr(s, "data", s), dtype=np.float64) for s in samples]
    if len(arrs) < 2:
        raise ValueError("need at least two samples")
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ValueError("sample shape mismatch")
    X = np.stack([a.ravel() for a in arrs])
    mean = X.mean(axis=0)
    if mode == "diagonal":
        cov = X.var(axis=0, ddof=1)
    elif mode == "dense":
        cov = np.cov(X, rowvar=False, ddof=1).reshape(X.shape[1], X.shape[1])
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return GaussianPrior(mean, cov, shape)
