"""Assessment metrics: data misfit, image similarity, distribution distances,
predictive scores and geostatistical summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import norm


def wrmse(predicted, observed, sigma_d) -> float:
    """Noise-weighted root-mean-square misfit ``sqrt(mean(((d - F x) / sigma)^2))``."""
    predicted = np.asarray(predicted, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if predicted.shape != observed.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {observed.shape}")
    sigma = np.broadcast_to(np.asarray(sigma_d, dtype=np.float64), observed.shape)
    if np.any(sigma <= 0):
        raise ValueError("sigma_d must be positive")
    return float(np.sqrt(np.mean(((observed - predicted) / sigma) ** 2)))


def wrmse_batch(predicted, observed, sigma_d) -> np.ndarray:
    """Row-wise WRMSE for ``predicted`` of shape (n, m)."""
    predicted = np.asarray(predicted, dtype=np.float64)
    sigma = np.asarray(sigma_d, dtype=np.float64)
    return np.sqrt(np.mean(((predicted - observed) / sigma) ** 2, axis=-1))


@dataclass(frozen=True)
class SsimParams:
    window: int = 7
    c1: float = 0.01
    c2: float = 0.03

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ValueError("constants must be positive")


def _window_means(a, m):
    # Mean over every fully contained m x m window ("valid" positions).
    c = np.cumsum(np.cumsum(np.pad(a, ((1, 0), (1, 0))), axis=0), axis=1)
    s = c[m:, m:] - c[:-m, m:] - c[m:, :-m] + c[:-m, :-m]
    return s / (m * m)


def ssim_map(u, v, params: SsimParams = SsimParams()) -> np.ndarray:
    """SSIM of every valid ``M x M`` window pair (uniform window, population moments)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError("images must have equal shapes")
    m = params.window
    if u.ndim != 2 or min(u.shape) < m:
        raise ValueError(f"images must be 2D and at least {m} x {m}")
    mu_u = _window_means(u, m)
    mu_v = _window_means(v, m)
    var_u = np.maximum(_window_means(u * u, m) - mu_u**2, 0.0)
    var_v = np.maximum(_window_means(v * v, m) - mu_v**2, 0.0)
    cov = _window_means(u * v, m) - mu_u * mu_v
    num = (2 * mu_u * mu_v + params.c1) * (2 * cov + params.c2)
    den = (mu_u**2 + mu_v**2 + params.c1) * (var_u + var_v + params.c2)
    return num / den


def ssim_mean(u, v, params: SsimParams = SsimParams()) -> float:
    return float(np.mean(ssim_map(u, v, params)))


def minmax_scale(a, lo=None, hi=None):
    a = np.asarray(a, dtype=np.float64)
    lo = a.min() if lo is None else lo
    hi = a.max() if hi is None else hi
    if hi <= lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def ssim_channels(pred, truth, params: SsimParams = SsimParams()) -> np.ndarray:
    """Per-channel SSIM after min-max scaling both images with the truth's range."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    out = []
    for p, t in zip(pred, truth):
        lo, hi = t.min(), t.max()
        if hi <= lo:
            lo, hi = min(lo, p.min()), max(hi, p.max())
        out.append(ssim_mean(minmax_scale(p, lo, hi), minmax_scale(t, lo, hi), params))
    return np.array(out)


KL_BINS = 64
KL_SMOOTHING = 1e-10


def histogram_edges(*samples, bins: int = KL_BINS) -> np.ndarray:
    pooled = np.concatenate([np.ravel(s) for s in samples])
    lo, hi = pooled.min(), pooled.max()
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, bins + 1)


def kl_histogram(samples_p, samples_q, bins=KL_BINS, smoothing: float = KL_SMOOTHING) -> float:
    """``sum p log(p / q)`` over shared equal-width bins with additive smoothing.

    ``bins`` is a bin count (edges span the pooled range) or an edge array.
    """
    p = np.ravel(np.asarray(samples_p, dtype=np.float64))
    q = np.ravel(np.asarray(samples_q, dtype=np.float64))
    if p.size == 0 or q.size == 0:
        raise ValueError("empty sample set")
    edges = histogram_edges(p, q, bins=bins) if np.ndim(bins) == 0 else np.asarray(bins)
    hp = np.histogram(p, edges)[0].astype(np.float64)
    hq = np.histogram(q, edges)[0].astype(np.float64)
    return kl_from_counts(hp, hq, smoothing)


def kl_from_counts(hp, hq, smoothing: float = KL_SMOOTHING) -> float:
    hp = np.asarray(hp, dtype=np.float64)
    hq = np.asarray(hq, dtype=np.float64)
    pp = hp / hp.sum() + smoothing
    qq = hq / hq.sum() + smoothing
    pp /= pp.sum()
    qq /= qq.sum()
    return float(max(np.sum(pp * np.log(pp / qq)), 0.0))


LOGS_STD_FLOOR = 1e-3


def log_score(ensemble, truth, std_floor: float = LOGS_STD_FLOOR) -> float:
    """Mean per-cell ``-log N(truth; ensemble mean, ensemble std)``.

    ``ensemble`` has the samples on axis 0; the std uses ``ddof=0`` and is
    floored at ``std_floor``.
    """
    ens = np.asarray(ensemble, dtype=np.float64)
    if ens.shape[0] < 2:
        raise ValueError("need an ensemble of at least 2 members")
    mu = ens.mean(axis=0)
    sd = np.maximum(ens.std(axis=0), std_floor)
    return gaussian_log_score(mu, sd, truth)


def gaussian_log_score(mean, std, truth) -> float:
    return float(np.mean(-norm.logpdf(np.asarray(truth, dtype=np.float64), loc=mean, scale=std)))


def experimental_variogram(fields, direction: str, max_lag: int, mask=None, cell_size: float = 1.0):
    """Axis-aligned semivariance ``mean(0.5 (z_i - z_j)^2)`` at lags ``1..max_lag``.

    Parameters
    ----------
    fields : array (n, H, W) or (H, W)
    direction : {"horizontal", "vertical"}
    mask : bool array like ``fields``, optional
        Only pairs with both cells inside the mask (one facies) are used.

    Returns
    -------
    lags_m, gamma, n_pairs : ndarrays of length ``max_lag``
    """
    z = np.asarray(fields, dtype=np.float64)
    if z.ndim == 2:
        z = z[None]
    m = None if mask is None else np.asarray(mask, dtype=bool).reshape(z.shape)
    axis = {"horizontal": 2, "vertical": 1}[direction]
    gam = np.empty(max_lag)
    npairs = np.empty(max_lag, dtype=np.int64)
    for lag in range(1, max_lag + 1):
        a = np.take(z, np.arange(lag, z.shape[axis]), axis=axis)
        b = np.take(z, np.arange(0, z.shape[axis] - lag), axis=axis)
        d2 = 0.5 * (a - b) ** 2
        if m is not None:
            ok = np.take(m, np.arange(lag, z.shape[axis]), axis=axis) & np.take(
                m, np.arange(0, z.shape[axis] - lag), axis=axis
            )
            cnt = int(ok.sum())
            tot = float(d2[ok].sum())
        else:
            cnt = d2.size
            tot = float(d2.sum())
        if cnt == 0:
            raise ValueError(f"no pairs at lag {lag}")
        gam[lag - 1] = tot / cnt
        npairs[lag - 1] = cnt
    return np.arange(1, max_lag + 1) * cell_size, gam, npairs


@dataclass(frozen=True)
class Body:
    length: float
    thickness: float
    area: float


def morphology(facies, cell_size: float = 1.0) -> list:
    """Sand bodies as 8-connected components, measured by their bounding boxes."""
    f = np.asarray(facies) > 0.5
    labels, n = ndimage.label(f, structure=np.ones((3, 3), dtype=int))
    bodies = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        rows = sl[0].stop - sl[0].start
        cols = sl[1].stop - sl[1].start
        cells = int(np.count_nonzero(labels[sl] == k))
        bodies.append(Body(cols * cell_size, rows * cell_size, cells * cell_size**2))
    return bodies


def morphology_stats(facies_list, cell_size: float = 1.0) -> dict:
    """Mean and std of length, thickness and area over all bodies of an ensemble."""
    bodies = [b for f in facies_list for b in morphology(f, cell_size)]
    out = {"n_bodies": len(bodies)}
    for key in ("length", "thickness", "area"):
        vals = np.array([getattr(b, key) for b in bodies]) if bodies else np.array([np.nan])
        out[key] = (float(vals.mean()), float(vals.std()))
    return out


def volume_fraction(facies, per_cell: bool = False):
    """Sand fraction of one grid, or the cellwise sand probability of an ensemble."""
    f = np.asarray(facies, dtype=np.float64)
    if per_cell:
        return f.mean(axis=0)
    return float(f.mean())
