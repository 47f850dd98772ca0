"""Variogram models, stationary Gaussian random fields and a procedural
training-image generator for lenticular sand channels in shale.

The generator stands in for an MPS facies simulator: sand bodies are placed
by a marked point process until a target sand fraction is reached, and the
impedance is a facies-wise composite of two independent Gaussian random
fields.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from functools import lru_cache

import numpy as np

from .grid import GridModel
from .rng import stream

# Variogram conventions: ``a`` is the practical range.


def exponential_variogram(h, sill: float, a: float):
    h = np.asarray(h, dtype=np.float64)
    return sill * (1.0 - np.exp(-3.0 * h / a))


def spherical_variogram(h, sill: float, a: float):
    h = np.asarray(h, dtype=np.float64)
    r = np.minimum(h / a, 1.0)
    return sill * (1.5 * r - 0.5 * r**3)


VARIOGRAMS = {"exponential": exponential_variogram, "spherical": spherical_variogram}


@dataclass(frozen=True)
class VariogramModel:
    """Geometrically anisotropic variogram with horizontal/vertical practical ranges (meters)."""

    kind: str
    range_h: float
    range_v: float
    sill: float = 1.0

    def __post_init__(self):
        if self.kind not in VARIOGRAMS:
            raise ValueError(f"unknown variogram type {self.kind!r}")
        if self.range_h <= 0 or self.range_v <= 0 or self.sill <= 0:
            raise ValueError("ranges and sill must be positive")

    def gamma(self, dx, dz):
        """Semivariance at separation (dx, dz) meters."""
        h = np.hypot(np.asarray(dx) / self.range_h, np.asarray(dz) / self.range_v)
        return VARIOGRAMS[self.kind](h, self.sill, 1.0)

    def covariance(self, dx, dz):
        return self.sill - self.gamma(dx, dz)


def _embedding_eigs(model: VariogramModel, shape, cell_size, pad):
    h, w = shape
    m, n = pad * h, pad * w
    iz = np.minimum(np.arange(m), m - np.arange(m)) * cell_size
    ix = np.minimum(np.arange(n), n - np.arange(n)) * cell_size
    c = model.covariance(ix[None, :], iz[:, None])
    return np.fft.fft2(c).real


class GaussianFieldSampler:
    """Circulant-embedding sampler for a zero-mean stationary field on an H x W grid.

    The embedding is enlarged until all eigenvalues are nonnegative (up to a
    small tolerance); any residual negative mass is clipped and reported in
    :attr:`clipped`.
    """

    def __init__(self, model: VariogramModel, shape, cell_size: float = 1.0, max_pad: int = 8):
        self.model = model
        self.shape = tuple(shape)
        for pad in range(2, max_pad + 1):
            lam = _embedding_eigs(model, self.shape, cell_size, pad)
            if lam.min() >= -1e-10 * lam.max():
                break
        self.pad = pad
        self.clipped = float(-lam[lam < 0].sum() / lam.sum()) if np.any(lam < 0) else 0.0
        lam = np.clip(lam, 0.0, None)
        self._scale = np.sqrt(lam / lam.size)

    def sample(self, rng: np.random.Generator, n_pairs: int = 1) -> np.ndarray:
        """Return ``2 * n_pairs`` independent fields (real and imaginary parts)."""
        m, n = self._scale.shape
        h, w = self.shape
        xi = rng.standard_normal((n_pairs, m, n)) + 1j * rng.standard_normal((n_pairs, m, n))
        y = np.fft.fft2(self._scale * xi)[:, :h, :w]
        return np.concatenate([y.real, y.imag])


@lru_cache(maxsize=32)
def field_sampler(model: VariogramModel, shape, cell_size: float = 1.0) -> GaussianFieldSampler:
    return GaussianFieldSampler(model, shape, cell_size)


@dataclass(frozen=True)
class ChannelTiConfig:
    """Settings for the lens-channel training-image generator.

    Lengths in meters; impedances in m/s g/cm^3. Defaults reproduce the
    reference prior: sand fraction 0.3, bodies 17.5 +/- 4.3 m long and
    5.9 +/- 1.3 m thick, sand impedance 6660 +/- 730 with an exponential
    variogram (50 m, 25 m), shale 8540 +/- 660 with a spherical one (65 m, 25 m).
    """

    height: int = 80
    width: int = 100
    cell_size: float = 1.0
    sand_fraction: float = 0.3
    length_mean: float = 17.5
    length_std: float = 4.3
    thickness_mean: float = 5.9
    thickness_std: float = 1.3
    # Lens profile: half-thickness T/2 * (1 - u^2)^lens_exponent, u in [-1, 1].
    lens_exponent: float = 0.1
    # Centerline wiggle amplitude in cells.
    wiggle: float = 0.4
    sand_ip_mean: float = 6660.0
    sand_ip_std: float = 730.0
    shale_ip_mean: float = 8540.0
    shale_ip_std: float = 660.0
    sand_variogram: str = "exponential"
    sand_range_h: float = 50.0
    sand_range_v: float = 25.0
    shale_variogram: str = "spherical"
    shale_range_h: float = 65.0
    shale_range_v: float = 25.0
    max_attempts: int = 200
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.sand_fraction < 1:
            raise ValueError("sand_fraction must lie in [0, 1)")
        if min(self.height, self.width) < 1 or self.cell_size <= 0:
            raise ValueError("grid dimensions must be positive")
        for name in ("length_mean", "thickness_mean", "sand_ip_std", "shale_ip_std",
                     "sand_range_h", "sand_range_v", "shale_range_h", "shale_range_v"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.length_std < 0 or self.thickness_std < 0:
            raise ValueError("body size stds must be nonnegative")

    def sand_model(self) -> VariogramModel:
        return VariogramModel(self.sand_variogram, self.sand_range_h, self.sand_range_v, self.sand_ip_std**2)

    def shale_model(self) -> VariogramModel:
        return VariogramModel(self.shale_variogram, self.shale_range_h, self.shale_range_v, self.shale_ip_std**2)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ChannelTiConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(mapping) - set(known)
        if unknown:
            raise KeyError(f"unknown ti config keys: {sorted(unknown)}")
        kw = {}
        for k, v in mapping.items():
            default = getattr(cls, k)
            kw[k] = type(default)(v) if not isinstance(default, str) else str(v)
        return cls(**kw)


def _positive_normal(rng, mean, std, floor):
    for _ in range(1000):
        v = rng.normal(mean, std)
        if v > floor:
            return v
    return max(mean, floor * 2)


def _lens_mask(cfg, rng, h, w):
    """Rasterize one lens; returns (row slice start, col slice start, boolean patch)."""
    cs = cfg.cell_size
    length = _positive_normal(rng, cfg.length_mean, cfg.length_std, cs) / cs
    thick = _positive_normal(rng, cfg.thickness_mean, cfg.thickness_std, cs) / cs
    cx = rng.uniform(0.0, w)
    cz = rng.uniform(0.0, h)
    phase = rng.uniform(0, 2 * np.pi)
    x0 = int(np.floor(cx - length / 2))
    x1 = int(np.ceil(cx + length / 2)) + 1
    z0 = int(np.floor(cz - thick / 2 - cfg.wiggle)) - 1
    z1 = int(np.ceil(cz + thick / 2 + cfg.wiggle)) + 2
    xs = np.arange(x0, x1) + 0.5
    zs = np.arange(z0, z1) + 0.5
    u = np.clip(2.0 * (xs - cx) / length, -1.0, 1.0)
    half = 0.5 * thick * (1.0 - u**2) ** cfg.lens_exponent
    centre = cz + cfg.wiggle * np.sin(np.pi * (xs - cx) / length * 2.0 + phase)
    patch = np.abs(zs[:, None] - centre[None, :]) <= half[None, :]
    patch &= (np.abs(xs - cx) <= length / 2)[None, :]
    return z0, x0, patch


def _paste(canvas, z0, x0, patch):
    """Clip ``patch`` to the canvas; return (target view slices, clipped patch)."""
    h, w = canvas.shape
    pz0, px0 = max(0, -z0), max(0, -x0)
    cz0, cx0 = max(0, z0), max(0, x0)
    cz1 = min(h, z0 + patch.shape[0])
    cx1 = min(w, x0 + patch.shape[1])
    if cz1 <= cz0 or cx1 <= cx0:
        return None, None
    sub = patch[pz0 : pz0 + (cz1 - cz0), px0 : px0 + (cx1 - cx0)]
    return (slice(cz0, cz1), slice(cx0, cx1)), sub


def _dilate(mask):
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= out[:, :-1].copy()
    out[:, :-1] |= out[:, 1:].copy()
    return out


def generate_facies(cfg: ChannelTiConfig, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.height, cfg.width
    facies = np.zeros((h, w), dtype=bool)
    if cfg.sand_fraction == 0:
        return facies
    if cfg.length_mean / cfg.cell_size > w or cfg.thickness_mean / cfg.cell_size > h:
        raise ValueError("infeasible config: mean body size exceeds the grid")
    target = cfg.sand_fraction * h * w
    count = 0
    while count < target:
        placed = False
        halo_all = _dilate(facies)
        for _ in range(cfg.max_attempts):
            z0, x0, patch = _lens_mask(cfg, rng, h, w)
            view, sub = _paste(facies, z0, x0, patch)
            if view is None or not sub.any():
                continue
            # Reject bodies touching existing sand (8-neighbourhood).
            if np.any(halo_all[view] & sub):
                continue
            placed = True
            break
        if not placed:
            # Crowded grid: accept an overlapping body rather than loop forever.
            z0, x0, patch = _lens_mask(cfg, rng, h, w)
            view, sub = _paste(facies, z0, x0, patch)
            if view is None:
                continue
        new = count + np.count_nonzero(sub & ~facies[view])
        # Stop at whichever side of the target is closer.
        if new >= target and (new - target) > (target - count):
            break
        facies[view] |= sub
        count = new
    return facies


def generate_ti_realization(config: ChannelTiConfig, seed=None) -> GridModel:
    """One facies + impedance realization; ``seed`` defaults to ``config.seed``.

    ``seed`` may be an int or a tuple of ints (e.g. ``(master_seed, index)``).
    """
    keys = (config.seed,) if seed is None else (tuple(seed) if isinstance(seed, (tuple, list)) else (seed,))
    rng = stream(*keys)
    facies = generate_facies(config, rng)
    shape = (config.height, config.width)
    sand = field_sampler(config.sand_model(), shape, config.cell_size).sample(rng)[0]
    shale = field_sampler(config.shale_model(), shape, config.cell_size).sample(rng)[0]
    ip = np.where(facies, config.sand_ip_mean + sand, config.shale_ip_mean + shale)
    return GridModel(("facies", "impedance"), np.stack([facies.astype(float), ip]), config.cell_size)


def generate_ti_ensemble(config: ChannelTiConfig, n: int, seed=None) -> list:
    """``n`` realizations, realization ``i`` drawn from stream ``(seed, i)``."""
    master = config.seed if seed is None else seed
    return [generate_ti_realization(config, (master, i)) for i in range(n)]
