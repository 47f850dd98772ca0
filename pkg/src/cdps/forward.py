"""Forward operators, their Jacobians, data-noise models and the propagation of
denoiser error into data space.

Operators act on batched diffusion states ``x`` of shape ``(n, C, H, W)`` in
standardized units. Each carries a per-channel affine map back to physical
units (``raw = offset + scale * x``), so observed data and noise levels stay
in physical units.

The vertical axis is read as two-way time with one sample per cell; traces
are the grid columns.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import GridModel, NormStats

DT = 0.003
RICKER_FREQ = 25.0
HALF_LEN = 16

# Table of data-noise levels: linear (sigma_facies, sigma_impedance) and
# nonlinear (relative r, absolute sigma_c).
LINEAR_NOISE = {
    "data-noise-1": (0.05, 120.0),
    "data-noise-2": (0.1, 230.0),
    "data-noise-3": (0.2, 120.0),
}
SEISMIC_NOISE = {
    "data-noise-1": (0.025, 0.5),
    "data-noise-2": (0.05, 1.0),
    "data-noise-3": (0.1, 2.0),
}


def ricker(f: float = RICKER_FREQ, dt: float = DT, half_len: int = HALF_LEN) -> np.ndarray:
    """Zero-phase Ricker wavelet sampled at ``k * dt`` for ``k = -half_len..half_len``."""
    if f <= 0 or dt <= 0:
        raise ValueError("f and dt must be positive")
    t = np.arange(-half_len, half_len + 1) * dt
    a = (np.pi * f * t) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


def reflectivity(ip, axis: int = -1) -> np.ndarray:
    """``R_i = (Ip_{i+1} - Ip_i) / (Ip_{i+1} + Ip_i)`` along ``axis``."""
    ip = np.asarray(ip, dtype=np.float64)
    if ip.shape[axis] < 2:
        raise ValueError("need at least two samples")
    if np.any(ip <= 0):
        raise ValueError("nonpositive impedance")
    hi = np.take(ip, np.arange(1, ip.shape[axis]), axis=axis)
    lo = np.take(ip, np.arange(0, ip.shape[axis] - 1), axis=axis)
    return (hi - lo) / (hi + lo)


def convolution_matrix(wavelet, n: int) -> np.ndarray:
    """Matrix of ``np.convolve(r, wavelet, "same")`` for length-``n`` inputs, any wavelet length."""
    w = np.asarray(wavelet, dtype=np.float64)
    if w.size % 2 == 0:
        raise ValueError("wavelet length must be odd")
    k = w.size // 2
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    idx = i - j + k
    ok = (idx >= 0) & (idx < w.size)
    return np.where(ok, w[np.clip(idx, 0, w.size - 1)], 0.0)


def _reflectivity_derivs(ip, axis=-1):
    hi = np.take(ip, np.arange(1, ip.shape[axis]), axis=axis)
    lo = np.take(ip, np.arange(0, ip.shape[axis] - 1), axis=axis)
    s2 = (hi + lo) ** 2
    return -2.0 * hi / s2, 2.0 * lo / s2


def seismic_jacobian(ip_trace, wavelet) -> np.ndarray:
    """``(H-1) x H`` Jacobian ``W D`` of one trace's seismic response w.r.t. its impedances."""
    ip = np.asarray(ip_trace, dtype=np.float64).ravel()
    if np.any(ip <= 0):
        raise ValueError("nonpositive impedance")
    a, b = _reflectivity_derivs(ip)
    m = ip.size - 1
    D = np.zeros((m, ip.size))
    D[np.arange(m), np.arange(m)] = a
    D[np.arange(m), np.arange(1, m + 1)] = b
    return convolution_matrix(wavelet, m) @ D


def _affine(n_channels, offset, scale):
    off = np.zeros(n_channels) if offset is None else np.asarray(offset, dtype=np.float64)
    sc = np.ones(n_channels) if scale is None else np.asarray(scale, dtype=np.float64)
    return off, sc


def affine_from_stats(stats: NormStats, names: Sequence[str]):
    """(offset, scale) per channel so that ``raw = offset + scale * x``."""
    mean, std = stats.vectors(names)
    return mean.ravel(), std.ravel()


# --------------------------------------------------------------------------- #
# Noise
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class NoiseModel:
    """Data noise ``sigma_i = sigma + relative * |d_obs_i|``.

    ``sigma`` is a scalar or a ``{channel_name: sigma}`` mapping (per-channel
    absolute noise for well observations).
    """

    sigma: object = 0.0
    relative: float = 0.0

    def __post_init__(self):
        vals = list(self.sigma.values()) if isinstance(self.sigma, dict) else [self.sigma]
        if any(v < 0 for v in vals) or self.relative < 0:
            raise ValueError("noise levels must be nonnegative")
        if all(v == 0 for v in vals) and self.relative == 0:
            raise ValueError("noise model has neither absolute nor relative part")

    def stds(self, d_obs, channels: Sequence[str] | None = None) -> np.ndarray:
        d = np.asarray(d_obs, dtype=np.float64)
        if isinstance(self.sigma, dict):
            if channels is None:
                raise ValueError("per-channel noise needs the channel of every datum")
            base = np.array([self.sigma[c] for c in channels], dtype=np.float64).reshape(d.shape)
        else:
            base = np.full(d.shape, float(self.sigma))
        out = base + self.relative * np.abs(d)
        if np.any(out <= 0):
            raise ValueError("zero data noise for some datum")
        return out


def linear_noise(preset: str) -> NoiseModel:
    fac, ip = LINEAR_NOISE[preset]
    return NoiseModel({"facies": fac, "impedance": ip})


def seismic_noise(preset: str) -> NoiseModel:
    r, sc = SEISMIC_NOISE[preset]
    return NoiseModel(sc, r)


# --------------------------------------------------------------------------- #
# Operators
# --------------------------------------------------------------------------- #


class MaskOperator:
    """Direct observation of selected ``(channel, row, col)`` cells.

    Parameters
    ----------
    indices : sequence of (channel, row, col)
    grid_shape : (C, H, W)
    names : channel names, used to label each datum
    offset, scale : per-channel affine to physical units
    """

    linear = True

    def __init__(self, indices, grid_shape, names=None, offset=None, scale=None):
        idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        self.grid_shape = tuple(int(s) for s in grid_shape)
        c, h, w = self.grid_shape
        if idx.size and (
            np.any(idx < 0) or np.any(idx[:, 0] >= c) or np.any(idx[:, 1] >= h) or np.any(idx[:, 2] >= w)
        ):
            raise IndexError("mask index out of range")
        flat = np.ravel_multi_index(idx.T, self.grid_shape) if idx.size else np.empty(0, np.int64)
        if np.unique(flat).size != flat.size:
            raise ValueError("duplicate mask indices")
        self.indices = idx
        self.flat = flat
        self.names = tuple(names) if names is not None else tuple(str(i) for i in range(c))
        self.offset, self.scale = _affine(c, offset, scale)
        self._cell_scale = self.scale[idx[:, 0]]
        self._cell_offset = self.offset[idx[:, 0]]

    @property
    def n_data(self) -> int:
        return self.flat.size

    @property
    def channels(self) -> tuple:
        return tuple(self.names[i] for i in self.indices[:, 0])

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        xf = x.reshape(x.shape[: x.ndim - 3] + (-1,))
        return self._cell_offset + self._cell_scale * xf[..., self.flat]

    def adjoint(self, v) -> np.ndarray:
        """Scatter data-space vectors (..., m) back onto zero grids; linear part only."""
        v = np.asarray(v, dtype=np.float64)
        lead = v.shape[:-1]
        out = np.zeros(lead + (int(np.prod(self.grid_shape)),))
        out[..., self.flat] = self._cell_scale * v
        return out.reshape(lead + self.grid_shape)

    def vjp(self, x, v) -> np.ndarray:
        return self.adjoint(v)

    def matrix(self) -> np.ndarray:
        """Dense Jacobian (m, C*H*W)."""
        F = np.zeros((self.n_data, int(np.prod(self.grid_shape))))
        F[np.arange(self.n_data), self.flat] = self._cell_scale
        return F

    def propagated_variance(self, calib_sigma: float) -> np.ndarray:
        """Diagonal of ``F (calib_sigma^2 I) F^T``."""
        return (self._cell_scale * calib_sigma) ** 2

    def quad_grad(self, x0, d_obs, sigma_d, calib_sigma: float, J=None):
        """Gradient w.r.t. ``x0`` of ``0.5 r^T S^-1 r``, ``r = F(x0) - d``, ``S = F Sx F^T + Sd``."""
        r = self.forward(x0) - d_obs
        var = np.asarray(sigma_d) ** 2
        if calib_sigma:
            var = var + self.propagated_variance(calib_sigma)
        return self.adjoint(r / var)


def well_mask(columns, grid_shape, names=("facies", "impedance"), channels=None, offset=None, scale=None):
    """Mask observing full vertical columns on the given channels (default all)."""
    c, h, _ = grid_shape
    chans = range(c) if channels is None else [names.index(ch) if isinstance(ch, str) else ch for ch in channels]
    idx = [(ch, row, col) for col in columns for ch in chans for row in range(h)]
    return MaskOperator(idx, grid_shape, names, offset, scale)


class SeismicOperator:
    """Trace-wise convolutional seismic of one impedance channel.

    ``gain`` multiplies all amplitudes (a unit convention for the data).
    Data are arranged as ``(H-1, W)``: time samples by traces.
    """

    linear = False

    def __init__(self, wavelet=None, grid_shape=None, channel: int = 1, dt: float = DT,
                 offset=None, scale=None, gain: float = 1.0):
        self.wavelet = ricker() if wavelet is None else np.asarray(wavelet, dtype=np.float64)
        if self.wavelet.size % 2 == 0:
            raise ValueError("wavelet length must be odd")
        if np.argmax(np.abs(self.wavelet)) != self.wavelet.size // 2:
            raise ValueError("wavelet peak must be at its center")
        self.grid_shape = tuple(grid_shape)
        c, h, w = self.grid_shape
        self.channel = int(channel)
        self.dt = dt
        self.gain = float(gain)
        self.offset, self.scale = _affine(c, offset, scale)
        self._W = convolution_matrix(self.wavelet, h - 1)
        self.data_shape = (h - 1, w)

    @property
    def n_data(self) -> int:
        return int(np.prod(self.data_shape))

    def impedance(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        c = self.channel
        return self.offset[c] + self.scale[c] * x[..., c, :, :]

    def forward(self, x) -> np.ndarray:
        """Flattened data ``(..., (H-1) * W)``."""
        r = reflectivity(self.impedance(x), axis=-2)
        d = self.gain * np.einsum("ij,...jw->...iw", self._W, r)
        return d.reshape(d.shape[:-2] + (-1,))

    def _derivs(self, x):
        ip = self.impedance(x)
        if np.any(ip <= 0):
            raise ValueError("nonpositive impedance")
        a, b = _reflectivity_derivs(ip, axis=-2)
        k = self.gain * self.scale[self.channel]
        return k * a, k * b

    def vjp(self, x, v) -> np.ndarray:
        """``J(x)^T v`` for data-space ``v`` of shape (..., (H-1) * W)."""
        x = np.asarray(x, dtype=np.float64)
        a, b = self._derivs(x)
        v = np.asarray(v, dtype=np.float64).reshape(a.shape)
        u = np.einsum("ij,...iw->...jw", self._W, v)
        g_ip = np.zeros(a.shape[:-2] + (a.shape[-2] + 1, a.shape[-1]))
        g_ip[..., :-1, :] += u * a
        g_ip[..., 1:, :] += u * b
        out = np.zeros_like(x)
        out[..., self.channel, :, :] = g_ip
        return out

    def trace_jacobians(self, x) -> np.ndarray:
        """Per-trace Jacobians w.r.t. the standardized channel, shape (..., W, H-1, H)."""
        a, b = self._derivs(x)
        a = np.moveaxis(a, -1, -2)  # (..., W, H-1)
        b = np.moveaxis(b, -1, -2)
        m = a.shape[-1]
        J = np.zeros(a.shape[:-1] + (m, m + 1))
        J[..., :, :m] += self._W * a[..., None, :]
        J[..., :, 1:] += self._W * b[..., None, :]
        return J

    def quad_grad(self, x0, d_obs, sigma_d, calib_sigma: float, J=None):
        """Gradient w.r.t. ``x0`` of ``0.5 r^T S^-1 r`` with per-trace ``S = J Sx J^T + Sd``.

        ``J`` optionally supplies cached per-trace Jacobians (from
        :meth:`trace_jacobians`) used for both the covariance and the chain rule.
        """
        x0 = np.asarray(x0, dtype=np.float64)
        r = self.forward(x0) - d_obs
        var = np.broadcast_to(np.asarray(sigma_d, dtype=np.float64) ** 2, r.shape[-1:])
        if not calib_sigma:
            return self.vjp(x0, r / var)
        if J is None:
            J = self.trace_jacobians(x0)
        var_t = var.reshape(self.data_shape).T  # (W, H-1)
        cov = propagate_covariance(J, calib_sigma, np.sqrt(var_t))
        rt = np.moveaxis(r.reshape(r.shape[:-1] + self.data_shape), -1, -2)  # (..., W, H-1)
        y = cholesky_solve(cov, rt)
        g_ip = np.einsum("...wij,...wi->...jw", J, y)  # (..., H, W)
        out = np.zeros_like(x0)
        out[..., self.channel, :, :] = g_ip
        return out


# --------------------------------------------------------------------------- #
# Covariance propagation
# --------------------------------------------------------------------------- #


def _chol_with_jitter(cov):
    try:
        return np.linalg.cholesky(cov), 0.0
    except np.linalg.LinAlgError:
        m = cov.shape[-1]
        tr = np.trace(cov, axis1=-2, axis2=-1)[..., None, None]
        jitter = 1e-8 * tr / m
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(m)), float(np.max(jitter))
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("covariance factorization failed after jitter") from None


def cholesky_solve(cov, rhs) -> np.ndarray:
    """Solve ``cov y = rhs`` for stacked SPD blocks via Cholesky and two triangular solves."""
    L, _ = _chol_with_jitter(cov)
    z = np.linalg.solve(L, rhs[..., None])
    return np.linalg.solve(np.swapaxes(L, -1, -2), z)[..., 0]


def propagate_covariance(jac, calib_sigma: float, sigma_d) -> np.ndarray:
    """``J (calib_sigma^2 I) J^T + diag(sigma_d^2)``.

    ``jac`` is a :class:`MaskOperator` (returns the diagonal only), a dense
    Jacobian (m, n), or a stack of per-trace Jacobians (..., m, n) (returns
    matching (..., m, m) blocks). ``sigma_d`` broadcasts against the data axis.
    """
    if calib_sigma < 0:
        raise ValueError("calib_sigma must be >= 0")
    sd2 = np.asarray(sigma_d, dtype=np.float64) ** 2
    if isinstance(jac, MaskOperator):
        return jac.propagated_variance(calib_sigma) + sd2
    J = np.asarray(jac, dtype=np.float64)
    m = J.shape[-2]
    noise = np.broadcast_to(sd2, J.shape[:-1])[..., None] * np.eye(m)
    if calib_sigma == 0:
        return noise.copy()
    cov = calib_sigma**2 * (J @ np.swapaxes(J, -1, -2)) + noise
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


# --------------------------------------------------------------------------- #
# Grid-level helpers and file formats
# --------------------------------------------------------------------------- #


def seismic_forward(grid, op: SeismicOperator) -> np.ndarray:
    """Data of one grid arranged as ``(H-1, W)``: time samples by traces."""
    data = grid.data if isinstance(grid, GridModel) else np.asarray(grid)
    return op.forward(data[None])[0].reshape(op.data_shape)


def apply_mask(op: MaskOperator, grid, adjoint: bool = False) -> np.ndarray:
    """Gather observed values of one grid, or scatter a data vector when ``adjoint``."""
    if adjoint:
        return op.adjoint(np.asarray(grid, dtype=np.float64)[None])[0]
    data = grid.data if isinstance(grid, GridModel) else np.asarray(grid)
    return op.forward(data[None])[0]


def write_wells(op: MaskOperator, values, destination) -> None:
    """CSV ``channel,row,col,value`` with one row per observed cell."""
    lines = ["channel,row,col,value"]
    for (c, r, k), v in zip(op.indices, np.asarray(values, dtype=np.float64)):
        lines.append(f"{op.names[c]},{r},{k},{float(v)!r}")
    Path(destination).write_text("\n".join(lines) + "\n")


def read_wells(source, grid_shape, names=("facies", "impedance"), offset=None, scale=None):
    """Inverse of :func:`write_wells`; returns ``(MaskOperator, values)``."""
    rows = list(csv.reader(io.StringIO(Path(source).read_text())))
    if not rows or [h.strip() for h in rows[0]] != ["channel", "row", "col", "value"]:
        raise ValueError("well CSV must start with header channel,row,col,value")
    idx, vals = [], []
    for ch, r, k, v in rows[1:]:
        c = names.index(ch) if ch in names else int(ch)
        idx.append((c, int(r), int(k)))
        vals.append(float(v))
    return MaskOperator(idx, grid_shape, names, offset, scale), np.array(vals)
