"""Small convolutional denoiser with hand-written backpropagation, Tweedie
score conversion and the empirical denoiser-error calibration table.

Network (states in standardized units, shape ``(n, C, H, W)``)::

    e      = log(sigma) / 4                    scalar feature, also a map
    h      = conv3x3([c_in x, e]) + b1         c_in = 1 / sqrt(1 + sigma^2)
    a      = tanh(h * (1 + u1 e))
    g      = (conv3x3(a) + b2) * (1 + u2 e)
    x0_hat = x - s x + c_out g                 s = k sigma^2 / (1 + k sigma^2),
                                               c_out = sigma / sqrt(1 + sigma^2)

``k >= 0`` (per channel, a data precision) starts at 0 and the second
convolution starts at zero, so an untrained net returns its input unchanged.
For any ``k > 0`` the skip weight ``1 - s`` vanishes as ``sigma`` grows.
"""

from __future__ import annotations

import csv
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridModel
from .rng import stream
from .schedule import SIGMA_MAX, SIGMA_MIN

logger = logging.getLogger(__name__)

NET_MAGIC = b"DNW1"
KERNEL = 3


def score_from_denoiser(x_t, x0_hat, sigma_t: float) -> np.ndarray:
    """Tweedie score ``(x0_hat - x_t) / sigma_t^2``."""
    if np.any(np.asarray(sigma_t) <= 0):
        raise ValueError("sigma_t must be positive")
    return (np.asarray(x0_hat, dtype=np.float64) - np.asarray(x_t, dtype=np.float64)) / np.asarray(sigma_t) ** 2


# --------------------------------------------------------------------------- #
# 3x3 "same" convolution via shifted matrix products
# --------------------------------------------------------------------------- #


def _conv(xp, w, h, wd):
    """xp: zero-padded input (n, ci, h+2, w+2); w: (co, ci, 3, 3) -> (n, co, h, w)."""
    n = xp.shape[0]
    out = np.zeros((n, w.shape[0], h * wd))
    for dy in range(KERNEL):
        for dx in range(KERNEL):
            patch = xp[:, :, dy : dy + h, dx : dx + wd].reshape(n, xp.shape[1], -1)
            out += np.matmul(w[:, :, dy, dx], patch)
    return out.reshape(n, w.shape[0], h, wd)


def _conv_backward(xp, w, g, need_input=True):
    """Gradients of ``sum(g * _conv(xp, w))`` w.r.t. ``w`` and the unpadded input."""
    n, ci = xp.shape[:2]
    h, wd = g.shape[2:]
    gf = g.reshape(n, g.shape[1], -1)
    gw = np.empty_like(w)
    gx = np.zeros_like(xp) if need_input else None
    for dy in range(KERNEL):
        for dx in range(KERNEL):
            patch = xp[:, :, dy : dy + h, dx : dx + wd].reshape(n, ci, -1)
            gw[:, :, dy, dx] = np.einsum("nok,nck->oc", gf, patch)
            if need_input:
                gx[:, :, dy : dy + h, dx : dx + wd] += np.matmul(w[:, :, dy, dx].T, gf).reshape(n, ci, h, wd)
    return gw, (gx[:, :, 1:-1, 1:-1] if need_input else None)


def _pad(a):
    return np.pad(a, ((0, 0), (0, 0), (1, 1), (1, 1)))


# --------------------------------------------------------------------------- #
# Network
# --------------------------------------------------------------------------- #

PARAM_ORDER = ("w1", "b1", "u1", "w2", "b2", "u2", "k")


@dataclass
class DenoiserNet:
    """Two-layer 3x3 convolutional denoiser for ``n_channels`` standardized channels.

    Parameters live in :attr:`params` (a dict of float64 arrays); see the
    module docstring for the architecture.
    """

    n_channels: int
    hidden: int = 128
    params: dict = field(default=None, repr=False)
    init_seed: int = 0

    def __post_init__(self):
        if self.n_channels < 1 or self.hidden < 1:
            raise ValueError("channel counts must be positive")
        if self.params is None:
            self.params = self.init_params(self.init_seed)
        shapes = self.param_shapes()
        for k in PARAM_ORDER:
            if self.params[k].shape != shapes[k]:
                raise ValueError(f"parameter {k} has shape {self.params[k].shape}, expected {shapes[k]}")

    def param_shapes(self) -> dict:
        c, m = self.n_channels, self.hidden
        return {
            "w1": (m, c + 1, KERNEL, KERNEL),
            "b1": (m,),
            "u1": (m,),
            "w2": (c, m, KERNEL, KERNEL),
            "b2": (c,),
            "u2": (c,),
            "k": (c,),
        }

    def init_params(self, seed: int) -> dict:
        rng = stream(seed, 0xD1)
        shapes = self.param_shapes()
        p = {k: np.zeros(s) for k, s in shapes.items()}
        fan_in = (self.n_channels + 1) * KERNEL * KERNEL
        p["w1"] = rng.standard_normal(shapes["w1"]) / np.sqrt(fan_in)
        return p

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    @property
    def event_shape(self):
        return None

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_ORDER])

    def set_flat_params(self, theta) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        out, i = {}, 0
        for k, s in self.param_shapes().items():
            size = int(np.prod(s))
            out[k] = theta[i : i + size].reshape(s).copy()
            i += size
        if i != theta.size:
            raise ValueError("parameter vector has the wrong length")
        self.params = out

    # -- forward / backward ------------------------------------------------ #

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.n_channels:
            raise ValueError(f"expected (n, {self.n_channels}, H, W) states, got {x.shape}")
        return x

    def _forward(self, x, sigma):
        p = self.params
        n, c, h, wd = x.shape
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
        if np.any(sig <= 0):
            raise ValueError("sigma must be positive")
        e = np.log(sig) / 4.0
        c_in = 1.0 / np.sqrt(1.0 + sig**2)
        c_out = sig * c_in
        kk = np.maximum(p["k"], 0.0)[None, :]
        ks2 = kk * (sig**2)[:, None]
        shrink = (ks2 / (1.0 + ks2))[:, :, None, None]  # (n, C, 1, 1)
        b4 = (slice(None), None, None, None)
        feat = np.concatenate([c_in[b4] * x, np.broadcast_to(e[b4], (n, 1, h, wd))], axis=1)
        fp = _pad(feat)
        z1 = _conv(fp, p["w1"], h, wd) + p["b1"][None, :, None, None]
        s1 = 1.0 + np.outer(e, p["u1"])[:, :, None, None]
        a = np.tanh(z1 * s1)
        ap = _pad(a)
        z2 = _conv(ap, p["w2"], h, wd) + p["b2"][None, :, None, None]
        s2 = 1.0 + np.outer(e, p["u2"])[:, :, None, None]
        g = z2 * s2
        out = x - shrink * x + c_out[b4] * g
        cache = (x, e, c_in, c_out, shrink, fp, z1, s1, a, ap, z2, s2)
        return out, cache

    def _backward(self, cache, gout, need_params=True):
        """Backprop ``gout`` (cotangent of the output); returns (param grads, input grad)."""
        p = self.params
        x, e, c_in, c_out, shrink, fp, z1, s1, a, ap, z2, s2 = cache
        b4 = (slice(None), None, None, None)
        gx = gout * (1.0 - shrink)
        gg = gout * c_out[b4]
        gz2 = gg * s2
        grads = {}
        if need_params:
            # d shrink / dk = sigma^2 / (1 + k sigma^2)^2; the k >= 0 clamp passes gradients through.
            sig2 = ((c_out / c_in) ** 2)[:, None]
            ds = sig2 / (1.0 + np.maximum(p["k"], 0.0)[None, :] * sig2) ** 2
            grads["k"] = -np.einsum("nchw,nchw,nc->c", gout, x, ds)
            grads["u2"] = np.einsum("nchw,nchw,n->c", gg, z2, e)
            grads["b2"] = gz2.sum(axis=(0, 2, 3))
        gw2, ga = _conv_backward(ap, p["w2"], gz2)
        gpre = ga * (1.0 - a**2)
        gz1 = gpre * s1
        if need_params:
            grads["w2"] = gw2
            grads["u1"] = np.einsum("nmhw,nmhw,n->m", gpre, z1, e)
            grads["b1"] = gz1.sum(axis=(0, 2, 3))
        gw1, gfeat = _conv_backward(fp, p["w1"], gz1)
        if need_params:
            grads["w1"] = gw1
        gx = gx + c_in[b4] * gfeat[:, : self.n_channels]
        return grads, gx

    # -- ScoreModel contract ---------------------------------------------- #

    def denoise(self, x, sigma) -> np.ndarray:
        x = self._check(x)
        return self._forward(x, sigma)[0]

    def denoise_vjp(self, x, sigma, v) -> np.ndarray:
        x = self._check(x)
        _, cache = self._forward(x, sigma)
        return self._backward(cache, np.asarray(v, dtype=np.float64).reshape(x.shape), need_params=False)[1]

    def denoise_and_vjp(self, x, sigma):
        x = self._check(x)
        out, cache = self._forward(x, sigma)

        def vjp(v):
            return self._backward(cache, np.asarray(v, dtype=np.float64).reshape(x.shape), need_params=False)[1]

        return out, vjp

    def score(self, x, sigma) -> np.ndarray:
        return score_from_denoiser(x, self.denoise(x, sigma), sigma)

    # -- training objective ------------------------------------------------ #

    def loss_and_grad(self, x0, noise, sigma, weights=None):
        """Mean squared denoising error of ``x0 + sigma * noise`` and its parameter gradient.

        ``weights`` optionally scales each example's squared error.
        """
        x0 = self._check(x0)
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (x0.shape[0],))
        xt = x0 + sig[:, None, None, None] * noise
        out, cache = self._forward(xt, sig)
        res = out - x0
        w = np.ones_like(sig) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), sig.shape)
        wres = w[:, None, None, None] * res
        loss = float(np.sum(wres * res) / res.size)
        grads, _ = self._backward(cache, 2.0 * wres / res.size)
        return loss, grads


def denoise(net, x_t, sigma_t: float):
    """Denoise a :class:`GridModel` (or a raw array) at noise level ``sigma_t``."""
    if isinstance(x_t, GridModel):
        return x_t.with_data(net.denoise(x_t.data[None], sigma_t)[0])
    return net.denoise(x_t, sigma_t)


def vjp(net, x_t, sigma_t: float, v) -> np.ndarray:
    """``(d denoise / d x_t)^T v``."""
    x = x_t.data[None] if isinstance(x_t, GridModel) else x_t
    return net.denoise_vjp(x, sigma_t, np.asarray(v).reshape(np.shape(x)))


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    step_size: float = 0.05
    momentum: float = 0.9
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX
    # Global gradient-norm cap; 0 disables.
    clip_norm: float = 1.0
    # "plain": unweighted MSE. "relative": each example weighted by 1 / sigma^2,
    # i.e. its error relative to that of the identity denoiser.
    weighting: str = "relative"
    seed: int = 0

    def __post_init__(self):
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")
        if self.weighting not in ("plain", "relative"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.step_size <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need step_size > 0 and momentum in [0, 1)")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ValueError("need 0 < sigma_min <= sigma_max")


def train(net: DenoiserNet, ti_samples, config: TrainConfig = TrainConfig(), callback=None):
    """Minimize the (optionally weighted) MSE denoising loss with momentum gradient descent.

    ``sigma`` is drawn log-uniformly per example. Returns the per-step loss
    trace; ``net`` is updated in place. A non-finite loss or parameter raises
    :class:`TrainingDiverged` with the step index.
    """
    data = net._check(ti_samples)
    n = data.shape[0]
    rng = stream(config.seed, 0x7A)
    vel = {k: np.zeros_like(v) for k, v in net.params.items()}
    trace = []
    lo, hi = np.log(config.sigma_min), np.log(config.sigma_max)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x0 = data[idx]
            sigma = np.exp(rng.uniform(lo, hi, size=idx.size))
            noise = rng.standard_normal(x0.shape)
            w = 1.0 / sigma**2 if config.weighting == "relative" else None
            loss, grads = net.loss_and_grad(x0, noise, sigma, w)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss is {loss} at step {step} (epoch {epoch})")
            if config.clip_norm:
                gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if gnorm > config.clip_norm:
                    grads = {k: g * (config.clip_norm / gnorm) for k, g in grads.items()}
            for k in PARAM_ORDER:
                vel[k] = config.momentum * vel[k] - config.step_size * grads[k]
                net.params[k] = net.params[k] + vel[k]
                if not np.all(np.isfinite(net.params[k])):
                    raise TrainingDiverged(f"parameter {k} became non-finite at step {step}")
            trace.append(loss)
            if callback is not None:
                callback(step, loss)
            step += 1
    return np.array(trace)


def evaluation_loss(model, x0, sigmas, seed: int = 0) -> float:
    """Held-out MSE averaged over the given noise levels with fixed noise draws."""
    x0 = np.asarray(x0, dtype=np.float64)
    tot = 0.0
    for j, s in enumerate(sigmas):
        z = stream(seed, 0xE7, j).standard_normal(x0.shape)
        tot += float(np.mean((model.denoise(x0 + s * z, s) - x0) ** 2))
    return tot / len(sigmas)


# --------------------------------------------------------------------------- #
# Serialization
# --------------------------------------------------------------------------- #


def net_to_bytes(net: DenoiserNet) -> bytes:
    dims = (net.n_channels, net.hidden, KERNEL)
    head = NET_MAGIC + struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    return head + net.flat_params().astype("<f8").tobytes()


def write_net(net: DenoiserNet, destination) -> int:
    blob = net_to_bytes(net)
    if isinstance(destination, (str, Path)):
        Path(destination).write_bytes(blob)
    else:
        destination.write(blob)
    return len(blob)


def read_net(source) -> DenoiserNet:
    blob = Path(source).read_bytes() if isinstance(source, (str, Path)) else source.read()
    if blob[:4] != NET_MAGIC:
        raise ValueError("bad magic: not a DNW1 network blob")
    if len(blob) < 8:
        raise ValueError("truncated header")
    (nd,) = struct.unpack_from("<I", blob, 4)
    if nd != 3 or len(blob) < 8 + 4 * nd:
        raise ValueError("unsupported or truncated layer dims")
    c, m, k = struct.unpack_from(f"<{nd}I", blob, 8)
    if k != KERNEL:
        raise ValueError(f"unsupported kernel size {k}")
    net = DenoiserNet(c, m)
    body = blob[8 + 4 * nd :]
    if len(body) != 8 * net.n_params:
        raise ValueError(f"expected {net.n_params} parameters, found {len(body) / 8:g}")
    net.set_flat_params(np.frombuffer(body, dtype="<f8"))
    return net


# --------------------------------------------------------------------------- #
# Calibration
# --------------------------------------------------------------------------- #


def default_sigma_grid(n: int = 64, sigma_min: float = SIGMA_MIN, sigma_max: float = SIGMA_MAX) -> np.ndarray:
    return np.geomspace(sigma_min, sigma_max, n)


@dataclass(frozen=True)
class CalibrationTable:
    """Map ``sigma_t -> sigma_x0hat`` on a strictly increasing grid of positive nodes.

    Queries interpolate linearly in ``log sigma`` between nodes, linearly in
    ``sigma`` from ``(0, 0)`` to the first node, and clamp above the last node.
    """

    sigmas: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=np.float64).ravel()
        v = np.asarray(self.values, dtype=np.float64).ravel()
        if s.size == 0 or s.size != v.size:
            raise ValueError("need matching, nonempty sigma and value arrays")
        if np.any(s <= 0) or np.any(np.diff(s) <= 0):
            raise ValueError("sigma grid must be positive and strictly increasing")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("calibration values must be finite and nonnegative")
        for a in (s, v):
            a.setflags(write=False)
        object.__setattr__(self, "sigmas", s)
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, sigmas=None) -> "CalibrationTable":
        s = default_sigma_grid() if sigmas is None else np.asarray(sigmas)
        return cls(s, np.zeros(len(s)))

    def query(self, sigma) -> np.ndarray | float:
        q = np.asarray(sigma, dtype=np.float64)
        if np.any(q < 0):
            raise ValueError("sigma must be >= 0")
        s, v = self.sigmas, self.values
        inside = np.interp(np.log(np.clip(q, s[0], s[-1])), np.log(s), v)
        below = v[0] * q / s[0]
        out = np.where(q < s[0], below, inside)
        return float(out) if out.ndim == 0 else out

    __call__ = query

    def to_csv(self, destination) -> None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sigma_t", "sigma_x0hat"])
        for s, v in zip(self.sigmas, self.values):
            w.writerow([repr(float(s)), repr(float(v))])
        if isinstance(destination, (str, Path)):
            Path(destination).write_text(buf.getvalue())
        else:
            destination.write(buf.getvalue())

    @classmethod
    def from_csv(cls, source) -> "CalibrationTable":
        text = Path(source).read_text() if isinstance(source, (str, Path)) else source.read()
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or [h.strip() for h in rows[0]] != ["sigma_t", "sigma_x0hat"]:
            raise ValueError("calibration CSV must start with header sigma_t,sigma_x0hat")
        body = np.array([[float(a), float(b)] for a, b in rows[1:]]).reshape(-1, 2)
        return cls(body[:, 0], body[:, 1])


def calibrate(score_model, validation_samples, sigma_grid=None, seed: int = 0,
              batch_size: int = 64, monotone: bool = True) -> CalibrationTable:
    """Estimate the homoscedastic denoiser error at each noise level.

    For every ``sigma``: corrupt the validation set as ``x0 + sigma z``,
    denoise, take the per-cell RMSE across samples and average it over
    cells. With ``monotone`` the values are made nondecreasing in ``sigma``
    by a running maximum.
    """
    x0 = np.asarray(validation_samples, dtype=np.float64)
    if x0.shape[0] < 2:
        raise ValueError("need at least 2 validation samples")
    sig = default_sigma_grid() if sigma_grid is None else np.asarray(sigma_grid, dtype=np.float64)
    if sig.size == 0:
        raise ValueError("empty sigma grid")
    vals = np.empty(sig.size)
    for j, s in enumerate(sig):
        z = stream(seed, 0xCA, j).standard_normal(x0.shape)
        sq = np.zeros(x0.shape[1:])
        for b in range(0, x0.shape[0], batch_size):
            xb = x0[b : b + batch_size]
            sq += np.sum((score_model.denoise(xb + s * z[b : b + batch_size], s) - xb) ** 2, axis=0)
        vals[j] = np.mean(np.sqrt(sq / x0.shape[0]))
    if monotone:
        vals = np.maximum.accumulate(vals)
    return CalibrationTable(sig, vals)
