"""Multi-channel grids, per-channel standardization and the GRD1 file format.

Every field exchanged between modules (training images, diffusion states,
denoised estimates, observed data) is a :class:`GridModel`: an ordered set of
named 2D channels sharing one H x W shape.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from os import PathLike
from typing import BinaryIO, Iterable, Sequence

import numpy as np

MAGIC = b"GRD1"
NAME_BYTES = 32
# Guard against absurd headers before allocating.
MAX_CELLS = 1 << 31

CHANNEL_ORDER = ("facies", "impedance")


class GridFormatError(ValueError):
    """Raised when a GRD1 stream is malformed."""


@dataclass(frozen=True, eq=False)
class GridModel:
    """Immutable stack of named 2D channels.

    Parameters
    ----------
    names : tuple of str
        Channel names, in storage order.
    data : ndarray, shape (C, H, W)
        Channel values. Stored as a read-only float64 copy.
    cell_size : float
        Cell side length in meters.
    """

    names: tuple
    data: np.ndarray
    cell_size: float = 1.0

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ValueError(f"grid data must be (C, H, W), got shape {data.shape}")
        names = tuple(str(n) for n in self.names)
        if len(names) != data.shape[0]:
            raise ValueError(f"{len(names)} names for {data.shape[0]} channels")
        if len(set(names)) != len(names):
            raise ValueError("duplicate channel names")
        if not np.all(np.isfinite(data)):
            raise ValueError("grid contains non-finite values")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        data.setflags(write=False)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "cell_size", float(self.cell_size))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    def channel(self, name: str) -> np.ndarray:
        return self.data[self.index(name)]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no channel named {name!r}") from None

    def with_data(self, data) -> "GridModel":
        return GridModel(self.names, data, self.cell_size)

    def __eq__(self, other):
        if not isinstance(other, GridModel):
            return NotImplemented
        return (
            self.names == other.names
            and self.cell_size == other.cell_size
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


def make_grid(channels: dict, cell_size: float = 1.0) -> GridModel:
    """Build a grid from a ``{name: 2D array}`` mapping.

    Facies and impedance are placed first, in that order, whatever the
    mapping order; any other channels follow in insertion order.
    """
    names = [n for n in CHANNEL_ORDER if n in channels]
    names += [n for n in channels if n not in CHANNEL_ORDER]
    return GridModel(tuple(names), np.stack([np.asarray(channels[n], float) for n in names]), cell_size)


# --------------------------------------------------------------------------- #
# GRD1 binary I/O
# --------------------------------------------------------------------------- #


def _encode_name(name: str) -> bytes:
    raw = name.encode("ascii")
    if len(raw) > NAME_BYTES:
        raise ValueError(f"channel name longer than {NAME_BYTES} bytes: {name!r}")
    return raw.ljust(NAME_BYTES, b"\0")


def grid_to_bytes(grid: GridModel) -> bytes:
    c, h, w = grid.shape
    parts = [MAGIC, struct.pack("<III", c, h, w)]
    parts += [_encode_name(n) for n in grid.names]
    parts.append(grid.data.astype("<f8").tobytes(order="C"))
    return b"".join(parts)


def write_grid(grid: GridModel, destination) -> int:
    """Write ``grid`` as GRD1 to a path or binary stream; return bytes written.

    The cell size is not part of the format; it is carried by manifests.
    """
    if not np.all(np.isfinite(grid.data)):
        raise ValueError("refusing to write non-finite values")
    payload = grid_to_bytes(grid)
    if isinstance(destination, (str, PathLike)):
        with open(destination, "wb") as fh:
            fh.write(payload)
    else:
        destination.write(payload)
    return len(payload)


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise GridFormatError(f"truncated {what}: expected {n} bytes, got {len(buf)}")
    return buf


def read_grid(source, cell_size: float = 1.0) -> GridModel:
    """Read one GRD1 grid from a path, bytes, or binary stream."""
    if isinstance(source, (bytes, bytearray)):
        return read_grid(io.BytesIO(source), cell_size)
    if isinstance(source, (str, PathLike)):
        with open(source, "rb") as fh:
            return read_grid(fh, cell_size)
    fh = source
    magic = fh.read(4)
    if magic != MAGIC:
        raise GridFormatError("bad magic")
    c, h, w = struct.unpack("<III", _read_exact(fh, 12, "header"))
    n = c * h * w
    if c == 0 or h == 0 or w == 0 or n > MAX_CELLS:
        raise GridFormatError(f"dimension overflow or empty grid: C={c} H={h} W={w}")
    names = []
    for _ in range(c):
        raw = _read_exact(fh, NAME_BYTES, "channel name")
        names.append(raw.rstrip(b"\0").decode("ascii"))
    payload = _read_exact(fh, 8 * n, "payload")
    data = np.frombuffer(payload, dtype="<f8").reshape(c, h, w).astype(np.float64)
    return GridModel(tuple(names), data, cell_size)


def write_csv(grid: GridModel, destination) -> None:
    """Export one row per cell: ``x,y,<channel...>`` with x the column index."""
    lines = ["x,y," + ",".join(grid.names)]
    _, h, w = grid.shape
    for y in range(h):
        for x in range(w):
            vals = ",".join(repr(float(v)) for v in grid.data[:, y, x])
            lines.append(f"{x},{y},{vals}")
    text = "\n".join(lines) + "\n"
    if isinstance(destination, (str, PathLike)):
        with open(destination, "w") as fh:
            fh.write(text)
    else:
        destination.write(text)


# --------------------------------------------------------------------------- #
# Standardization
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class NormStats:
    """Per-channel affine standardization ``x -> (x - mean) / std``."""

    means: dict
    stds: dict

    def __post_init__(self):
        if set(self.means) != set(self.stds):
            raise ValueError("means and stds must cover the same channels")
        for name, s in self.stds.items():
            if not (np.isfinite(s) and s > 0):
                raise ValueError(f"std for {name!r} must be positive, got {s}")

    @classmethod
    def from_grids(cls, grids: Iterable[GridModel]) -> "NormStats":
        grids = list(grids)
        if not grids:
            raise ValueError("need at least one grid")
        names = grids[0].names
        stack = np.stack([g.data for g in grids])
        means = {n: float(stack[:, i].mean()) for i, n in enumerate(names)}
        stds = {n: float(stack[:, i].std()) for i, n in enumerate(names)}
        return cls(means, stds)

    def vectors(self, names: Sequence[str]):
        """Per-channel mean and std arrays broadcastable to (C, H, W)."""
        missing = [n for n in names if n not in self.means]
        if missing:
            raise KeyError(f"no normalization stats for channels {missing}")
        mean = np.array([self.means[n] for n in names])[:, None, None]
        std = np.array([self.stds[n] for n in names])[:, None, None]
        return mean, std

    def to_dict(self) -> dict:
        return {f"mean.{k}": v for k, v in self.means.items()} | {f"std.{k}": v for k, v in self.stds.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        means = {k[5:]: float(v) for k, v in d.items() if k.startswith("mean.")}
        stds = {k[4:]: float(v) for k, v in d.items() if k.startswith("std.")}
        return cls(means, stds)


def normalize(grid: GridModel, stats: NormStats) -> GridModel:
    mean, std = stats.vectors(grid.names)
    return grid.with_data((grid.data - mean) / std)


def denormalize(grid: GridModel, stats: NormStats) -> GridModel:
    mean, std = stats.vectors(grid.names)
    return grid.with_data(grid.data * std + mean)


def threshold_facies(grid: GridModel, cutoff: float = 0.5, channel: str = "facies") -> GridModel:
    """Map the facies channel to {0, 1}; values equal to ``cutoff`` become 1."""
    i = grid.index(channel)
    data = grid.data.copy()
    data[i] = (data[i] >= cutoff).astype(np.float64)
    return grid.with_data(data)
