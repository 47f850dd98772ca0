import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cdps.grid import (
    GridFormatError,
    GridModel,
    NormStats,
    denormalize,
    grid_to_bytes,
    make_grid,
    normalize,
    read_grid,
    threshold_facies,
    write_csv,
    write_grid,
)

HEADER = 4 + 12


def _grid(data, names=None):
    data = np.asarray(data, dtype=float)
    if data.ndim == 2:
        data = data[None]
    names = names or tuple(f"c{i}" for i in range(data.shape[0]))
    return GridModel(names, data)


finite = st.floats(-1e300, 1e300, allow_nan=False, allow_infinity=False)
grids = st.tuples(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6)).flatmap(
    lambda s: arrays(np.float64, s, elements=finite)
)


def test_single_zero_cell_layout():
    buf = io.BytesIO()
    n = write_grid(_grid([[0.0]], ("facies",)), buf)
    raw = buf.getvalue()
    assert n == len(raw) == HEADER + 32 + 8
    assert raw[:4] == b"GRD1"
    assert struct.unpack("<III", raw[4:16]) == (1, 1, 1)
    assert raw[16:48] == b"facies".ljust(32, b"\0")
    assert raw[-8:] == b"\0" * 8


def test_payload_size_two_channels():
    g = make_grid({"impedance": np.ones((80, 100)), "facies": np.zeros((80, 100))})
    assert g.names == ("facies", "impedance")
    raw = grid_to_bytes(g)
    assert len(raw) - HEADER - 2 * 32 == 2 * 100 * 80 * 8


def test_channel_major_row_major_order():
    data = np.arange(12.0).reshape(2, 2, 3)
    raw = grid_to_bytes(_grid(data))
    payload = np.frombuffer(raw[HEADER + 64:], dtype="<f8")
    assert np.array_equal(payload, np.arange(12.0))


@settings(max_examples=60, deadline=None)
@given(grids)
def test_roundtrip_bitwise(data):
    g = _grid(data)
    raw = grid_to_bytes(g)
    back = read_grid(raw)
    assert back == g
    assert grid_to_bytes(back) == raw


def test_roundtrip_file(tmp_path):
    g = _grid(np.random.default_rng(0).normal(size=(2, 5, 7)), ("facies", "impedance"))
    write_grid(g, tmp_path / "g.grd")
    assert read_grid(tmp_path / "g.grd") == g


def test_bad_magic():
    raw = bytearray(grid_to_bytes(_grid([[1.0]])))
    raw[:4] = b"GRD2"
    with pytest.raises(GridFormatError, match="bad magic"):
        read_grid(bytes(raw))


def test_truncated_payload():
    raw = grid_to_bytes(_grid(np.ones((3, 3))))
    with pytest.raises(GridFormatError, match="truncated"):
        read_grid(raw[:-1])


def test_dimension_overflow():
    raw = b"GRD1" + struct.pack("<III", 2**16, 2**16, 2**16)
    with pytest.raises(GridFormatError, match="overflow"):
        read_grid(raw)


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        _grid([[np.nan]])


def test_mismatched_channel_shapes():
    with pytest.raises(ValueError):
        make_grid({"facies": np.zeros((2, 2)), "impedance": np.zeros((2, 3))})


def test_grid_is_immutable():
    g = _grid(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        g.data[0, 0, 0] = 1.0


def test_csv_export():
    g = make_grid({"facies": [[0.0, 1.0]], "impedance": [[7000.0, 6000.0]]})
    buf = io.StringIO()
    write_csv(g, buf)
    assert buf.getvalue().splitlines() == ["x,y,facies,impedance", "0,0,0.0,7000.0", "1,0,1.0,6000.0"]


def test_normalize_examples():
    stats = NormStats({"impedance": 7976.0, "c": 3.0}, {"impedance": 1100.0, "c": 2.0})
    g = GridModel(("impedance",), np.full((1, 2, 2), 8540.0))
    assert normalize(g, stats).data[0, 0, 0] == pytest.approx((8540 - 7976) / 1100, abs=1e-12)
    assert normalize(g, stats).data[0, 0, 0] == pytest.approx(0.5127, abs=1e-4)
    const = GridModel(("c",), np.full((1, 2, 2), 3.0))
    assert np.all(normalize(const, stats).data == 0)
    ident = NormStats({"c": 0.0}, {"c": 1.0})
    assert normalize(const, ident) == const


def test_normalize_missing_channel():
    with pytest.raises(KeyError):
        normalize(_grid([[1.0]], ("facies",)), NormStats({"x": 0.0}, {"x": 1.0}))


def test_std_must_be_positive():
    with pytest.raises(ValueError):
        NormStats({"a": 0.0}, {"a": 0.0})


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (2, 3, 4), elements=st.floats(-1e6, 1e6)),
    st.floats(-1e4, 1e4),
    st.floats(1e-6, 1e4),
)
def test_normalize_roundtrip(data, mean, std):
    g = _grid(data, ("a", "b"))
    stats = NormStats({"a": mean, "b": -mean}, {"a": std, "b": 2 * std})
    back = denormalize(normalize(g, stats), stats)
    scale = np.maximum(np.abs(g.data), abs(mean) + 1.0)
    assert np.all(np.abs(back.data - g.data) <= 1e-12 * scale)


def test_stats_dict_roundtrip():
    stats = NormStats({"facies": 0.3, "impedance": 7976.0}, {"facies": 0.46, "impedance": 1100.0})
    assert NormStats.from_dict(stats.to_dict()) == stats


def test_threshold_examples():
    g = make_grid({"facies": np.full((2, 2), 0.9), "impedance": np.full((2, 2), 5.0)})
    t = threshold_facies(g, 0.5)
    assert np.all(t.channel("facies") == 1)
    assert np.all(t.channel("impedance") == 5.0)
    tie = threshold_facies(make_grid({"facies": [[0.5, 0.4999]]}), 0.5)
    assert tie.channel("facies").tolist() == [[1.0, 0.0]]
    mixed = threshold_facies(make_grid({"facies": [[0.2, 0.7]]}), 0.5)
    assert mixed.channel("facies").tolist() == [[0.0, 1.0]]


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-2, 2)), st.floats(0.01, 1.0))
def test_threshold_idempotent(fac, cutoff):
    g = make_grid({"facies": fac})
    once = threshold_facies(g, cutoff)
    assert threshold_facies(once, cutoff) == once
