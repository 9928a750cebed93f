import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from scibilic.volume import (
    DimensionError,
    MagicError,
    SCIVError,
    TruncatedError,
    VersionError,
    Volume,
    read_volume,
    write_pgm,
    write_volume,
)

floats32 = st.floats(width=32, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arr=hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=9), elements=floats32))
def test_round_trip_bit_exact(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("v") / "a.sciv"
    write_volume(arr, path)
    back = read_volume(path)
    assert back.dims == arr.shape
    assert back.data.tobytes() == arr.tobytes()


@pytest.mark.parametrize("shape", [(1, 1), (1, 7), (7, 1), (1,)])
def test_edge_dims(tmp_path, shape):
    arr = np.random.default_rng(0).standard_normal(shape).astype(np.float32)
    write_volume(Volume(arr), tmp_path / "e.sciv")
    back = read_volume(tmp_path / "e.sciv")
    assert back.dims == shape and back.data.tobytes() == arr.tobytes()


def test_layout_is_little_endian(tmp_path):
    arr = np.array([[1.0, 2.0, 3.0]], dtype=np.float32)
    raw = write_volume(arr, tmp_path / "l.sciv").read_bytes()
    assert raw[:4] == b"SCIV" and raw[4] == 1 and raw[5] == 2
    assert struct.unpack("<2I", raw[6:14]) == (1, 3)
    assert struct.unpack("<3f", raw[14:]) == (1.0, 2.0, 3.0)


def _write(tmp_path, raw):
    p = tmp_path / "bad.sciv"
    p.write_bytes(raw)
    return p


def test_malformed_files(tmp_path):
    good = write_volume(np.ones((2, 3), np.float32), tmp_path / "g.sciv").read_bytes()
    with pytest.raises(MagicError):
        read_volume(_write(tmp_path, b"XCIV" + good[4:]))
    with pytest.raises(MagicError):
        read_volume(_write(tmp_path, b"NO"))
    with pytest.raises(VersionError):
        read_volume(_write(tmp_path, good[:4] + b"\x02" + good[5:]))
    with pytest.raises(TruncatedError):
        read_volume(_write(tmp_path, good[:-1]))
    with pytest.raises(TruncatedError):
        read_volume(_write(tmp_path, good[:9]))
    with pytest.raises(TruncatedError):
        read_volume(_write(tmp_path, b"SCIV"))
    with pytest.raises(DimensionError):
        read_volume(_write(tmp_path, b"SCIV\x01\x02" + struct.pack("<2I", 0, 3)))
    with pytest.raises(DimensionError):
        read_volume(_write(tmp_path, b"SCIV\x01\x03" + struct.pack("<3I", 2**32 - 1, 2**32 - 1, 2**20)))
    with pytest.raises(SCIVError):
        read_volume(_write(tmp_path, good + b"\x00"))


@settings(max_examples=200, deadline=None)
@given(raw=st.binary(max_size=64))
def test_garbage_never_crashes(tmp_path_factory, raw):
    p = tmp_path_factory.mktemp("g") / "x.sciv"
    p.write_bytes(raw)
    try:
        read_volume(p)
    except SCIVError:
        pass


def test_volume_rejects_empty():
    with pytest.raises(DimensionError):
        Volume(np.zeros((0, 3)))


def test_pgm_export(tmp_path):
    img = np.array([[0.0, 1.0], [2.0, 4.0]])
    lo, hi = write_pgm(img, tmp_path / "m.pgm")
    assert (lo, hi) == (0.0, 4.0)
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    assert list(raw[-4:]) == [0, 64, 128, 255]
    assert "max 4.0" in (tmp_path / "m.pgm.scale.txt").read_text()
