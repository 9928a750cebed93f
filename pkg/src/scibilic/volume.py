"""Volume container and the SCIV binary format.

SCIV layout (all integers little-endian)::

    bytes 0..3   magic b"SCIV"
    byte  4      version (1)
    byte  5      ndim (u8, >= 1)
    ndim x u32   extents, row-major order
    payload      prod(extents) float32 values, little-endian, row-major

Also provides 8-bit PGM export with a sidecar text file recording the
min-max scaling.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Volume",
    "SCIVError",
    "MagicError",
    "VersionError",
    "TruncatedError",
    "DimensionError",
    "write_volume",
    "read_volume",
    "write_pgm",
    "MAGIC",
    "VERSION",
]

MAGIC = b"SCIV"
VERSION = 1
_MAX_EXTENT = 2**32 - 1
_MAX_ELEMENTS = 2**40


class SCIVError(ValueError):
    """Base class for malformed SCIV files."""


class MagicError(SCIVError):
    pass


class VersionError(SCIVError):
    pass


class TruncatedError(SCIVError):
    pass


class DimensionError(SCIVError):
    """Zero/oversized extents or an element count past the format limit."""


@dataclass
class Volume:
    """A float32 grid with informational spacing and provenance."""

    data: np.ndarray
    spacing: tuple[float, ...] | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim == 0 or 0 in self.data.shape:
            raise DimensionError(f"volume extents must be positive, got {self.data.shape}")
        if self.spacing is None:
            self.spacing = (1.0,) * self.data.ndim

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


def _as_float32(volume) -> np.ndarray:
    arr = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    return np.ascontiguousarray(arr, dtype="<f4")


def write_volume(volume, path) -> Path:
    arr = _as_float32(volume)
    if arr.ndim == 0 or arr.ndim > 255:
        raise DimensionError(f"ndim must be in 1..255, got {arr.ndim}")
    if any(d == 0 or d > _MAX_EXTENT for d in arr.shape):
        raise DimensionError(f"extents must be in 1..{_MAX_EXTENT}, got {arr.shape}")
    header = MAGIC + struct.pack("<BB", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))
    return path


def read_volume(path) -> Volume:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 6:
        if not MAGIC.startswith(raw[:4]):
            raise MagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
        raise TruncatedError(f"{path}: file is {len(raw)} bytes, shorter than the 6-byte preamble")
    if raw[:4] != MAGIC:
        raise MagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, ndim = raw[4], raw[5]
    if version != VERSION:
        raise VersionError(f"{path}: unsupported version {version}")
    if ndim == 0:
        raise DimensionError(f"{path}: ndim is 0")
    header_len = 6 + 4 * ndim
    if len(raw) < header_len:
        raise TruncatedError(f"{path}: header declares {ndim} extents but file ends at byte {len(raw)}")
    dims = struct.unpack(f"<{ndim}I", raw[6:header_len])
    if 0 in dims:
        raise DimensionError(f"{path}: zero extent in {dims}")
    count = 1
    for d in dims:
        count *= d
    if count > _MAX_ELEMENTS:
        raise DimensionError(f"{path}: extents {dims} overflow the {_MAX_ELEMENTS}-element limit")
    expected = header_len + 4 * count
    if len(raw) < expected:
        raise TruncatedError(f"{path}: payload needs {expected - header_len} bytes, found {len(raw) - header_len}")
    if len(raw) > expected:
        raise SCIVError(f"{path}: {len(raw) - expected} trailing bytes after payload")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=header_len).reshape(dims)
    return Volume(data.astype(np.float32))


def write_pgm(image, path) -> tuple[float, float]:
    """Min-max scale a 2-D map to 8-bit binary PGM; writes ``<path>.scale.txt``.

    Returns the ``(min, max)`` used. Constant images map to all zeros.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"PGM export needs a 2-D image, got shape {arr.shape}")
    lo, hi = float(arr.min()), float(arr.max())
    span = hi - lo
    scaled = np.zeros(arr.shape) if span == 0 else (arr - lo) / span
    pix = np.round(scaled * 255).astype(np.uint8)
    path = Path(path)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
    sidecar = path.with_name(path.name + ".scale.txt")
    sidecar.write_text(f"min {lo!r}\nmax {hi!r}\nvalue = min + pixel / 255 * (max - min)\n")
    return lo, hi
