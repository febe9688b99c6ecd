"""Datacube and image containers plus the TRCB binary format.

Cubes are stored bin-major: ``values[t, row, col]``.  Counts are kept as
float32 so measured integer histograms and real-valued reconstructions share
one representation.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, FrozenSet, Iterable, Tuple

import numpy as np

MAGIC = b"TRCB"
VERSION = 1
DTYPE_F32 = 1
HEADER = struct.Struct("<4sHHIIII")  # magic, version, dtype, M, N, tau, reserved
BIN_WIDTH = struct.Struct("<d")

UNITS = ("bin", "ps", "ns", "dimensionless")


class FormatError(ValueError):
    """Raised for malformed TRCB streams."""


def _as_counts(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float32, copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"{name} dimensions must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if np.any(arr < 0):
        raise ValueError(f"{name} contains negative values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TransientCube:
    """Photon counts per pixel per time bin, shape ``(bins, height, width)``."""

    values: np.ndarray
    bin_width: float

    def __post_init__(self):
        object.__setattr__(self, "values", _as_counts(self.values, 3, "cube"))
        if not (self.bin_width > 0 and np.isfinite(self.bin_width)):
            raise ValueError("bin_width must be > 0")
        object.__setattr__(self, "bin_width", float(self.bin_width))

    @property
    def bins(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, TransientCube):
            return NotImplemented
        return (self.bin_width == other.bin_width
                and self.values.shape == other.values.shape
                and np.array_equal(self.values, other.values))


@dataclass(frozen=True, eq=False)
class SpadMeasurement:
    """Low-resolution histogram cube ``d`` with its dead-pixel set."""

    values: np.ndarray
    bin_width: float
    dead_pixels: FrozenSet[Tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self):
        vals = _as_counts(self.values, 3, "measurement")
        object.__setattr__(self, "values", vals)
        if not (self.bin_width > 0 and np.isfinite(self.bin_width)):
            raise ValueError("bin_width must be > 0")
        object.__setattr__(self, "bin_width", float(self.bin_width))
        dead = frozenset((int(r), int(c)) for r, c in self.dead_pixels)
        _, m, n = vals.shape
        for r, c in dead:
            if not (0 <= r < m and 0 <= c < n):
                raise ValueError(f"dead pixel {(r, c)} outside {m}x{n} grid")
            if np.any(vals[:, r, c] != 0):
                raise ValueError(f"dead pixel {(r, c)} has non-zero counts")
        object.__setattr__(self, "dead_pixels", dead)

    @property
    def bins(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def as_cube(self) -> TransientCube:
        return TransientCube(self.values, self.bin_width)

    def __eq__(self, other):
        if not isinstance(other, SpadMeasurement):
            return NotImplemented
        return (self.bin_width == other.bin_width
                and self.dead_pixels == other.dead_pixels
                and self.values.shape == other.values.shape
                and np.array_equal(self.values, other.values))


@dataclass(frozen=True, eq=False)
class IntensityImage:
    """Time-integrated high-resolution image ``c``, shape ``(height, width)``."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_counts(self.values, 2, "image"))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, IntensityImage):
            return NotImplemented
        return (self.values.shape == other.values.shape
                and np.array_equal(self.values, other.values))


@dataclass(frozen=True, eq=False)
class ScalarMap:
    """Per-pixel scalar (depth, lifetime, ...). NaN marks "no data"."""

    values: np.ndarray
    unit: str = "dimensionless"

    def __post_init__(self):
        if self.unit not in UNITS:
            raise ValueError(f"unit must be one of {UNITS}, got {self.unit!r}")
        arr = np.array(self.values, dtype=np.float64, copy=True)
        if arr.ndim != 2 or min(arr.shape) < 1:
            raise ValueError(f"map must be a non-empty 2D array, got shape {arr.shape}")
        if np.any(np.isinf(arr)):
            raise ValueError("map values must be finite or NaN (sentinel)")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.values)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


# --------------------------------------------------------------------------
# TRCB I/O

def write_cube(cube: TransientCube, dest: BinaryIO) -> None:
    """Serialize ``cube`` to the little-endian TRCB format."""
    tau, m, n = cube.shape
    dest.write(HEADER.pack(MAGIC, VERSION, DTYPE_F32, m, n, tau, 0))
    dest.write(BIN_WIDTH.pack(cube.bin_width))
    dest.write(np.ascontiguousarray(cube.values, dtype="<f4").tobytes())


def read_cube(src: BinaryIO) -> TransientCube:
    head = src.read(HEADER.size)
    if len(head) < HEADER.size:
        raise FormatError("truncated header")
    magic, version, dtype, m, n, tau, _ = HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError("bad magic")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype}")
    raw = src.read(BIN_WIDTH.size)
    if len(raw) < BIN_WIDTH.size:
        raise FormatError("truncated header")
    (bin_width,) = BIN_WIDTH.unpack(raw)
    expected = 4 * m * n * tau
    payload = src.read(expected + 1)
    if len(payload) != expected:
        raise FormatError(f"payload mismatch: expected {expected} bytes, got {len(payload)}")
    if min(m, n, tau) < 1:
        raise FormatError("payload mismatch: zero dimension")
    values = np.frombuffer(payload, dtype="<f4").reshape(tau, m, n)
    if np.any(values < 0):
        raise FormatError("negative values in cube")
    return TransientCube(values.astype(np.float32), bin_width)


def cube_to_bytes(cube: TransientCube) -> bytes:
    buf = io.BytesIO()
    write_cube(cube, buf)
    return buf.getvalue()


def cube_from_bytes(data: bytes) -> TransientCube:
    return read_cube(io.BytesIO(data))


def save_cube(cube: TransientCube, path) -> None:
    with open(path, "wb") as fh:
        write_cube(cube, fh)


def load_cube(path) -> TransientCube:
    with open(path, "rb") as fh:
        return read_cube(fh)


# Images travel as single-bin cubes.
def image_to_cube(image: IntensityImage, bin_width: float = 1.0) -> TransientCube:
    return TransientCube(image.values[None], bin_width)


def cube_to_image(cube: TransientCube) -> IntensityImage:
    if cube.bins != 1:
        raise ValueError(f"intensity image file must have 1 bin, got {cube.bins}")
    return IntensityImage(cube.values[0])


# --------------------------------------------------------------------------
# dead-pixel sidecar

def write_dead_pixels(dead: Iterable[Tuple[int, int]], dest) -> None:
    for r, c in sorted(dead):
        dest.write(f"{r},{c}\n")


def read_dead_pixels(src) -> FrozenSet[Tuple[int, int]]:
    out = set()
    for lineno, line in enumerate(src, 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise FormatError(f"line {lineno}: expected 'row,col'")
        out.add((int(parts[0]), int(parts[1])))
    return frozenset(out)


# --------------------------------------------------------------------------
# map export

def _fmt(v: float) -> str:
    if np.isnan(v):
        return ""
    return repr(int(v)) if float(v).is_integer() else repr(float(v))


def export_map(smap: ScalarMap, dest, fmt: str = "csv") -> None:
    """Write a map as CSV text or a binary 16-bit PGM.

    CSV sentinels become empty cells. PGM values are min-max scaled over the
    valid pixels to 0..65535; sentinels, and every pixel of a constant map,
    become 0.
    """
    vals = smap.values
    if fmt == "csv":
        text = "".join(",".join(_fmt(v) for v in row) + "\n" for row in vals)
        if isinstance(dest, io.TextIOBase):
            dest.write(text)
        else:
            dest.write(text.encode("ascii"))
    elif fmt == "pgm16":
        valid = smap.valid
        if not valid.any():
            raise ValueError("empty map")
        lo, hi = vals[valid].min(), vals[valid].max()
        out = np.zeros(vals.shape, dtype=">u2")
        if hi > lo:
            scaled = np.round((vals[valid] - lo) / (hi - lo) * 65535.0)
            out[valid] = scaled.astype(np.uint16)
        h, w = vals.shape
        dest.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        dest.write(out.tobytes())
    else:
        raise ValueError(f"unknown map format {fmt!r}")
