"""Linear operators of the SPAD measurement model and their adjoints.

The per-frame operator is ``A = P S B``: Gaussian defocus blur ``B``, sparse
active-area mask ``S`` and ``r x r`` sum pooling ``P``. ``A_tau`` applies it to
every time bin. ``T`` integrates over time, ``K_h``/``K_l`` over space, and
``grad2d`` takes per-frame forward differences.

All functions take and return plain float64 arrays; stacks of frames are
shaped ``(bins, rows, cols)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import FrozenSet, Optional, Tuple

import numpy as np
from scipy import ndimage

BOUNDARIES = ("zero_pad", "replicate", "reflect")


def default_active_width(r: int) -> int:
    """Active-window side in high-res pixels for a 7 um diode on a 50 um pitch."""
    return max(1, int(round(r * 7 / 50)))


@dataclass(frozen=True)
class FusionGeometry:
    low_rows: int
    low_cols: int
    upsample_factor: int
    blur_sigma: float = 0.0
    active_width: Optional[int] = None
    boundary: str = "zero_pad"
    dead_pixels: FrozenSet[Tuple[int, int]] = field(default_factory=frozenset)
    # Zero the response of dead SPAD pixels inside S. Off by default: the
    # measurement model does not know which pixels are dead.
    model_dead_pixels: bool = False

    def __post_init__(self):
        r = int(self.upsample_factor)
        if r < 1 or r != self.upsample_factor:
            raise ValueError("upsample_factor must be an integer >= 1")
        if self.low_rows < 1 or self.low_cols < 1:
            raise ValueError("low-resolution dims must be >= 1")
        if not (self.blur_sigma >= 0 and math.isfinite(self.blur_sigma)):
            raise ValueError("blur_sigma must be >= 0")
        if self.active_width is None:
            object.__setattr__(self, "active_width", default_active_width(r))
        if not (1 <= self.active_width <= r):
            raise ValueError(f"active_width must lie in [1, {r}]")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}")
        dead = frozenset((int(a), int(b)) for a, b in self.dead_pixels)
        for a, b in dead:
            if not (0 <= a < self.low_rows and 0 <= b < self.low_cols):
                raise ValueError(f"dead pixel {(a, b)} outside low-res grid")
        object.__setattr__(self, "dead_pixels", dead)

    @classmethod
    def for_high_res(cls, high_rows: int, high_cols: int, upsample_factor: int, **kw):
        r = upsample_factor
        if high_rows % r or high_cols % r:
            raise ValueError(f"{high_rows}x{high_cols} is not divisible by r={r}")
        return cls(high_rows // r, high_cols // r, r, **kw)

    @property
    def high_rows(self) -> int:
        return self.low_rows * self.upsample_factor

    @property
    def high_cols(self) -> int:
        return self.low_cols * self.upsample_factor

    @property
    def high_shape(self) -> Tuple[int, int]:
        return self.high_rows, self.high_cols

    @property
    def low_shape(self) -> Tuple[int, int]:
        return self.low_rows, self.low_cols

    @cached_property
    def kernel(self) -> np.ndarray:
        return gaussian_kernel(self.blur_sigma)

    @cached_property
    def mask_array(self) -> np.ndarray:
        r, a = self.upsample_factor, self.active_width
        off = (r - a) // 2
        block = np.zeros((r, r), dtype=bool)
        block[off:off + a, off:off + a] = True
        full = np.tile(block, (self.low_rows, self.low_cols))
        if self.model_dead_pixels:
            for i, j in self.dead_pixels:
                full[i * r:(i + 1) * r, j * r:(j + 1) * r] = False
        full.setflags(write=False)
        return full


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Unit-sum 1D Gaussian truncated at radius ceil(4 sigma)."""
    if sigma == 0:
        return np.ones(1)
    radius = int(math.ceil(4 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _check_frames(x: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != tuple(shape):
        raise ValueError(f"dimension mismatch: expected trailing dims {shape}, got {x.shape}")
    return x


# ---------------------------------------------------------------------------
# B

# ndimage "reflect" mirrors about the pixel edge (d c b a | a b c d): with a
# symmetric kernel the blur matrix is symmetric and doubly stochastic, so it
# conserves total counts. Edge replication only preserves constants.
_NDIMAGE_MODE = {"zero_pad": "constant", "replicate": "nearest", "reflect": "reflect"}


def _blur_axis(x, k, axis, boundary):
    mode = _NDIMAGE_MODE[boundary]
    return ndimage.correlate1d(x, k, axis=axis, mode=mode, cval=0.0)


def _blur_axis_adjoint(y, k, axis, boundary):
    if boundary in ("zero_pad", "reflect"):
        # symmetric kernel with zero or mirror extension: self-adjoint
        return ndimage.correlate1d(y, k, axis=axis, mode=_NDIMAGE_MODE[boundary], cval=0.0)
    # replicate = (zero-pad correlation) o (edge extension E); adjoint folds
    # the overhang of the full correlation back onto the edge samples.
    R = (len(k) - 1) // 2
    n = y.shape[axis]
    pad = [(0, 0)] * y.ndim
    pad[axis] = (R, R)
    full = ndimage.correlate1d(np.pad(y, pad), k, axis=axis, mode="constant", cval=0.0)
    full = np.moveaxis(full, axis, 0)
    out = full[R:R + n].copy()
    out[0] += full[:R].sum(axis=0)
    out[-1] += full[R + n:].sum(axis=0)
    return np.moveaxis(out, 0, axis)


def blur(x: np.ndarray, geom: FusionGeometry) -> np.ndarray:
    x = _check_frames(x, geom.high_shape)
    if geom.blur_sigma == 0:
        return x.copy()
    k = geom.kernel
    y = _blur_axis(x, k, x.ndim - 2, geom.boundary)
    return _blur_axis(y, k, x.ndim - 1, geom.boundary)


def blur_adjoint(y: np.ndarray, geom: FusionGeometry) -> np.ndarray:
    y = _check_frames(y, geom.high_shape)
    if geom.blur_sigma == 0:
        return y.copy()
    k = geom.kernel
    x = _blur_axis_adjoint(y, k, y.ndim - 1, geom.boundary)
    return _blur_axis_adjoint(x, k, y.ndim - 2, geom.boundary)


# ---------------------------------------------------------------------------
# S (self-adjoint)

def mask(x: np.ndarray, geom: FusionGeometry) -> np.ndarray:
    x = _check_frames(x, geom.high_shape)
    return np.where(geom.mask_array, x, 0.0)


# ---------------------------------------------------------------------------
# P

def downsample(x: np.ndarray, geom: FusionGeometry) -> np.ndarray:
    """Sum-pool each r x r block."""
    x = _check_frames(x, geom.high_shape)
    r = geom.upsample_factor
    m, n = geom.low_shape
    lead = x.shape[:-2]
    return x.reshape(*lead, m, r, n, r).sum(axis=(-3, -1))


def downsample_adjoint(y: np.ndarray, geom: FusionGeometry) -> np.ndarray:
    y = _check_frames(y, geom.low_shape)
    r = geom.upsample_factor
    return np.repeat(np.repeat(y, r, axis=-2), r, axis=-1)


# ---------------------------------------------------------------------------
# A = P S B and its per-bin extension

def _per_bin(fn, x, geom, workers):
    if workers is None or workers <= 1 or x.ndim < 3 or x.shape[0] < 2:
        return fn(x, geom)
    chunks = np.array_split(np.arange(x.shape[0]), min(workers, x.shape[0]))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda idx: fn(x[idx], geom), chunks))
    return np.concatenate(parts, axis=0)


def _apply_A(x, geom):
    return downsample(mask(blur(x, geom), geom), geom)


def _adjoint_A(y, geom):
    return blur_adjoint(mask(downsample_adjoint(y, geom), geom), geom)


def apply_A(x: np.ndarray, geom: FusionGeometry, workers: Optional[int] = None) -> np.ndarray:
    """Forward model on one ``(M, N)`` frame or a ``(tau, M, N)`` stack."""
    x = _check_frames(x, geom.high_shape)
    return _per_bin(_apply_A, x, geom, workers)


def adjoint_A(y: np.ndarray, geom: FusionGeometry, workers: Optional[int] = None) -> np.ndarray:
    y = _check_frames(y, geom.low_shape)
    return _per_bin(_adjoint_A, y, geom, workers)


def apply_A_tau(cube, geom: FusionGeometry, workers: Optional[int] = None):
    """Map a high-resolution :class:`TransientCube` to a :class:`SpadMeasurement`.

    Dead pixels in ``geom`` are recorded on the result; their counts are
    forced to zero only when ``geom.model_dead_pixels`` is set.
    """
    from .datacube import SpadMeasurement

    vals = apply_A(cube.values, geom, workers)
    dead = geom.dead_pixels if geom.model_dead_pixels else frozenset()
    return SpadMeasurement(np.maximum(vals, 0.0), cube.bin_width, dead)


def adjoint_A_tau(meas, geom: FusionGeometry, workers: Optional[int] = None) -> np.ndarray:
    return adjoint_A(meas.values, geom, workers)


# ---------------------------------------------------------------------------
# T, K_h, K_l

def integrate_time(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).sum(axis=0)


def integrate_time_adjoint(img: np.ndarray, bins: int) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return np.broadcast_to(img, (bins,) + img.shape).copy()


def integrate_space(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).sum(axis=(1, 2))


def integrate_space_adjoint(h: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    return np.broadcast_to(h[:, None, None], (len(h),) + tuple(shape)).copy()


# ---------------------------------------------------------------------------
# per-frame gradient with Neumann boundary

def grad2d(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Forward differences along rows and columns; last difference is 0."""
    x = np.asarray(x, dtype=np.float64)
    g_row = np.zeros_like(x)
    g_col = np.zeros_like(x)
    g_row[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    g_col[..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    return g_row, g_col


def grad2d_adjoint(g_row: np.ndarray, g_col: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`grad2d` (the negative divergence)."""
    out = np.zeros_like(g_row, dtype=np.float64)
    out[..., :-1, :] -= g_row[..., :-1, :]
    out[..., 1:, :] += g_row[..., :-1, :]
    out[..., :, :-1] -= g_col[..., :, :-1]
    out[..., :, 1:] += g_col[..., :, :-1]
    return out


# ---------------------------------------------------------------------------
# cube-level wrappers

def integrate_time_cube(cube):
    from .datacube import IntensityImage
    return IntensityImage(integrate_time(cube.values))


def integrate_space_high(cube) -> np.ndarray:
    return integrate_space(cube.values)


def integrate_space_low(meas) -> np.ndarray:
    return integrate_space(meas.values)


def gradient_2d(cube) -> Tuple[np.ndarray, np.ndarray]:
    return grad2d(cube.values)


def power_norm(op, adj, shape, iters: int = 30, tol: float = 1e-4, seed: int = 0) -> float:
    """Estimate ``||op||_2`` by power iteration on ``adj(op(.))``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = adj(op(x))
        nrm = np.linalg.norm(y)
        if nrm == 0:
            return 0.0
        new = math.sqrt(nrm)
        x = y / nrm
        if est > 0 and abs(new - est) <= tol * est:
            est = new
            break
        est = new
    return est
