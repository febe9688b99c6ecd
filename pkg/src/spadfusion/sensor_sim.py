"""Synthetic ground-truth scenes and noisy SPAD/CCD measurement pairs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import forward_model as fm
from .datacube import IntensityImage, SpadMeasurement, TransientCube

MIN_LIFETIME_NS = 1.0
MAX_LIFETIME_NS = 7.0


@dataclass(frozen=True)
class Plane:
    """Axis-aligned rectangle ``[row0, row1) x [col0, col1)`` at a depth (bins).

    With ``depth_end`` set, depth varies linearly from ``depth`` on the first
    row (or column, per ``axis``) to ``depth_end`` on the last one.
    """

    row0: int
    row1: int
    col0: int
    col1: int
    depth: float
    reflectivity: float = 1.0
    depth_end: Optional[float] = None
    axis: str = "row"

    def depth_field(self) -> np.ndarray:
        h, w = self.row1 - self.row0, self.col1 - self.col0
        if self.depth_end is None:
            return np.full((h, w), float(self.depth))
        n = h if self.axis == "row" else w
        ramp = np.linspace(self.depth, self.depth_end, n) if n > 1 else np.array([float(self.depth)])
        if self.axis == "row":
            return np.repeat(ramp[:, None], w, axis=1)
        return np.repeat(ramp[None, :], h, axis=0)


@dataclass(frozen=True)
class FlimRegion:
    """Fluorophore region: ``shape`` is ``rect`` (row0, row1, col0, col1) or
    ``disk`` (row, col, radius)."""

    shape: str
    params: Tuple[float, ...]
    lifetime: float  # ns
    amplitude: float = 1.0
    arrival_bin: int = 0

    def footprint(self, rows: int, cols: int) -> np.ndarray:
        rr, cc = np.mgrid[0:rows, 0:cols]
        if self.shape == "rect":
            r0, r1, c0, c1 = (int(p) for p in self.params)
            return (rr >= r0) & (rr < r1) & (cc >= c0) & (cc < c1)
        if self.shape == "disk":
            r, c, rad = self.params
            return (rr - r) ** 2 + (cc - c) ** 2 <= rad ** 2
        raise ValueError(f"unknown region shape {self.shape!r}")


@dataclass(frozen=True)
class SceneSpec:
    kind: str
    rows: int
    cols: int
    bins: int
    bin_width: float  # ps
    planes: Tuple[Plane, ...] = ()
    regions: Tuple[FlimRegion, ...] = ()

    def __post_init__(self):
        if self.kind not in ("lidar", "flim"):
            raise ValueError(f"kind must be 'lidar' or 'flim', got {self.kind!r}")
        for name in ("rows", "cols", "bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.bin_width > 0:
            raise ValueError("bin_width must be > 0")
        for p in self.planes:
            if not (0 <= p.row0 < p.row1 <= self.rows and 0 <= p.col0 < p.col1 <= self.cols):
                raise ValueError(f"plane {p} outside {self.rows}x{self.cols} frame")
            if p.reflectivity < 0:
                raise ValueError("reflectivity must be >= 0")
            for d in (p.depth, p.depth if p.depth_end is None else p.depth_end):
                if not 0 <= d < self.bins - (0 if float(d).is_integer() else 1):
                    raise ValueError(f"depth {d} outside [0, {self.bins})")
            if p.axis not in ("row", "col"):
                raise ValueError("plane axis must be 'row' or 'col'")
        for reg in self.regions:
            if not MIN_LIFETIME_NS <= reg.lifetime <= MAX_LIFETIME_NS:
                raise ValueError(f"lifetime {reg.lifetime} ns outside [1, 7] ns")
            if reg.amplitude < 0:
                raise ValueError("amplitude must be >= 0")
            if not 0 <= reg.arrival_bin < self.bins:
                raise ValueError(f"arrival bin {reg.arrival_bin} outside [0, {self.bins})")


@dataclass(frozen=True)
class NoiseSpec:
    """Acquisition noise.

    ``photon_scale`` is the expected total signal count of the SPAD arm; the
    truth is rescaled so the noiseless measurement sums to it (``None`` keeps
    the truth's own scale). The CCD arm sees the same rescaled truth times
    ``ccd_gain``.
    """

    photon_scale: Optional[float] = None
    ambient_rate: float = 0.0
    dead_pixel_fraction: float = 0.0
    seed: int = 0
    ccd_gain: float = 1.0
    poisson: bool = True

    def __post_init__(self):
        if self.photon_scale is not None and not self.photon_scale > 0:
            raise ValueError("photon_scale must be > 0")
        if self.ambient_rate < 0 or self.ccd_gain < 0:
            raise ValueError("rates must be >= 0")
        if not 0 <= self.dead_pixel_fraction < 1:
            raise ValueError("dead_pixel_fraction must lie in [0, 1)")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def _render_lidar(spec: SceneSpec) -> np.ndarray:
    cube = np.zeros((spec.bins, spec.rows, spec.cols))
    front = np.full((spec.rows, spec.cols), np.inf)
    refl = np.zeros((spec.rows, spec.cols))
    for p in spec.planes:
        sl = np.s_[p.row0:p.row1, p.col0:p.col1]
        depth = p.depth_field()
        nearer = depth < front[sl]
        front[sl] = np.where(nearer, depth, front[sl])
        refl[sl] = np.where(nearer, p.reflectivity, refl[sl])
    covered = np.isfinite(front)
    rows, cols = np.nonzero(covered)
    d = front[covered]
    lo = np.floor(d).astype(int)
    frac = d - lo
    w = refl[covered]
    np.add.at(cube, (lo, rows, cols), w * (1 - frac))
    spill = frac > 0
    np.add.at(cube, (lo[spill] + 1, rows[spill], cols[spill]), w[spill] * frac[spill])
    return cube


def _render_flim(spec: SceneSpec) -> np.ndarray:
    cube = np.zeros((spec.bins, spec.rows, spec.cols))
    k = np.arange(spec.bins, dtype=np.float64)
    dt_ns = spec.bin_width / 1000.0
    for reg in spec.regions:
        foot = reg.footprint(spec.rows, spec.cols)
        trace = np.where(k >= reg.arrival_bin,
                         reg.amplitude * np.exp(-(k - reg.arrival_bin) * dt_ns / reg.lifetime), 0.0)
        cube[:, foot] = trace[:, None]
    return cube


def render_scene(spec: SceneSpec) -> TransientCube:
    """Noise-free ground-truth cube for a LIDAR or FLIM scene.

    LIDAR pixels get a unit impulse (scaled by reflectivity) at their depth
    bin, split linearly between two bins for fractional depths; the nearest
    surface wins where planes overlap. FLIM regions are painted in order,
    later regions overriding earlier ones.
    """
    cube = _render_lidar(spec) if spec.kind == "lidar" else _render_flim(spec)
    return TransientCube(cube, spec.bin_width)


def _check_dims(truth: TransientCube, geom: fm.FusionGeometry):
    if truth.values.shape[1:] != geom.high_shape:
        raise ValueError(f"dimension mismatch: truth {truth.values.shape[1:]} vs geometry {geom.high_shape}")


def simulate_pair(truth: TransientCube, geom: fm.FusionGeometry,
                  noise: NoiseSpec) -> Tuple[SpadMeasurement, IntensityImage]:
    _check_dims(truth, geom)
    ss = np.random.SeedSequence(noise.seed)
    rng_dead, rng_spad, rng_ccd = (np.random.Generator(np.random.Philox(s)) for s in ss.spawn(3))

    x = truth.values.astype(np.float64)
    spad = fm.apply_A(x, geom)
    scale = 1.0
    if noise.photon_scale is not None:
        total = spad.sum()
        if total <= 0:
            raise ValueError("truth produces no signal; cannot scale to photon_scale")
        scale = noise.photon_scale / total
    spad = spad * scale + noise.ambient_rate
    ccd = fm.integrate_time(x) * scale * noise.ccd_gain
    if noise.poisson:
        spad = rng_spad.poisson(spad).astype(np.float64)
        ccd = rng_ccd.poisson(ccd).astype(np.float64)

    dead = frozenset()
    if noise.dead_pixel_fraction > 0:
        hit = rng_dead.random(geom.low_shape) < noise.dead_pixel_fraction
        dead = frozenset(zip(*(a.tolist() for a in np.nonzero(hit))))
        spad[:, hit] = 0.0
    meas = SpadMeasurement(spad.astype(np.float32), truth.bin_width, dead)
    return meas, IntensityImage(ccd.astype(np.float32))


def emulate_flim_input(full: TransientCube,
                       geom: fm.FusionGeometry) -> Tuple[SpadMeasurement, IntensityImage]:
    """Build ``(d, c)`` from a full-resolution cube: ``d = A_tau full``,
    ``c = T full``."""
    _check_dims(full, geom)
    meas = fm.apply_A_tau(full, geom)
    return meas, fm.integrate_time_cube(full)


def staircase_scene(rows: int = 48, cols: int = 48, bins: int = 32,
                    bin_width: float = 55.0) -> SceneSpec:
    """Three steps stacked down the frame, receding by a third of the range each."""
    edges = np.linspace(0, rows, 4).round().astype(int)
    depths = [round(bins * f) for f in (0.25, 0.5, 0.75)]
    refl = (1.0, 0.6, 0.8)
    planes = tuple(Plane(int(edges[i]), int(edges[i + 1]), 0, cols, depths[i], refl[i])
                   for i in range(3))
    return SceneSpec("lidar", rows, cols, bins, bin_width, planes=planes)
