"""Fusion reconstruction by primal-dual splitting.

Minimizes over ``i >= 0``::

    ||A_tau i - d|| + alpha ||T i - c|| + beta ||K_h i - K_l d||
        + gamma ||i||_1 + delta ||grad_2d i||_1

with the three L2 terms either unsquared (default) or squared. Each block of
the stacked operator ``[A_tau; T; K_h; grad_2d]`` is rescaled to unit norm
before the iteration so no single block dictates the step sizes.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import forward_model as fm
from .datacube import IntensityImage, SpadMeasurement, TransientCube

LOGGER = logging.getLogger(__name__)

TERMS = ("data", "ccd", "hist", "l1", "tv")
NORM_MODES = ("unsquared", "squared")


class SolverDivergence(FloatingPointError):
    """Iterates became non-finite."""


@dataclass(frozen=True)
class SolverConfig:
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 0.0
    delta: float = 0.0
    norm_mode: str = "unsquared"
    max_iters: int = 2000
    tol: float = 1e-5
    # primal/dual step balance; None picks it from the initializer's scale
    step_ratio: Optional[float] = None
    record_trace: bool = False
    check_every: int = 10
    workers: Optional[int] = None

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be a finite value >= 0")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm_mode must be one of {NORM_MODES}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.step_ratio is not None and not self.step_ratio > 0:
            raise ValueError("step_ratio must be > 0")
        if self.check_every < 1:
            raise ValueError("check_every must be >= 1")

    @property
    def weights(self) -> Dict[str, float]:
        return {"data": 1.0, "ccd": self.alpha, "hist": self.beta,
                "l1": self.gamma, "tv": self.delta}


PRESETS = {
    "lidar": dict(alpha=1.0, beta=1e-4, gamma=1e-2, delta=0.0),
    "flim": dict(alpha=1.0, beta=1e-3, gamma=1e-7, delta=1e-5),
}


def preset(name: str, **overrides) -> SolverConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return SolverConfig(**{**PRESETS[name], **overrides})


@dataclass
class SolveReport:
    iterations: int
    objective: float
    terms: Dict[str, float]
    rel_change: float
    wall_time: float
    converged: bool
    op_norm: float = float("nan")
    trace: List[float] = field(default_factory=list)

    def as_rows(self) -> List[Tuple[str, str]]:
        rows = [("iterations", str(self.iterations)),
                ("objective", repr(self.objective))]
        rows += [(f"term_{k}", repr(v)) for k, v in self.terms.items()]
        rows += [("rel_change", repr(self.rel_change)),
                 ("wall_time_s", f"{self.wall_time:.3f}"),
                 ("converged", "true" if self.converged else "false"),
                 ("status", "converged" if self.converged else "not converged")]
        return rows

    def to_csv(self) -> str:
        return "metric,value\n" + "".join(f"{k},{v}\n" for k, v in self.as_rows())


def _check_shapes(x_shape, d: SpadMeasurement, c: IntensityImage, geom: fm.FusionGeometry):
    tau = d.values.shape[0]
    if d.values.shape[1:] != geom.low_shape:
        raise ValueError(f"shape mismatch: measurement {d.values.shape[1:]} vs geometry {geom.low_shape}")
    if c.values.shape != geom.high_shape:
        raise ValueError(f"shape mismatch: image {c.values.shape} vs geometry {geom.high_shape}")
    if x_shape is not None and tuple(x_shape) != (tau,) + geom.high_shape:
        raise ValueError(f"shape mismatch: cube {tuple(x_shape)} vs {(tau,) + geom.high_shape}")


def live_footprint(geom: fm.FusionGeometry) -> Optional[np.ndarray]:
    """Fraction of each high-resolution pixel's SPAD sensitivity that
    reaches live pixels.

    ``None`` unless dead pixels are modeled. The weight is
    ``A^T 1`` with dead pixels zeroed divided by ``A^T 1`` without them
    (1 where neither sees the pixel), so light that only ever lands on
    dead pixels drops out of the histogram comparison.
    """
    if not (geom.model_dead_pixels and geom.dead_pixels):
        return None
    ones = np.ones(geom.low_shape)
    seen = fm.adjoint_A(ones, geom)
    full = fm.adjoint_A(ones, replace(geom, dead_pixels=frozenset()))
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(full > 0, seen / full, 1.0)
    return np.clip(w, 0.0, 1.0)


def _hist_op(x, live):
    return fm.integrate_space(x if live is None else x * live)


def _hist_adj(y, shape, live):
    out = fm.integrate_space_adjoint(y, shape)
    return out if live is None else out * live


def _terms(x, dv, cv, hist_ref, geom, config, live=None) -> Dict[str, float]:
    sq = config.norm_mode == "squared"

    def l2(v):
        n = float(np.linalg.norm(v.ravel()))
        return n * n if sq else n

    out = {"data": l2(fm.apply_A(x, geom, config.workers) - dv),
           "ccd": l2(fm.integrate_time(x) - cv),
           "hist": l2(_hist_op(x, live) - hist_ref),
           "l1": float(np.abs(x).sum())}
    g_r, g_c = fm.grad2d(x)
    out["tv"] = float(np.abs(g_r).sum() + np.abs(g_c).sum())
    return out


def histogram_reference(dv: np.ndarray, cv: np.ndarray,
                        live: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-bin totals of ``d`` expressed in the units of ``c``.

    ``K_l d`` only sees light that reached the active areas while ``K_h i``
    counts everything, so the measured histogram is rescaled by
    ``sum(c) / sum(d)``. The factor is 1 when ``c`` is normalized to the
    measurement's total. With a ``live`` mask only the live part of ``c``
    enters the ratio.
    """
    hist = fm.integrate_space(dv)
    total_d = float(dv.sum())
    total_c = float(cv.sum() if live is None else (cv * live).sum())
    if total_d > 0 and total_c > 0:
        hist = hist * (total_c / total_d)
    return hist


def _total(terms, config) -> float:
    w = config.weights
    return sum(w[k] * terms[k] for k in TERMS)


def objective(i: TransientCube, d: SpadMeasurement, c: IntensityImage,
              geom: fm.FusionGeometry, config: SolverConfig) -> Tuple[Dict[str, float], float]:
    """Unweighted per-term values and the weighted total.

    ``c`` is used as given; normalize it with :func:`normalize_ccd` first.
    The histogram term compares ``K_h i`` with :func:`histogram_reference`.
    """
    _check_shapes(i.values.shape, d, c, geom)
    dv = d.values.astype(np.float64)
    cv = c.values.astype(np.float64)
    live = live_footprint(geom)
    terms = _terms(i.values.astype(np.float64), dv, cv, histogram_reference(dv, cv, live),
                   geom, config, live)
    return terms, _total(terms, config)


def normalize_ccd(c: IntensityImage, d: SpadMeasurement,
                  geom: Optional[fm.FusionGeometry] = None) -> IntensityImage:
    """Rescale ``c`` into the measurement's photon units.

    Without ``geom`` the image is scaled so ``sum(c) == sum(d)``. With
    ``geom`` the image is scaled so that its forward projection carries the
    same total as ``d``, i.e. ``sum(A c) == sum(d)``; this accounts for the
    light the sparse active area discards and reduces to the plain rule
    whenever ``A`` conserves counts.
    """
    cv = c.values.astype(np.float64)
    total_d = float(d.values.astype(np.float64).sum())
    ref = float(cv.sum()) if geom is None else float(fm.apply_A(cv, geom).sum())
    if not (ref > 0 and total_d > 0):
        raise ValueError("normalize_ccd needs positive totals in both inputs")
    return IntensityImage(cv * (total_d / ref))


class _Block:
    """One dual block: weight * norm(scale * op(x) - scale * b)."""

    def __init__(self, name, op, adj, b, scale, weight, kind, squared):
        self.name, self.op, self.adj, self.kind = name, op, adj, kind
        self.scale = scale
        self.b = None if b is None else scale * b
        # weight after absorbing the operator scale
        self.omega = weight / (scale * scale) if squared else weight / scale
        self.squared = squared

    def K(self, x):
        return self.scale * self.op(x)

    def KT(self, y):
        return self.scale * self.adj(y)

    def prox_conj(self, v, sigma):
        if self.kind == "l1":
            return np.clip(v, -self.omega, self.omega)
        v = v - sigma * self.b
        if self.squared:
            return v / (1.0 + sigma / (2.0 * self.omega))
        nrm = np.linalg.norm(v.ravel())
        return v if nrm <= self.omega else v * (self.omega / nrm)


def _stack_grad(x):
    g_r, g_c = fm.grad2d(x)
    return np.stack([g_r, g_c])


def _stack_grad_adj(g):
    return fm.grad2d_adjoint(g[0], g[1])


def initial_guess(d: SpadMeasurement, c: IntensityImage, geom: fm.FusionGeometry,
                  workers: Optional[int] = None) -> np.ndarray:
    """Back-projected measurement, rescaled to the CCD's total counts."""
    x0 = fm.adjoint_A(d.values.astype(np.float64), geom, workers)
    x0 = np.maximum(x0, 0.0)
    s, target = x0.sum(), float(c.values.astype(np.float64).sum())
    if s > 0 and target > 0:
        x0 *= target / s
    return x0


def reconstruct(d: SpadMeasurement, c: IntensityImage, geom: fm.FusionGeometry,
                config: SolverConfig, x0: Optional[np.ndarray] = None,
                callback: Optional[Callable[[int, np.ndarray], None]] = None
                ) -> Tuple[TransientCube, SolveReport]:
    """Recover the high-resolution cube from ``d`` and an already
    normalized CCD image ``c``.

    Returns the lowest-objective iterate seen (checked every
    ``config.check_every`` iterations, initializer included).
    """
    t_start = time.perf_counter()
    _check_shapes(None, d, c, geom)
    tau = d.bins
    shape = (tau,) + geom.high_shape
    M, N = geom.high_shape
    dv = d.values.astype(np.float64)
    cv = c.values.astype(np.float64)
    live = live_footprint(geom)
    hist_ref = histogram_reference(dv, cv, live)
    sq = config.norm_mode == "squared"
    workers = config.workers

    def A(x):
        return fm.apply_A(x, geom, workers)

    def AT(y):
        return fm.adjoint_A(y, geom, workers)

    a_norm = fm.power_norm(A, AT, geom.high_shape, iters=30, tol=1e-4)
    blocks = []
    if a_norm > 0:
        blocks.append(_Block("data", A, AT, dv, 1.0 / a_norm, 1.0, "l2", sq))
    if config.alpha > 0:
        blocks.append(_Block("ccd", fm.integrate_time,
                             lambda y: fm.integrate_time_adjoint(y, tau),
                             cv, 1.0 / math.sqrt(tau), config.alpha, "l2", sq))
    if config.beta > 0:
        blocks.append(_Block("hist", lambda x: _hist_op(x, live),
                             lambda y: _hist_adj(y, (M, N), live),
                             hist_ref, 1.0 / math.sqrt(M * N), config.beta, "l2", sq))
    if config.delta > 0:
        blocks.append(_Block("tv", _stack_grad, _stack_grad_adj, None,
                             1.0 / math.sqrt(8.0), config.delta, "l1", False))
    if not blocks:
        raise SolverDivergence("stacked operator is identically zero; nothing to fit")

    def L(x):
        return [b.K(x) for b in blocks]

    def LT(ys):
        out = blocks[0].KT(ys[0])
        for b, y in zip(blocks[1:], ys[1:]):
            out += b.KT(y)
        return out

    def LtL(x):
        return LT(L(x))

    l_norm = fm.power_norm(lambda x: x, LtL, shape, iters=30, tol=1e-4)
    if not l_norm > 0 or not math.isfinite(l_norm):
        raise SolverDivergence(f"stacked operator norm estimate is {l_norm}")

    x = initial_guess(d, c, geom, workers) if x0 is None else np.array(x0, dtype=np.float64)
    if x.shape != shape:
        raise ValueError(f"shape mismatch: initializer {x.shape} vs {shape}")
    x = np.maximum(x, 0.0)

    if config.step_ratio is not None:
        rho = config.step_ratio
    else:
        # balance ||x - x*|| / tau against ||y - y*|| / sigma
        dual_scale = math.sqrt(sum(b.omega ** 2 for b in blocks if not b.squared)) or 1.0
        rho = max(float(np.linalg.norm(x)), 1e-12) / dual_scale
        if sq:
            rho = 1.0
    # power iteration underestimates the norm; keep a margin
    step = 0.9 / l_norm
    tau_p, sigma_d = step * rho, step / rho

    ys = [np.zeros_like(b.K(x)) for b in blocks]
    x_bar = x.copy()
    gamma = config.gamma

    def evaluate(xv):
        t = _terms(xv, dv, cv, hist_ref, geom, config, live)
        return t, _total(t, config)

    best_x = x.copy()
    _, best_obj = evaluate(x)
    trace = [best_obj] if config.record_trace else []
    rel = float("inf")
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        kx = L(x_bar)
        ys = [b.prox_conj(y + sigma_d * k, sigma_d) for b, y, k in zip(blocks, ys, kx)]
        x_new = np.maximum(x - tau_p * (LT(ys) + gamma), 0.0)
        diff = np.linalg.norm(x_new - x)
        nrm = np.linalg.norm(x_new)
        if not (math.isfinite(diff) and math.isfinite(nrm)):
            raise SolverDivergence(f"non-finite iterate at iteration {it} "
                                   f"(tau={tau_p:.3g}, sigma={sigma_d:.3g}, ||L||={l_norm:.3g})")
        rel = diff / nrm if nrm > 0 else (0.0 if diff == 0 else float("inf"))
        x_bar = 2.0 * x_new - x
        x = x_new
        if callback is not None:
            callback(it, x)
        converged = rel < config.tol
        if it % config.check_every == 0 or converged or it == config.max_iters:
            _, obj = evaluate(x)
            if config.record_trace:
                trace.append(obj)
            if obj <= best_obj:
                best_obj, best_x = obj, x.copy()
        if converged:
            break

    out = TransientCube(best_x.astype(np.float32), d.bin_width)
    terms, total = evaluate(out.values.astype(np.float64))
    report = SolveReport(iterations=it, objective=total, terms=terms, rel_change=float(rel),
                         wall_time=time.perf_counter() - t_start, converged=converged,
                         op_norm=l_norm, trace=trace)
    LOGGER.info("reconstruct: %d iterations, objective %.6g, converged=%s",
                it, total, converged)
    return out, report


def fuse(d: SpadMeasurement, c: IntensityImage, geom: fm.FusionGeometry,
         config: SolverConfig, **kw) -> Tuple[TransientCube, SolveReport, IntensityImage]:
    """Normalize the CCD image against ``d`` and reconstruct."""
    if geom.model_dead_pixels and d.dead_pixels and geom.dead_pixels != d.dead_pixels:
        geom = replace(geom, dead_pixels=d.dead_pixels)
    c_n = normalize_ccd(c, d, geom)
    cube, report = reconstruct(d, c_n, geom, config, **kw)
    return cube, report, c_n
