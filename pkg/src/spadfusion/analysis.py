"""Depth maps, fluorescence lifetimes and reconstruction metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .datacube import ScalarMap, TransientCube

PSNR_CAP = 999.0
DEFAULT_SNR_THRESHOLD = 5.0


def depth_map(cube, snr_threshold: float = DEFAULT_SNR_THRESHOLD) -> ScalarMap:
    """Argmax time bin per pixel (earliest bin on ties).

    Pixels whose peak count is below ``snr_threshold`` get the sentinel.
    """
    vals = np.asarray(cube.values, dtype=np.float64)
    idx = np.argmax(vals, axis=0).astype(np.float64)
    peak = vals.max(axis=0)
    idx[peak < snr_threshold] = np.nan
    return ScalarMap(idx, unit="bin")


def upsample_nearest(smap: ScalarMap, factor: int) -> ScalarMap:
    """Nearest-neighbour enlargement by an integer factor."""
    v = np.repeat(np.repeat(smap.values, factor, axis=0), factor, axis=1)
    return ScalarMap(v, smap.unit)


# ---------------------------------------------------------------------------
# lifetime fitting

@dataclass(frozen=True)
class LifetimeFitConfig:
    min_lifetime: float = 1.0  # ns
    max_lifetime: float = 7.0  # ns
    min_counts: float = 100.0
    fit_window: Optional[int] = None  # bins after the peak; None = all remaining
    max_fit_iters: int = 50
    fit_tol: float = 1e-10

    def __post_init__(self):
        if not 0 < self.min_lifetime < self.max_lifetime:
            raise ValueError("need 0 < min_lifetime < max_lifetime")
        if self.min_counts < 0:
            raise ValueError("min_counts must be >= 0")
        if self.fit_window is not None and self.fit_window < 2:
            raise ValueError("fit_window must be >= 2 bins")


@dataclass(frozen=True)
class LifetimeResult:
    lifetimes: ScalarMap
    amplitudes: np.ndarray
    failed: np.ndarray  # fit attempted but produced a non-finite result


def _window(traces: np.ndarray, fit_window: Optional[int]):
    """Per-trace fit mask starting at the argmax bin, and time offsets (bins)."""
    n_bins = traces.shape[1]
    k = np.arange(n_bins)
    peak = np.argmax(traces, axis=1)
    rel = k[None, :] - peak[:, None]
    inside = rel >= 0
    if fit_window is not None:
        inside &= rel <= fit_window
    return inside, rel.astype(np.float64)


def _loglinear(traces, inside, t):
    """Weighted log-linear regression of log counts on time; returns (amp, rate)."""
    pos = inside & (traces > 0)
    w = np.where(pos, traces, 0.0)  # weight by counts: variance of log y ~ 1/y
    logy = np.where(pos, np.log(np.where(pos, traces, 1.0)), 0.0)
    sw = w.sum(1)
    st = (w * t).sum(1)
    stt = (w * t * t).sum(1)
    sy = (w * logy).sum(1)
    sty = (w * t * logy).sum(1)
    det = sw * stt - st * st
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = (sw * sty - st * sy) / det
        icpt = (sy - slope * st) / sw
    return np.exp(icpt), -slope


def fit_decays(traces: np.ndarray, bin_width_ns: float,
               config: LifetimeFitConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Least-squares fit of ``a * exp(-t / lifetime)`` to each row of ``traces``.

    Damped Gauss-Newton (Levenberg-Marquardt) on ``(a, rate)`` starting from
    a log-linear estimate. Returns ``(lifetime_ns, amplitude, ok)``; lifetimes
    are not clamped here.
    """
    y = np.asarray(traces, dtype=np.float64)
    inside, rel = _window(y, config.fit_window)
    t = rel * bin_width_ns
    wmask = inside.astype(np.float64)
    amp, rate = _loglinear(y, inside, t)
    bad0 = ~(np.isfinite(amp) & np.isfinite(rate) & (rate > 0))
    amp = np.where(bad0, np.maximum(y.max(1), 1e-12), amp)
    rate = np.where(bad0, 1.0 / math.sqrt(config.min_lifetime * config.max_lifetime), rate)
    lam = np.full(y.shape[0], 1e-3)

    def sse(a, k):
        r = (a[:, None] * np.exp(-k[:, None] * t) - y) * wmask
        return (r * r).sum(1)

    cost = sse(amp, rate)
    active = np.ones(y.shape[0], dtype=bool)
    for _ in range(config.max_fit_iters):
        if not active.any():
            break
        e = np.exp(-rate[:, None] * t) * wmask
        r = amp[:, None] * e - y * wmask
        ja = e
        jk = -amp[:, None] * t * e
        haa = (ja * ja).sum(1)
        hkk = (jk * jk).sum(1)
        hak = (ja * jk).sum(1)
        ga = (ja * r).sum(1)
        gk = (jk * r).sum(1)
        haa_d = haa * (1 + lam)
        hkk_d = hkk * (1 + lam)
        det = haa_d * hkk_d - hak * hak
        with np.errstate(divide="ignore", invalid="ignore"):
            da = -(hkk_d * ga - hak * gk) / det
            dk = -(haa_d * gk - hak * ga) / det
        ok_step = np.isfinite(da) & np.isfinite(dk)
        na = np.where(ok_step & active, amp + da, amp)
        nk = np.where(ok_step & active, rate + dk, rate)
        valid = (nk > 0) & (na > 0)
        ncost = np.where(valid, sse(na, np.where(valid, nk, rate)), np.inf)
        better = active & (ncost < cost)
        rel_imp = np.where(better, (cost - ncost) / np.maximum(cost, 1e-300), 0.0)
        amp = np.where(better, na, amp)
        rate = np.where(better, nk, rate)
        cost = np.where(better, ncost, cost)
        lam = np.where(better, lam / 10, lam * 10)
        step_small = np.abs(np.where(ok_step, dk, 0.0)) <= config.fit_tol * np.abs(rate)
        active &= ~((better & (rel_imp < config.fit_tol)) | (better & step_small) | (lam > 1e12))
    with np.errstate(divide="ignore"):
        lifetime = 1.0 / rate
    ok = np.isfinite(lifetime) & np.isfinite(amp) & (rate > 0)
    return lifetime, amp, ok


def fit_lifetimes(cube: TransientCube, config: LifetimeFitConfig = LifetimeFitConfig(),
                  return_details: bool = False):
    """Single-exponential lifetime (ns) per pixel, clamped to the configured bounds.

    Pixels with fewer than ``config.min_counts`` total counts, or whose fit
    fails, get the sentinel.
    """
    vals = np.asarray(cube.values, dtype=np.float64)
    tau, h, w = vals.shape
    traces = vals.reshape(tau, -1).T
    total = traces.sum(1)
    attempt = total >= config.min_counts
    if config.min_counts == 0:
        attempt &= total > 0
    life = np.full(h * w, np.nan)
    amp = np.full(h * w, np.nan)
    failed = np.zeros(h * w, dtype=bool)
    if attempt.any():
        lt, a, ok = fit_decays(traces[attempt], cube.bin_width / 1000.0, config)
        lt = np.clip(lt, config.min_lifetime, config.max_lifetime)
        life[attempt] = np.where(ok, lt, np.nan)
        amp[attempt] = np.where(ok, a, np.nan)
        failed[attempt] = ~ok
    smap = ScalarMap(life.reshape(h, w), unit="ns")
    if return_details:
        return LifetimeResult(smap, amp.reshape(h, w), failed.reshape(h, w))
    return smap


def rld_lifetime(traces: np.ndarray, bin_width_ns: float, window: int) -> np.ndarray:
    """Rapid lifetime determination from two adjacent equal windows after the peak."""
    y = np.asarray(traces, dtype=np.float64)
    peak = np.argmax(y, axis=1)
    k = np.arange(y.shape[1])[None, :] - peak[:, None]
    d0 = np.where((k >= 0) & (k < window), y, 0.0).sum(1)
    d1 = np.where((k >= window) & (k < 2 * window), y, 0.0).sum(1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return window * bin_width_ns / np.log(d0 / d1)


# ---------------------------------------------------------------------------
# summaries

@dataclass(frozen=True)
class Histogram:
    counts: np.ndarray
    edges: np.ndarray
    mean: float
    std: float
    n: int


def lifetime_histogram(smap: ScalarMap, bin_count: int = 50) -> Histogram:
    v = smap.values[smap.valid]
    if v.size == 0:
        raise ValueError("empty map")
    counts, edges = np.histogram(v, bins=bin_count, range=(v.min(), v.max()))
    return Histogram(counts, edges, float(v.mean()), float(v.std()), int(v.size))


def diff_map(a: ScalarMap, b: ScalarMap, block: int = 1) -> ScalarMap:
    """Block-average ``a`` (ignoring sentinels) down to ``b``'s grid and subtract."""
    ha, wa = a.shape
    hb, wb = b.shape
    if block < 1 or (ha, wa) != (hb * block, wb * block):
        raise ValueError(f"incompatible shapes {a.shape} and {b.shape} for block {block}")
    blocks = a.values.reshape(hb, block, wb, block)
    valid = ~np.isnan(blocks)
    n = valid.sum(axis=(1, 3))
    s = np.where(valid, blocks, 0.0).sum(axis=(1, 3))
    with np.errstate(invalid="ignore", divide="ignore"):
        avg = np.where(n > 0, s / n, np.nan)
    return ScalarMap(avg - b.values, a.unit)


def depth_rmse(a: ScalarMap, b: ScalarMap, where: Optional[np.ndarray] = None) -> float:
    """RMS depth difference over pixels valid in both maps (and ``where``)."""
    ok = a.valid & b.valid
    if where is not None:
        ok &= where
    if not ok.any():
        return float("nan")
    diff = a.values[ok] - b.values[ok]
    return float(np.sqrt(np.mean(diff * diff)))


def _relative_threshold(cube_vals: np.ndarray, snr_threshold):
    if snr_threshold is None:
        return 0.05 * float(cube_vals.max(initial=0.0))
    return snr_threshold


def metrics(recon: TransientCube, truth: TransientCube,
            snr_threshold: Optional[float] = None,
            match_scale: bool = False) -> Dict[str, float]:
    """PSNR (peak from ``truth``), RMSE and depth RMSE in bins.

    ``snr_threshold=None`` sets each cube's depth threshold to 5% of its own
    maximum, since reconstructions and ground truth rarely share a scale.
    With ``match_scale`` the reconstruction is first multiplied by the
    least-squares gain ``<r, t> / <r, r>``; the gain is returned as ``scale``.
    """
    r = np.asarray(recon.values, dtype=np.float64)
    t = np.asarray(truth.values, dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {t.shape}")
    gain = 1.0
    if match_scale:
        rr = float(np.vdot(r, r))
        gain = float(np.vdot(r, t)) / rr if rr > 0 else 1.0
        r = r * gain
    rmse = float(np.sqrt(np.mean((r - t) ** 2)))
    peak = float(t.max())
    if rmse == 0:
        psnr = PSNR_CAP
    elif peak <= 0:
        psnr = -PSNR_CAP
    else:
        psnr = min(PSNR_CAP, 20.0 * math.log10(peak / rmse))
    dr = depth_map(recon, _relative_threshold(r, snr_threshold))
    dt = depth_map(truth, _relative_threshold(t, snr_threshold))
    out = {"psnr": psnr, "rmse": rmse, "depth_rmse_bins": depth_rmse(dr, dt)}
    if match_scale:
        out["scale"] = gain
    return out


def summary_csv(values: Dict[str, float]) -> str:
    return "metric,value\n" + "".join(f"{k},{v!r}\n" for k, v in values.items())
