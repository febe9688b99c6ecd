"""Command-line pipeline: render, simulate, reconstruct, analyze, eval.

Exit codes: 0 success, 2 user/config error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Dict, List, Optional


from . import __version__
from . import analysis as an
from . import datacube as dc
from . import forward_model as fm
from . import sensor_sim as ss
from . import solver as sv
from .config import Config, ConfigError, load_config

LOGGER = logging.getLogger("spadfusion")

EXIT_OK, EXIT_USER, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UserError(Exception):
    pass


# ---------------------------------------------------------------------------
# config -> objects

def _num(cfg: Config, key, default=None, kind=float, required=False):
    if required:
        v = cfg.require(key)
    else:
        v = cfg.get(key, default)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"'{key}' must be a number, got {v!r}", cfg.line(key))
    if kind is int and int(v) != v:
        raise ConfigError(f"'{key}' must be an integer, got {v!r}", cfg.line(key))
    return kind(v)


def _bool(cfg: Config, key, default: bool) -> bool:
    v = cfg.get(key, default)
    if not isinstance(v, bool):
        raise ConfigError(f"'{key}' must be true or false", cfg.line(key))
    return v


def _wrap(cfg: Config, key: Optional[str], fn, *args, **kw):
    """Re-raise constructor ValueErrors as line-numbered config errors."""
    try:
        return fn(*args, **kw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), cfg.line(key) if key else None) from None


def scene_from_config(cfg: Config) -> ss.SceneSpec:
    kind = cfg.require("kind")
    dims = {}
    for key in ("rows", "cols", "bins"):
        dims[key] = _num(cfg, key, kind=int, required=True)
        if dims[key] < 1:
            raise ConfigError(f"{key} must be ≥ 1", cfg.line(key))
    bin_width = _num(cfg, "bin_width", required=True)
    planes, regions = [], []
    for key, val in cfg.prefixed("plane"):
        if not isinstance(val, list) or len(val) not in (6, 8):
            raise ConfigError(f"'{key}' expects [row0, row1, col0, col1, depth, reflectivity"
                              f"(, depth_end, axis)]", cfg.line(key))
        extra = {}
        if len(val) == 8:
            extra = dict(depth_end=float(val[6]), axis=str(val[7]))
        planes.append(_wrap(cfg, key, ss.Plane, *(int(v) for v in val[:4]),
                            float(val[4]), float(val[5]), **extra))
    for key, val in cfg.prefixed("region"):
        if not isinstance(val, list) or not val:
            raise ConfigError(f"'{key}' expects a list", cfg.line(key))
        shape, rest = val[0], val[1:]
        n_geo = {"rect": 4, "disk": 3}.get(shape)
        if n_geo is None or len(rest) != n_geo + 3:
            raise ConfigError(f"'{key}' expects [rect, row0, row1, col0, col1, lifetime_ns, "
                              f"amplitude, arrival_bin] or [disk, row, col, radius, "
                              f"lifetime_ns, amplitude, arrival_bin]", cfg.line(key))
        regions.append(_wrap(cfg, key, ss.FlimRegion, shape, tuple(float(v) for v in rest[:n_geo]),
                             float(rest[n_geo]), float(rest[n_geo + 1]), int(rest[n_geo + 2])))
    return _wrap(cfg, "kind", ss.SceneSpec, kind, dims["rows"], dims["cols"], dims["bins"],
                 bin_width, tuple(planes), tuple(regions))


def geometry_from_config(cfg: Config, high_shape) -> fm.FusionGeometry:
    r = _num(cfg, "upsample_factor", kind=int, required=True)
    M, N = high_shape
    if r < 1 or M % r or N % r:
        raise UserError(f"dimension mismatch: {M}x{N} frame is not divisible by "
                        f"upsample_factor {r}")
    return _wrap(cfg, "upsample_factor", fm.FusionGeometry, M // r, N // r, r,
                 blur_sigma=_num(cfg, "blur_sigma", 0.0),
                 active_width=_num(cfg, "active_width", None, kind=int),
                 boundary=cfg.get("boundary", "zero_pad"),
                 model_dead_pixels=_bool(cfg, "model_dead_pixels", False))


def noise_from_config(cfg: Config, seed: Optional[int], noiseless: bool) -> ss.NoiseSpec:
    kw = dict(photon_scale=_num(cfg, "photon_scale", None),
              ambient_rate=_num(cfg, "ambient_rate", 0.0),
              dead_pixel_fraction=_num(cfg, "dead_pixel_fraction", 0.0),
              seed=_num(cfg, "seed", 0, kind=int),
              ccd_gain=_num(cfg, "ccd_gain", 1.0),
              poisson=_bool(cfg, "poisson", True))
    if seed is not None:
        kw["seed"] = seed
    if noiseless:
        kw.update(poisson=False, ambient_rate=0.0, dead_pixel_fraction=0.0)
    return _wrap(cfg, None, ss.NoiseSpec, **kw)


SOLVER_KEYS = {"alpha": float, "beta": float, "gamma": float, "delta": float,
               "max_iters": int, "tol": float, "step_ratio": float, "check_every": int}


def solver_from_config(cfg: Config, preset: Optional[str], threads: Optional[int]) -> sv.SolverConfig:
    base = dict(sv.PRESETS[preset]) if preset else {}
    for key, kind in SOLVER_KEYS.items():
        if key in cfg:
            base[key] = _num(cfg, key, kind=kind)
    if "norm_mode" in cfg:
        base["norm_mode"] = cfg.get("norm_mode")
    base["workers"] = threads
    return _wrap(cfg, None, sv.SolverConfig, **base)


# ---------------------------------------------------------------------------
# file helpers

def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, argv: List[str], resolved: Dict[str, Any],
                    inputs: Dict[str, str], outputs: List[Path], seed, t0: float) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "config": resolved,
        "inputs": inputs,
        "outputs": {str(p): _sha256(p) for p in outputs},
        "seed": seed,
        "version": __version__,
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    _sidecar(out, ".manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")


def _load_measurement(path: Path) -> dc.SpadMeasurement:
    cube = dc.load_cube(path)
    dead = frozenset()
    side = _sidecar(path, ".dead.csv")
    if side.exists():
        with open(side) as fh:
            dead = dc.read_dead_pixels(fh)
    return dc.SpadMeasurement(cube.values, cube.bin_width, dead)


def _save_measurement(meas: dc.SpadMeasurement, path: Path) -> Path:
    dc.save_cube(meas.as_cube(), path)
    side = _sidecar(path, ".dead.csv")
    with open(side, "w") as fh:
        dc.write_dead_pixels(meas.dead_pixels, fh)
    return side


def _geom_dict(geom: fm.FusionGeometry) -> Dict[str, Any]:
    out = asdict(geom)
    out["dead_pixels"] = sorted(geom.dead_pixels)
    return out


# ---------------------------------------------------------------------------
# commands

def cmd_render(args) -> List[Path]:
    cfg = load_config(args.config)
    spec = scene_from_config(cfg)
    cube = ss.render_scene(spec)
    out = Path(args.out)
    dc.save_cube(cube, out)
    args._resolved = {"scene": asdict(spec)}
    return [out]


def cmd_simulate(args) -> List[Path]:
    cfg = load_config(args.config)
    truth = dc.load_cube(args.truth)
    geom = geometry_from_config(cfg, truth.values.shape[1:])
    noise = noise_from_config(cfg, args.seed, args.noiseless)
    meas, img = ss.simulate_pair(truth, geom, noise)
    out = Path(args.out)
    ccd_out = Path(args.out_ccd) if args.out_ccd else _sidecar(out, ".ccd.trcb")
    side = _save_measurement(meas, out)
    dc.save_cube(dc.image_to_cube(img, truth.bin_width), ccd_out)
    args._resolved = {"geometry": _geom_dict(geom), "noise": asdict(noise)}
    args._seed = noise.seed
    return [out, side, ccd_out]


def cmd_reconstruct(args) -> List[Path]:
    cfg = load_config(args.config) if args.config else Config({}, {})
    meas = _load_measurement(Path(args.spad))
    img = dc.cube_to_image(dc.load_cube(args.ccd))
    geom = geometry_from_config(cfg, img.values.shape)
    if geom.low_shape != meas.values.shape[1:]:
        raise UserError(f"dimension mismatch: measurement {meas.values.shape[1:]} vs "
                        f"geometry {geom.low_shape}")
    if geom.model_dead_pixels:
        geom = replace(geom, dead_pixels=meas.dead_pixels)
    config = solver_from_config(cfg, args.preset, args.threads)
    cube, report, _ = sv.fuse(meas, img, geom, config)
    out = Path(args.out)
    dc.save_cube(cube, out)
    rep_path = _sidecar(out, ".report.csv")
    rep_path.write_text(report.to_csv())
    resolved = asdict(config)
    resolved["preset"] = args.preset
    args._resolved = {"geometry": _geom_dict(geom), "solver": resolved}
    if not report.converged:
        LOGGER.warning("not converged after %d iterations", report.iterations)
    return [out, rep_path]


def cmd_analyze(args) -> List[Path]:
    cube = dc.load_cube(args.cube)
    out = Path(args.out)
    fmt = {".csv": "csv", ".pgm": "pgm16"}.get(out.suffix.lower())
    if fmt is None:
        raise UserError(f"unsupported map extension {out.suffix!r} (use .csv or .pgm)")
    if args.mode == "depth":
        smap = an.depth_map(cube, args.snr_threshold)
        valid = smap.values[smap.valid]
        summary = {"valid_pixels": int(valid.size),
                   "mean_depth_bins": float(valid.mean()) if valid.size else float("nan")}
    else:
        if cube.bins < 3:
            raise UserError("flim mode needs a time-resolved cube (>= 3 bins)")
        fit_cfg = an.LifetimeFitConfig(min_lifetime=args.min_lifetime, max_lifetime=args.max_lifetime,
                                       min_counts=args.min_counts, fit_window=args.fit_window)
        smap = an.fit_lifetimes(cube, fit_cfg)
        hist = an.lifetime_histogram(smap, args.hist_bins)
        summary = {"valid_pixels": hist.n, "mean_lifetime_ns": hist.mean,
                   "std_lifetime_ns": hist.std}
    with open(out, "wb") as fh:
        dc.export_map(smap, fh, fmt)
    summ = _sidecar(out, ".summary.csv")
    text = an.summary_csv(summary)
    summ.write_text(text)
    sys.stdout.write(text)
    args._resolved = {"mode": args.mode, "snr_threshold": args.snr_threshold,
                      "min_counts": args.min_counts, "min_lifetime": args.min_lifetime,
                      "max_lifetime": args.max_lifetime, "fit_window": args.fit_window}
    return [out, summ]


def cmd_eval(args) -> List[Path]:
    recon = dc.load_cube(args.recon)
    truth = dc.load_cube(args.truth)
    vals = an.metrics(recon, truth, args.snr_threshold, match_scale=args.match_scale)
    text = an.summary_csv(vals)
    sys.stdout.write(text)
    args._resolved = {"snr_threshold": args.snr_threshold, "match_scale": args.match_scale}
    if args.out:
        out = Path(args.out)
        out.write_text(text)
        return [out]
    return []


# ---------------------------------------------------------------------------

def _common(p, config_required=True, out_required=True):
    p.add_argument("--config", required=config_required, help="key = value config file")
    p.add_argument("--out", required=out_required, help="output path")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (unsigned 64-bit)")
    p.add_argument("--threads", type=int, default=1, help="worker cap (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spadfusion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a ground-truth cube from a scene config")
    _common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("simulate", help="simulate SPAD + CCD measurements from a truth cube")
    _common(p)
    p.add_argument("--truth", required=True)
    p.add_argument("--out-ccd", default=None, help="CCD image path (default <out>.ccd.trcb)")
    p.add_argument("--noiseless", action="store_true", help="no Poisson noise, ambient or dead pixels")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="fuse SPAD and CCD data into a high-res cube")
    _common(p, config_required=False)
    p.add_argument("--spad", required=True)
    p.add_argument("--ccd", required=True)
    p.add_argument("--preset", choices=sorted(sv.PRESETS), default=None)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("analyze", help="depth or lifetime map from a cube")
    _common(p, config_required=False)
    p.add_argument("--cube", required=True)
    p.add_argument("--mode", choices=("depth", "flim"), required=True)
    p.add_argument("--snr-threshold", type=float, default=an.DEFAULT_SNR_THRESHOLD)
    p.add_argument("--min-counts", type=float, default=100.0)
    p.add_argument("--min-lifetime", type=float, default=1.0)
    p.add_argument("--max-lifetime", type=float, default=7.0)
    p.add_argument("--fit-window", type=int, default=None)
    p.add_argument("--hist-bins", type=int, default=50)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("eval", help="print metrics of a reconstruction against ground truth")
    _common(p, config_required=False, out_required=False)
    p.add_argument("--recon", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--snr-threshold", type=float, default=None,
                   help="absolute depth threshold (default 5%% of each cube's max)")
    p.add_argument("--match-scale", action="store_true",
                   help="fit a least-squares gain to the reconstruction before PSNR/RMSE")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USER if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USER
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USER
    t0 = time.perf_counter()
    args._resolved, args._seed = {}, args.seed
    try:
        outputs = args.func(args)
    except (ConfigError, UserError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except sv.SolverDivergence as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, dc.FormatError) as exc:
        print(f"error: I/O: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    if outputs:
        inputs = {k: str(v) for k, v in vars(args).items()
                  if k in ("config", "truth", "spad", "ccd", "cube", "recon") and v}
        _write_manifest(outputs[0], args.command, argv, args._resolved, inputs,
                        outputs, args._seed, t0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
