"""Super-resolved transient imaging by fusing SPAD histograms with a CCD image."""

__version__ = "0.1.0"

from .datacube import (IntensityImage, ScalarMap, SpadMeasurement, TransientCube,
                       export_map, load_cube, read_cube, save_cube, write_cube)
from .forward_model import FusionGeometry, apply_A, apply_A_tau, adjoint_A, adjoint_A_tau
from .sensor_sim import NoiseSpec, SceneSpec, emulate_flim_input, render_scene, simulate_pair
from .solver import SolverConfig, SolveReport, normalize_ccd, objective, preset, reconstruct
from .analysis import LifetimeFitConfig, depth_map, fit_lifetimes, metrics

__all__ = [
    "IntensityImage", "ScalarMap", "SpadMeasurement", "TransientCube", "export_map",
    "load_cube", "read_cube", "save_cube", "write_cube", "FusionGeometry", "apply_A",
    "apply_A_tau", "adjoint_A", "adjoint_A_tau", "NoiseSpec", "SceneSpec",
    "emulate_flim_input", "render_scene", "simulate_pair", "SolverConfig", "SolveReport",
    "normalize_ccd", "objective", "preset", "reconstruct", "LifetimeFitConfig",
    "depth_map", "fit_lifetimes", "metrics",
]
