"""Iterative text-line rectification with thin-plate splines.

Modules: :mod:`imagebuf` (images and PPM files), :mod:`fitline` (pose
parameterization), :mod:`tps` (spline fitting), :mod:`sampler` (bilinear
sampling with grid derivatives), :mod:`rectifier` (the iterative loop),
:mod:`synth` (synthetic cases), :mod:`fitter` (gradient-based estimation),
:mod:`bench` and :mod:`cli`.
"""

from .fitline import FitLineParams, base_points, control_points
from .imagebuf import Image, load_ppm, psnr, save_ppm
from .rectifier import RectifyConfig, init_state, rectify_iterative, rectify_once

__version__ = "0.1.0"

__all__ = [
    "FitLineParams", "Image", "RectifyConfig", "base_points", "control_points", "init_state",
    "load_ppm", "psnr", "rectify_iterative", "rectify_once", "save_ppm",
]
