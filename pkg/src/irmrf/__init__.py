"""Infrared target detection with a coupled SAR intensity / auto-logistic label MRF.

Submodules: :mod:`core` (grids, boxes, PGM and dataset I/O), :mod:`sar`,
:mod:`autologistic`, :mod:`icm`, :mod:`detect`, :mod:`bgsub`, :mod:`synth`
and :mod:`cli`.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .autologistic import AutoParams, auto_conditional, fit_auto, log_pll, log_pll_gradient, sample_auto
from .bgsub import KdeModel, foreground_mask, fuse_and, kde_background_prob, update_model
from .core import BoundingBox, Frame, LabelGrid, PixelGrid, box_overlap, load_frames, load_image, write_pgm
from .detect import (
    EvalReport,
    RocPoint,
    ThresholdLadder,
    build_roc,
    default_ladder,
    evaluate_frame,
    extract_components,
    merge_boxes,
)
from .icm import ModelVariant, RatioMap, icm_infer, local_log_posterior, ratio_map
from .sar import ClassSarModel, SarParams, fit_sar, sample_sar, sar_conditional_logpdf
from .synth import SceneSpec, render_scene, render_sequence

__all__ = [
    "AutoParams",
    "BoundingBox",
    "ClassSarModel",
    "EvalReport",
    "Frame",
    "KdeModel",
    "LabelGrid",
    "ModelVariant",
    "PixelGrid",
    "RatioMap",
    "RocPoint",
    "SarParams",
    "SceneSpec",
    "ThresholdLadder",
    "auto_conditional",
    "box_overlap",
    "build_roc",
    "default_ladder",
    "evaluate_frame",
    "extract_components",
    "fit_auto",
    "fit_sar",
    "foreground_mask",
    "fuse_and",
    "icm_infer",
    "kde_background_prob",
    "load_frames",
    "load_image",
    "local_log_posterior",
    "log_pll",
    "log_pll_gradient",
    "merge_boxes",
    "ratio_map",
    "render_scene",
    "render_sequence",
    "sample_auto",
    "sample_sar",
    "sar_conditional_logpdf",
    "update_model",
    "write_pgm",
]
