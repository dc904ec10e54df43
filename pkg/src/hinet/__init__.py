"""High-resolution image harmonization with hypernetwork-predicted implicit decoders."""

from ._backend import BACKEND, HAVE_NUMBA
from .encoder import DecoderConfig, EncoderConfig, ModelConfig
from .lut import Lut3D, export_cube, import_cube, lut_apply, lut_identity, lut_interp
from .model import Model, load_weights, save_weights
from .pipeline import (
    HarmonizeOptions,
    harmonize,
    harmonize_at_resolution,
    harmonize_lut,
    harmonize_region,
    harmonize_tiled,
    harmonize_video_lut,
    plan_tiles,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "HAVE_NUMBA",
    "DecoderConfig",
    "EncoderConfig",
    "HarmonizeOptions",
    "Lut3D",
    "Model",
    "ModelConfig",
    "export_cube",
    "harmonize",
    "harmonize_at_resolution",
    "harmonize_lut",
    "harmonize_region",
    "harmonize_tiled",
    "harmonize_video_lut",
    "import_cube",
    "load_weights",
    "lut_apply",
    "lut_identity",
    "lut_interp",
    "plan_tiles",
    "save_weights",
]
