"""Nighttime de-raining with infrared fusion.

Stage 1 (:mod:`rainfuse.cleannet`) removes rain from low-light RGB frames.
Stage 2 (:mod:`rainfuse.fusion`) fuses the cleaned luminance with an aligned
infrared frame and refines contrast in a cascade.
"""
from .cleannet import CleanNet, CleanNetConfig
from .config import TrainingConfig, load_config
from .fusion import FusionConfig, FusionNet, RefinementNets
from .imaging import ColorSpace, Image, ImagePair
from .metrics import MetricReport, evaluate_pair
from .rain import RainParams, synthesize_rain

__all__ = [
    "CleanNet",
    "CleanNetConfig",
    "ColorSpace",
    "FusionConfig",
    "FusionNet",
    "Image",
    "ImagePair",
    "MetricReport",
    "RainParams",
    "RefinementNets",
    "TrainingConfig",
    "evaluate_pair",
    "load_config",
    "synthesize_rain",
]

__version__ = "0.1.0"
