"""Low-rank CNN compression: Tucker-2 rank proposals, MSE proxy scoring,
budgeted rank selection, and the STResNet architecture presets."""

__version__ = "0.1.0"

from .graph import (  # noqa: F401
    LayerSpec, ModelError, ModelGraph, activation_peak, flash_bytes, load_model, param_count, parse_model,
    replace_layer, rewrite_neck_projection, rewrite_projection_stem,
)
from .presets import build_preset  # noqa: F401
