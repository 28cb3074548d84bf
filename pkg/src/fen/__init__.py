"""Feature-enhancement text detector on a from-scratch numpy network stack."""

from .geometry import Box, DeltaVector, ScoredBox, decode_box, encode_box, iou, nms
from .pipeline import FENConfig, FENModel, baseline_config, detect_image

__all__ = [
    "Box", "DeltaVector", "ScoredBox", "FENConfig", "FENModel", "baseline_config",
    "decode_box", "detect_image", "encode_box", "iou", "nms",
]

__version__ = "0.1.0"
