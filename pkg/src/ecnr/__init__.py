"""Compressive neural representation codec for time-varying volumetric data."""

from .codec import (
    EncodeConfig,
    EncodeResult,
    chamfer_distance,
    decode,
    decode_scale,
    default_blocks_per_mlp,
    encode,
    identity_roundtrip,
    psnr,
)
from .container import ContainerError
from .pyramid import PyramidConfig
from .siren import MlpGroupConfig, TrainSchedule
from .volume import Volume4D, ValueRange, load_raw, save_raw

__version__ = "0.1.0"

__all__ = [
    "EncodeConfig",
    "EncodeResult",
    "ContainerError",
    "MlpGroupConfig",
    "PyramidConfig",
    "TrainSchedule",
    "ValueRange",
    "Volume4D",
    "chamfer_distance",
    "decode",
    "decode_scale",
    "default_blocks_per_mlp",
    "encode",
    "identity_roundtrip",
    "load_raw",
    "psnr",
    "save_raw",
    "__version__",
]
