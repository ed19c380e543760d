"""Compact convolutional transformers with single-head performance probing."""
from .architecture import PRESETS, ArchitectureSpec, get_preset, layer_latency, load_spec
from .errors import (CCTProbeError, ChecksumError, ConfigurationError, IngestionError,
                     InputError, NumericError)
from .model import CCT, build_model, forward

__version__ = "0.1.0"
