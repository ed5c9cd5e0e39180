"""Simulated multi-device audio scenes and learned device arbitration."""
from .estimators import AcousticPretrainer, DeviceArbitrationClassifier
from .features import LFBETransformer
from .scenes import SamplingConfig, SceneSpec, sample_scene

__all__ = [
    "AcousticPretrainer",
    "DeviceArbitrationClassifier",
    "LFBETransformer",
    "SamplingConfig",
    "SceneSpec",
    "sample_scene",
]
__version__ = "0.1.0"
