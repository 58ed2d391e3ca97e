"""Post-training backdoor detection."""

from .report import DetectionReport
from .neural_cleanse import NCConfig, ReversedTrigger, nc_detect, nc_reverse_trigger
from .activation_clustering import ACConfig, ac_detect

__all__ = [
    "DetectionReport",
    "NCConfig",
    "ReversedTrigger",
    "nc_detect",
    "nc_reverse_trigger",
    "ACConfig",
    "ac_detect",
]
