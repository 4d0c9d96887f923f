"""Stability analysis of Kalman filtering over Gilbert-Elliott loss channels."""

from .channel import GilbertElliott, coupled_sample, sample
from .model import LtiSystem, build_stacks, load_system, observability_index, validate

__version__ = "0.1.0"

__all__ = [
    "GilbertElliott",
    "LtiSystem",
    "build_stacks",
    "coupled_sample",
    "load_system",
    "observability_index",
    "sample",
    "validate",
]
