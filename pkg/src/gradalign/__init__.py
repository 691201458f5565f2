"""Desk-scale detector training with teacher feature alignment and a
gradient-ratio feedback controller for the alignment loss weight."""

from .registry import Component, ParameterRegistry
from .tensor import Tape, Tensor, backward, parameter

__all__ = [
    "Component",
    "ParameterRegistry",
    "Tape",
    "Tensor",
    "backward",
    "parameter",
]

__version__ = "0.1.0"
