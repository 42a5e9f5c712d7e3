"""Tensor graphs with reverse-mode differentiation and an Adam optimizer.

All numeric work in the repo flows through this package: model forward
passes are built as small operation graphs, `evaluate` runs them, and
`gradients` walks the tape backwards. Arrays are 64-bit floats in row-major
order throughout; integer arrays appear only as token/length/label inputs.
"""

from .adam import AdamState, adam_step
from .graph import Graph, GraphError, ShapeMismatch, UnboundInput, evaluate, gradients

__all__ = [
    "AdamState",
    "Graph",
    "GraphError",
    "ShapeMismatch",
    "UnboundInput",
    "adam_step",
    "evaluate",
    "gradients",
]
