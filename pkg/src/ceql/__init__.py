"""Equation learning with complex-valued weights and real-projected outputs."""
from .errors import (CeqlError, DegenerateModel, DivisionNearZero, EmptyBatch, ImaginaryResidue,
                     InvalidConfig, InvalidWindow, LogOfZero, NonFiniteGradient, SamplingStarved)
from .graph import InitPolicy, LayerSpec, Network, build_network, default_library, forward, forward_batch
from .expr import eval_expr, extract, node_count, render, simplify
from .train import PhaseSchedule, default_schedule, run_training

__version__ = "0.1.0"

__all__ = [
    "CeqlError", "DegenerateModel", "DivisionNearZero", "EmptyBatch", "ImaginaryResidue",
    "InvalidConfig", "InvalidWindow", "LogOfZero", "NonFiniteGradient", "SamplingStarved",
    "InitPolicy", "LayerSpec", "Network", "build_network", "default_library", "forward",
    "forward_batch", "eval_expr", "extract", "node_count", "render", "simplify",
    "PhaseSchedule", "default_schedule", "run_training",
]
