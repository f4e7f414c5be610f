"""Event-driven spiking network simulation with exact spike-time gradients
for weights, delays and adaptive thresholds."""

from .data import Dataset, Sample
from .forward import DegenerateCrossingError, SimulationError, simulate
from .gradients import DegenerateDenominatorError, backward
from .kernels import KernelKind, KernelSpec, psp, psp_deriv
from .loss import LossKind, LossSpec, sample_loss
from .network import (
    GradientSet, InitRanges, Parameters, SpikeEvent, Topology, Trace, init_parameters,
)

__all__ = [
    "Dataset", "DegenerateCrossingError", "DegenerateDenominatorError", "GradientSet", "InitRanges",
    "KernelKind", "KernelSpec", "LossKind", "LossSpec", "Parameters", "SimulationError",
    "SpikeEvent", "Topology", "Trace", "backward", "init_parameters", "psp", "psp_deriv",
    "Sample", "sample_loss", "simulate",
]
__version__ = "0.1.0"
