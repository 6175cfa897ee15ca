"""Video decomposition into reflectance, direct and per-base-color
indirect illumination layers, plus layer-aware editing."""

from .energy import EnergyWeights, LayerStack, total_energy, reconstruct
from .imaging import Frame, load_frame, chromaticity
from .palette import BaseColorPalette, ClusterMap, estimate_palette
from .solver import SolveConfig, solve_frame

__all__ = [
    "EnergyWeights", "LayerStack", "total_energy", "reconstruct",
    "Frame", "load_frame", "chromaticity",
    "BaseColorPalette", "ClusterMap", "estimate_palette",
    "SolveConfig", "solve_frame",
]
