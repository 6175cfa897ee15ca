"""First-frame base color refinement: couple the dense update into the
flip-flop solve, apply the accepted updates, and freeze the palette for
the rest of the video."""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from .energy import EnergyWeights, LayerStack
from .imaging import Frame
from .palette import BaseColorPalette, ClusterMap
from .solver import SolveConfig, SolverState, flip_flop

log = logging.getLogger(__name__)


def refine_palette(state: SolverState) -> tuple[BaseColorPalette, np.ndarray]:
    """Run the flip-flop with the dense phase active and return the refined
    palette plus per-color update magnitudes.

    The illuminant color is never touched; refined colors stay in [0,1]^3
    (clamped inside the dense step). On divergence the original palette
    comes back with a warning.
    """
    original = state.palette
    before = original.colors.copy()
    state.config = replace(state.config, refine=True)
    flip_flop(state)
    if state.status == "stalled" and not state.energy_history:
        log.warning("refinement diverged; keeping the unrefined palette")
        state.palette = original
        return original, np.zeros(original.K)
    magnitudes = np.linalg.norm(state.palette.colors - before, axis=1)
    refined = BaseColorPalette(colors=state.palette.colors,
                               refined=True, previous=before)
    state.palette = refined
    return refined, magnitudes
