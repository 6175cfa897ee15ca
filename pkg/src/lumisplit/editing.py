"""Layer-aware appearance edits: recoloring with consistent
inter-reflections, spill suppression, and background re-keying.

All edits are pure: they combine the converged layers with a modified
palette and return a new frame, never touching the stored stack.
"""

from __future__ import annotations

import numpy as np

from .energy import LayerStack, reconstruct
from .imaging import Frame
from .palette import BaseColorPalette, ClusterMap

_DIV_GUARD = 1e-4


def _check_k(k: int, palette: BaseColorPalette) -> None:
    if not 1 <= k <= palette.K:
        raise ValueError(f"cluster id {k} outside 1..{palette.K}")


def recolor(layers: LayerStack, palette: BaseColorPalette, k: int,
            new_color: np.ndarray, cluster_map: ClusterMap) -> np.ndarray:
    """Recolor cluster k, including its bounce onto the rest of the scene.

    Reflectance pixels of the cluster are remapped by the per-channel
    ratio new_color / b_k (texture variation around the base color is
    preserved); the indirect layer of k is re-tinted by swapping the base
    color in the reconstruction.
    """
    _check_k(k, palette)
    new_color = np.asarray(new_color, dtype=np.float64)
    R = layers.reflectance
    ratio = new_color / np.maximum(palette.colors[k - 1], _DIV_GUARD)
    R_edit = R.copy()
    sel = cluster_map.ids == k
    R_edit[sel] *= ratio
    B = palette.matrix().copy()
    B[k] = new_color
    S = np.tensordot(layers.T, B, axes=([2], [0]))
    return np.clip(R_edit * S, 0.0, 1.0)


def suppress_spill(layers: LayerStack, palette: BaseColorPalette,
                   k: int) -> np.ndarray:
    """Reconstruction with cluster k's indirect layer removed."""
    _check_k(k, palette)
    B = palette.matrix().copy()
    B[k] = 0.0
    S = np.tensordot(layers.T, B, axes=([2], [0]))
    return np.clip(layers.reflectance * S, 0.0, 1.0)


def rekey_background(layers: LayerStack, palette: BaseColorPalette, k: int,
                     new_background: Frame, matte: np.ndarray) -> np.ndarray:
    """Swap the background and relight the foreground to match it.

    Background pixels (matte True) are replaced outright; foreground
    pixels keep their transport but the background cluster's base color
    becomes the new background's mean color, so its spill re-tints.
    """
    _check_k(k, palette)
    if new_background.data.shape != layers.r.shape:
        raise ValueError("background dimensions do not match the layers")
    if matte.shape != layers.r.shape[:2]:
        raise ValueError("matte dimensions do not match the layers")
    B = palette.matrix().copy()
    B[k] = new_background.data.reshape(-1, 3).mean(axis=0)
    S = np.tensordot(layers.T, B, axes=([2], [0]))
    out = np.clip(layers.reflectance * S, 0.0, 1.0)
    out[matte] = new_background.data[matte]
    return out
