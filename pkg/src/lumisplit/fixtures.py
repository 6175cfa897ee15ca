"""Canned misclustering fixture built from the spill scene.

A shadowed white-floor strip lit mainly by the green wall's bounce is
deliberately assigned to the wall's cluster (the classic color-spill
misclustering), with a guard band so the bad region stays 4-connected
and separate from the wall itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correction import _flood
from .imaging import chromaticity
from .palette import BaseColorPalette, ClusterMap, estimate_palette
from .synth import GroundTruthBundle, SyntheticScene, render_scene, spill_scene


@dataclass
class SpillFixture:
    scene: SyntheticScene
    bundle: GroundTruthBundle
    palette: BaseColorPalette
    raw_map: ClusterMap          # natural segmentation of frame 1
    cluster_map: ClusterMap      # with the region deliberately forced green
    region_mask: np.ndarray      # the forced region (frame 1)
    click: tuple                 # a pixel well inside the region
    white_id: int
    green_id: int


def _nearest_cluster(palette: BaseColorPalette, rgb) -> int:
    from .imaging import chroma_of_color
    target = chroma_of_color(np.asarray(rgb, dtype=np.float64))
    return 1 + int(np.argmin(np.linalg.norm(palette.chromas() - target, axis=1)))


def spill_mask_for_frame(bundle: GroundTruthBundle, frame_idx: int) -> np.ndarray:
    """Shadowed floor pixels with a strong green bounce, by the generator's
    own transport layers: the box's shadow strip."""
    T = bundle.transport[frame_idx]
    floor = bundle.labels[frame_idx] == 1
    direct = T[:, :, 0]
    green = T[:, :, 3]
    if not floor.any():
        return floor
    return (floor & (direct < 0.35 * direct[floor].max())
            & (green > 0.5 * green[floor].max()))


def make_spill_fixture(width: int = 128, height: int = 128,
                       n_frames: int = 1, seed: int = 0) -> SpillFixture:
    scene = spill_scene(width=width, height=height, n_frames=n_frames)
    bundle = render_scene(scene)
    frame = bundle.frames[0]
    palette, raw_map = estimate_palette(frame, k_max=10, seed=seed)
    white_id = _nearest_cluster(palette, [1.0, 1.0, 1.0])
    green_id = _nearest_cluster(palette, scene.palette[2])

    spill = spill_mask_for_frame(bundle, 0)
    # guard band: a corridor between the forced region and the wall itself,
    # reset to the white cluster so the region stays 4-connected on its own
    wall = bundle.labels[0] == 3
    near_wall = wall.copy()
    for _ in range(3):
        grown = near_wall.copy()
        grown[1:, :] |= near_wall[:-1, :]
        grown[:-1, :] |= near_wall[1:, :]
        grown[:, 1:] |= near_wall[:, :-1]
        grown[:, :-1] |= near_wall[:, 1:]
        near_wall = grown
    corridor = near_wall & ~wall
    spill &= ~near_wall
    if spill.sum() < 60:
        raise RuntimeError("spill fixture degenerated; scene tuning broke it")

    # largest 4-connected component, found with the shared flood machinery
    tag = np.where(spill, 1, 0).astype(np.int32)
    remaining = spill.copy()
    best = None
    while remaining.any():
        ys, xs = np.nonzero(remaining)
        seeds = np.zeros_like(spill)
        seeds[ys[0], xs[0]] = True
        comp = _flood(tag, seeds, 1) & remaining
        if best is None or comp.sum() > best.sum():
            best = comp
        remaining &= ~comp
    region = best

    ids = raw_map.ids.copy()
    rc = raw_map.r_cluster.copy()
    ids[region] = green_id
    rc[region] = palette.colors[green_id - 1]
    ids[corridor] = white_id
    rc[corridor] = palette.colors[white_id - 1]
    # containment by construction: whatever green pixels the region's flood
    # fill would still leak into are reset to the white cluster
    ys, xs = np.nonzero(region)
    seeds = np.zeros_like(region)
    seeds[ys[0], xs[0]] = True
    leaked = _flood(ids, seeds, green_id) & ~region
    ids[leaked] = white_id
    rc[leaked] = palette.colors[white_id - 1]
    forced = ClusterMap(ids=ids, r_cluster=rc)

    ys, xs = np.nonzero(region)
    cy, cx = int(np.median(ys)), int(np.median(xs))
    if not region[cy, cx]:
        j = int(np.argmin((ys - cy) ** 2 + (xs - cx) ** 2))
        cy, cx = int(ys[j]), int(xs[j])
    return SpillFixture(scene=scene, bundle=bundle, palette=palette,
                        raw_map=raw_map, cluster_map=forced,
                        region_mask=region, click=(cx, cy),
                        white_id=white_id, green_id=green_id)
