"""User-seeded misclustering correction: flood-fill identification,
frame-to-frame region tracking, and the sparsity test that picks the
true reflectance base color for a marked region."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .energy import EnergyWeights
from .imaging import Frame, chromaticity
from .palette import BaseColorPalette, ClusterMap
from .solver import SolveConfig, solve_frame

# restricted solves run on the region's bounding box plus this margin
BBOX_PAD = 16


class EmptyRegionError(ValueError):
    """Click landed on a dark or otherwise unusable pixel."""


class CorrectionError(RuntimeError):
    """Every candidate solve failed."""


@dataclass
class RegionMask:
    """A tracked misclustered region and its correction."""

    frame_index: int
    mask: np.ndarray            # (H, W) bool
    source_id: int              # the (wrong) cluster id the region carries
    corrected_id: int | None = None
    seed_xy: tuple = (0, 0)

    @property
    def size(self) -> int:
        return int(self.mask.sum())

    def bbox(self, pad: int = 0) -> tuple[int, int, int, int]:
        ys, xs = np.nonzero(self.mask)
        h, w = self.mask.shape
        return (max(0, ys.min() - pad), min(h, ys.max() + 1 + pad),
                max(0, xs.min() - pad), min(w, xs.max() + 1 + pad))


def _flood(ids: np.ndarray, seeds: np.ndarray, target_id: int) -> np.ndarray:
    """4-connected fill over pixels with the target id, from seed pixels."""
    h, w = ids.shape
    eligible = ids == target_id
    mask = seeds & eligible
    frontier = mask.copy()
    while frontier.any():
        grown = np.zeros_like(mask)
        grown[1:, :] |= frontier[:-1, :]
        grown[:-1, :] |= frontier[1:, :]
        grown[:, 1:] |= frontier[:, :-1]
        grown[:, :-1] |= frontier[:, 1:]
        frontier = grown & eligible & ~mask
        mask |= frontier
    return mask


def identify_region(click_xy: tuple, cluster_map: ClusterMap,
                    frame: Frame | None = None, frame_index: int = 0,
                    merge_into: RegionMask | None = None) -> RegionMask:
    """Flood fill from a clicked pixel over its cluster id.

    A follow-up click (with `merge_into`) unions the new fill into the
    existing region, for regions a single fill does not cover.
    """
    x, y = int(click_xy[0]), int(click_xy[1])
    h, w = cluster_map.ids.shape
    if not (0 <= x < w and 0 <= y < h):
        raise EmptyRegionError(f"click ({x}, {y}) outside the {w}x{h} frame")
    if frame is not None and chromaticity(frame).dark[y, x]:
        raise EmptyRegionError(f"click ({x}, {y}) hit a dark pixel")
    source_id = int(cluster_map.ids[y, x])
    seeds = np.zeros((h, w), dtype=bool)
    seeds[y, x] = True
    mask = _flood(cluster_map.ids, seeds, source_id)
    if merge_into is not None:
        if merge_into.source_id != source_id:
            raise EmptyRegionError(
                f"click hit cluster {source_id}, region is cluster {merge_into.source_id}")
        mask |= merge_into.mask
    return RegionMask(frame_index=frame_index, mask=mask, source_id=source_id,
                      corrected_id=merge_into.corrected_id if merge_into else None,
                      seed_xy=(x, y))


def track_region(prev: RegionMask, cluster_map: ClusterMap,
                 frame_index: int) -> RegionMask | None:
    """Carry a region into the next frame.

    Pixels of the previous mask that still carry the source id become
    seeds; the region is the multi-source fill from them (interior seeds
    join directly, the fill expands only where seeds touch new territory).
    Returns None when no seed survives (region lost; ask for a re-click).
    """
    seeds = prev.mask & (cluster_map.ids == prev.source_id)
    if not seeds.any():
        return None
    mask = _flood(cluster_map.ids, seeds, prev.source_id)
    return replace(prev, frame_index=frame_index, mask=mask)


def apply_region_correction(cluster_map: ClusterMap, region: RegionMask,
                            palette: BaseColorPalette) -> ClusterMap:
    """Cluster map with the region's id and clustered color overridden."""
    if region.corrected_id is None:
        return cluster_map
    ids = cluster_map.ids.copy()
    rc = cluster_map.r_cluster.copy()
    ids[region.mask] = region.corrected_id
    rc[region.mask] = palette.colors[region.corrected_id - 1]
    return ClusterMap(ids=ids, r_cluster=rc)


# hypothesis-testing profile for candidate solves: hold the reflectance
# hypothesis firmly and let the data term materialize the indirect light it
# needs, instead of letting the sparsity prior hide a bad fit as a small
# tolerated residual (which inverts the comparison).
ANCHOR_BOOST = 10.0
SPARSITY_RELIEF = 0.1
CANDIDATE_T_INIT = 0.25


def _candidate_sparsity(frame: Frame, cluster_map: ClusterMap,
                        palette: BaseColorPalette, region: RegionMask,
                        candidate: int, weights: EnergyWeights,
                        config: SolveConfig, seed: int) -> float:
    """Decompose the region's padded bounding box with the candidate color
    substituted and return the region's indirect-layer l1 mass."""
    from .solver import SolverState, build_aux, flip_flop, initialize

    y0, y1, x0, x1 = region.bbox(BBOX_PAD)
    sub_frame = Frame(frame.data[y0:y1, x0:x1].copy())
    sub_mask = region.mask[y0:y1, x0:x1]
    sub_ids = cluster_map.ids[y0:y1, x0:x1].copy()
    sub_rc = cluster_map.r_cluster[y0:y1, x0:x1].copy()
    sub_ids[sub_mask] = candidate
    sub_rc[sub_mask] = palette.colors[candidate - 1]
    sub_map = ClusterMap(ids=sub_ids, r_cluster=sub_rc)

    test_weights = replace(weights,
                           lambda_clustering=weights.lambda_clustering * ANCHOR_BOOST,
                           lambda_i_sparsity=weights.lambda_i_sparsity * SPARSITY_RELIEF)
    aux = build_aux(sub_frame, sub_map, seed=seed)
    layers = initialize(sub_frame, sub_map, palette)
    # start the indirect layers dense: activation by shrinkage sidesteps the
    # reweighting trap at exactly zero
    layers.T[:, :, 1:] = CANDIDATE_T_INIT
    state = SolverState(frame=sub_frame, palette=palette, layers=layers,
                        aux=aux, weights=test_weights, config=config)
    flip_flop(state)
    indirect = state.layers.T[:, :, 1:]
    return float(np.abs(indirect[sub_mask]).sum())


def correct_reflectance(region: RegionMask, frame: Frame,
                        cluster_map: ClusterMap, palette: BaseColorPalette,
                        weights: EnergyWeights | None = None,
                        config: SolveConfig | None = None, seed: int = 0,
                        max_workers: int | None = None) -> int:
    """Pick the base color whose substitution yields the sparsest indirect
    illumination over the region; ties go to the lower id.

    Candidate solves are independent and run in parallel. A failed solve
    drops that candidate; if every candidate fails, raises.
    """
    if region.size == 0:
        raise EmptyRegionError("empty region")
    K = palette.K
    if K == 1:
        return 1
    weights = weights or EnergyWeights()
    config = config or SolveConfig(outer_iterations=8, refine=False)
    config = replace(config, refine=False)

    if max_workers is None:
        max_workers = worker_count()

    def run(k: int):
        try:
            return k, _candidate_sparsity(frame, cluster_map, palette, region,
                                          k, weights, config, seed)
        except Exception:
            return k, None

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        outcomes = list(pool.map(run, range(1, K + 1)))
    scored = [(score, k) for k, score in outcomes if score is not None]
    if not scored:
        raise CorrectionError("all candidate decompositions failed")
    best_score = min(score for score, _ in scored)
    return min(k for score, k in scored if score == best_score)


def worker_count() -> int:
    """Thread budget: LUMISPLIT_THREADS caps it, default = CPU count."""
    env = os.environ.get("LUMISPLIT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1
