"""End-to-end decomposition pipeline: clustering, journal-replayed
corrections, first-frame refinement, then warm-started streaming frames.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .correction import (RegionMask, apply_region_correction, correct_reflectance,
                         identify_region, track_region)
from .energy import EnergyWeights, LayerStack
from .imaging import Frame, chromaticity, load_frame, save_pfm, save_png_preview
from .palette import (BaseColorPalette, ClusterMap, estimate_palette,
                      save_cluster_map, save_palette, segment)
from .refine import refine_palette
from .solver import SolveConfig, SolverState, build_aux, flip_flop, initialize
from .synth import GroundTruthBundle

log = logging.getLogger(__name__)

# indirect-layer previews are brightened by this factor (PNG only; PFM stays raw)
PREVIEW_INDIRECT_SCALE = 2.0


@dataclass
class PipelineResult:
    palette: BaseColorPalette
    layer_stacks: list
    cluster_maps: list
    regions: list
    records: list            # per frame: solver iteration records
    statuses: list
    frame_seconds: list = field(default_factory=list)

    def reflectances(self) -> list:
        return [np.exp(ls.r) for ls in self.layer_stacks]

    def illuminations(self) -> list:
        return [ls.illumination(self.palette) for ls in self.layer_stacks]


def read_journal(path: str | os.PathLike) -> list[dict]:
    entries = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                entries.append(json.loads(line))
    return entries


def journal_clicks(entries: list[dict]) -> list[tuple[int, int]]:
    """First-frame click coordinates, in journal order."""
    return [(int(e["x"]), int(e["y"])) for e in entries
            if e.get("kind") == "click" and int(e.get("frame", 1)) == 1]


def _collect_regions(clicks, frame, cluster_map, palette, weights, config, seed):
    """Identify clicked regions (merging same-cluster clicks) and solve for
    each region's corrected base color."""
    regions: list[RegionMask] = []
    for xy in clicks:
        existing = next((r for r in regions
                         if r.source_id == int(cluster_map.ids[xy[1], xy[0]])), None)
        region = identify_region(xy, cluster_map, frame=frame,
                                 merge_into=existing)
        if existing is not None:
            regions[regions.index(existing)] = region
        else:
            regions.append(region)
    for region in regions:
        region.corrected_id = correct_reflectance(
            region, frame, cluster_map, palette, weights=weights, seed=seed)
        log.info("region at %s (%d px): cluster %d -> %d", region.seed_xy,
                 region.size, region.source_id, region.corrected_id)
    return regions


def decompose_frames(frames: list[Frame], weights: EnergyWeights,
                     config: SolveConfig, seed: int = 0, k_max: int = 10,
                     clicks: list | None = None,
                     streaming_outer: int = 2) -> PipelineResult:
    """Decompose an in-memory frame sequence.

    Frame 1: clustering, optional corrections, refinement (when enabled),
    full solve. Frames 2..N: re-segmentation with the frozen palette,
    region tracking, warm-started streaming solve.
    """
    if not frames:
        raise ValueError("no frames")
    palette, cluster_map = estimate_palette(frames[0], k_max=k_max, seed=seed)

    regions = []
    if clicks:
        regions = _collect_regions(clicks, frames[0], cluster_map, palette,
                                   weights, config, seed)
    corrected_map = cluster_map
    for region in regions:
        corrected_map = apply_region_correction(corrected_map, region, palette)

    result = PipelineResult(palette=palette, layer_stacks=[], cluster_maps=[],
                            regions=regions, records=[], statuses=[])

    t0 = time.perf_counter()
    aux = build_aux(frames[0], corrected_map, seed=seed)
    layers = initialize(frames[0], corrected_map, palette)
    state = SolverState(frame=frames[0], palette=palette, layers=layers,
                        aux=aux, weights=weights, config=config)
    if config.refine:
        refined, _ = refine_palette(state)
        palette = refined
    else:
        state.config = replace(state.config, refine=False)
        flip_flop(state)
        palette = state.palette
    result.palette = palette
    result.layer_stacks.append(state.layers)
    result.cluster_maps.append(corrected_map)
    result.records.append(state.records)
    result.statuses.append(state.status)
    result.frame_seconds.append(time.perf_counter() - t0)

    stream_cfg = replace(config, refine=False, outer_iterations=streaming_outer)
    prev_layers = state.layers
    prev_chroma = chromaticity(frames[0])
    prev_raw_map = cluster_map
    prev_regions = regions
    for idx in range(1, len(frames)):
        t0 = time.perf_counter()
        frame = frames[idx]
        raw_map = segment(frame, palette)
        tracked = []
        for region in prev_regions:
            nxt = track_region(region, raw_map, frame_index=idx)
            if nxt is None:
                log.warning("frame %d: region from %s lost", idx + 1, region.seed_xy)
                continue
            tracked.append(nxt)
        corrected = raw_map
        for region in tracked:
            corrected = apply_region_correction(corrected, region, palette)

        aux = build_aux(frame, corrected, seed=seed + idx,
                        prev_chroma=prev_chroma, prev_r=prev_layers.r)
        layers = initialize(frame, corrected, palette, previous=prev_layers)
        state = SolverState(frame=frame, palette=palette, layers=layers,
                            aux=aux, weights=weights, config=stream_cfg)
        flip_flop(state)

        result.layer_stacks.append(state.layers)
        result.cluster_maps.append(corrected)
        result.records.append(state.records)
        result.statuses.append(state.status)
        result.frame_seconds.append(time.perf_counter() - t0)
        prev_layers = state.layers
        prev_chroma = chromaticity(frame)
        prev_raw_map = raw_map
        prev_regions = tracked
    return result


def decompose_bundle(bundle: GroundTruthBundle, weights: EnergyWeights,
                     config: SolveConfig, seed: int = 0, k_max: int = 10,
                     clicks: list | None = None):
    """Convenience wrapper for ground-truth bundles: returns
    (reflectances, illuminations, palette, result)."""
    result = decompose_frames(bundle.frames, weights, config, seed=seed,
                              k_max=k_max, clicks=clicks)
    return result.reflectances(), result.illuminations(), result.palette, result


FRAME_RE = re.compile(r"^frame_(\d+)\.(png|pfm)$")


def find_frames(input_dir: str | os.PathLike) -> list[Path]:
    paths = []
    for p in sorted(Path(input_dir).iterdir()):
        m = FRAME_RE.match(p.name)
        if m:
            paths.append((int(m.group(1)), p))
    # PFM wins when both formats exist for the same index
    chosen = {}
    for idx, p in paths:
        if idx not in chosen or p.suffix == ".pfm":
            chosen[idx] = p
    return [chosen[i] for i in sorted(chosen)]


def write_frame_outputs(out_dir: Path, index: int, layers: LayerStack,
                        palette: BaseColorPalette, cluster_map: ClusterMap) -> None:
    frame_dir = out_dir / f"frame_{index:06d}"
    frame_dir.mkdir(parents=True, exist_ok=True)
    R = np.exp(layers.r)
    save_pfm(frame_dir / "reflectance.pfm", R)
    save_png_preview(frame_dir / "reflectance.png", R)
    save_pfm(frame_dir / "direct.pfm", layers.T[:, :, 0])
    save_png_preview(frame_dir / "direct.png", layers.T[:, :, 0])
    for k in range(1, layers.T.shape[2]):
        tinted = layers.T[:, :, k, None] * palette.colors[k - 1]
        save_pfm(frame_dir / f"indirect_{k:02d}.pfm", layers.T[:, :, k])
        save_png_preview(frame_dir / f"indirect_{k:02d}.png", tinted,
                         scale=PREVIEW_INDIRECT_SCALE)
    recon = R * layers.illumination(palette)
    save_png_preview(frame_dir / "reconstruction.png", recon)
    save_cluster_map(frame_dir / "cluster_ids.png", frame_dir / "r_cluster.pfm",
                     cluster_map)


def write_diagnostics(out_dir: Path, result: PipelineResult) -> None:
    with open(out_dir / "diagnostics.jsonl", "w") as fh:
        for frame_idx, records in enumerate(result.records):
            for it, rec in enumerate(records):
                row = {"frame": frame_idx + 1, "iteration": it,
                       "phase": rec["phase"], "accepted": rec["accepted"],
                       "energy_before": rec["energy_before"],
                       "energy_after": rec["energy_after"]}
                if "pcg" in rec:
                    row["pcg_initial"] = rec["pcg"]["initial_residual"]
                    row["pcg_final"] = rec["pcg"]["final_residual"]
                fh.write(json.dumps(row) + "\n")
    with open(out_dir / "energy_terms.csv", "w") as fh:
        fh.write("frame,iteration,term,energy\n")
        for frame_idx, records in enumerate(result.records):
            for it, rec in enumerate(records):
                for term, value in rec.get("terms", {}).items():
                    fh.write(f"{frame_idx + 1},{it},{term},{value:.10g}\n")


def run_pipeline(input_dir: str | os.PathLike, output_dir: str | os.PathLike,
                 weights: EnergyWeights | None = None,
                 config: SolveConfig | None = None, seed: int = 0,
                 k_max: int = 10, journal: str | os.PathLike | None = None,
                 streaming_outer: int = 2) -> PipelineResult:
    """Disk-to-disk pipeline: read numbered frames, decompose, write layer
    sets, palette, previews, diagnostics and report figures."""
    weights = weights or EnergyWeights()
    config = config or SolveConfig()
    paths = find_frames(input_dir)
    if not paths:
        raise IOError(f"no frame_*.png or frame_*.pfm files in {input_dir}")
    frames = [load_frame(p) for p in paths]
    clicks = None
    if journal is not None:
        clicks = journal_clicks(read_journal(journal))

    result = decompose_frames(frames, weights, config, seed=seed, k_max=k_max,
                              clicks=clicks, streaming_outer=streaming_outer)

    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_palette(out / "palette.json", result.palette)
    for i, (layers, cmap) in enumerate(zip(result.layer_stacks, result.cluster_maps)):
        write_frame_outputs(out, i + 1, layers, result.palette, cmap)
    write_diagnostics(out, result)
    from .report import energy_history_figure
    energy_history_figure(out / "energy_history.png", result)
    with open(out / "manifest.json", "w") as fh:
        json.dump({"n_frames": len(frames), "K": result.palette.K,
                   "statuses": result.statuses,
                   "frame_seconds": result.frame_seconds}, fh, indent=2)
        fh.write("\n")
    return result
