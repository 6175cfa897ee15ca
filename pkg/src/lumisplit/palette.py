"""Base color estimation: histogram-based k-means in chromaticity space.

The first video frame is clustered by chroma to get an initial set of
base colors and a segmentation; both stay structurally fixed for the
rest of the video.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .imaging import ChromaticityImage, Frame, chroma_of_color, save_pfm, load_pfm

HIST_BINS = 10
MERGE_DISTANCE = 0.2
KMEANS_MAX_ITERS = 100


class EmptyHistogramError(ValueError):
    """Raised when a frame has no non-dark pixels to cluster."""


@dataclass(frozen=True)
class ChromaHistogram:
    """10x10 chroma histogram: populations and mean RGB of contributing pixels."""

    population: np.ndarray  # (10, 10) int64, indexed [g_bin, r_bin]
    mean_rgb: np.ndarray    # (10, 10, 3)

    @staticmethod
    def midpoint(r_bin: np.ndarray, g_bin: np.ndarray) -> np.ndarray:
        """Chroma midpoint of a bin, stacked (..., 2)."""
        return np.stack([(np.asarray(r_bin) + 0.5) / HIST_BINS,
                         (np.asarray(g_bin) + 0.5) / HIST_BINS], axis=-1)

    def populated(self):
        """(midpoints (N,2), populations (N,), mean RGB (N,3)) of non-empty bins."""
        g_bin, r_bin = np.nonzero(self.population)
        mids = self.midpoint(r_bin, g_bin)
        return mids, self.population[g_bin, r_bin], self.mean_rgb[g_bin, r_bin]


@dataclass(frozen=True)
class BaseColorPalette:
    """K reflectance base colors; the illuminant color is always white."""

    colors: np.ndarray  # (K, 3) in [0, 1]
    refined: bool = False
    previous: np.ndarray | None = None  # pre-refinement colors, for diffing

    @property
    def K(self) -> int:
        return self.colors.shape[0]

    @property
    def illuminant(self) -> np.ndarray:
        return np.ones(3)

    def matrix(self) -> np.ndarray:
        """(K+1, 3) stack: row 0 is the white illuminant, rows 1..K the base colors."""
        return np.vstack([np.ones((1, 3)), self.colors])

    def chromas(self) -> np.ndarray:
        """(K, 2) chroma of each base color."""
        return chroma_of_color(self.colors)


@dataclass
class ClusterMap:
    """Per-pixel cluster id in [1..K] and the clustered reflectance approximation."""

    ids: np.ndarray        # (H, W) int32, values 1..K
    r_cluster: np.ndarray  # (H, W, 3), base color of the assigned cluster


def build_histogram(chroma: ChromaticityImage) -> ChromaHistogram:
    """Bin non-dark pixels into the 10x10 chroma histogram."""
    valid = ~chroma.dark
    if not np.any(valid):
        raise EmptyHistogramError("all pixels are dark; nothing to cluster")
    c = chroma.chroma[valid]
    r_bin = np.clip((c[:, 0] * HIST_BINS).astype(np.int64), 0, HIST_BINS - 1)
    g_bin = np.clip((c[:, 1] * HIST_BINS).astype(np.int64), 0, HIST_BINS - 1)
    flat = g_bin * HIST_BINS + r_bin
    pop = np.bincount(flat, minlength=HIST_BINS * HIST_BINS)
    # RGB is recovered exactly from (r, g, intensity): B-chroma = 1 - r - g.
    sums = np.zeros((HIST_BINS * HIST_BINS, 3))
    full = np.concatenate([chroma.chroma, 1.0 - chroma.chroma.sum(axis=2, keepdims=True)],
                          axis=2)
    rgb_pixels = (full * chroma.intensity[:, :, None])[valid]
    for ch in range(3):
        sums[:, ch] = np.bincount(flat, weights=rgb_pixels[:, ch],
                                  minlength=HIST_BINS * HIST_BINS)
    mean = np.zeros_like(sums)
    nonzero = pop > 0
    mean[nonzero] = sums[nonzero] / pop[nonzero, None]
    return ChromaHistogram(population=pop.reshape(HIST_BINS, HIST_BINS),
                           mean_rgb=mean.reshape(HIST_BINS, HIST_BINS, 3))


def weighted_kmeans(hist: ChromaHistogram, k_max: int, seed: int) -> np.ndarray:
    """Cluster populated bin midpoints, weighted by population.

    Farthest-point seeding from a population-weighted random first pick;
    Lloyd iterations until assignments are stable (or 100 rounds).
    Returns (k, 2) chroma centers.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    mids, pops, _ = hist.populated()
    n = mids.shape[0]
    k = min(k_max, n)
    rng = np.random.default_rng(seed)

    first = rng.choice(n, p=pops / pops.sum())
    chosen = [first]
    while len(chosen) < k:
        d = np.min(np.linalg.norm(mids[:, None, :] - mids[chosen][None, :, :], axis=2), axis=1)
        chosen.append(int(np.argmax(d)))
    centers = mids[chosen].copy()

    prev_assign = None
    for _ in range(KMEANS_MAX_ITERS):
        dist = np.linalg.norm(mids[:, None, :] - centers[None, :, :], axis=2)
        assign = np.argmin(dist, axis=1)  # argmin breaks ties toward the lowest id
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
        for j in range(k):
            sel = assign == j
            if np.any(sel):
                centers[j] = np.average(mids[sel], axis=0, weights=pops[sel])
    return centers


def assign_pixels(chroma: ChromaticityImage, centers: np.ndarray) -> np.ndarray:
    """Nearest-center index (0-based) per pixel; ties go to the lowest index."""
    flat = chroma.chroma.reshape(-1, 2)
    dist = np.linalg.norm(flat[:, None, :] - centers[None, :, :], axis=2)
    return np.argmin(dist, axis=1).reshape(chroma.chroma.shape[:2])


def merge_clusters(centers: np.ndarray, frame: Frame,
                   assignments: np.ndarray, dark: np.ndarray | None = None) -> BaseColorPalette:
    """Merge center pairs closer than 0.2 in chroma, smaller population first.

    The closest qualifying pair is merged each round (smaller cluster into
    larger, the larger keeps its center), then distances are recomputed.
    Final base colors are the mean RGB of all non-dark pixels in each
    surviving cluster.
    """
    centers = np.asarray(centers, dtype=np.float64).copy()
    if dark is None:
        dark = np.zeros(frame.data.shape[:2], dtype=bool)
    assign = assignments.copy()
    valid = ~dark
    k = centers.shape[0]
    pops = np.array([np.count_nonzero((assign == j) & valid) for j in range(k)], dtype=np.int64)
    alive = list(range(k))

    while len(alive) > 1:
        best = None
        for ai in range(len(alive)):
            for bi in range(ai + 1, len(alive)):
                a, b = alive[ai], alive[bi]
                d = float(np.linalg.norm(centers[a] - centers[b]))
                if d < MERGE_DISTANCE and (best is None or d < best[0]):
                    best = (d, a, b)
        if best is None:
            break
        _, a, b = best
        small, large = (a, b) if pops[a] <= pops[b] else (b, a)
        assign[assign == small] = large
        pops[large] += pops[small]
        pops[small] = 0
        alive.remove(small)

    colors = []
    for j in alive:
        sel = (assign == j) & valid
        if np.any(sel):
            colors.append(frame.data[sel].mean(axis=0))
        else:
            # empty survivor: lift its chroma center to an RGB color
            r, g = centers[j]
            colors.append(np.array([r, g, max(0.0, 1.0 - r - g)]))
    return BaseColorPalette(colors=np.array(colors))


def segment(frame: Frame, palette: BaseColorPalette,
            chroma: ChromaticityImage | None = None) -> ClusterMap:
    """Assign every pixel to the chroma-nearest base color.

    Dark pixels copy the id of the nearest preceding non-dark pixel in
    scanline order (leading dark pixels take the first non-dark id).
    """
    from .imaging import chromaticity
    if chroma is None:
        chroma = chromaticity(frame)
    flat_chroma = chroma.chroma.reshape(-1, 2)
    dist = np.linalg.norm(flat_chroma[:, None, :] - palette.chromas()[None, :, :], axis=2)
    ids = np.argmin(dist, axis=1).astype(np.int32) + 1

    dark_flat = chroma.dark.reshape(-1)
    if np.any(dark_flat):
        if np.all(dark_flat):
            ids[:] = 1
        else:
            idx = np.arange(ids.size)
            pos = np.where(~dark_flat, idx, -1)
            last = np.maximum.accumulate(pos)
            first_valid = int(np.argmax(~dark_flat))
            last[last < 0] = first_valid
            ids = ids[last]

    h, w = frame.data.shape[:2]
    ids = ids.reshape(h, w)
    r_cluster = palette.colors[ids - 1]
    return ClusterMap(ids=ids, r_cluster=r_cluster)


def estimate_palette(frame: Frame, k_max: int = 10, seed: int = 0):
    """Full first-frame flow: histogram, k-means, merging, segmentation.

    Returns (palette, cluster_map).
    """
    from .imaging import chromaticity
    chroma = chromaticity(frame)
    hist = build_histogram(chroma)
    centers = weighted_kmeans(hist, k_max, seed)
    assignments = assign_pixels(chroma, centers)
    pal = merge_clusters(centers, frame, assignments, dark=chroma.dark)
    return pal, segment(frame, pal, chroma)


def palette_to_json(palette: BaseColorPalette) -> dict:
    doc = {"K": palette.K, "colors": [[float(v) for v in c] for c in palette.colors]}
    if palette.refined:
        doc["refined"] = True
        if palette.previous is not None:
            doc["previous"] = [[float(v) for v in c] for c in palette.previous]
    return doc


def palette_from_json(doc: dict) -> BaseColorPalette:
    prev = doc.get("previous")
    return BaseColorPalette(colors=np.array(doc["colors"], dtype=np.float64),
                            refined=bool(doc.get("refined", False)),
                            previous=None if prev is None else np.array(prev))


def save_palette(path: str | os.PathLike, palette: BaseColorPalette) -> None:
    with open(path, "w") as fh:
        json.dump(palette_to_json(palette), fh, indent=2)
        fh.write("\n")


def load_palette(path: str | os.PathLike) -> BaseColorPalette:
    with open(path) as fh:
        return palette_from_json(json.load(fh))


def save_cluster_map(ids_path: str | os.PathLike, rc_path: str | os.PathLike,
                     cluster_map: ClusterMap) -> None:
    """Ids as 16-bit PNG, clustered reflectance as PFM."""
    img = Image.fromarray(cluster_map.ids.astype(np.uint16))
    img.save(ids_path)
    save_pfm(rc_path, cluster_map.r_cluster)


def load_cluster_map(ids_path: str | os.PathLike, rc_path: str | os.PathLike) -> ClusterMap:
    ids = np.asarray(Image.open(ids_path), dtype=np.int32)
    return ClusterMap(ids=ids, r_cluster=load_pfm(rc_path))
