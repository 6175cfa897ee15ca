"""Quantitative evaluation: windowed scale-invariant MSE and the
prior-ablation harness over ground-truth bundles."""

from __future__ import annotations

import csv
import os
from dataclasses import replace
from pathlib import Path

import numpy as np

from .energy import EnergyWeights
from .solver import SolveConfig
from .synth import GroundTruthBundle

LMSE_WINDOW = 20
LMSE_STRIDE = 10

# the standard ablation lineup: name -> (weight overrides, refine flag)
ABLATION_VARIANTS = {
    "full": ({}, True),
    "no_refinement": ({}, False),
    "no_monochrome": ({"lambda_monochrome": 0.0}, True),
    "no_consistency": ({"lambda_r_consistency": 0.0}, True),
}


def _window_error(truth: np.ndarray, estimate: np.ndarray) -> tuple[float, float]:
    """Scale-fitted squared error and truth energy for one window/channel."""
    denom = float((estimate ** 2).sum())
    if denom > 1e-5:
        alpha = float((truth * estimate).sum()) / denom
    else:
        alpha = 0.0
    err = float(((truth - alpha * estimate) ** 2).sum())
    return err, float((truth ** 2).sum())


def lmse(estimate: np.ndarray, truth: np.ndarray,
         window: int = LMSE_WINDOW, stride: int = LMSE_STRIDE) -> float:
    """Local scale-invariant MSE of one layer image.

    Sliding windows, the estimate rescaled per window (and per channel)
    by the least-squares-optimal scalar; total error normalized by the
    truth's windowed energy.
    """
    estimate = np.asarray(estimate, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch {estimate.shape} vs {truth.shape}")
    if estimate.ndim == 2:
        estimate = estimate[:, :, None]
        truth = truth[:, :, None]
    h, w, channels = truth.shape
    ssq = total = 0.0
    for i in range(0, h - window + 1, stride):
        for j in range(0, w - window + 1, stride):
            for c in range(channels):
                err, energy = _window_error(truth[i:i + window, j:j + window, c],
                                            estimate[i:i + window, j:j + window, c])
                ssq += err
                total += energy
    if total <= 0.0:
        return 0.0
    return ssq / total


def decomposition_lmse(est_reflectance: np.ndarray, est_illumination: np.ndarray,
                       true_reflectance: np.ndarray,
                       true_illumination: np.ndarray) -> float:
    """Mean of the reflectance-layer and illumination-layer scores."""
    return 0.5 * (lmse(est_reflectance, true_reflectance)
                  + lmse(est_illumination, true_illumination))


def score_against_bundle(bundle: GroundTruthBundle, reflectances: list,
                         illuminations: list) -> list[float]:
    """Per-frame decomposition score of estimated layers against the bundle."""
    B = np.vstack([np.ones((1, 3)), bundle.palette])
    scores = []
    for i in range(len(bundle.frames)):
        true_S = np.tensordot(bundle.transport[i], B, axes=([2], [0]))
        scores.append(decomposition_lmse(reflectances[i], illuminations[i],
                                         bundle.reflectance[i], true_S))
    return scores


def run_ablation(bundle: GroundTruthBundle, base_weights: EnergyWeights,
                 base_config: SolveConfig, seed: int,
                 variants: dict | None = None,
                 out_csv: str | os.PathLike | None = None,
                 k_max: int = 10) -> dict[str, list]:
    """Run the full pipeline under each energy variant and score per frame.

    Returns {variant: per-frame LMSE list}; a failed variant maps to None.
    Optionally writes rows (frame, variant, lmse) as CSV.
    """
    from .pipeline import decompose_bundle  # local import to avoid a cycle

    if len(bundle.frames) < 5:
        raise ValueError("ablation needs at least 5 frames")
    variants = ABLATION_VARIANTS if variants is None else variants
    results: dict[str, list] = {}
    for name, (overrides, refine) in variants.items():
        weights = replace(base_weights, **overrides)
        config = replace(base_config, refine=refine)
        try:
            refl, illum, _, _ = decompose_bundle(bundle, weights, config,
                                                 seed=seed, k_max=k_max)
            results[name] = score_against_bundle(bundle, refl, illum)
        except Exception:
            results[name] = None
    if out_csv is not None:
        write_ablation_csv(out_csv, results)
    return results


def write_ablation_csv(path: str | os.PathLike, results: dict[str, list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "variant", "lmse"])
        for name, scores in results.items():
            if scores is None:
                writer.writerow(["-", name, "failed"])
                continue
            for i, s in enumerate(scores):
                writer.writerow([i + 1, name, f"{s:.8f}"])


def mean_scores(results: dict[str, list]) -> dict[str, float]:
    return {name: float(np.mean(scores))
            for name, scores in results.items() if scores is not None}
