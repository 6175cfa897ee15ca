"""Gauss-Newton solver with sparse-dense variable splitting.

The per-pixel unknowns (log-reflectance and transport layers) form the
sparse block, solved matrix-free with a fixed budget of Jacobi-
preconditioned conjugate gradient steps. The base-color updates form a
small dense block whose normal equations are materialized and solved by
SVD. The two phases alternate ("flip-flop") until the energy stalls.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace, fields
from typing import Callable

import numpy as np

from .energy import (EnergyAux, EnergyWeights, LayerStack, assemble_blocks,
                     block_energies, chroma_edge_weights, refine_normal_system,
                     sample_consistency)
from .imaging import Frame, chromaticity, log_reflectance
from .palette import BaseColorPalette, ClusterMap


class NumericalFaultError(RuntimeError):
    """Non-finite values appeared during a solve; carries an iteration dump."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class SolveConfig:
    outer_iterations: int = 8
    gn_steps: int = 2
    pcg_iterations: int = 16
    tol_rel: float = 1e-4
    max_halvings: int = 4
    refine: bool = True
    svd_truncation: float = 1e-8
    # trust cap per dense round: with nearly inactive transport layers the
    # unregularized optimum for the color update can be enormous while the
    # energy barely moves; unchecked, colors race to the [0,1] corners
    max_delta_b: float = 0.1
    # the dense phase waits until the sparse phase has settled: it needs the
    # transport layers to carry real structure before the color update means
    # anything
    refine_warmup: int = 2
    refine_gate_rel: float = 2e-2

    def with_overrides(self, overrides: dict) -> "SolveConfig":
        known = {f.name: f.type for f in fields(self)}
        picked = {}
        for key, value in overrides.items():
            if key not in known:
                continue
            if key in ("tol_rel", "svd_truncation"):
                picked[key] = float(value)
            elif key == "refine":
                picked[key] = str(value).lower() in ("1", "true", "yes")
            else:
                picked[key] = int(value)
        return replace(self, **picked)


@dataclass
class SolverState:
    frame: Frame
    palette: BaseColorPalette
    layers: LayerStack
    aux: EnergyAux
    weights: EnergyWeights
    config: SolveConfig
    energy_history: list = field(default_factory=list)
    records: list = field(default_factory=list)
    status: str = "running"


def pcg(apply_A: Callable, b: np.ndarray, diag: np.ndarray,
        iterations: int) -> tuple[np.ndarray, dict]:
    """Jacobi-preconditioned conjugate gradient for A x = b, fixed budget."""
    x = np.zeros_like(b)
    b_norm = float(np.linalg.norm(b))
    info = {"iterations": 0, "initial_residual": b_norm, "final_residual": b_norm}
    if b_norm == 0.0:
        return x, info
    d = np.where(diag > 0.0, diag, 1.0)
    r = b.copy()
    z = r / d
    p = z.copy()
    rz = float(r @ z)
    for it in range(iterations):
        Ap = apply_A(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0 or not np.isfinite(pAp):
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        info["iterations"] = it + 1
        rz_new = float(r @ (r / d))
        if rz_new <= 0.0:
            break
        p = r / d + (rz_new / rz) * p
        rz = rz_new
    info["final_residual"] = float(np.linalg.norm(r))
    return x, info


def _normal_operator(blocks, shape_r, shape_T) -> Callable:
    n_r = int(np.prod(shape_r))

    def apply_A(p: np.ndarray) -> np.ndarray:
        dr = p[:n_r].reshape(shape_r)
        dT = p[n_r:].reshape(shape_T)
        out_dr = np.zeros(shape_r)
        out_dT = np.zeros(shape_T)
        for blk in blocks:
            blk.apply_jt(blk.apply_j(dr, dT), out_dr, out_dT)
        return np.concatenate([out_dr.ravel(), out_dT.ravel()])

    return apply_A


def _gradient_and_diag(blocks, r, T):
    """Right-hand side -J^T F and the diagonal of J^T J."""
    g_dr = np.zeros_like(r)
    g_dT = np.zeros_like(T)
    d_dr = np.zeros_like(r)
    d_dT = np.zeros_like(T)
    for blk in blocks:
        blk.apply_jt(blk.residual(r, T), g_dr, g_dT)
        blk.add_diag(d_dr, d_dT)
    b = -np.concatenate([g_dr.ravel(), g_dT.ravel()])
    diag = np.concatenate([d_dr.ravel(), d_dT.ravel()])
    return b, diag


def _frozen_energy(blocks, r, T) -> float:
    return float(sum(np.sum(blk.residual(r, T) ** 2) for blk in blocks))


def gn_step_sparse(state: SolverState) -> dict:
    """One Gauss-Newton step on the per-pixel unknowns, base colors fixed.

    Solves the normal equations with the configured PCG budget and applies
    the update with step-halving: the step is rejected if the frozen-weight
    energy still increases after the allowed halvings.
    """
    r0, T0 = state.layers.r, state.layers.T
    blocks = assemble_blocks(state.frame.data, state.palette, state.layers,
                             state.aux, state.weights)
    e_before = _frozen_energy(blocks, r0, T0)
    if not np.isfinite(e_before):
        terms = block_energies(blocks, r0, T0)
        raise NumericalFaultError("non-finite residuals in sparse phase",
                                  dump={"iteration": len(state.records), "terms": terms})

    b, diag = _gradient_and_diag(blocks, r0, T0)
    delta, pcg_info = pcg(_normal_operator(blocks, r0.shape, T0.shape), b, diag,
                          state.config.pcg_iterations)
    n_r = r0.size
    delta_r = delta[:n_r].reshape(r0.shape)
    delta_T = delta[n_r:].reshape(T0.shape)

    alpha = 1.0
    accepted = False
    e_after = e_before
    for _ in range(state.config.max_halvings + 1):
        r_new = r0 + alpha * delta_r
        T_new = T0 + alpha * delta_T
        e_try = _frozen_energy(blocks, r_new, T_new)
        if np.isfinite(e_try) and e_try <= e_before:
            state.layers = LayerStack(r=r_new, T=T_new)
            e_after = e_try
            accepted = True
            break
        alpha *= 0.5

    record = {
        "phase": "sparse",
        "energy_before": e_before,
        "energy_after": e_after,
        "accepted": accepted,
        "alpha": alpha if accepted else 0.0,
        "pcg": pcg_info,
        "terms": block_energies(blocks, state.layers.r, state.layers.T),
    }
    state.records.append(record)
    if accepted:
        state.energy_history.append(e_after)
    return record


def svd_solve(A: np.ndarray, rhs: np.ndarray, truncation: float) -> np.ndarray:
    """Minimum-norm solve via SVD, truncating singular values below
    `truncation` times the largest."""
    if not np.any(A):
        return np.zeros_like(rhs)
    U, s, Vt = np.linalg.svd(A)
    if s[0] <= 0.0:
        return np.zeros_like(rhs)
    keep = s > truncation * s[0]
    return Vt[keep].T @ ((U[:, keep].T @ rhs) / s[keep])


def solve_dense_block(state: SolverState) -> np.ndarray:
    """Solve the 3K x 3K base-color update system by truncated SVD.

    The accepted update is clamped so base colors stay inside [0, 1]^3 and
    is halved (like the sparse step) if the frozen-weight energy increases.
    Returns the applied update, (K, 3).
    """
    K = state.palette.K
    A, rhs = refine_normal_system(state.frame.data, state.layers, state.palette,
                                  state.weights, cluster_ids=state.aux.cluster_ids)
    delta_b = svd_solve(A, rhs, state.config.svd_truncation).reshape(K, 3)
    if not np.any(delta_b):
        return np.zeros((K, 3))
    biggest = float(np.abs(delta_b).max())
    if biggest > state.config.max_delta_b:
        delta_b = delta_b * (state.config.max_delta_b / biggest)

    blocks0 = assemble_blocks(state.frame.data, state.palette, state.layers,
                              state.aux, state.weights)
    e_before = _frozen_energy(blocks0, state.layers.r, state.layers.T)
    alpha = 1.0
    applied = np.zeros((K, 3))
    accepted = False
    e_after = e_before
    for _ in range(state.config.max_halvings + 1):
        colors = np.clip(state.palette.colors + alpha * delta_b, 0.0, 1.0)
        candidate = replace(state.palette, colors=colors)
        blocks = assemble_blocks(state.frame.data, candidate, state.layers,
                                 state.aux, state.weights)
        e_try = _frozen_energy(blocks, state.layers.r, state.layers.T)
        if np.isfinite(e_try) and e_try <= e_before:
            applied = colors - state.palette.colors
            state.palette = candidate
            e_after = e_try
            accepted = True
            break
        alpha *= 0.5

    state.records.append({
        "phase": "dense",
        "energy_before": e_before,
        "energy_after": e_after,
        "accepted": accepted,
        "alpha": alpha if accepted else 0.0,
        "delta_b_norm": float(np.linalg.norm(applied)),
    })
    if accepted:
        state.energy_history.append(e_after)
    return applied


def _clone_state(state: SolverState) -> SolverState:
    return SolverState(frame=state.frame, palette=state.palette,
                       layers=state.layers.copy(), aux=state.aux,
                       weights=state.weights, config=state.config,
                       energy_history=list(state.energy_history),
                       records=list(state.records), status=state.status)


def _adopt(state: SolverState, winner: SolverState) -> None:
    state.palette = winner.palette
    state.layers = winner.layers
    state.energy_history = winner.energy_history
    state.records = winner.records
    state.status = winner.status


def refine_round(state: SolverState) -> bool:
    """One dense round, kept only if it beats the sparse-only branch.

    The color update is meaningless until the per-pixel unknowns re-settle
    around it, so both branches take the next sparse step and the energies
    after that step decide. Returns True when the update was kept.
    """
    plain = _clone_state(state)
    gn_step_sparse(plain)
    refined = _clone_state(state)
    solve_dense_block(refined)
    gn_step_sparse(refined)
    e_plain = plain.energy_history[-1] if plain.energy_history else np.inf
    e_refined = refined.energy_history[-1] if refined.energy_history else np.inf
    if e_refined < e_plain:
        _adopt(state, refined)
        return True
    _adopt(state, plain)
    return False


def initialize(frame: Frame, cluster_map: ClusterMap | None,
               palette: BaseColorPalette,
               previous: LayerStack | None = None) -> LayerStack:
    """First frame: clustered reflectance and a matching direct layer.
    Later frames: copy the previous frame's stack (warm start)."""
    if previous is not None:
        return previous.copy()
    if cluster_map is None:
        raise ValueError("first frame needs a cluster map")
    r = log_reflectance(cluster_map.r_cluster)
    ratio = frame.data / np.maximum(cluster_map.r_cluster, 1e-4)
    T = np.zeros(frame.data.shape[:2] + (palette.K + 1,))
    T[:, :, 0] = np.clip(ratio.mean(axis=2), 0.0, 2.0)
    return LayerStack(r=r, T=T)


def flip_flop(state: SolverState) -> SolverState:
    """Alternate sparse Gauss-Newton steps with dense base-color solves
    until the relative energy decrease falls below tolerance."""
    cfg = state.config
    e_prev = None
    stalled = False
    for outer in range(cfg.outer_iterations):
        sparse_rel = None
        for _ in range(cfg.gn_steps):
            rec = gn_step_sparse(state)
            if not rec["accepted"]:
                stalled = True
            elif rec["energy_before"] > 0.0:
                sparse_rel = (rec["energy_before"] - rec["energy_after"]) / rec["energy_before"]
        settled = sparse_rel is not None and sparse_rel < cfg.refine_gate_rel
        if cfg.refine and outer >= cfg.refine_warmup and (settled or stalled):
            refine_round(state)
        if not state.energy_history:
            continue
        e_now = state.energy_history[-1]
        if e_prev is not None and e_prev > 0.0:
            rel = (e_prev - e_now) / e_prev
            if 0.0 <= rel < cfg.tol_rel:
                state.status = "converged"
                return state
        e_prev = e_now
    state.status = "stalled" if stalled else "max_outer"
    return state


def build_aux(frame: Frame, cluster_map: ClusterMap, seed: int,
              prev_chroma=None, prev_r: np.ndarray | None = None) -> EnergyAux:
    """Per-frame energy context: clustered-reflectance anchor ids,
    chroma-edge weights and the consistency partner samples."""
    chroma = chromaticity(frame)
    return EnergyAux(
        edge_weights=chroma_edge_weights(chroma),
        samples=sample_consistency(chroma, prev_chroma, seed),
        prev_r=prev_r,
        cluster_ids=cluster_map.ids,
    )


def solve_frame(frame: Frame, palette: BaseColorPalette, cluster_map: ClusterMap,
                weights: EnergyWeights, config: SolveConfig, seed: int,
                previous: LayerStack | None = None, prev_chroma=None,
                prev_r: np.ndarray | None = None) -> SolverState:
    """Decompose one frame end to end: build context, initialize, flip-flop."""
    aux = build_aux(frame, cluster_map, seed, prev_chroma, prev_r)
    layers = initialize(frame, cluster_map, palette, previous)
    state = SolverState(frame=frame, palette=palette, layers=layers, aux=aux,
                        weights=weights, config=config)
    return flip_flop(state)
