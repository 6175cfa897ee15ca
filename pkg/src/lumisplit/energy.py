"""Residual blocks, IRLS weights and Jacobian operators for the
decomposition energy and the base-color refinement energy.

The solver treats the energy as E(x) = ||F(x)||^2 where F stacks the
residuals of all blocks. Unknowns are the log-reflectance image r
(3 scalars/pixel) and the transport layers T_0..T_K (K+1 scalars/pixel).
Each block freezes its IRLS weights and its linearization point when
assembled, and exposes the residual, J and J^T as operators plus the
diagonal of J^T J for Jacobi preconditioning.
"""

from __future__ import annotations

from dataclasses import dataclass, replace, fields
from typing import Iterable

import numpy as np

from .imaging import ChromaticityImage, Frame, GradientField, gradient, log_reflectance
from .palette import BaseColorPalette, ClusterMap

# Spatiotemporal consistency prior: window size, partners per pixel, chroma gate.
CONSISTENCY_WINDOW = 15
CONSISTENCY_SAMPLES = 4
CONSISTENCY_CHROMA_GATE = 0.05


@dataclass(frozen=True)
class EnergyWeights:
    """Term weights for the decomposition and refinement energies."""

    lambda_data: float = 5000.0
    lambda_clustering: float = 200.0
    lambda_r_sparsity: float = 20.0
    p: float = 1.0
    lambda_r_consistency: float = 10.0
    lambda_monochrome: float = 10.0
    lambda_i_sparsity: float = 3.0
    lambda_smoothness: float = 3.0
    lambda_non_neg: float = 1000.0
    lambda_ir: float = 10.0
    lambda_cr: float = 100.0
    eps_nonneg: float = 0.002
    # l_p reweighting clamp. Warning: pushing this much below ~0.01 makes the
    # quadratic majorizer near zero so stiff that l1-penalized layers can no
    # longer activate from the all-zero initialization within a frame budget.
    eps_irls: float = 0.02
    chroma_reg: str = "projection"  # or "identity": literal quadratic in delta-b

    def with_overrides(self, overrides: dict) -> "EnergyWeights":
        known = {f.name for f in fields(self)}
        picked = {}
        for key, value in overrides.items():
            if key in known:
                picked[key] = value if key == "chroma_reg" else float(value)
        return replace(self, **picked)


def parse_keyvalue_file(path) -> dict:
    """Flat key=value config; '#' starts a comment, blank lines ignored."""
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


@dataclass
class LayerStack:
    """Log-reflectance r plus the K+1 scalar transport layers."""

    r: np.ndarray  # (H, W, 3), natural log of reflectance
    T: np.ndarray  # (H, W, K+1); index 0 is the direct layer

    @property
    def K(self) -> int:
        return self.T.shape[2] - 1

    @property
    def reflectance(self) -> np.ndarray:
        return np.exp(self.r)

    def illumination(self, palette: BaseColorPalette) -> np.ndarray:
        """S = sum_k b_k T_k, an RGB image."""
        return np.tensordot(self.T, palette.matrix(), axes=([2], [0]))

    def copy(self) -> "LayerStack":
        return LayerStack(r=self.r.copy(), T=self.T.copy())


def reconstruct(layers: LayerStack, palette: BaseColorPalette) -> np.ndarray:
    """R (*) S, the model's prediction of the input frame."""
    return layers.reflectance * layers.illumination(palette)


def irls_weight(magnitude: np.ndarray, p: float, eps_irls: float) -> np.ndarray:
    """min(|m|^(p-2), 1/eps): the frozen reweighting for an l_p residual."""
    mag = np.abs(np.asarray(magnitude, dtype=np.float64))
    if p >= 2.0:
        return np.ones_like(mag)
    cap = 1.0 / eps_irls
    floor = eps_irls ** (1.0 / (2.0 - p))
    out = np.full_like(mag, cap)
    big = mag >= floor
    out[big] = mag[big] ** (p - 2.0)
    return out


def nonneg_weight(T_old: np.ndarray, eps_nonneg: float) -> np.ndarray:
    """0 where the layer is strictly positive, else 1/(|T|+eps)."""
    T_old = np.asarray(T_old, dtype=np.float64)
    return np.where(T_old > 0.0, 0.0, 1.0 / (np.abs(T_old) + eps_nonneg))


def chroma_edge_weights(chroma: ChromaticityImage) -> np.ndarray:
    """Per-pixel gate w = 1 - exp(-50 * dC).

    dC is the largest chroma step to any of the four neighbors, so the
    gate opens only at strong chromaticity edges (reflectance edges) and
    stays near zero across smooth color gradients.
    """
    c = chroma.chroma
    dC = np.zeros(c.shape[:2])
    dx = np.linalg.norm(c[:, 1:] - c[:, :-1], axis=2)
    dy = np.linalg.norm(c[1:, :] - c[:-1, :], axis=2)
    dC[:, :-1] = np.maximum(dC[:, :-1], dx)
    dC[:, 1:] = np.maximum(dC[:, 1:], dx)
    dC[:-1, :] = np.maximum(dC[:-1, :], dy)
    dC[1:, :] = np.maximum(dC[1:, :], dy)
    return 1.0 - np.exp(-50.0 * dC)


@dataclass
class ConsistencySamples:
    """Gate-surviving partner pairs for the spatiotemporal consistency prior.

    src/dst are flat pixel indices; temporal rows pair against the previous
    frame's (fixed) reflectance instead of a second unknown.
    """

    src: np.ndarray       # (P,) int
    dst: np.ndarray       # (P,) int
    temporal: np.ndarray  # (P,) bool
    weight: np.ndarray    # (P,) in [0, 1]
    shape: tuple


def sample_consistency(chroma_t: ChromaticityImage,
                       chroma_prev: ChromaticityImage | None,
                       seed: int) -> ConsistencySamples:
    """Draw partners uniformly from the spatiotemporal window and gate them
    by chroma closeness. First frame (no previous chroma): spatial only."""
    h, w = chroma_t.chroma.shape[:2]
    n = h * w
    half = CONSISTENCY_WINDOW // 2
    rng = np.random.default_rng(seed)
    ns = CONSISTENCY_SAMPLES

    ys, xs = np.divmod(np.arange(n), w)
    dx = rng.integers(-half, half + 1, size=(n, ns))
    dy = rng.integers(-half, half + 1, size=(n, ns))
    if chroma_prev is None:
        temporal = np.zeros((n, ns), dtype=bool)
    else:
        temporal = rng.integers(0, 2, size=(n, ns)).astype(bool)
    px = np.clip(xs[:, None] + dx, 0, w - 1)
    py = np.clip(ys[:, None] + dy, 0, h - 1)
    dst = (py * w + px).reshape(-1)
    src = np.repeat(np.arange(n), ns)
    temporal = temporal.reshape(-1)

    c_t = chroma_t.chroma.reshape(-1, 2)
    partner_chroma = c_t[dst].copy()
    if chroma_prev is not None:
        partner_chroma[temporal] = chroma_prev.chroma.reshape(-1, 2)[dst[temporal]]
    dist = np.linalg.norm(c_t[src] - partner_chroma, axis=1)
    keep = dist < CONSISTENCY_CHROMA_GATE
    keep &= temporal | (src != dst)  # spatial self-pairs are vacuous rows
    return ConsistencySamples(src=src[keep], dst=dst[keep],
                              temporal=temporal[keep],
                              weight=np.ones(int(keep.sum())), shape=(h, w))


# ---------------------------------------------------------------------------
# Residual blocks
# ---------------------------------------------------------------------------

class DataBlock:
    """sqrt(lambda_data) * (I - exp(r) (*) sum_k b_k T_k), linearized at (r0, T0)."""

    name = "data"

    def __init__(self, image: np.ndarray, B: np.ndarray, r0: np.ndarray,
                 T0: np.ndarray, lam: float):
        self.image = image
        self.B = B
        self.a = np.sqrt(lam)
        self.R0 = np.exp(r0)
        self.S0 = np.tensordot(T0, B, axes=([2], [0]))

    def residual(self, r, T):
        S = np.tensordot(T, self.B, axes=([2], [0]))
        return (self.a * (self.image - np.exp(r) * S)).ravel()

    def apply_j(self, dr, dT):
        dS = np.tensordot(dT, self.B, axes=([2], [0]))
        return (-self.a * (self.R0 * self.S0 * dr + self.R0 * dS)).ravel()

    def apply_jt(self, w, out_dr, out_dT):
        w = w.reshape(self.image.shape)
        out_dr += -self.a * self.R0 * self.S0 * w
        out_dT += -self.a * np.tensordot(self.R0 * w, self.B, axes=([2], [1]))

    def add_diag(self, out_dr, out_dT):
        out_dr += (self.a * self.R0 * self.S0) ** 2
        out_dT += self.a ** 2 * np.tensordot(self.R0 ** 2, self.B ** 2, axes=([2], [1]))


class ClusteringBlock:
    """sqrt(lambda_clustering) * (r - r_cluster), both in the log domain."""

    name = "clustering"

    def __init__(self, r_cluster_log: np.ndarray, lam: float):
        self.r_cluster_log = r_cluster_log
        self.a = np.sqrt(lam)

    def residual(self, r, T):
        return (self.a * (r - self.r_cluster_log)).ravel()

    def apply_j(self, dr, dT):
        return (self.a * dr).ravel()

    def apply_jt(self, w, out_dr, out_dT):
        out_dr += self.a * w.reshape(out_dr.shape)

    def add_diag(self, out_dr, out_dT):
        out_dr += self.a ** 2


class _WeightedGradientBlock:
    """Shared machinery: rows a_x * (u[x+1]-u[x]) and a_y * (u[y+1]-u[y]).

    `ax`, `ay` broadcast against the unknown image over trailing dims.
    Subclasses pick which unknown (r or T) the block differentiates.
    """

    on_reflectance = True

    def __init__(self, ax: np.ndarray, ay: np.ndarray, shape: tuple):
        self.ax = ax
        self.ay = ay
        self.shape = shape

    def _field(self, r, T):
        return r if self.on_reflectance else T

    def residual(self, r, T):
        u = self._field(r, T)
        g = gradient(u)
        return np.concatenate([(self.ax * g.gx).ravel(), (self.ay * g.gy).ravel()])

    def apply_j(self, dr, dT):
        return self.residual(dr, dT)

    def apply_jt(self, w, out_dr, out_dT):
        out = out_dr if self.on_reflectance else out_dT
        n = int(np.prod(self.shape))
        wx = w[:n].reshape(self.shape)
        wy = w[n:].reshape(self.shape)
        awx = (self.ax * wx)[:, :-1]
        out[:, 1:] += awx
        out[:, :-1] -= awx
        awy = (self.ay * wy)[:-1, :]
        out[1:, :] += awy
        out[:-1, :] -= awy

    def add_diag(self, out_dr, out_dT):
        out = out_dr if self.on_reflectance else out_dT
        ax2 = np.broadcast_to(self.ax ** 2, self.shape)[:, :-1]
        out[:, :-1] += ax2
        out[:, 1:] += ax2
        ay2 = np.broadcast_to(self.ay ** 2, self.shape)[:-1, :]
        out[:-1, :] += ay2
        out[1:, :] += ay2


class ReflectanceSparsityBlock(_WeightedGradientBlock):
    """IRLS-weighted gradient of r; one weight per pixel from the previous
    iterate's full gradient magnitude (all channels and directions)."""

    name = "r_sparsity"
    on_reflectance = True

    def __init__(self, r_old: np.ndarray, lam: float, p: float, eps_irls: float):
        g = gradient(r_old)
        mag = np.sqrt((g.gx ** 2).sum(axis=2) + (g.gy ** 2).sum(axis=2))
        a = np.sqrt(lam * irls_weight(mag, p, eps_irls))[:, :, None]
        super().__init__(ax=a, ay=a, shape=r_old.shape)


class SmoothnessBlock(_WeightedGradientBlock):
    """IRLS-weighted gradients of every transport layer (l1, per component)."""

    name = "smoothness"
    on_reflectance = False

    def __init__(self, T_old: np.ndarray, lam: float, eps_irls: float):
        g = gradient(T_old)
        ax = np.sqrt(lam * irls_weight(np.abs(g.gx), 1.0, eps_irls))
        ay = np.sqrt(lam * irls_weight(np.abs(g.gy), 1.0, eps_irls))
        super().__init__(ax=ax, ay=ay, shape=T_old.shape)


class ConsistencyBlock:
    """sqrt(lambda * w) * (r(x) - r(x')) over sampled partner pairs.

    Temporal partners compare against the previous frame's fixed
    log-reflectance, so only the source side carries a Jacobian entry.
    """

    name = "r_consistency"

    def __init__(self, samples: ConsistencySamples, prev_r: np.ndarray | None,
                 lam: float):
        self.s = samples
        self.a = (np.sqrt(lam * samples.weight))[:, None]  # (P, 1)
        if np.any(samples.temporal):
            if prev_r is None:
                raise ValueError("temporal partners need the previous frame's reflectance")
            self.prev_vals = prev_r.reshape(-1, 3)[samples.dst[samples.temporal]]
        else:
            self.prev_vals = None
        self.n_pixels = int(np.prod(samples.shape))

    def _partner_values(self, r_flat):
        vals = r_flat[self.s.dst].copy()
        if self.prev_vals is not None:
            vals[self.s.temporal] = self.prev_vals
        return vals

    def residual(self, r, T):
        r_flat = r.reshape(-1, 3)
        return (self.a * (r_flat[self.s.src] - self._partner_values(r_flat))).ravel()

    def apply_j(self, dr, dT):
        d_flat = dr.reshape(-1, 3)
        vals = d_flat[self.s.dst].copy()
        if self.prev_vals is not None:
            vals[self.s.temporal] = 0.0  # previous frame is constant
        return (self.a * (d_flat[self.s.src] - vals)).ravel()

    def apply_jt(self, w, out_dr, out_dT):
        w = w.reshape(-1, 3)
        aw = self.a * w
        flat = out_dr.reshape(-1, 3)
        spatial = ~self.s.temporal
        for ch in range(3):
            flat[:, ch] += np.bincount(self.s.src, weights=aw[:, ch],
                                       minlength=self.n_pixels)
            if np.any(spatial):
                flat[:, ch] -= np.bincount(self.s.dst[spatial],
                                           weights=aw[spatial, ch],
                                           minlength=self.n_pixels)

    def add_diag(self, out_dr, out_dT):
        a2 = (self.a[:, 0]) ** 2
        flat = out_dr.reshape(-1, 3)
        add_src = np.bincount(self.s.src, weights=a2, minlength=self.n_pixels)
        flat += add_src[:, None]
        spatial = ~self.s.temporal
        if np.any(spatial):
            add_dst = np.bincount(self.s.dst[spatial], weights=a2[spatial],
                                  minlength=self.n_pixels)
            flat += add_dst[:, None]


class MonochromeBlock:
    """sqrt(lambda * w_edge) * (S_c - mean_c S), gated by the chroma-edge weight.

    Pulls the illumination toward gray at reflectance edges. Linear in T
    (base colors are fixed during the sparse phase); the white direct
    layer drops out because its color is already neutral.
    """

    name = "monochrome"

    def __init__(self, B: np.ndarray, edge_w: np.ndarray, lam: float):
        self.B = B
        self.G = B - B.mean(axis=1, keepdims=True)  # (K+1, 3)
        self.a = np.sqrt(lam * edge_w)[:, :, None]

    def residual(self, r, T):
        S = np.tensordot(T, self.B, axes=([2], [0]))
        return (self.a * (S - S.mean(axis=2, keepdims=True))).ravel()

    def apply_j(self, dr, dT):
        return (self.a * np.tensordot(dT, self.G, axes=([2], [0]))).ravel()

    def apply_jt(self, w, out_dr, out_dT):
        w = w.reshape(self.a.shape[0], self.a.shape[1], 3)
        out_dT += np.tensordot(self.a * w, self.G, axes=([2], [1]))

    def add_diag(self, out_dr, out_dT):
        out_dT += self.a ** 2 * (self.G ** 2).sum(axis=1)


class _DiagonalLayerBlock:
    """Rows a_k(x) * T_k(x) over a layer slice; shared by the two T penalties."""

    def __init__(self, a: np.ndarray, k_start: int, n_layers: int):
        self.a = a  # (H, W, n_layers - k_start)
        self.k_start = k_start
        self.n_layers = n_layers

    def residual(self, r, T):
        return (self.a * T[:, :, self.k_start:]).ravel()

    def apply_j(self, dr, dT):
        return (self.a * dT[:, :, self.k_start:]).ravel()

    def apply_jt(self, w, out_dr, out_dT):
        out_dT[:, :, self.k_start:] += self.a * w.reshape(self.a.shape)

    def add_diag(self, out_dr, out_dT):
        out_dT[:, :, self.k_start:] += self.a ** 2


class IndirectSparsityBlock(_DiagonalLayerBlock):
    """IRLS l1 penalty on the indirect layers T_1..T_K (the direct layer is exempt)."""

    name = "i_sparsity"

    def __init__(self, T_old: np.ndarray, lam: float, eps_irls: float):
        w = irls_weight(np.abs(T_old[:, :, 1:]), 1.0, eps_irls)
        super().__init__(np.sqrt(lam * w), k_start=1, n_layers=T_old.shape[2])


class NonNegBlock(_DiagonalLayerBlock):
    """Reweighted penalty that activates only where a layer went negative."""

    name = "non_neg"

    def __init__(self, T_old: np.ndarray, lam: float, eps_nonneg: float):
        w = nonneg_weight(T_old, eps_nonneg)
        super().__init__(np.sqrt(lam * w), k_start=0, n_layers=T_old.shape[2])


@dataclass
class EnergyAux:
    """Per-frame immutable context for assembling the energy.

    The clustered-reflectance anchor is usually given as per-pixel cluster
    ids so it follows the palette through refinement; a fixed log-domain
    anchor can be supplied instead.
    """

    edge_weights: np.ndarray
    samples: ConsistencySamples
    prev_r: np.ndarray | None = None
    cluster_ids: np.ndarray | None = None
    r_cluster_log: np.ndarray | None = None

    def anchor_log(self, palette: BaseColorPalette) -> np.ndarray:
        if self.cluster_ids is not None:
            return log_reflectance(palette.colors[self.cluster_ids - 1])
        if self.r_cluster_log is None:
            raise ValueError("EnergyAux needs cluster_ids or r_cluster_log")
        return self.r_cluster_log


def assemble_blocks(image: np.ndarray, palette: BaseColorPalette,
                    layers: LayerStack, aux: EnergyAux,
                    weights: EnergyWeights) -> list:
    """Build all residual blocks, freezing IRLS weights and the
    linearization point at the current iterate."""
    B = palette.matrix()
    r0, T0 = layers.r, layers.T
    blocks = [
        DataBlock(image, B, r0, T0, weights.lambda_data),
        ClusteringBlock(aux.anchor_log(palette), weights.lambda_clustering),
        ReflectanceSparsityBlock(r0, weights.lambda_r_sparsity, weights.p,
                                 weights.eps_irls),
        ConsistencyBlock(aux.samples, aux.prev_r, weights.lambda_r_consistency),
        MonochromeBlock(B, aux.edge_weights, weights.lambda_monochrome),
        IndirectSparsityBlock(T0, weights.lambda_i_sparsity, weights.eps_irls),
        SmoothnessBlock(T0, weights.lambda_smoothness, weights.eps_irls),
        NonNegBlock(T0, weights.lambda_non_neg, weights.eps_nonneg),
    ]
    return blocks


def stack_residuals(blocks: Iterable, r: np.ndarray, T: np.ndarray) -> np.ndarray:
    return np.concatenate([b.residual(r, T) for b in blocks])


def block_energies(blocks: Iterable, r: np.ndarray, T: np.ndarray) -> dict:
    return {b.name: float(np.sum(b.residual(r, T) ** 2)) for b in blocks}


def total_energy(frame: Frame, layers: LayerStack, palette: BaseColorPalette,
                 weights: EnergyWeights, aux: EnergyAux) -> float:
    """Sum of squared residuals with IRLS weights taken from the given state."""
    blocks = assemble_blocks(frame.data, palette, layers, aux, weights)
    return float(sum(block_energies(blocks, layers.r, layers.T).values()))


# ---------------------------------------------------------------------------
# Base color refinement residuals (dense unknowns delta-b, 3K scalars)
# ---------------------------------------------------------------------------

def chroma_projections(palette: BaseColorPalette, mode: str) -> np.ndarray:
    """(K, 3, 3) regularizer matrices for the chroma-preserving penalty.

    "projection" penalizes only the component of each update orthogonal to
    its base color (chroma-changing directions); "identity" penalizes the
    whole update, which duplicates the intensity regularizer.
    """
    K = palette.K
    mats = np.zeros((K, 3, 3))
    eye = np.eye(3)
    for k in range(K):
        if mode == "identity":
            mats[k] = eye
            continue
        b = palette.colors[k]
        norm = np.linalg.norm(b)
        if norm < 1e-9:
            mats[k] = eye
        else:
            unit = b / norm
            mats[k] = eye - np.outer(unit, unit)
    return mats


def refine_residual(image: np.ndarray, layers: LayerStack,
                    palette: BaseColorPalette, delta_b: np.ndarray,
                    weights: EnergyWeights) -> np.ndarray:
    """Stacked refinement residual at a given delta_b (shape (K, 3)).

    Three parts: the data term with updated base colors, the intensity
    regularizer, and the chroma regularizer. The illuminant color never
    receives an update.
    """
    delta_b = np.asarray(delta_b, dtype=np.float64).reshape(palette.K, 3)
    B = palette.matrix().copy()
    B[1:] += delta_b
    R = layers.reflectance
    S = np.tensordot(layers.T, B, axes=([2], [0]))
    data = np.sqrt(weights.lambda_data) * (image - R * S)
    ir = np.sqrt(weights.lambda_ir) * delta_b
    P = chroma_projections(palette, weights.chroma_reg)
    cr = np.sqrt(weights.lambda_cr) * np.einsum("kij,kj->ki", P, delta_b)
    return np.concatenate([data.ravel(), ir.ravel(), cr.ravel()])


def refine_normal_system(image: np.ndarray, layers: LayerStack,
                         palette: BaseColorPalette, weights: EnergyWeights,
                         cluster_ids: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Materialize the 3K x 3K normal matrix and right-hand side at delta_b = 0.

    Data rows couple the K updates within each channel; the chroma
    regularizer couples the channels within each update. When cluster ids
    are given, the clustered-reflectance anchor rows are included too (the
    anchor is the base color of the assigned cluster, so it moves with the
    palette): they pull each base color toward the reflectance the
    decomposition actually settled on. Accumulated as a sum of outer
    products over residual rows, vectorized per channel.
    """
    K = palette.K
    R = layers.reflectance
    S = layers.illumination(palette)
    res = image - R * S
    T_ind = layers.T[:, :, 1:].reshape(-1, K)
    A = np.zeros((3 * K, 3 * K))
    rhs = np.zeros(3 * K)
    ld = weights.lambda_data
    for c in range(3):
        rc = R[:, :, c].reshape(-1)
        idx = np.arange(K) * 3 + c
        M = ld * (T_ind * (rc ** 2)[:, None]).T @ T_ind
        A[np.ix_(idx, idx)] += M
        rhs[idx] += ld * T_ind.T @ (rc * res[:, :, c].reshape(-1))
    if cluster_ids is not None:
        lc = weights.lambda_clustering
        from .imaging import LOG_FLOOR
        for k in range(K):
            members = cluster_ids == k + 1
            n_k = int(members.sum())
            if n_k == 0:
                continue
            b = np.maximum(palette.colors[k], LOG_FLOOR)
            # rows sqrt(lc) * (r - ln(b + delta_b)); d/d(delta_b_c) = -sqrt(lc)/b_c
            mismatch = layers.r[members] - np.log(b)  # (n_k, 3)
            for c in range(3):
                i = 3 * k + c
                A[i, i] += lc * n_k / b[c] ** 2
                rhs[i] += lc * mismatch[:, c].sum() / b[c]
    A[np.diag_indices_from(A)] += weights.lambda_ir
    P = chroma_projections(palette, weights.chroma_reg)
    for k in range(K):
        sl = slice(3 * k, 3 * k + 3)
        A[sl, sl] += weights.lambda_cr * P[k]
    return A, rhs
