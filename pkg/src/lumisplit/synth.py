"""Synthetic ground-truth scenes: axis-aligned box worlds rendered with
exact direct + one-bounce transport.

The renderer emits the reflectance and every transport layer separately
and composes the input image from them, so the layered image formation
model holds exactly on the generated data. World transport is static;
only the camera moves, which keeps per-frame cost at ray casting plus
lookups.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .imaging import Frame, frame_from_array, save_pfm, load_pfm, save_png_preview

PATCH_GRID = 16
LIGHT_SAMPLES = 4  # per axis, 4x4 grid on the emitter
_EPS = 1e-9

_AXIS_UV = {0: (1, 2), 1: (0, 2), 2: (0, 1)}


class SceneError(ValueError):
    """Degenerate scene geometry."""


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle: plane `axis`=offset, bounded on the other two axes."""

    axis: int
    offset: float
    lo: tuple
    hi: tuple
    normal_sign: int
    color_id: int = 0  # 1..K for surfaces; 0 for the emitter

    def __post_init__(self):
        if self.hi[0] <= self.lo[0] or self.hi[1] <= self.lo[1]:
            raise SceneError(f"degenerate rectangle bounds {self.lo}..{self.hi}")

    @property
    def normal(self) -> np.ndarray:
        n = np.zeros(3)
        n[self.axis] = self.normal_sign
        return n

    @property
    def area(self) -> float:
        return (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])

    def point(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """World points from in-plane coordinates in [0, 1]^2."""
        ua, va = _AXIS_UV[self.axis]
        out = np.zeros(np.shape(u) + (3,))
        out[..., self.axis] = self.offset
        out[..., ua] = self.lo[0] + np.asarray(u) * (self.hi[0] - self.lo[0])
        out[..., va] = self.lo[1] + np.asarray(v) * (self.hi[1] - self.lo[1])
        return out


@dataclass(frozen=True)
class Camera:
    """Pinhole camera looking along -z, x right, y up.

    With `pingpong` > 0 the translation direction reverses every that many
    frames, so a long pan keeps the whole scene in view.
    """

    origin: tuple
    translate: tuple  # per-frame translation
    fov_deg: float
    pingpong: int = 0

    def at(self, frame_idx: int) -> np.ndarray:
        if self.pingpong > 0:
            period = 2 * self.pingpong
            m = frame_idx % period
            step = m if m <= self.pingpong else period - m
        else:
            step = frame_idx
        return np.asarray(self.origin) + step * np.asarray(self.translate)

    def rays(self, width: int, height: int) -> np.ndarray:
        """(H*W, 3) unit directions through pixel centers."""
        tan = np.tan(np.deg2rad(self.fov_deg) / 2.0)
        xs = ((np.arange(width) + 0.5) / width * 2.0 - 1.0) * tan * (width / height)
        ys = (1.0 - (np.arange(height) + 0.5) / height * 2.0) * tan
        dx, dy = np.meshgrid(xs, ys)
        d = np.stack([dx, dy, -np.ones_like(dx)], axis=-1).reshape(-1, 3)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def project(self, point: np.ndarray, frame_idx: int,
                width: int, height: int) -> tuple[float, float]:
        """Pixel coordinates (x, y) of a world point; raises behind camera."""
        rel = np.asarray(point, dtype=np.float64) - self.at(frame_idx)
        if rel[2] >= -1e-9:
            raise ValueError("point is behind the camera")
        tan = np.tan(np.deg2rad(self.fov_deg) / 2.0)
        u = rel[0] / (-rel[2]) / (tan * width / height)
        v = rel[1] / (-rel[2]) / tan
        return ((u + 1.0) / 2.0 * width - 0.5, (1.0 - v) / 2.0 * height - 0.5)


@dataclass
class SyntheticScene:
    width: int
    height: int
    n_frames: int
    palette: np.ndarray            # (K, 3) surface base colors
    surfaces: list
    light: Rect
    light_power: float
    camera: Camera
    # per-frame multiplicative shimmer on the direct layer (indoor lights
    # flicker; cameras hunt exposure). Applied inside the layers, so the
    # layered image formation stays exact.
    flicker: float = 0.0
    # Gaussian sigma (pixels) applied to the reflectance and transport
    # layers before composition: optical softness. The image is composed
    # from the blurred layers, so the factorization stays exact while
    # material boundaries become genuine chroma gradients.
    soft_edges: float = 0.0

    @property
    def K(self) -> int:
        return self.palette.shape[0]

    def to_json(self) -> dict:
        def rect_doc(r: Rect) -> dict:
            return {"axis": r.axis, "offset": r.offset, "lo": list(r.lo),
                    "hi": list(r.hi), "normal_sign": r.normal_sign,
                    "color_id": r.color_id}
        return {
            "resolution": [self.width, self.height],
            "n_frames": self.n_frames,
            "palette": [[float(v) for v in c] for c in self.palette],
            "surfaces": [rect_doc(s) for s in self.surfaces],
            "light": rect_doc(self.light),
            "light_power": self.light_power,
            "camera": {"origin": list(self.camera.origin),
                       "translate": list(self.camera.translate),
                       "fov_deg": self.camera.fov_deg,
                       "pingpong": self.camera.pingpong},
            "flicker": self.flicker,
            "soft_edges": self.soft_edges,
        }

    @staticmethod
    def from_json(doc: dict) -> "SyntheticScene":
        def rect(d: dict) -> Rect:
            return Rect(axis=d["axis"], offset=d["offset"], lo=tuple(d["lo"]),
                        hi=tuple(d["hi"]), normal_sign=d["normal_sign"],
                        color_id=d.get("color_id", 0))
        cam = doc["camera"]
        return SyntheticScene(
            width=doc["resolution"][0], height=doc["resolution"][1],
            n_frames=doc["n_frames"],
            palette=np.array(doc["palette"], dtype=np.float64),
            surfaces=[rect(d) for d in doc["surfaces"]],
            light=rect(doc["light"]), light_power=doc["light_power"],
            camera=Camera(origin=tuple(cam["origin"]),
                          translate=tuple(cam["translate"]),
                          fov_deg=cam["fov_deg"],
                          pingpong=cam.get("pingpong", 0)),
            flicker=doc.get("flicker", 0.0),
            soft_edges=doc.get("soft_edges", 0.0))


@dataclass
class GroundTruthBundle:
    frames: list              # Frame per frame
    reflectance: list         # (H, W, 3) per frame
    transport: list           # (H, W, K+1) per frame
    labels: list              # (H, W) int32 per frame, surface color ids 1..K
    palette: np.ndarray       # (K, 3)


def _segment_hits(start: np.ndarray, end: np.ndarray, rects) -> np.ndarray:
    """True where the open segment start->end is blocked by any rectangle."""
    start = np.atleast_2d(start)
    end = np.broadcast_to(np.atleast_2d(end), start.shape)
    blocked = np.zeros(start.shape[0], dtype=bool)
    seg = end - start
    for r in rects:
        denom = seg[:, r.axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (r.offset - start[:, r.axis]) / denom
        t = np.where(np.abs(denom) < _EPS, -1.0, t)
        inside = (t > 1e-6) & (t < 1.0 - 1e-6)
        if not np.any(inside):
            continue
        ua, va = _AXIS_UV[r.axis]
        pu = start[:, ua] + t * seg[:, ua]
        pv = start[:, va] + t * seg[:, va]
        inside &= (pu >= r.lo[0]) & (pu <= r.hi[0]) & (pv >= r.lo[1]) & (pv <= r.hi[1])
        blocked |= inside
    return blocked


def _light_samples(light: Rect) -> tuple[np.ndarray, float]:
    """Sample point grid on the emitter and the per-sample area weight."""
    g = (np.arange(LIGHT_SAMPLES) + 0.5) / LIGHT_SAMPLES
    uu, vv = np.meshgrid(g, g)
    pts = light.point(uu.ravel(), vv.ravel())
    return pts, light.area / (LIGHT_SAMPLES ** 2)


def direct_irradiance(points: np.ndarray, normals: np.ndarray,
                      scene: SyntheticScene) -> np.ndarray:
    """Visibility-tested irradiance from the area light, cosine falloff
    on both ends, inverse-square distance."""
    pts = np.atleast_2d(points)
    nrm = np.broadcast_to(np.atleast_2d(normals), pts.shape)
    samples, sample_area = _light_samples(scene.light)
    n_l = scene.light.normal
    total = np.zeros(pts.shape[0])
    for ls in samples:
        d = ls[None, :] - pts
        dist2 = np.maximum((d ** 2).sum(axis=1), _EPS)
        dist = np.sqrt(dist2)
        w = d / dist[:, None]
        cos_p = np.maximum(0.0, (nrm * w).sum(axis=1))
        cos_l = np.maximum(0.0, -(w @ n_l))
        contrib = cos_p * cos_l / dist2
        live = contrib > 0.0
        if np.any(live):
            blocked = _segment_hits(pts[live], ls[None, :], scene.surfaces)
            contrib[np.flatnonzero(live)[blocked]] = 0.0
        total += contrib
    return scene.light_power * sample_area * total


@dataclass
class _Transport:
    """Static world transport cached per scene."""

    patch_points: list           # (G*G, 3) per surface
    patch_direct: list           # (G*G,) per surface
    form_factor_rows: np.ndarray  # (n_patches, n_patches), row-normalized to <= 1
    indirect: list               # (G, G, K) per surface: one-bounce irradiance by color


def _patch_centers(rect: Rect) -> np.ndarray:
    g = (np.arange(PATCH_GRID) + 0.5) / PATCH_GRID
    uu, vv = np.meshgrid(g, g)
    return rect.point(uu.ravel(), vv.ravel())


def build_transport(scene: SyntheticScene) -> _Transport:
    """Patch-level direct light and the patch-to-patch one-bounce gather."""
    n_s = len(scene.surfaces)
    per = PATCH_GRID * PATCH_GRID
    points = [_patch_centers(r) for r in scene.surfaces]
    direct = [direct_irradiance(points[i], scene.surfaces[i].normal, scene)
              for i in range(n_s)]

    n_patches = n_s * per
    F = np.zeros((n_patches, n_patches))
    for i, ri in enumerate(scene.surfaces):
        qi = points[i]
        ni = ri.normal
        for j, rj in enumerate(scene.surfaces):
            if i == j:
                continue  # coplanar patches exchange nothing
            qj = points[j]
            nj = rj.normal
            area_j = rj.area / per
            d = qj[None, :, :] - qi[:, None, :]
            dist2 = np.maximum((d ** 2).sum(axis=2), _EPS)
            dist = np.sqrt(dist2)
            cos_i = np.maximum(0.0, np.tensordot(d, ni, axes=([2], [0])) / dist)
            cos_j = np.maximum(0.0, -np.tensordot(d, nj, axes=([2], [0])) / dist)
            f = cos_i * cos_j * area_j / (np.pi * dist2)
            live = f > 0.0
            if np.any(live):
                src = np.repeat(qi, per, axis=0)[live.ravel()]
                dst = np.tile(qj, (per, 1))[live.ravel()]
                blocked = _segment_hits(src, dst, scene.surfaces)
                f_flat = f.ravel()
                f_flat[np.flatnonzero(live.ravel())[blocked]] = 0.0
                f = f_flat.reshape(per, per)
            F[i * per:(i + 1) * per, j * per:(j + 1) * per] = f

    row_sums = F.sum(axis=1)
    over = row_sums > 1.0
    F[over] /= row_sums[over, None]

    E_all = np.concatenate(direct)
    indirect = []
    for i in range(n_s):
        rows = F[i * per:(i + 1) * per]
        gk = np.zeros((per, scene.K))
        for j, rj in enumerate(scene.surfaces):
            cols = slice(j * per, (j + 1) * per)
            gk[:, rj.color_id - 1] += rows[:, cols] @ E_all[cols]
        indirect.append(gk.reshape(PATCH_GRID, PATCH_GRID, scene.K))
    return _Transport(patch_points=points, patch_direct=direct,
                      form_factor_rows=F, indirect=indirect)


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian with edge-clamped borders, over the first two axes."""
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(img, [(radius, radius), (0, 0)] + [(0, 0)] * (img.ndim - 2),
                    mode="edge")
    out = np.zeros_like(img)
    for i, w in enumerate(kernel):
        out += w * padded[i:i + img.shape[0]]
    padded = np.pad(out, [(0, 0), (radius, radius)] + [(0, 0)] * (img.ndim - 2),
                    mode="edge")
    final = np.zeros_like(img)
    for i, w in enumerate(kernel):
        final += w * padded[:, i:i + img.shape[1]]
    return final


def _bilinear(grid: np.ndarray, gu: np.ndarray, gv: np.ndarray) -> np.ndarray:
    """Sample (G, G, K) grid at continuous (column, row) patch coordinates."""
    g = grid.shape[0]
    gu = np.clip(gu, 0.0, g - 1.0)
    gv = np.clip(gv, 0.0, g - 1.0)
    u0 = np.floor(gu).astype(int)
    v0 = np.floor(gv).astype(int)
    u1 = np.minimum(u0 + 1, g - 1)
    v1 = np.minimum(v0 + 1, g - 1)
    fu = (gu - u0)[:, None]
    fv = (gv - v0)[:, None]
    return ((1 - fv) * ((1 - fu) * grid[v0, u0] + fu * grid[v0, u1])
            + fv * ((1 - fu) * grid[v1, u0] + fu * grid[v1, u1]))


def render_scene(scene: SyntheticScene, seed: int = 0) -> GroundTruthBundle:
    """Render all frames with exact layer separation.

    The seed drives the per-frame flicker field only; with flicker off,
    rendering is fully deterministic.
    """
    rng = np.random.default_rng(seed)
    if not scene.surfaces:
        raise SceneError("scene has no surfaces")
    if any(r.color_id < 1 or r.color_id > scene.K for r in scene.surfaces):
        raise SceneError("surface color_id outside the scene palette")
    transport = build_transport(scene)
    dirs = scene.camera.rays(scene.width, scene.height)
    n = dirs.shape[0]

    frames, refl_list, t_list, label_list = [], [], [], []
    for fi in range(scene.n_frames):
        origin = scene.camera.at(fi)
        t_best = np.full(n, np.inf)
        hit_idx = np.full(n, -1, dtype=np.int64)
        for si, r in enumerate(scene.surfaces):
            denom = dirs[:, r.axis]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (r.offset - origin[r.axis]) / denom
            t = np.where(np.abs(denom) < _EPS, np.inf, t)
            ua, va = _AXIS_UV[r.axis]
            pu = origin[ua] + t * dirs[:, ua]
            pv = origin[va] + t * dirs[:, va]
            ok = ((t > 1e-6) & (t < t_best)
                  & (pu >= r.lo[0]) & (pu <= r.hi[0])
                  & (pv >= r.lo[1]) & (pv <= r.hi[1]))
            t_best[ok] = t[ok]
            hit_idx[ok] = si

        labels = np.zeros(n, dtype=np.int32)
        T = np.zeros((n, scene.K + 1))
        refl = np.zeros((n, 3))
        for si, r in enumerate(scene.surfaces):
            sel = hit_idx == si
            if not np.any(sel):
                continue
            pts = origin[None, :] + t_best[sel, None] * dirs[sel]
            labels[sel] = r.color_id
            refl[sel] = scene.palette[r.color_id - 1]
            T[sel, 0] = direct_irradiance(pts, r.normal, scene)
            ua, va = _AXIS_UV[r.axis]
            gu = (pts[:, ua] - r.lo[0]) / (r.hi[0] - r.lo[0]) * PATCH_GRID - 0.5
            gv = (pts[:, va] - r.lo[1]) / (r.hi[1] - r.lo[1]) * PATCH_GRID - 0.5
            T[sel, 1:] = _bilinear(transport.indirect[si], gu, gv)

        shape = (scene.height, scene.width)
        T = T.reshape(shape + (scene.K + 1,))
        refl = refl.reshape(shape + (3,))
        labels = labels.reshape(shape)
        if scene.soft_edges > 0.0:
            refl = _gaussian_blur(refl, scene.soft_edges)
            T = _gaussian_blur(T, scene.soft_edges)
        if scene.flicker > 0.0:
            # independent per-frame wobble of each transport layer: lamps
            # flicker and every bounce flickers with its own surface
            shimmer = 1.0 + scene.flicker * rng.uniform(-1.0, 1.0, size=scene.K + 1)
            T *= shimmer[None, None, :]
        B = np.vstack([np.ones((1, 3)), scene.palette])
        image = refl * np.tensordot(T, B, axes=([2], [0]))
        if image.max() > 1.0:
            raise SceneError(f"over-exposed scene: peak {image.max():.3f} > 1; "
                             "lower light_power")
        frames.append(Frame(np.ascontiguousarray(image)))
        refl_list.append(refl)
        t_list.append(T)
        label_list.append(labels)
    return GroundTruthBundle(frames=frames, reflectance=refl_list,
                             transport=t_list, labels=label_list,
                             palette=scene.palette.copy())


# ---------------------------------------------------------------------------
# Canned scenes
# ---------------------------------------------------------------------------

WHITE, RED, GREEN, BLUE = 1, 2, 3, 4
_PALETTE = np.array([
    [0.85, 0.85, 0.85],
    [0.75, 0.14, 0.12],
    [0.13, 0.72, 0.14],
    [0.12, 0.16, 0.75],
])


def default_scene(width: int = 128, height: int = 128,
                  n_frames: int = 30) -> SyntheticScene:
    """Open-top room under a small high sun: colored side walls, a blue
    poster on the back wall, and a white box whose shadow strip collects
    the green wall's bounce.

    The camera pans about two pixels per frame (at the back wall),
    reversing every eight frames so no new material ever enters the view.
    Mild per-layer flicker and soft edges keep the sequence from being
    unrealistically clean.
    """
    palette = np.array([
        [0.88, 0.88, 0.88],
        [0.72, 0.16, 0.12],
        [0.10, 0.85, 0.12],
        [0.14, 0.18, 0.80],
    ])
    bx0, bx1, bz0, bz1, bh = 2.6, 3.3, 1.0, 3.2, 1.6
    surfaces = [
        Rect(axis=1, offset=0.0, lo=(0.0, 0.0), hi=(4.0, 4.0), normal_sign=1, color_id=WHITE),
        Rect(axis=2, offset=0.0, lo=(0.0, 0.0), hi=(4.0, 6.0), normal_sign=1, color_id=WHITE),
        Rect(axis=0, offset=0.0, lo=(0.0, 0.0), hi=(6.0, 4.0), normal_sign=1, color_id=RED),
        Rect(axis=0, offset=4.0, lo=(0.0, 0.0), hi=(6.0, 4.0), normal_sign=-1, color_id=GREEN),
        # poster on the back wall: camera-facing and directly lit
        Rect(axis=2, offset=0.01, lo=(0.6, 0.0), hi=(1.9, 1.5), normal_sign=1, color_id=BLUE),
        # the box: front, top, left and right faces
        Rect(axis=2, offset=bz1, lo=(bx0, 0.0), hi=(bx1, bh), normal_sign=1, color_id=WHITE),
        Rect(axis=1, offset=bh, lo=(bx0, bz0), hi=(bx1, bz1), normal_sign=1, color_id=WHITE),
        Rect(axis=0, offset=bx0, lo=(0.0, bz0), hi=(bh, bz1), normal_sign=-1, color_id=WHITE),
        Rect(axis=0, offset=bx1, lo=(0.0, bz0), hi=(bh, bz1), normal_sign=1, color_id=WHITE),
    ]
    light = Rect(axis=1, offset=6.5, lo=(0.45, 2.15), hi=(0.95, 2.65), normal_sign=-1)
    step = 2.0 * (2.0 * 7.0 * np.tan(np.deg2rad(22.5))) / width
    camera = Camera(origin=(1.65, 1.5, 7.0), translate=(step, 0.0, 0.0),
                    fov_deg=45.0, pingpong=8)
    return SyntheticScene(width=width, height=height, n_frames=n_frames,
                          palette=palette, surfaces=surfaces,
                          light=light, light_power=64.0, camera=camera,
                          flicker=0.12, soft_edges=0.8)


def spill_scene(width: int = 128, height: int = 128,
                n_frames: int = 30) -> SyntheticScene:
    """Open-top room under a small high sun: a white box beside the bright
    green wall casts a shadow on the floor strip next to the wall.

    The strip loses its direct light but keeps a clear view of the fully
    lit wall, so it is bathed in green bounce: the canonical color-spill
    misclustering region (the box's shadow).
    """
    palette = np.array([
        [0.88, 0.88, 0.88],
        [0.70, 0.15, 0.12],
        [0.10, 0.85, 0.12],
        [0.45, 0.45, 0.45],
    ])
    white, red, green, gray = 1, 2, 3, 4
    bx0, bx1, bz0, bz1, bh = 2.6, 3.3, 1.0, 3.2, 1.6
    surfaces = [
        Rect(axis=1, offset=0.0, lo=(0.0, 0.0), hi=(4.0, 4.0), normal_sign=1, color_id=white),
        Rect(axis=2, offset=0.0, lo=(0.0, 0.0), hi=(4.0, 6.0), normal_sign=1, color_id=gray),
        Rect(axis=0, offset=0.0, lo=(0.0, 0.0), hi=(6.0, 4.0), normal_sign=1, color_id=red),
        Rect(axis=0, offset=4.0, lo=(0.0, 0.0), hi=(6.0, 4.0), normal_sign=-1, color_id=green),
        # the box: front, top, left and right faces (all white)
        Rect(axis=2, offset=bz1, lo=(bx0, 0.0), hi=(bx1, bh), normal_sign=1, color_id=white),
        Rect(axis=1, offset=bh, lo=(bx0, bz0), hi=(bx1, bz1), normal_sign=1, color_id=white),
        Rect(axis=0, offset=bx0, lo=(0.0, bz0), hi=(bh, bz1), normal_sign=-1, color_id=white),
        Rect(axis=0, offset=bx1, lo=(0.0, bz0), hi=(bh, bz1), normal_sign=1, color_id=white),
    ]
    light = Rect(axis=1, offset=6.5, lo=(0.45, 2.15), hi=(0.95, 2.65), normal_sign=-1)
    step = 2.0 * (2.0 * 7.0 * np.tan(np.deg2rad(22.5))) / width
    camera = Camera(origin=(1.65, 1.5, 7.0), translate=(step, 0.0, 0.0),
                    fov_deg=45.0, pingpong=8)
    return SyntheticScene(width=width, height=height, n_frames=n_frames,
                          palette=palette, surfaces=surfaces,
                          light=light, light_power=141.9, camera=camera)


# ---------------------------------------------------------------------------
# Bundle I/O
# ---------------------------------------------------------------------------

def save_bundle(out_dir: str | os.PathLike, bundle: GroundTruthBundle,
                scene: SyntheticScene | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(bundle.frames)
    manifest = {
        "n_frames": n,
        "K": int(bundle.palette.shape[0]),
        "palette": [[float(v) for v in c] for c in bundle.palette],
    }
    if scene is not None:
        manifest["scene"] = scene.to_json()
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    for i in range(n):
        tag = f"{i + 1:06d}"
        save_pfm(out / f"frame_{tag}.pfm", bundle.frames[i].data)
        save_png_preview(out / f"frame_{tag}.png", bundle.frames[i].data)
        save_pfm(out / f"reflectance_{tag}.pfm", bundle.reflectance[i])
        for k in range(bundle.transport[i].shape[2]):
            save_pfm(out / f"transport_{tag}_{k:02d}.pfm", bundle.transport[i][:, :, k])
        Image.fromarray(bundle.labels[i].astype(np.uint16)).save(out / f"labels_{tag}.png")


def load_bundle(in_dir: str | os.PathLike) -> GroundTruthBundle:
    src = Path(in_dir)
    with open(src / "manifest.json") as fh:
        manifest = json.load(fh)
    n = manifest["n_frames"]
    K = manifest["K"]
    frames, refl, transport, labels = [], [], [], []
    for i in range(n):
        tag = f"{i + 1:06d}"
        frames.append(frame_from_array(load_pfm(src / f"frame_{tag}.pfm")))
        refl.append(load_pfm(src / f"reflectance_{tag}.pfm"))
        T = np.stack([load_pfm(src / f"transport_{tag}_{k:02d}.pfm")
                      for k in range(K + 1)], axis=2)
        transport.append(T)
        labels.append(np.asarray(Image.open(src / f"labels_{tag}.png"), dtype=np.int32))
    return GroundTruthBundle(frames=frames, reflectance=refl, transport=transport,
                             labels=labels,
                             palette=np.array(manifest["palette"], dtype=np.float64))
