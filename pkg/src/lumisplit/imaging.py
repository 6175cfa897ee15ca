"""Frame I/O, chromaticity, log-domain conversion and discrete gradients.

Everything downstream works on linear-light float images in [0, 1].
8-bit sources are de-gamma'd with exponent 2.2 on load; float sources
(PFM) are taken as linear.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

GAMMA = 2.2
# Chromaticity is meaningless near zero intensity; pixels below this
# channel-sum are flagged dark and carry neutral chroma.
DARK_INTENSITY = 0.02
# Clamp before ln() so the log domain stays finite.
LOG_FLOOR = 1e-4

MIN_SIZE = 8


class FrameError(ValueError):
    """Bad frame contents (too small, wrong shape)."""


class FormatError(ValueError):
    """Unsupported or malformed image file."""


@dataclass(frozen=True)
class Frame:
    """A linear-light RGB image, channels in [0, 1]."""

    data: np.ndarray  # (H, W, 3) float64

    def __post_init__(self):
        d = self.data
        if d.ndim != 3 or d.shape[2] != 3:
            raise FrameError(f"expected (H, W, 3) array, got {d.shape}")
        if d.shape[0] < MIN_SIZE or d.shape[1] < MIN_SIZE:
            raise FrameError(f"frame too small: {d.shape[1]}x{d.shape[0]} (min {MIN_SIZE})")
        if not np.all(np.isfinite(d)):
            raise FrameError("frame contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ChromaticityImage:
    """Per-pixel (r, g) chroma, channel-sum intensity, and a dark-pixel flag."""

    chroma: np.ndarray     # (H, W, 2), r = R/(R+G+B), g = G/(R+G+B)
    intensity: np.ndarray  # (H, W), channel sum
    dark: np.ndarray       # (H, W) bool


@dataclass(frozen=True)
class GradientField:
    """Forward differences in x and y; zero on the far borders."""

    gx: np.ndarray
    gy: np.ndarray


def frame_from_array(data: np.ndarray) -> Frame:
    """Build a Frame from any float array, clamping channels into [0, 1]."""
    return Frame(np.clip(np.asarray(data, dtype=np.float64), 0.0, 1.0))


def load_frame(path: str | os.PathLike) -> Frame:
    """Load a PNG (8-bit, de-gamma'd) or PFM (linear float) frame."""
    path = Path(path)
    if not path.exists():
        raise IOError(f"no such file: {path}")
    suffix = path.suffix.lower()
    if suffix == ".png":
        try:
            img = Image.open(path)
            img = img.convert("RGB")
        except Exception as exc:
            raise IOError(f"unreadable PNG {path}: {exc}") from exc
        arr = np.asarray(img, dtype=np.float64) / 255.0
        return frame_from_array(arr ** GAMMA)
    if suffix == ".pfm":
        arr = load_pfm(path)
        if arr.ndim == 2:
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        return frame_from_array(arr)
    raise FormatError(f"unsupported frame format: {path.suffix!r}")


def save_png_preview(path: str | os.PathLike, data: np.ndarray, scale: float = 1.0) -> None:
    """Write an 8-bit PNG preview, re-applying the display gamma.

    `scale` brightens before encoding (used to scale indirect layers 2x
    for previews only; the PFM data stays at true magnitude).
    """
    arr = np.clip(np.asarray(data, dtype=np.float64) * scale, 0.0, 1.0)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    encoded = np.round((arr ** (1.0 / GAMMA)) * 255.0).astype(np.uint8)
    Image.fromarray(encoded, mode="RGB").save(path)


def load_pfm(path: str | os.PathLike) -> np.ndarray:
    """Read a PFM file (color 'PF' or grayscale 'Pf') into float64."""
    with open(path, "rb") as fh:
        header = fh.readline().rstrip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise FormatError(f"not a PFM file: {path}")
        dims = fh.readline().decode("ascii")
        m = re.match(r"^(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise FormatError(f"malformed PFM dimensions in {path}")
        width, height = int(m.group(1)), int(m.group(2))
        scale = float(fh.readline().decode("ascii").strip())
        endian = "<" if scale < 0 else ">"
        count = width * height * channels
        raw = np.frombuffer(fh.read(count * 4), dtype=endian + "f4")
        if raw.size != count:
            raise FormatError(f"truncated PFM data in {path}")
    shape = (height, width, 3) if channels == 3 else (height, width)
    # PFM rows are stored bottom-to-top.
    return np.flipud(raw.reshape(shape)).astype(np.float64)


def save_pfm(path: str | os.PathLike, data: np.ndarray) -> None:
    """Write float data as little-endian PFM (scale header -1.0)."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF"
    elif arr.ndim == 2:
        header = b"Pf"
    else:
        raise FormatError(f"cannot write PFM for shape {arr.shape}")
    height, width = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{width} {height}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.flipud(arr).astype("<f4").tobytes())


def chromaticity(frame: Frame) -> ChromaticityImage:
    """Intensity-normalized color: (r, g) = (R, G) / (R+G+B).

    Dark pixels (channel sum below DARK_INTENSITY) are flagged and get
    the neutral chroma (1/3, 1/3).
    """
    intensity = frame.data.sum(axis=2)
    dark = intensity < DARK_INTENSITY
    safe = np.where(dark, 1.0, intensity)
    chroma = frame.data[:, :, :2] / safe[:, :, None]
    chroma[dark] = 1.0 / 3.0
    return ChromaticityImage(chroma=chroma, intensity=intensity, dark=dark)


def chroma_of_color(color: np.ndarray) -> np.ndarray:
    """(r, g) chroma of RGB colors along the last axis; neutral for near-black."""
    color = np.asarray(color, dtype=np.float64)
    total = color.sum(axis=-1, keepdims=True)
    out = np.divide(color[..., :2], total, out=np.full_like(color[..., :2], 1.0 / 3.0),
                    where=total > 1e-12)
    return out


def log_reflectance(values: np.ndarray) -> np.ndarray:
    """Element-wise natural log with inputs clamped to LOG_FLOOR."""
    return np.log(np.maximum(np.asarray(values, dtype=np.float64), LOG_FLOOR))


def gradient(image: np.ndarray) -> GradientField:
    """Forward differences along x (axis 1) and y (axis 0), zero at the far edge."""
    img = np.asarray(image, dtype=np.float64)
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, :-1, ...] = img[:, 1:, ...] - img[:, :-1, ...]
    gy[:-1, :, ...] = img[1:, :, ...] - img[:-1, :, ...]
    return GradientField(gx=gx, gy=gy)
