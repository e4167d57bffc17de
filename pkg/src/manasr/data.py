"""Clip synthesis, PNG sequence I/O, the 4x degradation protocol, and
PSNR/SSIM metrics.

Synthetic clips are analytic patterns translated by a fixed per-frame
velocity, rendered at high resolution and bicubic-downsampled, so motion is
subpixel-exact and every clip is reproducible from its spec.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .ops import bicubic_downsample

PATTERNS = ("checker", "stripes", "noise", "dots")


class DataError(ValueError):
    """Bad image data or an invalid clip recipe."""


@dataclass
class SynthSpec:
    """Recipe for one synthetic clip.

    velocity is in HR pixels per frame and may exceed the 4 px reach of the
    9x9 attention window (the large-motion case).
    """

    pattern: str = "stripes"
    hr_size: tuple[int, int] = (64, 64)
    frames: int = 7
    velocity: tuple[float, float] = (4.0, 2.0)
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise DataError(f"unknown pattern {self.pattern!r}, choose from {PATTERNS}")
        h, w = self.hr_size
        if h % 4 or w % 4 or h < 4 or w < 4:
            raise DataError(f"hr_size must be divisible by 4, got {self.hr_size}")
        if self.frames % 2 == 0 or self.frames < 1:
            raise DataError(f"frames must be odd and >= 1, got {self.frames}")
        if not np.all(np.isfinite(self.velocity)):
            raise DataError("velocity must be finite")

    @property
    def identifier(self) -> str:
        vx, vy = self.velocity
        return f"{self.pattern}-s{self.seed}-v{vx:g}x{vy:g}"


@dataclass
class Clip:
    """One training/eval sample: T LR frames plus the HR center frame."""

    lr_frames: np.ndarray  # (T, 3, H, W) float32 in [0,1]
    hr_center: np.ndarray  # (3, 4H, 4W) float32 in [0,1]
    identifier: str = "clip"

    def __post_init__(self):
        lr, hr = self.lr_frames, self.hr_center
        if lr.ndim != 4 or lr.shape[1] != 3:
            raise DataError(f"lr_frames must be (T, 3, H, W), got {lr.shape}")
        if lr.shape[0] % 2 == 0:
            raise DataError(f"frame count must be odd, got {lr.shape[0]}")
        if hr.shape != (3, 4 * lr.shape[2], 4 * lr.shape[3]):
            raise DataError(
                f"hr_center {hr.shape} is not 4x the lr size {lr.shape[2:]}"
            )
        for name, a in (("lr_frames", lr), ("hr_center", hr)):
            if not np.all(np.isfinite(a)):
                raise DataError(f"{name} contains non-finite values")
            if a.min() < 0.0 or a.max() > 1.0:
                raise DataError(f"{name} values outside [0, 1]")

    @property
    def frames(self) -> int:
        return self.lr_frames.shape[0]


# ---------------------------------------------------------------------------
# analytic patterns
#
# Each pattern maps translated HR pixel coordinates (u, v) to RGB in [0,1].
# Coordinates are continuous, so any velocity renders exactly.


def _pattern_checker(u, v, rng):
    cell = (np.floor(u / 8.0) + np.floor(v / 8.0)) % 2.0
    return np.stack([0.2 + 0.6 * cell, 0.8 - 0.6 * cell, 0.35 + 0.3 * cell])


def _pattern_stripes(u, v, rng):
    theta = np.deg2rad(30.0)
    s = (u * np.cos(theta) + v * np.sin(theta)) * (2.0 * np.pi / 12.0)
    return np.stack(
        [
            0.5 + 0.45 * np.sin(s),
            0.5 + 0.45 * np.sin(s + 2.1),
            0.5 + 0.45 * np.sin(0.5 * s + 4.2),
        ]
    )


def _pattern_noise(u, v, rng):
    # band-limited random field pushed through a soft threshold; reads as
    # glyph-like blobs and stays broadband for motion estimation
    out = []
    for _ in range(3):
        z = np.zeros_like(u)
        for _ in range(8):
            fx, fy = rng.uniform(-0.9, 0.9, size=2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            z = z + rng.uniform(0.4, 1.0) * np.sin(fx * u + fy * v + phase)
        out.append(1.0 / (1.0 + np.exp(-2.0 * z)))
    return np.stack(out)


def _pattern_dots(u, v, rng):
    pitch, sigma = 16.0, 2.5
    du = u - pitch * np.round(u / pitch)
    dv = v - pitch * np.round(v / pitch)
    bump = np.exp(-(du * du + dv * dv) / (2.0 * sigma * sigma))
    grad = 0.5 + 0.5 * np.sin(2.0 * np.pi * (u + 0.5 * v) / 160.0)
    return np.stack([0.15 + 0.8 * bump, 0.2 + 0.5 * grad, 0.9 - 0.7 * bump])


_RENDERERS = {
    "checker": _pattern_checker,
    "stripes": _pattern_stripes,
    "noise": _pattern_noise,
    "dots": _pattern_dots,
}


def render_hr_frames(spec: SynthSpec) -> np.ndarray:
    """All T translated HR frames, (T, 3, Hhr, Whr) float32 in [0,1]."""
    h, w = spec.hr_size
    t_len = spec.frames
    center = (t_len - 1) // 2
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    frames = []
    for t in range(t_len):
        # the pattern's own rng must not depend on t: same field, moved
        rng = np.random.default_rng(spec.seed)
        off = t - center
        u = xs - off * spec.velocity[0]
        v = ys - off * spec.velocity[1]
        img = _RENDERERS[spec.pattern](u, v, rng)
        frames.append(np.clip(img, 0.0, 1.0))
    return np.stack(frames).astype(np.float32)


def degrade(hr_frames: np.ndarray, scale: int = 4) -> np.ndarray:
    """Per-frame bicubic downsample, clamped to [0,1]. (T,3,4H,4W)->(T,3,H,W)."""
    hr_frames = np.asarray(hr_frames)
    if hr_frames.ndim != 4:
        raise DataError(f"expected (T, 3, H, W) frames, got shape {hr_frames.shape}")
    if hr_frames.shape[2] % scale or hr_frames.shape[3] % scale:
        raise DataError(
            f"frame size {hr_frames.shape[2:]} not divisible by scale {scale}"
        )
    lr = [bicubic_downsample(f, scale) for f in hr_frames]
    return np.clip(np.stack(lr), 0.0, 1.0)


def synth_clip(spec: SynthSpec) -> Clip:
    hr = render_hr_frames(spec)
    lr = degrade(hr).astype(np.float32)
    center = (spec.frames - 1) // 2
    return Clip(lr_frames=lr, hr_center=hr[center], identifier=spec.identifier)


# ---------------------------------------------------------------------------
# PNG sequences


def png_names(directory) -> list[str]:
    """Lexicographically sorted PNG filenames in ``directory``."""
    try:
        names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".png"))
    except OSError as e:
        raise DataError(f"cannot list {directory}: {e}") from e
    if not names:
        raise DataError(f"no PNG files in {directory}")
    return names


def load_frames(directory) -> np.ndarray:
    """All PNGs in ``directory`` in lexicographic order as (N,3,H,W) in [0,1]."""
    names = png_names(directory)
    frames = []
    shape = None
    for name in names:
        path = os.path.join(directory, name)
        try:
            img = Image.open(path)
            img.load()
        except OSError as e:
            raise DataError(f"unreadable image {path}: {e}") from e
        if img.mode != "RGB":
            raise DataError(f"{path}: expected 8-bit RGB, got mode {img.mode}")
        arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise DataError(
                f"{path}: size {arr.shape[1:]} differs from first frame {shape[1:]}"
            )
        frames.append(arr)
    return np.stack(frames)


def load_png_sequence(lr_dir, t_len: int, hr_dir=None, identifier=None) -> Clip:
    """Center-window Clip from a directory of LR PNGs (HR optional)."""
    frames = load_frames(lr_dir)
    n = frames.shape[0]
    if n < t_len:
        raise DataError(f"insufficient frames in {lr_dir}: have {n}, need {t_len}")
    start = (n - t_len) // 2
    lr = frames[start : start + t_len]
    if identifier is None:
        identifier = os.path.basename(os.path.normpath(lr_dir))
    if hr_dir is None:
        h, w = lr.shape[2:]
        hr_center = np.zeros((3, 4 * h, 4 * w), dtype=np.float32)
        return Clip(lr, hr_center, identifier)
    hr_frames = load_frames(hr_dir)
    if hr_frames.shape[0] != n:
        raise DataError(
            f"unpaired data: {n} LR frames vs {hr_frames.shape[0]} HR frames"
        )
    center = start + (t_len - 1) // 2
    return Clip(lr, hr_frames[center], identifier)


def save_png(path, image: np.ndarray) -> None:
    """Clamp to [0,1], quantize to 8-bit, write (3,H,W) as RGB PNG."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"expected (3, H, W) image, got {image.shape}")
    q = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path)


# ---------------------------------------------------------------------------
# metrics


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """10*log10(max^2/MSE) over all values; identical images cap at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 100.0
    return min(100.0, 10.0 * np.log10(max_val * max_val / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable correlation with no padding; (H,W) -> (H-k+1, W-k+1)."""
    k = len(w)
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=1) @ w
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=0) @ w


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM, 11x11 Gaussian window sigma=1.5, K1=0.01, K2=0.03,
    dynamic range 1.0; computed per channel on valid windows, then averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    if a.ndim != 3:
        raise DataError(f"expected (C, H, W) image, got {a.shape}")
    size = 11
    if a.shape[1] < size or a.shape[2] < size:
        raise DataError(f"image {a.shape[1:]} smaller than the {size}x{size} window")
    w = _gaussian_window(size, 1.5)
    c1 = (0.01 * 1.0) ** 2
    c2 = (0.03 * 1.0) ** 2
    vals = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mx = _filter_valid(x, w)
        my = _filter_valid(y, w)
        vx = _filter_valid(x * x, w) - mx * mx
        vy = _filter_valid(y * y, w) - my * my
        cov = _filter_valid(x * y, w) - mx * my
        num = (2.0 * mx * my + c1) * (2.0 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))
