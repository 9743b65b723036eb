"""Seedable stochastic view-pair generation for grayscale images.

Each source image yields two independently transformed views. All
primitives operate on [0,1] float arrays and the chain ends with a clamp,
so views always stay in range. Randomness is counter-based: a view's
stream is derived from (seed, epoch, sample index, branch), which makes
augmentation deterministic and independent of evaluation order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .tensor import DTYPE, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentPolicy:
    """Per-transform probabilities and parameter ranges (desk defaults)."""

    hflip_p: float = 0.5
    rotate_deg: float = 10.0
    crop_scale: tuple[float, float] = (0.6, 1.0)
    out_size: int = 32
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    brightness: float = 0.2
    contrast: float = 0.2
    solarize_p: float = 0.1
    solarize_threshold: float = 0.5

    def __post_init__(self):
        for p in (self.hflip_p, self.blur_p, self.solarize_p):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0,1]")
        lo, hi = self.crop_scale
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop scale range {self.crop_scale} must sit within (0,1]")

    @staticmethod
    def identity(out_size: int = 32) -> "AugmentPolicy":
        """No-op policy (modulo resize): useful for tests and baselines."""
        return AugmentPolicy(
            hflip_p=0.0, rotate_deg=0.0, crop_scale=(1.0, 1.0), out_size=out_size,
            blur_p=0.0, blur_sigma=(0.1, 0.1), brightness=0.0, contrast=0.0,
            solarize_p=0.0,
        )


@dataclass
class ViewPair:
    """Two augmented views of one source image plus the stream seeds used."""

    v: Tensor
    v_prime: Tensor
    seeds: tuple[tuple[int, ...], tuple[int, ...]]


# ----------------------------------------------------------------------
# primitives (2-D [h,w] arrays in [0,1])
# ----------------------------------------------------------------------

def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center, bilinear sampling, zero padding."""
    if degrees == 0.0:
        return img.copy()
    h, w = img.shape
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    if K.HAVE_NUMBA:
        return K._bilinear_rotate(img, np.float32(cos_t), np.float32(sin_t))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float32), np.arange(w, dtype=np.float32),
                         indexing="ij")
    # inverse map: output pixel samples the input at the back-rotated point
    sy = cos_t * (ys - cy) + sin_t * (xs - cx) + cy
    sx = -sin_t * (ys - cy) + cos_t * (xs - cx) + cx
    return _bilinear_sample(img, sy, sx)


def _bilinear_sample(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    h, w = img.shape
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1, x1 = y0 + 1, x0 + 1
    wy = (sy - y0).astype(np.float32)
    wx = (sx - x0).astype(np.float32)

    def fetch(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(valid, vals, 0.0).astype(np.float32)

    top = fetch(y0, x0) * (1 - wx) + fetch(y0, x1) * wx
    bot = fetch(y1, x0) * (1 - wx) + fetch(y1, x1) * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling; exact copy when the
    size is unchanged."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    if K.HAVE_NUMBA:
        return K._bilinear_resize(img, out_h, out_w)
    sy = np.linspace(0, h - 1, out_h, dtype=np.float32)[:, None] * np.ones((1, out_w), np.float32)
    sx = np.ones((out_h, 1), np.float32) * np.linspace(0, w - 1, out_w, dtype=np.float32)[None, :]
    return _bilinear_sample(img, sy, sx)


def random_resized_crop(img: np.ndarray, scale: tuple[float, float], out_size: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Crop a random area fraction (square window) and resize to out_size."""
    h, w = img.shape
    frac = float(rng.uniform(scale[0], scale[1]))
    side = int(round(math.sqrt(frac) * min(h, w)))
    side = max(1, side)
    if side > min(h, w):
        logger.warning("crop side %d exceeds image %dx%d; falling back to full-image crop",
                       side, h, w)
        side = min(h, w)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    crop = img[top:top + side, left:left + side]
    return resize_bilinear(crop, out_size, out_size)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur with a truncated discrete Gaussian (radius
    ceil(2*sigma)), normalized to sum 1; edges replicate."""
    radius = int(math.ceil(2 * sigma))
    if radius < 1:
        return img.copy()
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    kernel = (kernel / kernel.sum()).astype(np.float32)
    if K.HAVE_NUMBA:
        return K._blur_separable(img, kernel)
    padded = np.pad(img, ((radius, radius), (0, 0)), mode="edge")
    rows = sum(kernel[i] * padded[i:i + img.shape[0], :] for i in range(2 * radius + 1))
    padded = np.pad(rows, ((0, 0), (radius, radius)), mode="edge")
    return sum(kernel[i] * padded[:, i:i + img.shape[1]] for i in range(2 * radius + 1)).astype(np.float32)


def intensity_jitter(img: np.ndarray, brightness_delta: float, contrast_delta: float) -> np.ndarray:
    """Additive brightness then contrast scaling about the image mean."""
    out = img + np.float32(brightness_delta)
    mean = out.mean(dtype=np.float32)
    return ((out - mean) * np.float32(1.0 + contrast_delta) + mean).astype(np.float32)


def solarize(img: np.ndarray, threshold: float) -> np.ndarray:
    """Invert values at or above the threshold."""
    return np.where(img >= threshold, 1.0 - img, img).astype(np.float32)


# ----------------------------------------------------------------------
# the view chain
# ----------------------------------------------------------------------

def _one_view(img: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    out = random_resized_crop(img, policy.crop_scale, policy.out_size, rng)
    if rng.uniform() < policy.hflip_p:
        out = hflip(out)
    if policy.rotate_deg > 0:
        out = rotate(out, float(rng.uniform(-policy.rotate_deg, policy.rotate_deg)))
    if rng.uniform() < policy.blur_p:
        out = gaussian_blur(out, float(rng.uniform(*policy.blur_sigma)))
    if policy.brightness > 0 or policy.contrast > 0:
        b = float(rng.uniform(-policy.brightness, policy.brightness))
        c = float(rng.uniform(-policy.contrast, policy.contrast))
        out = intensity_jitter(out, b, c)
    if rng.uniform() < policy.solarize_p:
        out = solarize(out, policy.solarize_threshold)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def stream_key(seed: int, epoch: int, sample_index: int, branch: int) -> tuple[int, ...]:
    return (int(seed), int(epoch), int(sample_index), int(branch))


def make_views(image: Tensor, policy: AugmentPolicy, seed: int,
               epoch: int = 0, sample_index: int = 0) -> ViewPair:
    """Draw two independent views of one [1,H,W] image.

    Each branch owns a sub-stream keyed by (seed, epoch, sample_index,
    branch), so the pair is reproducible and the first view's draws never
    shift the second view's."""
    img = image.data[0] if image.ndim == 3 else image.data
    key_v = stream_key(seed, epoch, sample_index, 0)
    key_vp = stream_key(seed, epoch, sample_index, 1)
    v = _one_view(img, policy, np.random.default_rng(key_v))
    vp = _one_view(img, policy, np.random.default_rng(key_vp))
    return ViewPair(
        v=Tensor(v[None, :, :].astype(DTYPE)),
        v_prime=Tensor(vp[None, :, :].astype(DTYPE)),
        seeds=(key_v, key_vp),
    )
