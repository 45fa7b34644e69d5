"""Image primitives: bicubic resampling, grayscale conversion, PSNR/SSIM, PNG IO.

Images are float arrays of shape (H, W, 3) or (H, W) with values in [0, 1].
All functions are pure.
"""

from __future__ import annotations

import functools
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .errors import ContractError, DimensionError

CUBIC_A = -0.5
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def cubic_kernel(x, a=CUBIC_A):
    """Keys cubic convolution kernel; ``a=-0.5`` gives Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def cubic_weights(phase):
    """Weights of the four taps at offsets -1, 0, 1, 2 for a fractional position."""
    return cubic_kernel(phase + np.array([1.0, 0.0, -1.0, -2.0]))


@functools.lru_cache(maxsize=64)
def resample_matrix(n_in, n_out):
    """(n_out, n_in) bicubic interpolation matrix with half-pixel centers
    and clamp-to-edge boundaries. Rows sum to 1."""
    if n_in < 1 or n_out < 1:
        raise DimensionError(f"resample sizes must be positive, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(int)
    phase = src - base
    for k, offset in enumerate((-1, 0, 1, 2)):
        taps = np.clip(base + offset, 0, n_in - 1)
        np.add.at(m, (np.arange(n_out), taps), cubic_kernel(phase - offset))
    m.flags.writeable = False
    return m


def resample(arr, out_h, out_w):
    """Separable bicubic resampling of the two leading axes, no clamping.

    Works for any trailing channel layout; used for images and for
    positional-embedding grids.
    """
    arr = np.asarray(arr)
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"target size must be positive, got {out_h}x{out_w}")
    rows = resample_matrix(arr.shape[0], out_h)
    cols = resample_matrix(arr.shape[1], out_w)
    out = np.tensordot(rows, arr.astype(np.float64), axes=(1, 0))
    out = np.moveaxis(np.tensordot(cols, out, axes=(1, 1)), 0, 1)
    return out


def bicubic_resize(img, out_h, out_w):
    """Catmull-Rom resize of an (H, W[, C]) image, clamped to [0, 1]."""
    out = resample(img, out_h, out_w)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def rgb_to_gray(img):
    """Rec.601 luma of an (H, W, 3) image."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise DimensionError(f"expected (H, W, 3) image, got {img.shape}")
    gray = img.astype(np.float64) @ np.array(LUMA_WEIGHTS)
    return np.clip(gray, 0.0, 1.0).astype(np.float32)


def _check_pair(x, y):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, max_value=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    x, y = _check_pair(x, y)
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(max_value ** 2 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    coords = np.arange(size) - (size - 1) / 2
    g = np.exp(-coords ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def ssim_map(x, y, window=SSIM_WINDOW, sigma=SSIM_SIGMA, data_range=1.0):
    """Local SSIM over every fully-contained Gaussian window of 2-d images."""
    x, y = _check_pair(x, y)
    if min(x.shape[:2]) < window:
        raise ContractError(f"image {x.shape[:2]} smaller than the {window}px SSIM window")
    g = gaussian_window(window, sigma)
    kernel = np.outer(g, g)

    def filt(a):
        return np.tensordot(sliding_window_view(a, (window, window)), kernel, axes=2)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x ** 2
    var_y = filt(y * y) - mu_y ** 2
    cov = filt(x * y) - mu_x * mu_y
    return ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / \
        ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))


def ssim(x, y, window=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Mean SSIM, computed per channel and averaged for (H, W, C) images."""
    x, y = _check_pair(x, y)
    if x.ndim == 2:
        return float(ssim_map(x, y, window, sigma).mean())
    return float(np.mean([ssim_map(x[..., c], y[..., c], window, sigma).mean()
                          for c in range(x.shape[-1])]))


def luma_psnr(x, y):
    return psnr(rgb_to_gray(x), rgb_to_gray(y))


def luma_ssim(x, y):
    return ssim(rgb_to_gray(x), rgb_to_gray(y))


def read_png(path):
    """Read an image as float32 (H, W, 3) in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def to_uint8(img):
    img = np.asarray(img, dtype=np.float64)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img):
    Image.fromarray(to_uint8(img)).save(path, format="PNG")
