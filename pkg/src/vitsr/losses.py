"""Training objective: weighted L1 + (1 - SSIM) on batched (B, 3, H, W) tensors."""

from __future__ import annotations

import dataclasses
import functools

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, ContractError, DimensionError
from .imageops import SSIM_K1, SSIM_K2, gaussian_window


@dataclasses.dataclass(frozen=True)
class LossConfig:
    lam: float = 0.2
    ssim_window: int = 11
    ssim_sigma: float = 1.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"loss weight lambda must be in [0, 1], got {self.lam}")


def _check(pred, target):
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")


def l1_loss(pred, target):
    pred, target = dc.as_tensor(pred), dc.as_tensor(target)
    _check(pred, target)
    return dc.mean(dc.abs(pred - target))


@functools.lru_cache(maxsize=32)
def _band(n, window, sigma):
    # (n - window + 1, n) matrix whose rows slide the 1-d Gaussian across the axis
    g = gaussian_window(window, sigma)
    m = np.zeros((n - window + 1, n))
    for i in range(m.shape[0]):
        m[i, i:i + window] = g
    return m


def _blur(x, rows, cols):
    # valid-mode separable Gaussian filter over the last two axes
    out = dc.linear(x, cols)
    out = dc.linear(dc.transpose(out, (0, 1, 3, 2)), rows)
    return dc.transpose(out, (0, 1, 3, 2))


def ssim_loss_term(pred, target, cfg=LossConfig()):
    """Differentiable mean SSIM (per channel, valid windows), matching
    :func:`vitsr.imageops.ssim` on the same data."""
    pred, target = dc.as_tensor(pred), dc.as_tensor(target)
    _check(pred, target)
    if pred.ndim != 4:
        raise DimensionError(f"expected (B, C, H, W) tensors, got {pred.shape}")
    h, w = pred.shape[-2:]
    if min(h, w) < cfg.ssim_window:
        raise ContractError(f"images {h}x{w} smaller than the {cfg.ssim_window}px SSIM window")
    rows = dc.Tensor(_band(h, cfg.ssim_window, cfg.ssim_sigma))
    cols = dc.Tensor(_band(w, cfg.ssim_window, cfg.ssim_sigma))
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2

    mu_x, mu_y = _blur(pred, rows, cols), _blur(target, rows, cols)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = _blur(pred * pred, rows, cols) - mu_xx
    var_y = _blur(target * target, rows, cols) - mu_yy
    cov = _blur(pred * target, rows, cols) - mu_xy
    num = (2.0 * mu_xy + c1) * (2.0 * cov + c2)
    den = (mu_xx + mu_yy + c1) * (var_x + var_y + c2)
    return dc.mean(num / den)


def composite_loss(pred, target, cfg=LossConfig()):
    """``(1 - lam) * L1 + lam * (1 - SSIM)``; a zero-weighted term is skipped."""
    lam = cfg.lam
    if lam == 0.0:
        return l1_loss(pred, target)
    if lam == 1.0:
        return 1.0 - ssim_loss_term(pred, target, cfg)
    return (1.0 - lam) * l1_loss(pred, target) + lam * (1.0 - ssim_loss_term(pred, target, cfg))
