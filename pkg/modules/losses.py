"""
Losses and Metrics Module
Training objective (L1, SSIM, frequency reconstruction) and the
evaluation metrics PSNR, SSIM and residual maps
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from . import numerics as K
from .autodiff import Node, NodeLike
from .errors import DimensionError

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
DATA_RANGE = 2.0  # images live in [-1, 1]


@dataclass
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.05
    l1_weight: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "l1_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class LossReport:
    l1: float
    ssim_loss: float
    fr: float
    total: float
    weights: LossWeights
    node: Optional[Node] = None

    def as_dict(self) -> Dict[str, float]:
        return {"l1": self.l1, "ssim_loss": self.ssim_loss, "fr": self.fr, "total": self.total}


def _pair(sr: NodeLike, hr: NodeLike):
    sr, hr = ad.as_node(sr), ad.as_node(hr)
    if sr.shape != hr.shape:
        raise DimensionError(f"image shapes differ: {sr.shape} vs {hr.shape}")
    if len(sr.shape) != 3:
        raise DimensionError(f"images must be [C, H, W], got {sr.shape}")
    return sr, hr


# --------------------------------------------------------------------------
# Differentiable terms
# --------------------------------------------------------------------------

def l1_term(sr: NodeLike, hr: NodeLike) -> Node:
    sr, hr = _pair(sr, hr)
    return ad.mean(ad.absolute(ad.sub(sr, hr)))


def ssim_window(h: int, w: int) -> int:
    size = min(SSIM_WINDOW, h, w)
    return size if size % 2 else size - 1


def ssim_term(x: NodeLike, y: NodeLike) -> Node:
    """Mean local SSIM over 'valid' Gaussian windows"""
    x, y = _pair(x, y)
    _, h, w = x.shape
    size = ssim_window(h, w)
    taps = K.gaussian_taps(size, SSIM_SIGMA)
    gh = K.valid_filter_matrix(h, taps)
    gw = K.valid_filter_matrix(w, taps)
    c1 = (0.01 * DATA_RANGE) ** 2
    c2 = (0.03 * DATA_RANGE) ** 2

    def blur(t):
        return ad.separable(t, gh, gw)

    mu_x, mu_y = blur(x), blur(y)
    mu_xx, mu_yy, mu_xy = ad.mul(mu_x, mu_x), ad.mul(mu_y, mu_y), ad.mul(mu_x, mu_y)
    sigma_xx = ad.sub(blur(ad.mul(x, x)), mu_xx)
    sigma_yy = ad.sub(blur(ad.mul(y, y)), mu_yy)
    sigma_xy = ad.sub(blur(ad.mul(x, y)), mu_xy)

    num = ad.mul(ad.add(ad.mul(mu_xy, 2.0), c1), ad.add(ad.mul(sigma_xy, 2.0), c2))
    den = ad.mul(ad.add(ad.add(mu_xx, mu_yy), c1), ad.add(ad.add(sigma_xx, sigma_yy), c2))
    return ad.mean(ad.div(num, den))


def ssim_loss_term(sr: NodeLike, hr: NodeLike) -> Node:
    return ad.sub(1.0, ssim_term(sr, hr))


def fr_term(sr: NodeLike, hr: NodeLike) -> Node:
    """
    Frequency reconstruction loss

    Sum of |dRe| + |dIm| of the unnormalised spectrum difference, averaged
    over the C*H*W bins and divided by H*W.
    """
    sr, hr = _pair(sr, hr)
    c, h, w = sr.shape
    re, im = ad.fft2(ad.sub(sr, hr))
    total = ad.add(ad.sum_all(ad.absolute(re)), ad.sum_all(ad.absolute(im)))
    return ad.mul(total, 1.0 / (c * h * w * h * w))


def total_term(sr: NodeLike, hr: NodeLike, weights: Optional[LossWeights] = None) -> LossReport:
    weights = weights or LossWeights()
    l1 = l1_term(sr, hr)
    ssim = ssim_loss_term(sr, hr)
    fr = fr_term(sr, hr)
    total = ad.add(ad.add(ad.mul(l1, weights.l1_weight), ad.mul(ssim, weights.lambda1)),
                   ad.mul(fr, weights.lambda2))
    return LossReport(
        l1=float(l1.value),
        ssim_loss=float(ssim.value),
        fr=float(fr.value),
        total=float(total.value),
        weights=weights,
        node=total,
    )


# --------------------------------------------------------------------------
# Scalar API
# --------------------------------------------------------------------------

def l1_loss(sr, hr) -> float:
    return float(l1_term(sr, hr).value)


def ssim_index(x, y) -> float:
    return float(ssim_term(x, y).value)


def ssim_loss(sr, hr) -> float:
    return 1.0 - ssim_index(sr, hr)


def fr_loss(sr, hr) -> float:
    return float(fr_term(sr, hr).value)


def total_loss(sr, hr, weights: Optional[LossWeights] = None) -> LossReport:
    return total_term(sr, hr, weights)


def psnr(sr, hr, peak: float = 1.0) -> float:
    """PSNR in dB after remapping [-1, 1] to [0, 1]; identical images give inf"""
    sr, hr = _pair(sr, hr)
    a = (np.asarray(sr.value, dtype=np.float64) + 1.0) / 2.0
    b = (np.asarray(hr.value, dtype=np.float64) + 1.0) / 2.0
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def residual_map(sr, hr, normalize: bool = True) -> np.ndarray:
    """Per-pixel |sr - hr|, divided by its maximum unless all zero"""
    sr, hr = _pair(sr, hr)
    diff = np.abs(np.asarray(sr.value, dtype=np.float64) - np.asarray(hr.value, dtype=np.float64))
    if not normalize:
        return diff
    peak = diff.max()
    return diff / peak if peak > 0 else diff
