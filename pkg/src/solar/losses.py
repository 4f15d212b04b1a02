"""Training objectives and image-quality metrics."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 100.0


@dataclass(frozen=True)
class LossWeights:
    lambda_ssim: float = 0.2
    lambda_e: float = 0.004
    lambda_s: float = 0.01

    def __post_init__(self):
        if min(self.lambda_ssim, self.lambda_e, self.lambda_s) < 0 or self.lambda_ssim >= 1:
            raise ValueError("loss weights must be >= 0 and lambda_ssim < 1")


def _check_dims(a, b):
    if ad.as_tensor(a).shape != ad.as_tensor(b).shape:
        raise ValueError(f"image shape mismatch: {ad.as_tensor(a).shape} vs {ad.as_tensor(b).shape}")


def _wrap(out: ad.Tensor, *inputs):
    return out if any(isinstance(x, ad.Tensor) for x in inputs) else float(out.value)


def l1_loss(a, b):
    _check_dims(a, b)
    return _wrap(ad.absolute(ad.as_tensor(a) - ad.as_tensor(b)).mean(), a, b)


@lru_cache(maxsize=None)
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


@lru_cache(maxsize=None)
def _blur_matrix(n: int, size: int = SSIM_WINDOW) -> np.ndarray:
    g = gaussian_window(size)
    m = np.zeros((n - size + 1, n))
    for i in range(n - size + 1):
        m[i, i:i + size] = g
    return m


def _blur(img: ad.Tensor, mh: np.ndarray, mw: np.ndarray) -> ad.Tensor:
    return ad.einsum("iwc,jw->ijc", ad.einsum("ih,hwc->iwc", mh, img), mw)


def ssim(a, b):
    """Mean SSIM over all full 11x11 windows, per channel then averaged."""
    _check_dims(a, b)
    ta, tb = ad.as_tensor(a), ad.as_tensor(b)
    h, w = ta.shape[0], ta.shape[1]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    mh, mw = _blur_matrix(h), _blur_matrix(w)
    mu_a, mu_b = _blur(ta, mh, mw), _blur(tb, mh, mw)
    s_aa = _blur(ta * ta, mh, mw) - mu_a * mu_a
    s_bb = _blur(tb * tb, mh, mw) - mu_b * mu_b
    s_ab = _blur(ta * tb, mh, mw) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * s_ab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (s_aa + s_bb + SSIM_C2)
    return _wrap((num / den).mean(), a, b)


def rendering_loss(pred, gt, w: LossWeights = LossWeights()):
    """(1 - lambda_ssim) * L1 + lambda_ssim * (1 - SSIM)."""
    l1 = ad.as_tensor(l1_loss(ad.as_tensor(pred), gt))
    if w.lambda_ssim == 0:
        return _wrap(l1, pred)
    d_ssim = 1.0 - ad.as_tensor(ssim(ad.as_tensor(pred), gt))
    return _wrap(l1 * (1.0 - w.lambda_ssim) + d_ssim * w.lambda_ssim, pred)


def sparsity_loss(scores):
    """Mean soft activation of the anchors."""
    t = ad.as_tensor(scores)
    if t.size == 0:
        raise ValueError("sparsity loss of an empty anchor set")
    return _wrap(ad.sigmoid(t).mean(), scores)


def total_loss(render_l, entropy_l, sparsity_l, w: LossWeights = LossWeights()):
    out = ad.as_tensor(render_l)
    if entropy_l is not None and w.lambda_e:
        out = out + ad.as_tensor(entropy_l) * w.lambda_e
    if sparsity_l is not None and w.lambda_s:
        out = out + ad.as_tensor(sparsity_l) * w.lambda_s
    return _wrap(out, render_l, entropy_l, sparsity_l)


def mse(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.mean((a - b) ** 2))


def psnr(pred, gt) -> float:
    """PSNR in dB for [0,1] images; identical images give the 100 dB cap."""
    m = mse(pred, gt)
    if m == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / m), PSNR_CAP))
