"""Image quality metrics: PSNR, windowed SSIM, and validation accuracy.

PSNR quantizes both inputs to the 8-bit lattice first, so comparisons
against PNG-round-tripped references are symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve

from .errors import ContractError
from .scenes import quantize8

PSNR_CAP_DB = 99.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01**2
_SSIM_C2 = 0.03**2


def _as_rgb(image):
    arr = image.rgba if hasattr(image, "rgba") else np.asarray(image)
    if arr.ndim == 3 and arr.shape[2] >= 3:
        return arr[..., :3].astype(np.float64)
    raise ContractError("expected an RGB(A) image array")


def psnr(a, b, mask=None):
    """Peak signal-to-noise ratio in dB over RGB, capped at 99 dB.

    `mask` restricts the mean to pixels where it is nonzero (e.g. an alpha
    channel for foreground-only comparison).
    """
    ia, ib = _as_rgb(a), _as_rgb(b)
    if ia.shape != ib.shape:
        raise ContractError(f"image shapes differ: {ia.shape} vs {ib.shape}")
    ia, ib = quantize8(ia), quantize8(ib)
    err = (ia - ib) ** 2
    if mask is not None:
        sel = np.asarray(mask) > 0
        if not np.any(sel):
            return PSNR_CAP_DB
        err = err[sel]
    mse = float(np.mean(err))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * np.log10(mse))


def _gaussian_kernel2d(size, sigma):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b):
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Computed per channel on [0, 1] dynamic range and averaged. Images must
    be at least as large as the window.
    """
    ia, ib = _as_rgb(a), _as_rgb(b)
    if ia.shape != ib.shape:
        raise ContractError(f"image shapes differ: {ia.shape} vs {ib.shape}")
    if ia.shape[0] < _SSIM_WINDOW or ia.shape[1] < _SSIM_WINDOW:
        raise ContractError(f"images must be at least {_SSIM_WINDOW} pixels square")
    kernel = _gaussian_kernel2d(_SSIM_WINDOW, _SSIM_SIGMA)
    vals = []
    for ch in range(3):
        x, y = ia[..., ch], ib[..., ch]
        mu_x = convolve(x, kernel, mode="reflect")
        mu_y = convolve(y, kernel, mode="reflect")
        xx = convolve(x * x, kernel, mode="reflect") - mu_x**2
        yy = convolve(y * y, kernel, mode="reflect") - mu_y**2
        xy = convolve(x * y, kernel, mode="reflect") - mu_x * mu_y
        num = (2 * mu_x * mu_y + _SSIM_C1) * (2 * xy + _SSIM_C2)
        den = (mu_x**2 + mu_y**2 + _SSIM_C1) * (xx + yy + _SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def validation_accuracy(val_psnr, whole_srf_psnr):
    """100 x (few-view test PSNR) / (whole-field fit PSNR)."""
    if whole_srf_psnr <= 0:
        raise ContractError("whole-field PSNR must be positive")
    return 100.0 * val_psnr / whole_srf_psnr


@dataclass
class MetricReport:
    """PSNR/SSIM plus the validation-accuracy ratio.

    No learned perceptual metric is reported: that would require shipping a
    pretrained network, which this toolkit deliberately avoids.
    """

    psnr: float
    ssim: float
    validation_accuracy: float | None = None

    def as_dict(self):
        out = {"psnr": self.psnr, "ssim": self.ssim}
        if self.validation_accuracy is not None:
            out["validation_accuracy"] = self.validation_accuracy
        return out
