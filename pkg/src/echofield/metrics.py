"""Image-quality metrics on [0, 1] B-mode frames: MSE, PSNR, SSIM.

`mse` and `ssim` run on ndarrays or autodiff Values (the trainer's loss
differentiates through both); `psnr` is reporting-only. SSIM follows the
original formulation: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
dynamic range 1, window-radius border excluded from the average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

PSNR_CAP_DB = 120.0
SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def _shape_of(img):
    return (img.data if isinstance(img, ad.Value) else np.asarray(img)).shape


def _check_pair(a, b):
    sa, sb = _shape_of(a), _shape_of(b)
    if sa != sb:
        raise ValueError(f"image shapes differ: {sa} vs {sb}")
    return sa


def mse(a, b):
    """Mean squared difference."""
    _check_pair(a, b)
    diff = a - b
    return ad.reduce_mean(diff * diff)


def psnr(a, b) -> float:
    """10*log10(1/mse) dB for unit peak; capped at 120 dB near zero error."""
    err = float(mse(np.asarray(a), np.asarray(b)))
    if err < 1e-12:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / err))


def _gaussian_window(dtype) -> np.ndarray:
    r = np.arange(SSIM_WIN, dtype=np.float64) - (SSIM_WIN - 1) / 2.0
    g = np.exp(-0.5 * (r / _SSIM_SIGMA) ** 2)
    k = np.outer(g, g)
    return (k / k.sum()).astype(dtype)


def ssim(a, b):
    """Mean local SSIM over the window-valid region."""
    sa = _check_pair(a, b)
    if sa[0] < SSIM_WIN or sa[1] < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN}x{SSIM_WIN}, got {sa}")
    dtype = (a.data if isinstance(a, ad.Value) else np.asarray(a)).dtype
    win = _gaussian_window(dtype if dtype in (np.float32, np.float64) else np.float64)
    c1 = (_K1 * 1.0) ** 2
    c2 = (_K2 * 1.0) ** 2

    mu_a = ad.conv2d(a, win)
    mu_b = ad.conv2d(b, win)
    var_a = ad.conv2d(a * a, win) - mu_a * mu_a
    var_b = ad.conv2d(b * b, win) - mu_b * mu_b
    cov = ad.conv2d(a * b, win) - mu_a * mu_b

    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    smap = num / den

    pad = SSIM_WIN // 2
    return ad.reduce_mean(smap[pad:sa[0] - pad, pad:sa[1] - pad])


@dataclass(frozen=True)
class MetricReport:
    mse: float
    psnr: float
    ssim: float

    def __post_init__(self):
        if self.mse < 0:
            raise ValueError("mse must be >= 0")
        if not -1.0 <= self.ssim <= 1.0 + 1e-12:
            raise ValueError("ssim must lie in [-1, 1]")


def evaluate_pair(pred: np.ndarray, target: np.ndarray) -> MetricReport:
    return MetricReport(mse=float(mse(np.asarray(pred), np.asarray(target))),
                        psnr=psnr(pred, target),
                        ssim=float(ssim(np.asarray(pred), np.asarray(target))))


def report_csv(reports: list) -> str:
    """Per-frame lines 'frame_index,mse,psnr,ssim' plus a 'mean' summary row."""
    lines = ["frame_index,mse,psnr,ssim"]
    for i, r in enumerate(reports):
        lines.append(f"{i},{r.mse:.8e},{r.psnr:.2f},{r.ssim:.6f}")
    if reports:
        m = np.mean([r.mse for r in reports])
        p = np.mean([r.psnr for r in reports])
        s = np.mean([r.ssim for r in reports])
        lines.append(f"mean,{m:.8e},{p:.2f},{s:.6f}")
    return "\n".join(lines) + "\n"
