"""SSIM and MS-SSIM on luma, unit data range."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from sgma.images import check_image

K1, K2 = 0.01, 0.03
WINDOW, SIGMA = 11, 1.5
MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class QualityReport:
    ssim: float
    ms_ssim: float

    def as_dict(self) -> dict:
        return {"ssim": self.ssim, "ms_ssim": self.ms_ssim}


def luma(image: torch.Tensor) -> torch.Tensor:
    """BT.601 luma of a (3, H, W) image."""
    r, g, b = image.double()
    return 0.299 * r + 0.587 * g + 0.114 * b


def _gaussian(size: int, sigma: float) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Separable valid-mode filtering of a (H, W) map."""
    k = kernel.numel()
    out = F.conv2d(x[None, None], kernel.view(1, 1, 1, k))
    return F.conv2d(out, kernel.view(1, 1, k, 1))[0, 0]


def _ssim_terms(x: torch.Tensor, y: torch.Tensor, window: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-window (ssim, contrast-structure) maps."""
    kernel = _gaussian(window, SIGMA)
    c1, c2 = K1**2, K2**2
    mx, my = _filter(x, kernel), _filter(y, kernel)
    sxx = _filter(x * x, kernel) - mx * mx
    syy = _filter(y * y, kernel) - my * my
    sxy = _filter(x * y, kernel) - mx * my
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    luminance = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    return luminance * cs, cs


def _window_for(side: int) -> int:
    if side >= WINDOW:
        return WINDOW
    return side if side % 2 else side - 1


def ssim_luma(x: torch.Tensor, y: torch.Tensor) -> float:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    window = _window_for(min(x.shape))
    ssim_map, _ = _ssim_terms(x, y, window)
    return float(ssim_map.mean())


def ms_ssim_luma(x: torch.Tensor, y: torch.Tensor) -> float:
    """Five-scale MS-SSIM; the window shrinks to fit scales smaller than 11 pixels."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if min(x.shape) < 2 ** (len(MS_WEIGHTS) - 1):
        raise ValueError(f"image too small for {len(MS_WEIGHTS)} scales: {tuple(x.shape)}")
    result = 1.0
    for level, weight in enumerate(MS_WEIGHTS):
        ssim_map, cs_map = _ssim_terms(x, y, _window_for(min(x.shape)))
        last = level == len(MS_WEIGHTS) - 1
        value = max(float((ssim_map if last else cs_map).mean()), 0.0)
        result *= value**weight
        if not last:
            x = F.avg_pool2d(x[None, None], 2)[0, 0]
            y = F.avg_pool2d(y[None, None], 2)[0, 0]
    return result


def image_quality(clean: torch.Tensor, adv: torch.Tensor) -> QualityReport:
    check_image(clean)
    check_image(adv)
    if clean.shape != adv.shape:
        raise ValueError(f"dimension mismatch: {tuple(clean.shape)} vs {tuple(adv.shape)}")
    x, y = luma(clean), luma(adv)
    return QualityReport(ssim=ssim_luma(x, y), ms_ssim=ms_ssim_luma(x, y))
