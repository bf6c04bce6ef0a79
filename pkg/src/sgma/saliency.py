"""Text-conditioned patch saliency, semantic masks and deviation diagnostics.

Patch scores follow the Grad-ECLIP construction: each patch's final-layer
value vector is projected onto the gradient of the image-text cosine with
respect to the [CLS] output, and weighted by the head-averaged [CLS]
attention it receives.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from sgma.images import check_image
from sgma.surrogate.base import CapabilityError, Encoder


class NumericError(ValueError):
    pass


@dataclass
class SaliencyMap:
    scores: torch.Tensor  # (H, W), raw signed scores


@dataclass
class SemanticMask:
    values: torch.Tensor  # (R, R) float64 in [0, 1]
    degenerate: bool = False


@dataclass
class DeviationMap:
    distances: torch.Tensor  # (H, W) in [0, 2]


def grad_eclip_scores(attn_cls: torch.Tensor, values: torch.Tensor, grad: torch.Tensor) -> torch.Tensor:
    """s_i = attn_i * <v_i, grad> for every patch."""
    return attn_cls * (values @ grad)


def cls_gradient(encoder: Encoder, cls_output: torch.Tensor, text_embedding: torch.Tensor) -> torch.Tensor:
    """Gradient of cos(f_v, f_t) with respect to the final [CLS] hidden state."""
    o = cls_output.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        similarity = (encoder.head(o.unsqueeze(0))[0] * text_embedding.to(o.dtype)).sum()
        (grad,) = torch.autograd.grad(similarity, o)
    return grad


def patch_saliency(encoder: Encoder, image: torch.Tensor, text: str) -> SaliencyMap:
    check_image(image, encoder.handle.resolution)
    with torch.no_grad():
        out = encoder.visual(image.unsqueeze(0).to(encoder.dtype))
    if out.attn_cls is None or out.values is None:
        raise CapabilityError(f"{encoder.handle.id} does not expose attention or value vectors")
    grad = cls_gradient(encoder, out.cls_output[0], encoder.text_embedding(text))
    scores = grad_eclip_scores(out.attn_cls[0], out.values[0], grad)
    h, w = encoder.handle.patch_grid
    return SaliencyMap(scores.detach().double().reshape(h, w))


def normalize_scores(scores: torch.Tensor) -> tuple[torch.Tensor, bool]:
    """Rectify negatives, then min-max normalize. Returns (map, degenerate).

    A map that is constant after rectification (including all zeros) is
    degenerate and comes back as all zeros.
    """
    scores = scores.double()
    if not torch.isfinite(scores).all():
        raise NumericError("saliency scores contain non-finite values")
    rectified = scores.clamp(min=0.0)
    lo, hi = rectified.min(), rectified.max()
    if hi <= lo:
        return torch.zeros_like(rectified), True
    return (rectified - lo) / (hi - lo), False


def to_mask(saliency: SaliencyMap, resolution: int) -> SemanticMask:
    normalized, degenerate = normalize_scores(saliency.scores)
    if degenerate:
        return SemanticMask(torch.ones(resolution, resolution, dtype=torch.float64), True)
    upsampled = F.interpolate(
        normalized[None, None], size=(resolution, resolution), mode="bilinear", align_corners=False
    )[0, 0].clamp(0.0, 1.0)
    # an interior peak is smoothed below 1 by the interpolation; rescale so the
    # mask still peaks at exactly 1 (allocation is invariant to this scale)
    return SemanticMask(upsampled / upsampled.max(), False)


def semantic_mask(encoder: Encoder, image: torch.Tensor, text: str) -> SemanticMask:
    return to_mask(patch_saliency(encoder, image, text), encoder.handle.resolution)


def patch_deviation(encoder: Encoder, clean: torch.Tensor, adv: torch.Tensor) -> DeviationMap:
    check_image(clean, encoder.handle.resolution)
    check_image(adv, encoder.handle.resolution)
    with torch.no_grad():
        out = encoder.visual(torch.stack([clean, adv]).to(encoder.dtype))
    a, b = out.all_tokens[0, 1:].double(), out.all_tokens[1, 1:].double()
    distance = 1.0 - (F.normalize(a, dim=-1) * F.normalize(b, dim=-1)).sum(-1)
    h, w = encoder.handle.patch_grid
    return DeviationMap(distance.clamp(0.0, 2.0).reshape(h, w))


def export_heatmap(matrix, png_path: str | Path, csv_path: str | Path | None = None, value_range=None):
    """Write an 8-bit grayscale PNG (min-max or ``value_range`` scaled) and a CSV sidecar."""
    data = np.asarray(matrix.detach().cpu() if isinstance(matrix, torch.Tensor) else matrix, dtype=np.float64)
    lo, hi = value_range if value_range is not None else (data.min(), data.max())
    scaled = np.zeros_like(data) if hi <= lo else (data - lo) / (hi - lo)
    png_path = Path(png_path)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.floor(np.clip(scaled, 0, 1) * 255 + 0.5).astype(np.uint8), mode="L").save(png_path)
    if csv_path is not None:
        np.savetxt(csv_path, data, delimiter=",", fmt="%.10g")
    return png_path
