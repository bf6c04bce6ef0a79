"""Finite-difference audit of the attack losses' pixel gradients."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import torch

from sgma.grounding import ground_caption
from sgma.objectives import Toggles, anchored_losses, targeted_anchors, untargeted_anchors
from sgma.surrogate.base import Encoder, pixel_gradient

logger = logging.getLogger(__name__)

COMPONENTS = {
    "text_image": Toggles(True, False, False),
    "image_image": Toggles(False, True, False),
    "local": Toggles(False, False, True),
    "total": Toggles(True, True, True),
}


@dataclass
class GradCheckResult:
    loss: str
    coordinate: tuple[int, int, int]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        return 0.0 if scale == 0.0 else abs(self.analytic - self.numeric) / scale


def _objective(anchors, toggles):
    def f(encoder: Encoder, pixels: torch.Tensor) -> torch.Tensor:
        out = encoder.visual(pixels.unsqueeze(0).to(encoder.dtype))
        return anchored_losses(out, anchors, toggles)["total"][0]

    return f


def audit(
    encoder: Encoder,
    clean: torch.Tensor,
    caption: str,
    target_caption: Optional[str] = None,
    target_image: Optional[torch.Tensor] = None,
    coords: int = 10,
    h: float = 1e-3,
    start_radius: float = 8 / 255,
    seed: int = 0,
) -> list[GradCheckResult]:
    """Compare autograd pixel gradients with central differences.

    The check runs at a random point in the eps ball around ``clean`` (the
    image-image loss is stationary at ``clean`` itself). Coordinates are
    drawn among the 10% with the largest analytic gradient, where the finite
    difference is well above round-off.
    """
    if encoder.dtype != torch.float64:
        logger.warning("gradient audit on a %s encoder; finite differences will be noisy", encoder.dtype)
    gen = torch.Generator().manual_seed(seed)
    clean = clean.double()
    with torch.no_grad():
        tokens = encoder.visual(clean.unsqueeze(0).to(encoder.dtype)).tokens(0)
    regions, _ = ground_caption(encoder, clean, tokens, caption)
    base = untargeted_anchors(encoder.text_embedding(caption), tokens, regions)
    variants = {name: (base, t) for name, t in COMPONENTS.items()}
    if target_caption is not None and target_image is not None:
        with torch.no_grad():
            tgt_tokens = encoder.visual(target_image.double().unsqueeze(0).to(encoder.dtype)).tokens(0)
        tgt_regions, _ = ground_caption(encoder, target_image.double(), tgt_tokens, target_caption)
        attract = untargeted_anchors(encoder.text_embedding(target_caption), tgt_tokens, tgt_regions)
        mixed = targeted_anchors(base, attract, 1.0)
        variants.update({f"targeted_{name}": (mixed, t) for name, t in COMPONENTS.items()})

    noise = (torch.rand(clean.shape, generator=gen, dtype=torch.float64) * 2 - 1) * start_radius
    point = (clean + noise).clamp(h, 1 - h)
    results = []
    for name, (anchors, toggles) in variants.items():
        f = _objective(anchors, toggles)
        grad = pixel_gradient(encoder, point, f)
        flat = grad.abs().flatten()
        top = torch.topk(flat, max(coords, flat.numel() // 10)).indices
        picks = top[torch.randperm(top.numel(), generator=gen)[:coords]]
        for idx in picks.tolist():
            c, y, x = torch.unravel_index(torch.tensor(idx), grad.shape)
            e = torch.zeros_like(point)
            e[c, y, x] = h
            with torch.no_grad():
                numeric = (float(f(encoder, point + e)) - float(f(encoder, point - e))) / (2 * h)
            results.append(GradCheckResult(name, (int(c), int(y), int(x)), float(grad[c, y, x]), numeric))
    return results
