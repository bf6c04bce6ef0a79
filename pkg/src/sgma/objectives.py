"""Differentiable attack objectives.

Every cosine-distance loss used here is ``const - sum_i <unit(adv_i), w_i>``
for anchors ``w_i`` fixed before optimization. The composite objectives are
built directly in that form, which keeps the targeted repel/attract
differences exact: identical repel and attract anchors cancel to a zero
anchor, so both value and gradient vanish identically.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from sgma.grounding import PhraseRegion
from sgma.saliency import NumericError
from sgma.surrogate.base import Embedding, Encoder, TokenFeatures, VisualOutput

logger = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass
class LossBreakdown:
    text_image: float = 0.0
    image_image: float = 0.0
    local: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return {"text_image": self.text_image, "image_image": self.image_image, "local": self.local, "total": self.total}


@dataclass(frozen=True)
class Toggles:
    """Which loss components are active (ablations switch them off)."""

    text_image: bool = True
    image_image: bool = True
    local: bool = True


@dataclass
class AttackGoal:
    mode: str = "untargeted"
    target_caption: Optional[str] = None
    target_image: Optional[torch.Tensor] = None
    fusion_weight: float = 1.0

    def __post_init__(self):
        if self.mode not in ("untargeted", "targeted"):
            raise ConfigurationError(f"unknown attack mode {self.mode!r}")
        if self.fusion_weight < 0:
            raise ConfigurationError("fusion weight must be nonnegative")

    def validate(self) -> None:
        if self.mode == "targeted" and (not self.target_caption or self.target_image is None):
            raise ConfigurationError("targeted mode needs both a target caption and a target image")


def _vector(x) -> torch.Tensor:
    return x.vector if isinstance(x, Embedding) else x


def _unit(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1)
    if (norms == 0).any():
        if x.ndim == 1:
            raise NumericError(f"{what} has zero norm")
        row = int(torch.nonzero(norms == 0)[0])
        raise NumericError(f"{what} row {row} has zero norm")
    return x / norms.unsqueeze(-1)


# ---------------------------------------------------------------- component losses


def loss_text_image(adv_embedding, text_embedding) -> torch.Tensor:
    a, t = _unit(_vector(adv_embedding), "adversarial embedding"), _unit(_vector(text_embedding), "text embedding")
    return 1.0 - (a * t.to(a.dtype)).sum()


def loss_image_image(adv_tokens: TokenFeatures, clean_tokens: TokenFeatures) -> torch.Tensor:
    a, c = adv_tokens.all_tokens, clean_tokens.all_tokens
    if a.shape != c.shape:
        raise ValueError(f"token shapes differ: {tuple(a.shape)} vs {tuple(c.shape)}")
    cos = (_unit(a, "adversarial token") * _unit(c, "clean token").to(a.dtype)).sum(-1)
    return (1.0 - cos).mean()


def usable_regions(regions: Sequence[PhraseRegion]) -> list[PhraseRegion]:
    return [r for r in regions if r.usable]


def loss_local(adv_tokens: TokenFeatures, regions: Sequence[PhraseRegion]) -> torch.Tensor:
    kept = usable_regions(regions)
    patches = adv_tokens.patch_tokens
    if not kept:
        warnings.warn("no grounded phrase regions; local loss is 0", RuntimeWarning, stacklevel=2)
        return patches.sum() * 0.0
    per_region = []
    for region in kept:
        cos = (_unit(patches[region.indices], "adversarial patch") * _unit(region.center, "phrase center").to(patches.dtype)).sum(-1)
        per_region.append((1.0 - cos).mean())
    return torch.stack(per_region).mean()


def baseline_feature_distance(adv_tokens: TokenFeatures, clean_tokens: TokenFeatures) -> torch.Tensor:
    """Push adversarial visual features away from the clean ones (Attack-Bard style)."""
    return loss_image_image(adv_tokens, clean_tokens)


def baseline_text_feature(adv_embedding, text_embedding) -> torch.Tensor:
    """Push the image embedding away from its caption embedding (Cui et al. style)."""
    return loss_text_image(adv_embedding, text_embedding)


def ensemble_loss(breakdowns: Sequence[LossBreakdown]) -> LossBreakdown:
    if not breakdowns:
        raise ValueError("ensemble needs at least one breakdown")
    m = len(breakdowns)
    return LossBreakdown(
        text_image=sum(b.text_image for b in breakdowns) / m,
        image_image=sum(b.image_image for b in breakdowns) / m,
        local=sum(b.local for b in breakdowns) / m,
        total=sum(b.total for b in breakdowns) / m,
    )


# ---------------------------------------------------------------- anchored objective


def local_anchor(regions: Sequence[PhraseRegion], num_patches: int, dim: int) -> tuple[torch.Tensor, float]:
    """Per-patch weights ``W`` with local loss = const - sum_i <unit(p_i), W_i>."""
    kept = usable_regions(regions)
    weights = torch.zeros(num_patches, dim, dtype=torch.float64)
    if not kept:
        return weights, 0.0
    for region in kept:
        share = 1.0 / (len(kept) * region.indices.numel())
        weights[region.indices] += share * F.normalize(region.center.double(), dim=0)
    return weights, 1.0


@dataclass
class Anchors:
    text: torch.Tensor  # (d,)
    text_const: float
    tokens: torch.Tensor  # (HW+1, d_v)
    tokens_const: float
    local: torch.Tensor  # (HW, d_v)
    local_const: float
    regions_used: int = 0
    notes: dict = field(default_factory=dict)


def untargeted_anchors(text_embedding: torch.Tensor, clean_tokens: TokenFeatures, regions) -> Anchors:
    clean = F.normalize(clean_tokens.all_tokens.detach().double(), dim=-1)
    n_patches, dim = clean_tokens.patch_tokens.shape
    local, local_const = local_anchor(regions, n_patches, dim)
    return Anchors(
        text=_unit(text_embedding.detach().double(), "text embedding"),
        text_const=1.0,
        tokens=clean / clean.shape[0],
        tokens_const=1.0,
        local=local,
        local_const=local_const,
        regions_used=len(usable_regions(regions)),
    )


def targeted_anchors(repel: Anchors, attract: Anchors, weight: float) -> Anchors:
    """Anchors of ``repel_loss - weight * attract_loss`` for every component."""
    return Anchors(
        text=repel.text - weight * attract.text,
        text_const=repel.text_const - weight * attract.text_const,
        tokens=repel.tokens - weight * attract.tokens,
        tokens_const=repel.tokens_const - weight * attract.tokens_const,
        local=repel.local - weight * attract.local,
        local_const=repel.local_const - weight * attract.local_const,
        regions_used=repel.regions_used,
        notes={"attract_regions": attract.regions_used},
    )


def anchored_losses(out: VisualOutput, anchors: Anchors, toggles: Toggles = Toggles()) -> dict[str, torch.Tensor]:
    """Per-image loss components for a batch forward pass (each of shape (B,))."""
    dtype = out.embedding.dtype
    zero = out.embedding.sum(-1) * 0.0
    losses = {}
    if toggles.text_image:
        e = F.normalize(out.embedding, dim=-1)
        losses["text_image"] = anchors.text_const - (e * anchors.text.to(dtype)).sum(-1)
    else:
        losses["text_image"] = zero
    if toggles.image_image:
        tokens = F.normalize(out.all_tokens, dim=-1)
        losses["image_image"] = anchors.tokens_const - (tokens * anchors.tokens.to(dtype)).sum((-1, -2))
    else:
        losses["image_image"] = zero
    if toggles.local and (anchors.local_const != 0.0 or bool(anchors.local.any())):
        patches = F.normalize(out.all_tokens[:, 1:], dim=-1)
        losses["local"] = anchors.local_const - (patches * anchors.local.to(dtype)).sum((-1, -2))
    else:
        losses["local"] = zero
    losses["total"] = losses["text_image"] + losses["image_image"] + losses["local"]
    return losses


def breakdown(losses: dict[str, torch.Tensor], index: int = 0) -> LossBreakdown:
    return LossBreakdown(**{k: float(v[index].detach()) for k, v in losses.items()})


# ---------------------------------------------------------------- composed totals


def total_untargeted(
    adv: torch.Tensor,
    clean: torch.Tensor,
    caption: str,
    encoder: Encoder,
    regions: Sequence[PhraseRegion],
    toggles: Toggles = Toggles(),
) -> LossBreakdown:
    with torch.no_grad():
        out = encoder.visual(torch.stack([clean, adv]).to(encoder.dtype))
        anchors = untargeted_anchors(encoder.text_embedding(caption), out.tokens(0), regions)
        adv_out = VisualOutput(*(x[1:] for x in (out.embedding, out.all_tokens, out.attn_cls, out.values, out.cls_output)))
        return breakdown(anchored_losses(adv_out, anchors, toggles))


def total_targeted(
    adv: torch.Tensor,
    clean: torch.Tensor,
    caption: str,
    goal: AttackGoal,
    encoder: Encoder,
    regions_orig: Sequence[PhraseRegion],
    regions_tgt: Sequence[PhraseRegion],
    toggles: Toggles = Toggles(),
) -> LossBreakdown:
    goal.validate()
    if goal.mode != "targeted":
        raise ConfigurationError("total_targeted needs a targeted goal")
    with torch.no_grad():
        out = encoder.visual(torch.stack([clean, goal.target_image, adv]).to(encoder.dtype))
        repel = untargeted_anchors(encoder.text_embedding(caption), out.tokens(0), regions_orig)
        attract = untargeted_anchors(encoder.text_embedding(goal.target_caption), out.tokens(1), regions_tgt)
        anchors = targeted_anchors(repel, attract, goal.fusion_weight)
        adv_out = VisualOutput(*(x[2:] for x in (out.embedding, out.all_tokens, out.attn_cls, out.values, out.cls_output)))
        return breakdown(anchored_losses(adv_out, anchors, toggles))
