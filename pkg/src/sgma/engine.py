"""Projected gradient ascent with semantic budgets, single encoder or ensemble."""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import torch

from sgma.allocation import BudgetMap, BudgetParams, allocate, uniform_budget
from sgma.grounding import Chunker, PhraseRegion, ground_caption
from sgma.images import check_image, image_hash
from sgma.objectives import (
    Anchors,
    AttackGoal,
    ConfigurationError,
    LossBreakdown,
    Toggles,
    anchored_losses,
    breakdown,
    ensemble_loss,
    targeted_anchors,
    untargeted_anchors,
)
from sgma.saliency import SemanticMask, semantic_mask
from sgma.surrogate.base import Encoder

logger = logging.getLogger(__name__)


class AttackAborted(RuntimeError):
    """Optimization stopped early (e.g. a non-finite gradient)."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


EncoderRef = Union[str, Encoder]


@dataclass
class AttackConfig:
    steps: int = 100
    step_size: float = 1 / 255
    epsilon: float = 8 / 255
    base_ratio: float = 0.2
    tau: float = 0.3
    global_ti: bool = True
    global_ii: bool = True
    local: bool = True
    # False replaces the saliency-weighted budget with a uniform eps ball
    semantic_budget: bool = True
    goal: AttackGoal = field(default_factory=AttackGoal)
    seed: int = 0
    encoders: Sequence[EncoderRef] = ("desk-clip",)
    chunker: Optional[Chunker] = None

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")
        if not self.step_size > 0:
            raise ConfigurationError("step size must be positive")
        if not self.encoders:
            raise ConfigurationError("at least one surrogate encoder is required")
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError("tau must lie in (0, 1)")
        try:
            BudgetParams(self.epsilon, self.base_ratio)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc

    @property
    def toggles(self) -> Toggles:
        return Toggles(self.global_ti, self.global_ii, self.local)

    @property
    def budget_params(self) -> BudgetParams:
        return BudgetParams(self.epsilon, self.base_ratio)

    def encoder_ids(self) -> list[str]:
        return [e if isinstance(e, str) else e.handle.id for e in self.encoders]

    def as_dict(self) -> dict:
        goal = self.goal
        return {
            "steps": self.steps,
            "step_size": self.step_size,
            "epsilon": self.epsilon,
            "base_ratio": self.base_ratio,
            "tau": self.tau,
            "global_ti": self.global_ti,
            "global_ii": self.global_ii,
            "local": self.local,
            "semantic_budget": self.semantic_budget,
            "goal": {
                "mode": goal.mode,
                "target_caption": goal.target_caption,
                "target_image": None if goal.target_image is None else image_hash(goal.target_image),
                "fusion_weight": goal.fusion_weight,
            },
            "seed": self.seed,
            "encoders": self.encoder_ids(),
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.as_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class AttackRun:
    adversarial: torch.Tensor  # (3, R, R) float64
    delta: torch.Tensor  # (3, R, R) float64, adversarial - clean
    loss_trace: list[LossBreakdown]
    final: LossBreakdown
    budget: BudgetMap
    mask: SemanticMask
    regions: list[PhraseRegion]
    metadata: dict = field(default_factory=dict)


# ---------------------------------------------------------------- primitives


def pgd_step(delta: torch.Tensor, grad: torch.Tensor, alpha: float, budget: BudgetMap, clean: torch.Tensor,
             step: int = 0) -> torch.Tensor:
    """One signed ascent step, clipped to the per-pixel budget and the [0, 1] range."""
    if delta.shape != grad.shape or delta.shape != clean.shape:
        raise ValueError("delta, grad and clean must share a shape")
    if not torch.isfinite(grad).all():
        raise AttackAborted(f"non-finite gradient at step {step}", step)
    bound = budget.budget.to(delta.dtype).unsqueeze(0)
    stepped = torch.clamp(delta + alpha * torch.sign(grad), -bound, bound)
    return torch.clamp(clean + stepped, 0.0, 1.0) - clean


def ensemble_mask(masks: Sequence[SemanticMask]) -> SemanticMask:
    if not masks:
        raise ValueError("ensemble needs at least one mask")
    if len(masks) == 1:
        return masks[0]
    shapes = {tuple(m.values.shape) for m in masks}
    if len(shapes) != 1:
        raise ValueError(f"masks must share a resolution, got {sorted(shapes)}")
    first = masks[0].values.double()
    # mean written as an offset from the first mask, exact for identical inputs
    offsets = torch.stack([m.values.double() - first for m in masks])
    return SemanticMask(first + offsets.mean(0), all(m.degenerate for m in masks))


def resolve_encoders(refs: Sequence[EncoderRef]) -> list[Encoder]:
    from sgma.surrogate.registry import load_encoder

    return [load_encoder(r) if isinstance(r, str) else r for r in refs]


@contextlib.contextmanager
def _guard(encoder: Encoder):
    if encoder.exclusive:
        with encoder.lock:
            yield
    else:
        yield


# ---------------------------------------------------------------- preparation


@dataclass
class _Member:
    encoder: Encoder
    anchors: Anchors
    mask: SemanticMask
    regions: list[PhraseRegion]
    fallback: bool


def _prepare(encoder: Encoder, clean: torch.Tensor, caption: str, config: AttackConfig) -> _Member:
    goal = config.goal
    targeted = goal.mode == "targeted"
    with _guard(encoder), torch.no_grad():
        # separate forwards keep the clean features independent of batch composition
        clean_tokens = encoder.visual(clean.unsqueeze(0).to(encoder.dtype)).tokens(0)
        regions, fallback = ground_caption(encoder, clean, clean_tokens, caption, config.tau, config.chunker)
        anchors = untargeted_anchors(encoder.text_embedding(caption), clean_tokens, regions)
        # the target-aware mask uses T_tgt, except at zero fusion weight where the
        # attract side is inert and the run must match the untargeted one
        mask_text = goal.target_caption if targeted and goal.fusion_weight > 0 else caption
        mask = semantic_mask(encoder, clean, mask_text)
        if targeted:
            tgt_tokens = encoder.visual(goal.target_image.unsqueeze(0).to(encoder.dtype)).tokens(0)
            tgt_regions, tgt_fallback = ground_caption(
                encoder, goal.target_image, tgt_tokens, goal.target_caption, config.tau, config.chunker
            )
            attract = untargeted_anchors(encoder.text_embedding(goal.target_caption), tgt_tokens, tgt_regions)
            anchors = targeted_anchors(anchors, attract, goal.fusion_weight)
            fallback = fallback or tgt_fallback
    return _Member(encoder, anchors, mask, regions, fallback)


def _evaluate(members: list[_Member], pixels: torch.Tensor, toggles: Toggles) -> tuple[list[torch.Tensor], LossBreakdown]:
    """Per-member total objectives at ``pixels`` (float64, may require grad) and their mean breakdown."""
    totals, parts = [], []
    for member in members:
        with _guard(member.encoder):
            out = member.encoder.visual(pixels.unsqueeze(0).to(member.encoder.dtype))
            losses = anchored_losses(out, member.anchors, toggles)
        parts.append(breakdown(losses))
        totals.append(losses["total"][0].double())
    return totals, ensemble_loss(parts)


def _mean_gradient(totals: list[torch.Tensor], delta: torch.Tensor) -> torch.Tensor:
    """Mean of per-member gradients, each taken on its unscaled loss.

    Backpropagating ``loss / M`` through a low-precision encoder rounds
    differently from ``loss`` and can flip the sign of near-zero gradients;
    averaging full gradients as an offset from the first keeps M identical
    members bitwise equal to one.
    """
    grads = [torch.autograd.grad(t, delta)[0] for t in totals]
    if len(grads) == 1:
        return grads[0]
    first = grads[0]
    return first + torch.stack([g - first for g in grads]).mean(0)


# ---------------------------------------------------------------- loops


def _run(clean: torch.Tensor, caption: str, config: AttackConfig) -> AttackRun:
    if not caption or not caption.strip():
        raise ConfigurationError("caption must be non-empty")
    started = time.perf_counter()
    torch.manual_seed(config.seed)
    encoders = resolve_encoders(config.encoders)
    resolutions = {e.handle.resolution for e in encoders}
    if len(resolutions) != 1:
        raise ConfigurationError(f"ensemble members must share an input resolution, got {sorted(resolutions)}")
    clean = clean.detach().double()
    check_image(clean, resolutions.pop())
    if config.goal.mode == "targeted":
        check_image(config.goal.target_image, clean.shape[1])

    members = [_prepare(e, clean, caption, config) for e in encoders]
    mask = ensemble_mask([m.mask for m in members])
    budget = allocate(mask, config.budget_params) if config.semantic_budget else uniform_budget(
        clean.shape[1], config.epsilon
    )
    bound = budget.budget.unsqueeze(0)
    toggles = config.toggles

    delta = torch.zeros_like(clean)
    trace: list[LossBreakdown] = []
    for step in range(config.steps):
        delta.requires_grad_(True)
        totals, parts = _evaluate(members, clean + delta, toggles)
        trace.append(parts)
        grad = _mean_gradient(totals, delta)
        delta = pgd_step(delta.detach(), grad, config.step_size, budget, clean, step)
        assert bool((delta.abs() <= bound + 1e-9).all()), f"budget violated at step {step}"
        assert bool(((clean + delta) >= 0).all() and ((clean + delta) <= 1).all()), f"range violated at step {step}"

    adversarial = clean + delta
    with torch.no_grad():
        _, final = _evaluate(members, adversarial, toggles)
    metadata = {
        "config_hash": config.digest(),
        "encoders": [m.encoder.handle.id for m in members],
        "wall_time": time.perf_counter() - started,
        "chunker_fallback": any(m.fallback for m in members),
        "phrases": [r.phrase for r in members[0].regions],
        "regions_used": members[0].anchors.regions_used,
        "mode": config.goal.mode,
    }
    return AttackRun(adversarial, delta, trace, final, budget, mask, members[0].regions, metadata)


def run_untargeted(clean: torch.Tensor, caption: str, config: AttackConfig) -> AttackRun:
    if config.goal.mode != "untargeted":
        raise ConfigurationError("run_untargeted needs an untargeted goal")
    return _run(clean, caption, config)


def run_targeted(clean: torch.Tensor, caption: str, config: AttackConfig) -> AttackRun:
    if config.goal.mode != "targeted":
        raise ConfigurationError("run_targeted needs a targeted goal")
    config.goal.validate()
    return _run(clean, caption, config)


def run_attack(clean: torch.Tensor, caption: str, config: AttackConfig) -> AttackRun:
    return run_targeted(clean, caption, config) if config.goal.mode == "targeted" else run_untargeted(clean, caption, config)


def run_many(items: Sequence[tuple[torch.Tensor, str]], config: AttackConfig, workers: int = 1) -> list:
    """Attack independent images; failures come back as exceptions in place of runs."""

    def one(item):
        try:
            return run_attack(item[0], item[1], config)
        except Exception as exc:  # per-item isolation
            logger.error("attack failed: %s", exc)
            return exc

    if workers <= 1:
        return [one(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, items))
