"""Saliency-weighted per-pixel perturbation budgets."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from sgma.saliency import SemanticMask


class AllocationError(RuntimeError):
    pass


@dataclass(frozen=True)
class BudgetParams:
    epsilon: float = 8 / 255
    base_ratio: float = 0.2

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 <= self.base_ratio <= 1.0:
            raise ValueError("base_ratio must lie in [0, 1]")


@dataclass
class BudgetMap:
    budget: torch.Tensor  # (R, R) float64, shared by all three channels


def allocate(mask: SemanticMask, params: BudgetParams) -> BudgetMap:
    """Split an average budget into a uniform floor plus a mask-weighted share.

    Every pixel gets ``r * eps``; the remaining ``eps * (1 - r) * R^2`` is
    distributed in proportion to the mask, so the budgets sum to
    ``eps * R^2``.
    """
    values = mask.values.double()
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValueError(f"mask must be R x R, got {tuple(values.shape)}")
    r, eps = params.base_ratio, params.epsilon
    n_pixels = values.numel()
    if mask.degenerate or bool(values.max() == values.min()):
        # constant mask: the formula reduces to eps; skip the rounding it would add
        if not mask.degenerate and values.max() <= 0:
            raise AllocationError("mask sums to zero but was not flagged degenerate")
        return BudgetMap(torch.full_like(values, float(eps)))
    total = values.sum()
    focused = eps * (1.0 - r) * n_pixels
    return BudgetMap(r * eps + values / total * focused)


def uniform_budget(resolution: int, epsilon: float) -> BudgetMap:
    return BudgetMap(torch.full((resolution, resolution), float(epsilon), dtype=torch.float64))
