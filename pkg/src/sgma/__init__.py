"""Semantic-guided multimodal adversarial attacks on vision-language encoders."""

from sgma.allocation import BudgetMap, BudgetParams, allocate
from sgma.engine import AttackConfig, AttackRun, run_attack, run_targeted, run_untargeted
from sgma.grounding import extract_noun_phrases, ground_caption
from sgma.objectives import AttackGoal, LossBreakdown, Toggles
from sgma.saliency import semantic_mask
from sgma.surrogate import load_encoder

__version__ = "0.1.0"

__all__ = [
    "AttackConfig",
    "AttackGoal",
    "AttackRun",
    "BudgetMap",
    "BudgetParams",
    "LossBreakdown",
    "Toggles",
    "allocate",
    "extract_noun_phrases",
    "ground_caption",
    "load_encoder",
    "run_attack",
    "run_targeted",
    "run_untargeted",
    "semantic_mask",
]
