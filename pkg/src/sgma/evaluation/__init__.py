"""Similarity, judging, ASR, defenses and image quality."""

from sgma.evaluation.asr import CIFAR10_CLASSES, CLASSIFICATION_PROMPT, ASRSummary, compute_asr, pooled_asr
from sgma.evaluation.defenses import DefenseConfigError, DefenseSpec, apply_defense
from sgma.evaluation.judge import JUDGE_PROMPT, JudgeVerdict, judge_caption, parse_verdict
from sgma.evaluation.quality import QualityReport, image_quality
from sgma.evaluation.similarity import SimilarityReport, clip_similarity

__all__ = [
    "ASRSummary",
    "CIFAR10_CLASSES",
    "CLASSIFICATION_PROMPT",
    "DefenseConfigError",
    "DefenseSpec",
    "JUDGE_PROMPT",
    "JudgeVerdict",
    "QualityReport",
    "SimilarityReport",
    "apply_defense",
    "clip_similarity",
    "compute_asr",
    "image_quality",
    "judge_caption",
    "parse_verdict",
    "pooled_asr",
]
