"""Attack success rates with exact rational arithmetic."""

from __future__ import annotations

import string
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Union

from sgma.evaluation.judge import JudgeVerdict

CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")

CLASSIFICATION_PROMPT = (
    "You are an image classifier.\n"
    "Given an image, classify it into exactly one of these 10 categories: "
    "airplane | automobile | bird | cat | deer | dog | frog | horse | ship | truck.\n"
    "Respond with only the category name."
)

TASKS = ("captioning", "classification", "vqa")

_PUNCT = str.maketrans("", "", string.punctuation)


@dataclass
class ASRSummary:
    task: str
    successes: int
    total: int
    parse_errors: int = 0
    unparsed_predictions: int = 0

    @property
    def rate(self) -> Fraction:
        return Fraction(100 * self.successes, self.total)

    @property
    def asr(self) -> float:
        return float(self.rate)

    def as_dict(self) -> dict:
        return {
            "task": self.task,
            "successes": self.successes,
            "total": self.total,
            "asr": self.asr,
            "parse_errors": self.parse_errors,
            "unparsed_predictions": self.unparsed_predictions,
        }


def normalize_answer(text: str) -> str:
    return " ".join(text.lower().translate(_PUNCT).split())


def normalize_category(text: str) -> str | None:
    """Map a free-form prediction to a CIFAR-10 class, or None if it names none or several."""
    words = normalize_answer(text).split()
    if len(words) == 1 and words[0] in CIFAR10_CLASSES:
        return words[0]
    hits = {w for w in words if w in CIFAR10_CLASSES}
    return hits.pop() if len(hits) == 1 else None


Record = Union[JudgeVerdict, str, None, tuple]


def compute_asr(records: Iterable[Record], task: str) -> ASRSummary:
    """ASR over per-sample outcomes.

    captioning records are judge verdicts (or the strings "Yes"/"No"; None or
    an unparsed verdict counts as a parse error and is excluded).
    classification and vqa records are ``(prediction, ground_truth)`` pairs.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    records = list(records)
    if not records:
        raise ValueError("no records to score")
    successes = total = parse_errors = unparsed = 0
    for record in records:
        if task == "captioning":
            match = record.match if isinstance(record, JudgeVerdict) else record
            if match is None:
                parse_errors += 1
                continue
            if match not in ("Yes", "No"):
                raise ValueError(f"captioning verdict must be Yes or No, got {match!r}")
            total += 1
            successes += match == "No"
        else:
            prediction, truth = record
            total += 1
            if task == "classification":
                predicted = normalize_category(prediction)
                if predicted is None:
                    unparsed += 1
                    successes += 1
                else:
                    successes += predicted != normalize_answer(truth)
            else:
                successes += normalize_answer(prediction) != normalize_answer(truth)
    if total == 0:
        raise ValueError(f"all {parse_errors} records failed to parse")
    return ASRSummary(task, successes, total, parse_errors, unparsed)


def pooled_asr(summaries: Iterable[ASRSummary]) -> ASRSummary:
    summaries = list(summaries)
    if not summaries:
        raise ValueError("nothing to pool")
    tasks = {s.task for s in summaries}
    return ASRSummary(
        tasks.pop() if len(tasks) == 1 else "mixed",
        sum(s.successes for s in summaries),
        sum(s.total for s in summaries),
        sum(s.parse_errors for s in summaries),
        sum(s.unparsed_predictions for s in summaries),
    )
