"""Image-text similarity under a panel of evaluator encoders."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import torch

from sgma.surrogate.base import Encoder, embed_image, embed_text

logger = logging.getLogger(__name__)


@dataclass
class SimilarityReport:
    per_encoder: dict[str, float]

    @property
    def ensemble(self) -> float:
        values = list(self.per_encoder.values())
        return sum(values) / len(values)

    def as_dict(self) -> dict:
        return {"per_encoder": dict(self.per_encoder), "ensemble": self.ensemble}


def _resolve(refs: Sequence[Union[str, Encoder]]) -> list[Encoder]:
    from sgma.surrogate.registry import load_encoder

    return [load_encoder(r) if isinstance(r, str) else r for r in refs]


def clip_similarity(
    evaluators: Sequence[Union[str, Encoder]],
    clean: torch.Tensor,
    text: str,
    surrogates: Optional[Iterable[str]] = None,
) -> SimilarityReport:
    """Cosine between each evaluator's embedding of ``clean`` and of ``text``.

    Scoring is against the clean image. Evaluators that were also attack
    surrogates make the score white-box; that is allowed but warned about.
    """
    if not evaluators:
        raise ValueError("at least one evaluator encoder is required")
    encoders = _resolve(evaluators)
    overlap = sorted({e.handle.id for e in encoders} & set(surrogates or ()))
    if overlap:
        warnings.warn(f"evaluators overlap the attack surrogates: {', '.join(overlap)}", UserWarning, stacklevel=2)
    scores = {}
    for encoder in encoders:
        if encoder.handle.id in scores:
            raise ValueError(f"duplicate evaluator {encoder.handle.id!r}")
        image = embed_image(encoder, clean.to(torch.float64)).vector.double()
        caption = embed_text(encoder, text).vector.double()
        scores[encoder.handle.id] = float(torch.clamp((image * caption).sum(), -1.0, 1.0))
    return SimilarityReport(scores)
