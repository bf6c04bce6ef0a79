"""A zero-shot retrieval model that stands in for an LVLM at desk scale.

It answers the prompts the toolkit sends by ranking candidate texts with a
vision-language encoder: captioning prompts get the best candidate caption,
the classification prompt gets the best CIFAR-10 class, and the judge prompt
gets a Yes when the description ranks among the top candidates for the image.
Plug it into a :class:`~sgma.clients.VLMClient` through
:class:`~sgma.clients.LocalTransport`.
"""

from __future__ import annotations

import itertools
import re
from typing import Optional, Sequence, Union

import torch

from sgma import desk
from sgma.evaluation.asr import CIFAR10_CLASSES, CLASSIFICATION_PROMPT
from sgma.surrogate.base import Encoder

_DESCRIPTION = re.compile(r"^You are given a description: (.*)$", re.MULTILINE)


def desk_captions() -> list[str]:
    return [desk.SceneObject(c, s, 0.5, 0.5, 0.15).with_article(False) for c, s in itertools.product(desk.COLORS, desk.SHAPES)]


class RetrievalVictim:
    def __init__(self, encoder: Union[str, Encoder], candidates: Optional[Sequence[str]] = None, judge_top_k: int = 3):
        if isinstance(encoder, str):
            from sgma.surrogate.registry import load_encoder

            encoder = load_encoder(encoder)
        self.encoder = encoder
        self.candidates = list(candidates or desk_captions())
        self.judge_top_k = judge_top_k
        with torch.no_grad():
            self._bank, _ = encoder.text(self.candidates)

    def _image(self, image: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.encoder.visual(image.unsqueeze(0).to(self.encoder.dtype)).embedding[0]

    def caption(self, image: torch.Tensor) -> str:
        scores = self._bank @ self._image(image)
        return self.candidates[int(scores.argmax())]

    def classify(self, image: torch.Tensor) -> str:
        with torch.no_grad():
            bank, _ = self.encoder.text([f"a photo of a {c}" for c in CIFAR10_CLASSES])
        return CIFAR10_CLASSES[int((bank @ self._image(image)).argmax())]

    def judge(self, image: torch.Tensor, description: str) -> str:
        embedding = self._image(image)
        with torch.no_grad():
            desc, _ = self.encoder.text([description])
        score = float(desc[0] @ embedding)
        better = int((self._bank @ embedding > score).sum())
        return f"Match with image: {'Yes' if better < self.judge_top_k else 'No'}"

    def __call__(self, image: torch.Tensor, prompt: str) -> str:
        found = _DESCRIPTION.search(prompt)
        if found:
            return self.judge(image, found.group(1))
        if prompt == CLASSIFICATION_PROMPT:
            return self.classify(image)
        # captioning prompts and free-form questions alike get the best caption
        return self.caption(image)
