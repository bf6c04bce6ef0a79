"""Input-preprocessing defenses applied before victim inference."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from PIL import Image

from sgma.images import check_image, from_uint8, quantize


class DefenseConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DefenseSpec:
    kind: str
    bits: Optional[int] = None
    quality: Optional[int] = None

    def __post_init__(self):
        if self.kind == "bit_reduction":
            if not isinstance(self.bits, int) or not 1 <= self.bits <= 8:
                raise DefenseConfigError(f"bit reduction needs bits in [1, 8], got {self.bits!r}")
        elif self.kind == "jpeg":
            if not isinstance(self.quality, int) or not 1 <= self.quality <= 100:
                raise DefenseConfigError(f"jpeg needs quality in [1, 100], got {self.quality!r}")
        else:
            raise DefenseConfigError(f"unknown defense {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "DefenseSpec":
        """``bit_reduction:3`` or ``jpeg:75``."""
        kind, _, value = text.partition(":")
        try:
            number = int(value)
        except ValueError as exc:
            raise DefenseConfigError(f"bad defense spec {text!r}") from exc
        return cls(kind, bits=number) if kind == "bit_reduction" else cls(kind, quality=number)

    @property
    def label(self) -> str:
        return f"bit_reduction:{self.bits}" if self.kind == "bit_reduction" else f"jpeg:{self.quality}"


def bit_reduce(image: torch.Tensor, bits: int) -> torch.Tensor:
    levels = 2**bits
    q = torch.clamp(torch.floor(image.double() * levels), max=levels - 1)
    return q / (levels - 1)


def jpeg(image: torch.Tensor, quality: int) -> torch.Tensor:
    buf = io.BytesIO()
    Image.fromarray(quantize(image)).save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    decoded = np.asarray(Image.open(buf).convert("RGB"))
    return from_uint8(decoded)


def apply_defense(image: torch.Tensor, spec: DefenseSpec) -> torch.Tensor:
    check_image(image)
    if spec.kind == "bit_reduction":
        return bit_reduce(image, spec.bits)
    return jpeg(image, spec.quality)
