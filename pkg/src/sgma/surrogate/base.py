"""Encoder abstraction shared by every surrogate backend."""

from __future__ import annotations

import abc
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Union

import torch
import torch.nn.functional as F

from sgma.images import check_image


class EncoderError(RuntimeError):
    """Base class for surrogate failures."""


class EncoderLoadError(EncoderError):
    pass


class CapabilityError(EncoderError):
    """The encoder cannot expose an internal the caller needs."""


class InputError(ValueError):
    pass


class ObjectiveError(EncoderError):
    """An objective component is not differentiable."""


@dataclass(frozen=True)
class EncoderHandle:
    id: str
    resolution: int
    patch_grid: tuple[int, int]
    joint_dim: int
    hidden_dim: int

    def __post_init__(self):
        h, w = self.patch_grid
        if min(self.resolution, h, w, self.joint_dim, self.hidden_dim) <= 0:
            raise ValueError(f"encoder handle {self.id!r} has non-positive dimensions")

    @property
    def num_patches(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1


@dataclass
class Embedding:
    """Unit-norm joint-space vector plus metadata (e.g. text truncation)."""

    vector: torch.Tensor
    metadata: dict = field(default_factory=dict)


@dataclass
class TokenFeatures:
    """Final-layer visual internals for one image.

    ``all_tokens`` holds the post-layer-norm hidden states with [CLS] at row 0.
    ``cls_output`` is the final-layer [CLS] hidden state before the output
    layer norm and projection head.
    """

    all_tokens: torch.Tensor
    attn_cls: torch.Tensor
    values: torch.Tensor
    cls_output: torch.Tensor

    @property
    def patch_tokens(self) -> torch.Tensor:
        return self.all_tokens[1:]


@dataclass
class VisualOutput:
    """Batched result of one vision forward pass."""

    embedding: torch.Tensor  # (B, d), unit norm
    all_tokens: torch.Tensor  # (B, HW+1, d_v)
    attn_cls: torch.Tensor  # (B, HW)
    values: torch.Tensor  # (B, HW, d_v)
    cls_output: torch.Tensor  # (B, d_v)

    def tokens(self, index: int = 0) -> TokenFeatures:
        return TokenFeatures(
            all_tokens=self.all_tokens[index],
            attn_cls=self.attn_cls[index],
            values=self.values[index],
            cls_output=self.cls_output[index],
        )


class Encoder(abc.ABC):
    """A vision-language encoder pair exposing the internals the attack needs.

    Subclasses implement :meth:`visual`, :meth:`head` and :meth:`text`. Inputs
    are pixel tensors in [0, 1]; normalization happens inside the encoder so
    gradients are taken with respect to raw pixels.
    """

    handle: EncoderHandle
    #: When True the engine serializes calls through :attr:`lock`.
    exclusive: bool = False

    def __init__(self):
        self.lock = threading.Lock()

    @property
    def dtype(self) -> torch.dtype:
        return torch.float32

    @abc.abstractmethod
    def visual(self, pixels: torch.Tensor) -> VisualOutput:
        """Differentiable forward over a ``(B, 3, R, R)`` batch."""

    @abc.abstractmethod
    def head(self, cls_output: torch.Tensor) -> torch.Tensor:
        """Map final [CLS] hidden states to unit-norm joint embeddings."""

    @abc.abstractmethod
    def text(self, texts: list[str]) -> tuple[torch.Tensor, list[bool]]:
        """Unit-norm text embeddings and per-text truncation flags."""

    def text_embedding(self, text: str) -> torch.Tensor:
        """Single cached-free text embedding as a 1-D tensor."""
        if not text or not text.strip():
            raise InputError("text must be non-empty")
        with torch.no_grad():
            vectors, _ = self.text([text])
        return vectors[0]


def _batch(encoder: Encoder, image: torch.Tensor) -> torch.Tensor:
    check_image(image, encoder.handle.resolution)
    return image.unsqueeze(0).to(encoder.dtype)


def embed_image(encoder: Encoder, image: torch.Tensor) -> Embedding:
    with torch.no_grad():
        out = encoder.visual(_batch(encoder, image))
    return Embedding(out.embedding[0], {"encoder": encoder.handle.id})


def embed_text(encoder: Encoder, text: str) -> Embedding:
    if not text or not text.strip():
        raise InputError("text must be non-empty")
    with torch.no_grad():
        vectors, truncated = encoder.text([text])
    return Embedding(vectors[0], {"encoder": encoder.handle.id, "truncated": truncated[0]})


def forward_tokens(encoder: Encoder, image: torch.Tensor) -> TokenFeatures:
    with torch.no_grad():
        out = encoder.visual(_batch(encoder, image))
    return out.tokens(0)


Objective = Union[
    Callable[[Encoder, torch.Tensor], torch.Tensor],
    Mapping[str, Callable[[Encoder, torch.Tensor], torch.Tensor]],
]


def pixel_gradient(encoder: Encoder, image: torch.Tensor, objective: Objective) -> torch.Tensor:
    """Gradient of a scalar objective with respect to image pixels.

    ``objective`` is either ``f(encoder, pixels) -> scalar tensor`` or a
    mapping of named components that are summed. A component that returns
    something other than a tensor breaks the graph and is reported by name;
    a tensor with no dependence on the pixels contributes a zero gradient.
    """
    check_image(image, encoder.handle.resolution)
    pixels = image.detach().clone().requires_grad_(True)
    components = objective if isinstance(objective, Mapping) else {"objective": objective}
    total = None
    for name, fn in components.items():
        value = fn(encoder, pixels)
        if not isinstance(value, torch.Tensor):
            raise ObjectiveError(f"objective component {name!r} returned {type(value).__name__}, not a tensor")
        if value.numel() != 1:
            raise ObjectiveError(f"objective component {name!r} is not scalar")
        total = value.reshape(()) if total is None else total + value.reshape(())
    if total is None or not total.requires_grad:
        return torch.zeros_like(image)
    (grad,) = torch.autograd.grad(total, pixels, allow_unused=True)
    return torch.zeros_like(image) if grad is None else grad.detach()


def cosine_rows(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (F.normalize(a, dim=-1) * F.normalize(b, dim=-1)).sum(-1)
