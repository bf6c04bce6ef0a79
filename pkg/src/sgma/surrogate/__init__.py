"""Vision-language encoders exposing embeddings, final-layer tokens and attention internals."""

from sgma.surrogate.base import (
    CapabilityError,
    Embedding,
    Encoder,
    EncoderError,
    EncoderHandle,
    EncoderLoadError,
    InputError,
    ObjectiveError,
    TokenFeatures,
    VisualOutput,
    embed_image,
    embed_text,
    forward_tokens,
    pixel_gradient,
)
from sgma.surrogate.registry import load_encoder, read_registry

__all__ = [
    "CapabilityError",
    "Embedding",
    "Encoder",
    "EncoderError",
    "EncoderHandle",
    "EncoderLoadError",
    "InputError",
    "ObjectiveError",
    "TokenFeatures",
    "VisualOutput",
    "embed_image",
    "embed_text",
    "forward_tokens",
    "load_encoder",
    "pixel_gradient",
    "read_registry",
]
