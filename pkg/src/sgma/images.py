"""Image tensor helpers: loading, resizing, 8-bit quantization and hashing.

Images travel through the library as float tensors of shape ``(3, R, R)``
with values in ``[0, 1]``.
"""

from __future__ import annotations

import hashlib
import io
from pathlib import Path

import numpy as np
import torch
from PIL import Image


class ResolutionError(ValueError):
    """Raised when an image does not match the expected resolution."""


def check_image(image: torch.Tensor, resolution: int | None = None) -> None:
    if image.ndim != 3 or image.shape[0] != 3 or image.shape[1] != image.shape[2]:
        raise ResolutionError(f"expected a (3, R, R) image, got {tuple(image.shape)}")
    if resolution is not None and image.shape[1] != resolution:
        raise ResolutionError(
            f"image resolution {image.shape[1]} does not match encoder resolution {resolution}"
        )


def from_uint8(array: np.ndarray) -> torch.Tensor:
    """HWC uint8 array -> (3, H, W) float64 tensor in [0, 1]."""
    if array.ndim == 2:
        array = np.stack([array] * 3, axis=-1)
    array = array[..., :3]
    return torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1))).double() / 255.0


def quantize(image: torch.Tensor) -> np.ndarray:
    """Round-half-away quantization to 8 bits; returns an HWC uint8 array.

    Pixel values are nonnegative, so half-away rounding is ``floor(255 x + 0.5)``.
    """
    scaled = torch.floor(image.detach().double().clamp(0.0, 1.0) * 255.0 + 0.5)
    return scaled.to(torch.uint8).permute(1, 2, 0).contiguous().numpy()


def load_image(path: str | Path, resolution: int | None = None) -> tuple[torch.Tensor, tuple[int, int]]:
    """Load an RGB image, optionally bicubic-resized to ``resolution``.

    Returns the tensor and the original ``(width, height)``.
    """
    with Image.open(path) as img:
        img = img.convert("RGB")
        original = img.size
        if resolution is not None and img.size != (resolution, resolution):
            img = img.resize((resolution, resolution), Image.BICUBIC)
        array = np.asarray(img)
    return from_uint8(array), original


def save_png(image: torch.Tensor, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed encoder settings keep the written bytes reproducible
    Image.fromarray(quantize(image)).save(path, format="PNG", optimize=False, compress_level=6)
    return path


def png_bytes(image: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(quantize(image)).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def image_hash(image: torch.Tensor) -> str:
    """SHA-256 of the 8-bit quantized pixels (stable across float noise below 1/510)."""
    return hashlib.sha256(quantize(image).tobytes()).hexdigest()
