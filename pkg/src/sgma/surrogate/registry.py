"""Encoder registry: id -> weight source, resolution and patch size.

The registry file is YAML::

    encoders:
      desk-clip:
        backend: desk
        source: packaged
        resolution: 64
        patch_size: 8
      clip-vit-b32:
        backend: hf
        source: openai/clip-vit-base-patch32
        resolution: 224
        patch_size: 32

Downloaded weights are cached under ``$SGMA_CACHE_DIR`` when set.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path

import torch
import yaml

from sgma.surrogate.base import CapabilityError, Encoder, EncoderLoadError

DEFAULT_REGISTRY = Path(__file__).resolve().parent.parent / "data" / "encoders.yaml"

# backends whose adapters expose [CLS] attention and value vectors
SUPPORTED_BACKENDS = ("desk", "hf")


@dataclass(frozen=True)
class EncoderSpec:
    id: str
    backend: str
    source: str
    resolution: int
    patch_size: int


def read_registry(path: str | Path | None = None) -> dict[str, EncoderSpec]:
    path = Path(path) if path else DEFAULT_REGISTRY
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    specs = {}
    for id_, entry in (raw.get("encoders") or {}).items():
        backend = entry.get("backend", "hf")
        if backend not in SUPPORTED_BACKENDS:
            raise CapabilityError(
                f"encoder {id_!r}: backend {backend!r} cannot expose attention and value internals"
            )
        specs[id_] = EncoderSpec(id_, backend, str(entry["source"]), int(entry["resolution"]), int(entry["patch_size"]))
    return specs


_cache: dict[tuple, Encoder] = {}
_cache_lock = threading.Lock()


def load_encoder(id: str, registry: str | Path | None = None, dtype: torch.dtype = torch.float32) -> Encoder:
    """Load (and memoize) an encoder by registry id."""
    specs = read_registry(registry)
    if id not in specs:
        raise EncoderLoadError(f"unknown encoder id {id!r}; registered: {sorted(specs)}")
    spec = specs[id]
    key = (spec, dtype)
    with _cache_lock:
        if key in _cache:
            return _cache[key]
        if spec.backend == "desk":
            from sgma.surrogate.desk_clip import DeskCLIP

            encoder = DeskCLIP.pretrained(None if spec.source == "packaged" else spec.source, dtype=dtype, id=id)
        else:
            from sgma.surrogate.hf_clip import HFCLIP

            encoder = HFCLIP.from_pretrained(spec.source, id=id, dtype=dtype)
        grid = spec.resolution // spec.patch_size
        if encoder.handle.resolution != spec.resolution or encoder.handle.patch_grid != (grid, grid):
            raise EncoderLoadError(
                f"encoder {id!r}: registry says {spec.resolution}px/{spec.patch_size}, "
                f"weights are {encoder.handle.resolution}px grid {encoder.handle.patch_grid}"
            )
        _cache[key] = encoder
        return encoder
