"""JSONL manifests: one ``{id, image, caption?, label?, question?, answer?}`` per line."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from sgma.images import load_image


class ManifestError(ValueError):
    pass


@dataclass
class ManifestEntry:
    id: str
    image_path: Path
    caption: Optional[str] = None
    label: Optional[str] = None
    question: Optional[str] = None
    answer: Optional[str] = None
    image: Optional[torch.Tensor] = None
    original_size: Optional[tuple[int, int]] = None

    def as_dict(self) -> dict:
        return {
            "id": self.id,
            "image": str(self.image_path),
            "caption": self.caption,
            "label": self.label,
            "question": self.question,
            "answer": self.answer,
        }


_OPTIONAL = ("caption", "label", "question", "answer")


def ingest(manifest_path: str | Path, resolution: Optional[int] = None) -> list[ManifestEntry]:
    """Parse and validate a manifest, loading each image (bicubic-resized to ``resolution``)."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest not found: {manifest_path}")
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{manifest_path}: line {lineno}: malformed JSON ({exc.msg})") from exc
        if not isinstance(row, dict) or not isinstance(row.get("id"), str) or not row["id"]:
            raise ManifestError(f"{manifest_path}: line {lineno}: expected an object with a string id")
        if not isinstance(row.get("image"), str):
            raise ManifestError(f"{manifest_path}: line {lineno}: entry {row['id']!r} has no image path")
        entry_id = row["id"]
        if entry_id in seen:
            raise ManifestError(f"{manifest_path}: line {lineno}: duplicate id {entry_id!r}")
        seen.add(entry_id)
        path = Path(row["image"])
        if not path.is_absolute():
            path = manifest_path.parent / path
        try:
            image, size = load_image(path, resolution)
        except (OSError, ValueError) as exc:
            raise ManifestError(f"entry {entry_id!r}: cannot read image {path}: {exc}") from exc
        extras = {}
        for key in _OPTIONAL:
            value = row.get(key)
            if value is not None and not isinstance(value, str):
                raise ManifestError(f"{manifest_path}: line {lineno}: {key} of {entry_id!r} must be a string")
            extras[key] = value
        entries.append(ManifestEntry(entry_id, path, image=image, original_size=size, **extras))
    return entries


def write_manifest(entries: list[ManifestEntry], path: str | Path) -> Path:
    path = Path(path)
    lines = [json.dumps({k: v for k, v in e.as_dict().items() if v is not None}, sort_keys=True) for e in entries]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
