"""Lossless persistence of adversarial images."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from sgma.engine import AttackRun
from sgma.images import save_png


@dataclass
class PersistedPaths:
    png: Path
    delta: Optional[Path] = None
    mask: Optional[Path] = None


def persist_adversarial(run: AttackRun, out_dir: str | Path, name: str, save_delta: bool = False,
                        save_mask: bool = True) -> PersistedPaths:
    """Write ``name.png`` (8-bit, lossless) plus optional raw delta and mask arrays."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = PersistedPaths(save_png(run.adversarial, out_dir / f"{name}.png"))
    if save_delta:
        paths.delta = out_dir / f"{name}.delta.npy"
        np.save(paths.delta, run.delta.detach().cpu().numpy())
    if save_mask:
        paths.mask = out_dir / f"{name}.mask.npy"
        np.save(paths.mask, run.mask.values.detach().cpu().numpy())
    return paths
