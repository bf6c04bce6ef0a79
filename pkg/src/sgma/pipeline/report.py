"""Aggregate result directories into tables and diagnostic images."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from sgma.evaluation.asr import pooled_asr
from sgma.images import load_image, quantize
from sgma.pipeline.batch import RESULTS_FILE, _cell, asr_of, read_jsonl
from sgma.saliency import export_heatmap, patch_deviation

logger = logging.getLogger(__name__)


class ReportError(RuntimeError):
    pass


def _groups(results_dir: Path) -> dict[str, list[dict]]:
    files = sorted(results_dir.rglob(RESULTS_FILE))
    if not files:
        raise ReportError(f"no {RESULTS_FILE} under {results_dir}")
    return {(f.parent.relative_to(results_dir).as_posix() or "."): read_jsonl(f) for f in files}


def _evaluators(records: list[dict]) -> list[str]:
    for r in records:
        if "similarity_adv" in r:
            return list(r["similarity_adv"]["per_encoder"])
    return []


def table_rows(groups: dict[str, list[dict]]) -> tuple[list[dict], list[str]]:
    """One row per group (adversarial similarity and ASR) plus a pooled row."""
    evaluators: list[str] = []
    for records in groups.values():
        for ev in _evaluators(records):
            if ev not in evaluators:
                evaluators.append(ev)
    rows, summaries = [], []
    for name, records in groups.items():
        ok = [r for r in records if "error" not in r]
        task = ok[0].get("task", "captioning") if ok else "captioning"
        row = {"group": name, "n": len(ok), "failed": len(records) - len(ok)}
        for ev in evaluators:
            vals = [r["similarity_adv"]["per_encoder"][ev] for r in ok if ev in r.get("similarity_adv", {}).get("per_encoder", {})]
            row[ev] = sum(vals) / len(vals) if vals else None
        present = [row[ev] for ev in evaluators if row[ev] is not None]
        row["ensemble"] = sum(present) / len(present) if present else None
        summary = asr_of(ok, task) if ok else None
        row["asr"] = summary.asr if summary else None
        if summary:
            summaries.append(summary)
        rows.append(row)
    if len(groups) > 1 and summaries:
        pooled = pooled_asr(summaries)
        rows.append({"group": "pooled", "n": sum(r["n"] for r in rows), "failed": sum(r["failed"] for r in rows),
                     **{ev: None for ev in evaluators}, "ensemble": None, "asr": pooled.asr})
    return rows, evaluators


def _overlay(clean: np.ndarray, mask: np.ndarray) -> Image.Image:
    red = np.zeros_like(clean, dtype=np.float64)
    red[..., 0] = 255.0
    alpha = 0.6 * mask[..., None]
    blended = (1 - alpha) * clean.astype(np.float64) + alpha * red
    return Image.fromarray(np.floor(blended + 0.5).clip(0, 255).astype(np.uint8))


def diagnostics(group_dir: Path, records: list[dict], encoder_id: Optional[str]) -> list[Path]:
    """Per-image patch-deviation heatmaps and mask overlays under ``group_dir/figures``."""
    written = []
    encoder = None
    if encoder_id:
        from sgma.surrogate.registry import load_encoder

        encoder = load_encoder(encoder_id)
    out = group_dir / "figures"
    for record in records:
        if "error" in record:
            continue
        adv, _ = load_image(group_dir / record["adv_png"])
        clean, _ = load_image(record["image"], adv.shape[1])
        if encoder is not None and encoder.handle.resolution == adv.shape[1]:
            deviation = patch_deviation(encoder, clean, adv)
            written.append(export_heatmap(deviation.distances, out / f"{record['id']}.deviation.png",
                                          out / f"{record['id']}.deviation.csv", value_range=(0.0, 2.0)))
        if record.get("mask"):
            mask = np.load(group_dir / record["mask"])
            path = out / f"{record['id']}.mask.png"
            out.mkdir(parents=True, exist_ok=True)
            _overlay(quantize(clean), mask).save(path)
            written.append(path)
    return written


def report(results_dir: str | Path, figures: bool = True) -> dict:
    results_dir = Path(results_dir)
    if not results_dir.is_dir():
        raise ReportError(f"results directory not found: {results_dir}")
    groups = _groups(results_dir)
    rows, evaluators = table_rows(groups)
    header = ["group", "n", "failed", *evaluators, "ensemble", "asr"]
    csv_lines = [",".join(header)] + [",".join(_cell(row.get(k)) for k in header) for row in rows]
    (results_dir / "report.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in rows:
        md.append("| " + " | ".join(f"{row[k]:.4f}" if isinstance(row.get(k), float) else _cell(row.get(k)) for k in header) + " |")
    (results_dir / "report.md").write_text("# SGMA report\n\n" + "\n".join(md) + "\n", encoding="utf-8")
    written = []
    if figures:
        for name, records in groups.items():
            group_dir = results_dir / name
            config_path = group_dir / "config.json"
            encoder_id = None
            if config_path.exists():
                surrogates = json.loads(config_path.read_text(encoding="utf-8")).get("surrogates") or []
                encoder_id = surrogates[0] if surrogates else None
            written += diagnostics(group_dir, records, encoder_id)
    return {"rows": rows, "evaluators": evaluators, "figures": written}
