"""Batch orchestration: caption, attack, persist, evaluate from disk, summarize."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import torch

from sgma.clients import (
    HTTPTransport,
    LocalTransport,
    MockTransport,
    RetryPolicy,
    VLMClient,
    caption_image,
    describe_for_captioning_task,
)
from sgma.engine import resolve_encoders, run_attack
from sgma.evaluation.asr import CLASSIFICATION_PROMPT, compute_asr, normalize_answer, normalize_category
from sgma.evaluation.defenses import apply_defense
from sgma.evaluation.judge import judge_caption
from sgma.evaluation.quality import image_quality
from sgma.evaluation.similarity import clip_similarity
from sgma.images import load_image
from sgma.objectives import ConfigurationError
from sgma.pipeline.config import RunConfig, dump_config
from sgma.pipeline.manifest import ManifestEntry
from sgma.pipeline.persist import persist_adversarial
from sgma.surrogate.base import embed_image, embed_text

logger = logging.getLogger(__name__)

RESULTS_FILE = "results.jsonl"
SUMMARY_FILE = "summary.csv"
REPORT_FILE = "report.md"


def build_client(role: str, spec: dict, base_dir: Path = Path(".")) -> VLMClient:
    kind = spec.get("kind")
    retry = RetryPolicy(
        int(spec.get("max_attempts", 3)), float(spec.get("base_delay", 1.0)), float(spec.get("factor", 2.0))
    )
    if kind == "mock":
        table = {}
        if spec.get("table"):
            path = Path(spec["table"])
            path = path if path.is_absolute() else base_dir / path
            for line in path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    row = json.loads(line)
                    table[(row["image_hash"], row["prompt"])] = row["text"]
        reply = spec.get("reply")
        transport = MockTransport(table, default=(lambda _h, _p: reply) if reply is not None else None)
    elif kind == "retrieval":
        from sgma.victims import RetrievalVictim

        transport = LocalTransport(RetrievalVictim(spec.get("encoder", "desk-clip"), spec.get("candidates")))
    elif kind == "http":
        missing = [k for k in ("url", "model") if not spec.get(k)]
        if missing:
            raise ConfigurationError(f"client {role!r} needs {', '.join(missing)}")
        transport = HTTPTransport(
            spec["url"],
            spec["model"],
            spec.get("api_key_env"),
            timeout=float(spec.get("timeout", 60.0)),
            temperature=float(spec.get("temperature", 0.0)),
            max_tokens=int(spec.get("max_tokens", 128)),
        )
    else:
        raise ConfigurationError(f"client {role!r}: unknown kind {kind!r}")
    return VLMClient(role, transport, retry, rate_limit=spec.get("rate_limit"))


@dataclass
class Clients:
    proxy: Optional[VLMClient] = None
    victim: Optional[VLMClient] = None
    judge: Optional[VLMClient] = None

    @classmethod
    def from_config(cls, config: RunConfig) -> "Clients":
        built = {role: build_client(role, spec, config.base_dir) for role, spec in config.clients.items()}
        unknown = set(built) - {"proxy", "victim", "judge"}
        if unknown:
            raise ConfigurationError(f"unknown client roles: {', '.join(sorted(unknown))}")
        return cls(**built)


@dataclass
class BatchResult:
    records: list[dict]
    summary: list[dict]
    failures: list[str] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return 1 if self.failures else 0


def _surrogate_similarity(encoders, image: torch.Tensor, caption: str) -> dict[str, float]:
    out = {}
    for encoder in encoders:
        v = embed_image(encoder, image).vector.double()
        t = embed_text(encoder, caption).vector.double()
        out[encoder.handle.id] = float((v * t).sum())
    return out


# ---------------------------------------------------------------- stages


def attack_entry(entry: ManifestEntry, config: RunConfig, clients: Clients, adv_dir: Path) -> dict:
    resolution = entry.image.shape[1]
    caption = caption_image(clients.proxy, entry.image, entry.caption)
    run = run_attack(entry.image, caption, config.attack_config(resolution))
    paths = persist_adversarial(run, adv_dir, entry.id, save_delta=config.save_delta)
    encoders = resolve_encoders(config.surrogates)
    adv = load_image(paths.png)[0]
    initial = run.loss_trace[0].as_dict() if run.loss_trace else run.final.as_dict()
    root = adv_dir.parent
    return {
        "id": entry.id,
        "image": str(entry.image_path),
        "original_size": list(entry.original_size) if entry.original_size else None,
        "caption": caption,
        "caption_source": "manifest" if entry.caption else "proxy",
        "adv_png": paths.png.relative_to(root).as_posix(),
        "delta": paths.delta.relative_to(root).as_posix() if paths.delta else None,
        "mask": paths.mask.relative_to(root).as_posix() if paths.mask else None,
        "config_hash": run.metadata["config_hash"],
        "phrases": run.metadata["phrases"],
        "chunker_fallback": run.metadata["chunker_fallback"],
        "loss_initial": initial,
        "loss_final": run.final.as_dict(),
        "loss_trace": [b.total for b in run.loss_trace],
        "surrogate_similarity": {
            "clean": _surrogate_similarity(encoders, entry.image, caption),
            "adversarial": _surrogate_similarity(encoders, adv, caption),
        },
    }


def evaluate_entry(record: dict, entry: ManifestEntry, config: RunConfig, clients: Clients, root: Path) -> dict:
    """Victim outputs, similarity and quality, reading the adversarial image back from disk."""
    if clients.victim is None:
        raise ConfigurationError("evaluation needs a victim client")
    clean = entry.image
    adv = load_image(root / record["adv_png"])[0]
    shown = apply_defense(adv, config.defense) if config.defense else adv
    out = dict(record)
    out["task"] = config.task
    out["defense"] = config.defense.label if config.defense else None
    out["quality"] = image_quality(clean, adv).as_dict()
    if config.task == "captioning":
        clean_text = describe_for_captioning_task(clients.victim, clean)
        adv_text = describe_for_captioning_task(clients.victim, shown)
        out["clean_text"], out["adv_text"] = clean_text, adv_text
        out["similarity_clean"] = clip_similarity(config.evaluators, clean, clean_text, config.surrogates).as_dict()
        out["similarity_adv"] = clip_similarity(config.evaluators, clean, adv_text, config.surrogates).as_dict()
    elif config.task == "classification":
        if entry.label is None:
            raise ConfigurationError(f"entry {entry.id!r} has no label")
        prediction = clients.victim.query(shown, CLASSIFICATION_PROMPT).text
        out["prediction"], out["label"] = prediction, entry.label
        predicted = normalize_category(prediction)
        out["success"] = predicted is None or predicted != normalize_answer(entry.label)
    else:
        if entry.question is None or entry.answer is None:
            raise ConfigurationError(f"entry {entry.id!r} needs question and answer")
        answer = clients.victim.query(shown, entry.question).text
        out["prediction"], out["label"] = answer, entry.answer
        out["success"] = normalize_answer(answer) != normalize_answer(entry.answer)
    return out


def judge_entry(record: dict, entry: ManifestEntry, clients: Clients) -> dict:
    if clients.judge is None:
        return record
    verdict = judge_caption(clients.judge, entry.image, record["adv_text"])
    return {**record, "verdict": verdict.match, "judge_raw": verdict.raw_text}


# ---------------------------------------------------------------- summaries


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def asr_of(records: list[dict], task: str):
    if task == "captioning":
        verdicts = [r.get("verdict") for r in records if "verdict" in r]
        return compute_asr(verdicts, task) if verdicts else None
    pairs = [(r["prediction"], r["label"]) for r in records if "prediction" in r]
    return compute_asr(pairs, task) if pairs else None


def summarize(records: list[dict], task: str, evaluators: Sequence[str]) -> list[dict]:
    """Rows in the layout: setting, n, one column per evaluator, ensemble, asr."""
    ok = [r for r in records if "error" not in r]
    rows = []
    if not ok:
        return rows
    asr = asr_of(ok, task)
    if task == "captioning":
        for setting, key in (("clean", "similarity_clean"), ("sgma", "similarity_adv")):
            row = {"setting": setting, "n": len(ok)}
            for ev in evaluators:
                row[ev] = _mean([r[key]["per_encoder"][ev] for r in ok])
            row["ensemble"] = _mean([row[ev] for ev in evaluators])
            row["asr"] = asr.asr if (asr and setting == "sgma") else None
            rows.append(row)
    else:
        row = {"setting": "sgma", "n": len(ok), **{ev: None for ev in evaluators}, "ensemble": None}
        row["asr"] = asr.asr if asr else None
        rows.append(row)
    return rows


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def summary_csv(rows: list[dict], evaluators: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["setting", "n", *evaluators, "ensemble", "asr"]
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(row.get(k)) for k in header])
    return buf.getvalue()


def markdown_table(rows: list[dict], evaluators: Sequence[str]) -> str:
    header = ["setting", "n", *evaluators, "ensemble", "asr (%)"]
    keys = ["setting", "n", *evaluators, "ensemble", "asr"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in rows:
        cells = [f"{row[k]:.4f}" if isinstance(row.get(k), float) else ("" if row.get(k) is None else str(row[k])) for k in keys]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_jsonl(records: list[dict], path: Path) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


# ---------------------------------------------------------------- batch


def run_batch(config: RunConfig, entries: Sequence[ManifestEntry], clients: Optional[Clients] = None) -> BatchResult:
    """Attack and evaluate every entry; one failing entry never stops the rest."""
    if not entries:
        raise ValueError("no manifest entries to process")
    clients = clients or Clients.from_config(config)
    if clients.victim is None:
        raise ConfigurationError("run_batch needs a victim client")
    # fail fast on unknown encoder ids instead of once per entry
    resolve_encoders([*config.surrogates, *config.evaluators])
    root = Path(config.output_dir)
    adv_dir = root / "adv"
    adv_dir.mkdir(parents=True, exist_ok=True)
    dump_config(config, root / "config.json")

    def one(entry: ManifestEntry) -> dict:
        try:
            record = attack_entry(entry, config, clients, adv_dir)
            record = evaluate_entry(record, entry, config, clients, root)
            if config.task == "captioning":
                record = judge_entry(record, entry, clients)
            return record
        except Exception as exc:
            logger.error("entry %s failed: %s", entry.id, exc)
            return {"id": entry.id, "error": f"{type(exc).__name__}: {exc}"}

    records: list[dict] = []
    with ThreadPoolExecutor(max_workers=config.workers) as pool, (root / RESULTS_FILE).open("w", encoding="utf-8") as fh:
        # results arrive in manifest order and are written by this thread only
        for record in pool.map(one, entries):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            records.append(record)

    failures = [r["id"] for r in records if "error" in r]
    rows = summarize(records, config.task, config.evaluators)
    (root / SUMMARY_FILE).write_text(summary_csv(rows, config.evaluators), encoding="utf-8")
    report = ["# SGMA run", "", f"task: {config.task}, entries: {len(records)}, failed: {len(failures)}", ""]
    report.append(markdown_table(rows, config.evaluators))
    if failures:
        report += ["## Failures", ""] + [f"- {r['id']}: {r['error']}" for r in records if "error" in r] + [""]
    (root / REPORT_FILE).write_text("\n".join(report), encoding="utf-8")
    return BatchResult(records, rows, failures)
