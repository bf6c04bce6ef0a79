"""``sgma`` command line interface.

Exit codes: 0 success, 1 some entries failed, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from sgma.clients import caption_image
from sgma.evaluation.defenses import DefenseConfigError, DefenseSpec, apply_defense
from sgma.images import load_image, save_png
from sgma.objectives import ConfigurationError
from sgma.pipeline import batch
from sgma.pipeline.config import RunConfig, dump_config, load_config, with_overrides
from sgma.pipeline.manifest import ManifestError, ingest, write_manifest
from sgma.surrogate.base import EncoderError

logger = logging.getLogger("sgma")

RUNS_FILE = "runs.jsonl"


def _attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--manifest", required=True, help="JSONL manifest")
    p.add_argument("--out", dest="output_dir", help="output directory (overrides config)")
    p.add_argument("--epsilon", type=int, help="budget numerator over 255 (8 means 8/255)")
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", type=float, help="step numerator over 255")
    p.add_argument("--base-ratio", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--encoders", help="comma-separated surrogate ids")
    p.add_argument("--goal", choices=("untargeted", "targeted"))
    p.add_argument("--target-caption")
    p.add_argument("--target-image")
    p.add_argument("--workers", type=int)


def _config(args) -> RunConfig:
    config = load_config(getattr(args, "config", None))
    overrides = {
        "output_dir": getattr(args, "output_dir", None),
        "epsilon": getattr(args, "epsilon", None),
        "steps": getattr(args, "steps", None),
        "step_size": getattr(args, "step_size", None),
        "base_ratio": getattr(args, "base_ratio", None),
        "tau": getattr(args, "tau", None),
        "seed": getattr(args, "seed", None),
        "goal": getattr(args, "goal", None),
        "target_caption": getattr(args, "target_caption", None),
        "target_image": getattr(args, "target_image", None),
        "workers": getattr(args, "workers", None),
    }
    if getattr(args, "encoders", None):
        overrides["surrogates"] = [e.strip() for e in args.encoders.split(",") if e.strip()]
    if overrides["target_image"]:
        overrides["target_image"] = str(Path(overrides["target_image"]).resolve())
    config = with_overrides(config, **overrides)
    config.__post_init__()
    return config


def _entries(config: RunConfig, manifest: str):
    from sgma.surrogate.registry import load_encoder

    resolution = load_encoder(config.surrogates[0]).handle.resolution
    return ingest(manifest, resolution)


def _by_id(entries):
    return {e.id: e for e in entries}


# ---------------------------------------------------------------- commands


def cmd_run(args) -> int:
    config = _config(args)
    result = batch.run_batch(config, _entries(config, args.manifest))
    print(Path(config.output_dir) / batch.SUMMARY_FILE)
    return result.exit_code


def cmd_attack(args) -> int:
    config = _config(args)
    entries = _entries(config, args.manifest)
    clients = batch.Clients.from_config(config)
    root = Path(config.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    dump_config(config, root / "config.json")
    records = []
    for entry in entries:
        try:
            records.append(batch.attack_entry(entry, config, clients, root / "adv"))
        except Exception as exc:
            logger.error("entry %s failed: %s", entry.id, exc)
            records.append({"id": entry.id, "error": f"{type(exc).__name__}: {exc}"})
    batch.write_jsonl(records, root / RUNS_FILE)
    return 1 if any("error" in r for r in records) else 0


def cmd_caption(args) -> int:
    config = load_config(args.config)
    entries = ingest(args.manifest)
    clients = batch.Clients.from_config(config)
    for entry in entries:
        entry.caption = caption_image(clients.proxy, entry.image, entry.caption)
    print(write_manifest(entries, args.out))
    return 0


def cmd_evaluate(args) -> int:
    config = _config(args)
    root = Path(config.output_dir)
    entries = _by_id(_entries(config, args.manifest))
    clients = batch.Clients.from_config(config)
    records = []
    for record in batch.read_jsonl(root / RUNS_FILE):
        if "error" in record:
            records.append(record)
            continue
        try:
            records.append(batch.evaluate_entry(record, entries[record["id"]], config, clients, root))
        except Exception as exc:
            logger.error("entry %s failed: %s", record["id"], exc)
            records.append({"id": record["id"], "error": f"{type(exc).__name__}: {exc}"})
    batch.write_jsonl(records, root / batch.RESULTS_FILE)
    rows = batch.summarize(records, config.task, config.evaluators)
    (root / batch.SUMMARY_FILE).write_text(batch.summary_csv(rows, config.evaluators), encoding="utf-8")
    return 1 if any("error" in r for r in records) else 0


def cmd_judge(args) -> int:
    config = _config(args)
    root = Path(config.output_dir)
    entries = _by_id(_entries(config, args.manifest))
    clients = batch.Clients.from_config(config)
    if clients.judge is None:
        raise ConfigurationError("no judge client configured")
    records = [r if "error" in r else batch.judge_entry(r, entries[r["id"]], clients)
               for r in batch.read_jsonl(root / batch.RESULTS_FILE)]
    batch.write_jsonl(records, root / batch.RESULTS_FILE)
    rows = batch.summarize(records, "captioning", config.evaluators)
    (root / batch.SUMMARY_FILE).write_text(batch.summary_csv(rows, config.evaluators), encoding="utf-8")
    summary = batch.asr_of([r for r in records if "error" not in r], "captioning")
    print(json.dumps(summary.as_dict() if summary else None))
    return 0


def cmd_asr(args) -> int:
    records = [r for r in batch.read_jsonl(Path(args.results_dir) / batch.RESULTS_FILE) if "error" not in r]
    if not records:
        raise ConfigurationError("no successful records to score")
    task = args.task or records[0].get("task", "captioning")
    summary = batch.asr_of(records, task)
    if summary is None:
        raise ConfigurationError(f"records carry no {task} outcomes")
    print(json.dumps(summary.as_dict()))
    return 0


def cmd_defend(args) -> int:
    try:
        spec = DefenseSpec.parse(args.defense)
    except DefenseConfigError as exc:
        raise ConfigurationError(str(exc)) from exc
    out = Path(args.out)
    sources = sorted(Path(args.input).glob("*.png")) if Path(args.input).is_dir() else [e.image_path for e in ingest(args.input)]
    for path in sources:
        image, _ = load_image(path)
        save_png(apply_defense(image, spec), out / Path(path).name)
    print(out)
    return 0


def cmd_report(args) -> int:
    from sgma.pipeline.report import report

    result = report(args.results_dir, figures=not args.no_figures)
    print(Path(args.results_dir) / "report.md")
    return 0 if all(r["failed"] == 0 for r in result["rows"]) else 1


def cmd_gradcheck(args) -> int:
    import torch

    from sgma import desk
    from sgma.gradcheck import audit
    from sgma.images import from_uint8
    from sgma.surrogate.registry import load_encoder

    encoder = load_encoder(args.encoder, dtype=torch.float64)
    scene = desk.desk_corpus(2)[1]
    target = desk.target_scene("blue", "square")
    if encoder.handle.resolution != scene.image.shape[0]:
        raise ConfigurationError("gradcheck uses the 64x64 desk scenes; pick a 64-pixel encoder")
    results = audit(encoder, from_uint8(scene.image), scene.caption, target.caption, from_uint8(target.image),
                    coords=args.coords, h=args.step, seed=args.seed)
    failed = 0
    for r in results:
        ok = r.rel_error <= args.tolerance
        failed += not ok
        print(f"{r.loss:24s} {str(r.coordinate):14s} analytic={r.analytic:+.6e} numeric={r.numeric:+.6e} "
              f"rel={r.rel_error:.2e} {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgma", description="Semantic-guided multimodal adversarial attacks")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="attack, evaluate, judge and summarize a manifest")
    _attack_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("attack", help="manifest -> adversarial PNGs and run records")
    _attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("caption", help="fill missing manifest captions via the proxy client")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output manifest path")
    p.set_defaults(func=cmd_caption)

    for name, func, text in (("evaluate", cmd_evaluate, "victim outputs, similarity and quality"),
                             ("judge", cmd_judge, "judge verdicts and captioning ASR")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config")
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", dest="output_dir", help="run directory (overrides config)")
        p.set_defaults(func=func)

    p = sub.add_parser("asr", help="ASR from a results directory")
    p.add_argument("results_dir")
    p.add_argument("--task", choices=("captioning", "classification", "vqa"))
    p.set_defaults(func=cmd_asr)

    p = sub.add_parser("defend", help="apply a preprocessing defense to images")
    p.add_argument("input", help="manifest or directory of PNGs")
    p.add_argument("--defense", required=True, help="bit_reduction:<bits> or jpeg:<quality>")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("report", help="tables and heatmaps for result directories")
    p.add_argument("results_dir")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference audit of loss gradients")
    p.add_argument("--encoder", default="desk-clip")
    p.add_argument("--coords", type=int, default=10)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ManifestError, EncoderError, DefenseConfigError, FileNotFoundError) as exc:
        print(f"sgma: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
