"""Run configuration loaded from YAML.

Example::

    output_dir: runs/desk
    task: captioning          # captioning | classification | vqa
    surrogates: [desk-clip]
    evaluators: [desk-clip]
    workers: 1
    save_delta: false
    defense: jpeg:75          # or bit_reduction:3, or omitted
    attack:
      epsilon: 8              # numerator over 255
      steps: 100
      step_size: 1            # numerator over 255
      base_ratio: 0.2
      tau: 0.3
      seed: 0
      global_ti: true
      global_ii: true
      local: true
      semantic_budget: true
      goal: untargeted        # or targeted
      target_caption: null
      target_image: null      # path
      fusion_weight: 1.0
    clients:
      proxy:  {kind: retrieval, encoder: desk-clip}
      victim: {kind: retrieval, encoder: desk-clip}
      judge:  {kind: mock, reply: "Match with image: No"}

Client kinds are ``mock`` (``reply`` text and/or a ``table`` JSONL of
``{image_hash, prompt, text}`` rows), ``retrieval`` (zero-shot encoder
retrieval, see :mod:`sgma.victims`) and ``http`` (``url``, ``model``,
``api_key_env``, ``temperature``, ``max_tokens``, ``rate_limit``). Relative
paths resolve against the config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from sgma.engine import AttackConfig
from sgma.evaluation.defenses import DefenseConfigError, DefenseSpec
from sgma.objectives import AttackGoal, ConfigurationError

TASKS = ("captioning", "classification", "vqa")


@dataclass
class AttackSettings:
    """Attack knobs as written in config files (budgets in 1/255 units)."""

    epsilon: float = 8
    steps: int = 100
    step_size: float = 1
    base_ratio: float = 0.2
    tau: float = 0.3
    seed: int = 0
    global_ti: bool = True
    global_ii: bool = True
    local: bool = True
    semantic_budget: bool = True
    goal: str = "untargeted"
    target_caption: Optional[str] = None
    target_image: Optional[str] = None
    fusion_weight: float = 1.0


@dataclass
class RunConfig:
    output_dir: Path = Path("runs/sgma")
    task: str = "captioning"
    surrogates: list[str] = field(default_factory=lambda: ["desk-clip"])
    evaluators: list[str] = field(default_factory=lambda: ["desk-clip"])
    attack: AttackSettings = field(default_factory=AttackSettings)
    clients: dict[str, dict] = field(default_factory=dict)
    defense: Optional[DefenseSpec] = None
    workers: int = 1
    save_delta: bool = False
    base_dir: Path = Path(".")

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        if not self.surrogates:
            raise ConfigurationError("at least one surrogate encoder is required")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if self.attack.goal not in ("untargeted", "targeted"):
            raise ConfigurationError(f"unknown goal {self.attack.goal!r}")
        if self.attack.goal == "targeted" and not (self.attack.target_caption and self.attack.target_image):
            raise ConfigurationError("targeted goal needs target_caption and target_image")
        for role, spec in self.clients.items():
            if spec.get("kind") not in ("mock", "retrieval", "http"):
                raise ConfigurationError(f"client {role!r}: unknown kind {spec.get('kind')!r}")

    def resolve(self, path) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.base_dir / path

    def attack_config(self, resolution: int) -> AttackConfig:
        from sgma.images import load_image

        a = self.attack
        goal = AttackGoal(a.goal)
        if a.goal == "targeted":
            target, _ = load_image(self.resolve(a.target_image), resolution)
            goal = AttackGoal("targeted", a.target_caption, target, a.fusion_weight)
        return AttackConfig(
            steps=a.steps,
            step_size=a.step_size / 255,
            epsilon=a.epsilon / 255,
            base_ratio=a.base_ratio,
            tau=a.tau,
            global_ti=a.global_ti,
            global_ii=a.global_ii,
            local=a.local,
            semantic_budget=a.semantic_budget,
            goal=goal,
            seed=a.seed,
            encoders=tuple(self.surrogates),
        )

    def as_dict(self) -> dict:
        """Serializable view; client entries hold env-var names only, never secrets."""
        return {
            "output_dir": str(self.output_dir),
            "task": self.task,
            "surrogates": list(self.surrogates),
            "evaluators": list(self.evaluators),
            "attack": dict(vars(self.attack)),
            "clients": {k: _client_record(v) for k, v in sorted(self.clients.items())},
            "defense": self.defense.label if self.defense else None,
            "workers": self.workers,
            "save_delta": self.save_delta,
        }


def _client_record(spec: dict) -> dict:
    out = dict(spec)
    if out.get("kind") == "http":
        # decoding settings are a reproducibility variable; record the defaults too
        out.setdefault("temperature", 0.0)
        out.setdefault("max_tokens", 128)
    return out


def _defense(value) -> Optional[DefenseSpec]:
    if value in (None, "", "none"):
        return None
    if isinstance(value, dict):
        return DefenseSpec(value.get("kind"), bits=value.get("bits"), quality=value.get("quality"))
    return DefenseSpec.parse(str(value))


def build_config(raw: dict[str, Any], base_dir: Path = Path(".")) -> RunConfig:
    raw = dict(raw or {})
    known = {"output_dir", "task", "surrogates", "evaluators", "attack", "clients", "defense", "workers", "save_delta"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    attack_raw = dict(raw.pop("attack", None) or {})
    fields = set(AttackSettings.__dataclass_fields__)
    bad = set(attack_raw) - fields
    if bad:
        raise ConfigurationError(f"unknown attack keys: {', '.join(sorted(bad))}")
    try:
        defense = _defense(raw.pop("defense", None))
    except DefenseConfigError as exc:
        raise ConfigurationError(str(exc)) from exc
    out = Path(raw.pop("output_dir", "runs/sgma"))
    return RunConfig(
        output_dir=out if out.is_absolute() else base_dir / out,
        attack=AttackSettings(**attack_raw),
        defense=defense,
        base_dir=base_dir,
        **{k: v for k, v in raw.items()},
    )


def load_config(path: Optional[str | Path]) -> RunConfig:
    if path is None:
        return build_config({})
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config file {path} is not valid YAML: {exc}") from exc
    return build_config(raw or {}, path.parent)


def with_overrides(config: RunConfig, **overrides) -> RunConfig:
    """Apply CLI overrides; ``None`` values leave the config untouched."""
    attack_keys = set(AttackSettings.__dataclass_fields__)
    attack = replace(config.attack, **{k: v for k, v in overrides.items() if k in attack_keys and v is not None})
    top = {k: v for k, v in overrides.items() if k not in attack_keys and v is not None}
    if "output_dir" in top:
        top["output_dir"] = Path(top["output_dir"])
    updated = replace(config, attack=attack, **top)
    return updated


def dump_config(config: RunConfig, path: Path) -> None:
    path.write_text(json.dumps(config.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
