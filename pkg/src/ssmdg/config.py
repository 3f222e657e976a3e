"""Experiment configuration, JSON config files, overrides and variant presets."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Tuple

from .datagen import TaskSpec
from .gating import GateVariant

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Raised with a list of ``(json_path, message)`` problems."""

    def __init__(self, problems: List[Tuple[str, str]]):
        self.problems = problems
        super().__init__("; ".join(f"{p}: {m}" for p, m in problems))

    def record(self) -> dict:
        return {"error": "config", "problems": [{"path": p, "message": m} for p, m in self.problems]}


@dataclass(frozen=True)
class SplitConfig:
    labels_per_class: Any = 5          # int count, or fraction / "5%" string
    samples_per_class: int = 100


@dataclass(frozen=True)
class ModelSection:
    feature_dim: int = 32
    encoder_hidden: int = 64
    translator_hidden: int = 64
    dtype: str = "float64"


@dataclass(frozen=True)
class GateConfig:
    variant: str = "full"
    tau: float = 0.95


@dataclass(frozen=True)
class DARConfig:
    kind: str = "gce"
    views: str = "both"
    q: float = 0.7


@dataclass(frozen=True)
class CMPAConfig:
    cross_domain: bool = True
    translated: bool = True
    views: str = "both"
    alpha: float = 0.9


@dataclass(frozen=True)
class LossWeights:
    cdcr: float = 1.0
    dar: float = 0.1
    cmpa: float = 0.1


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    mu_ratio: int = 1
    steps: int = 2000
    eval_interval: int = 500
    missing_eval: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelSection = field(default_factory=ModelSection)
    gate: GateConfig = field(default_factory=GateConfig)
    dar: DARConfig = field(default_factory=DARConfig)
    cmpa: CMPAConfig = field(default_factory=CMPAConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: Tuple[int, ...] = (0,)
    preset: str = "Full"

    def validate(self) -> "ExperimentConfig":
        problems = []
        if not 0.0 < self.gate.tau < 1.0:
            problems.append(("$.gate.tau", "must lie in (0, 1)"))
        if self.gate.variant not in {v.value for v in GateVariant}:
            problems.append(("$.gate.variant", f"unknown variant {self.gate.variant!r}"))
        if not 0.0 < self.dar.q <= 1.0:
            problems.append(("$.dar.q", "must lie in (0, 1]"))
        if self.dar.kind not in ("gce", "ce"):
            problems.append(("$.dar.kind", "must be 'gce' or 'ce'"))
        for path, v in (("$.dar.views", self.dar.views), ("$.cmpa.views", self.cmpa.views)):
            if v not in ("both", "weak", "strong"):
                problems.append((path, "must be 'both', 'weak' or 'strong'"))
        if not 0.0 <= self.cmpa.alpha < 1.0:
            problems.append(("$.cmpa.alpha", "must lie in [0, 1)"))
        for name in ("cdcr", "dar", "cmpa"):
            if getattr(self.loss, name) < 0:
                problems.append((f"$.loss.{name}", "must be >= 0"))
        if self.train.batch_size <= 0 or self.train.mu_ratio <= 0 or self.train.steps < 0:
            problems.append(("$.train", "batch_size and mu_ratio must be positive, steps >= 0"))
        if self.train.eval_interval <= 0:
            problems.append(("$.train.eval_interval", "must be positive"))
        if not self.seeds:
            problems.append(("$.seeds", "need at least one seed"))
        if self.model.dtype not in ("float64", "float32"):
            problems.append(("$.model.dtype", "must be 'float64' or 'float32'"))
        if self.optim.lr <= 0:
            problems.append(("$.optim.lr", "must be positive"))
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task"]["input_dims"] = list(self.task.input_dims)
        d["seeds"] = list(self.seeds)
        return d


_SECTIONS = {
    "task": TaskSpec,
    "split": SplitConfig,
    "model": ModelSection,
    "gate": GateConfig,
    "dar": DARConfig,
    "cmpa": CMPAConfig,
    "loss": LossWeights,
    "optim": OptimConfig,
    "train": TrainConfig,
}

# Variant presets, one per ablation grid cell.
PRESETS: Dict[str, Dict[str, Any]] = {
    "Full": {},
    # component on/off rows
    "Baseline": {"loss.cdcr": 0.0, "loss.dar": 0.0, "loss.cmpa": 0.0},
    "CDCR": {"loss.dar": 0.0, "loss.cmpa": 0.0},
    "DAR": {"loss.cdcr": 0.0, "loss.cmpa": 0.0},
    "CDCR+DAR": {"loss.cmpa": 0.0},
    "CDCR+CMPA": {"loss.dar": 0.0},
    "DAR+CMPA": {"loss.cdcr": 0.0},
    "CDCR+DAR+CMPA": {},
    # consensus strategies
    "Mean-CDCR": {"gate.variant": "mean"},
    "Any2-CDCR": {"gate.variant": "any2"},
    "Strict-CDCR": {"gate.variant": "strict"},
    "Full-CDCR": {},
    # disagreement loss
    "CE-DAR": {"dar.kind": "ce"},
    "Weak-only DAR": {"dar.views": "weak"},
    "Strong-only DAR": {"dar.views": "strong"},
    "Full-DAR": {},
    # prototype alignment
    "Intra-Domain CMPA": {"cmpa.cross_domain": False},
    "Intra-Modal CMPA": {"cmpa.translated": False},
    "Weak-only CMPA": {"cmpa.views": "weak"},
    "Strong-only CMPA": {"cmpa.views": "strong"},
    "Full-CMPA": {},
    # references
    "FusedOnly": {"gate.variant": "fused_only", "loss.dar": 0.0, "loss.cmpa": 0.0},
    "Supervised-only": {"loss.cdcr": 0.0, "loss.dar": 0.0, "loss.cmpa": 0.0},
}

COMPONENT_ROWS = ["Baseline", "CDCR", "DAR", "CDCR+DAR", "CDCR+CMPA", "DAR+CMPA", "CDCR+DAR+CMPA"]
VARIANT_ROWS = [
    "Mean-CDCR", "Any2-CDCR", "Strict-CDCR", "Full-CDCR",
    "CE-DAR", "Weak-only DAR", "Strong-only DAR", "Full-DAR",
    "Intra-Domain CMPA", "Intra-Modal CMPA", "Weak-only CMPA", "Strong-only CMPA", "Full-CMPA",
]
REFERENCE_ROWS = ["FusedOnly", "Supervised-only"]
GRID = COMPONENT_ROWS + VARIANT_ROWS + REFERENCE_ROWS


def _coerce(value: Any, current: Any, path: str):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError([(path, f"expected a boolean, got {value!r}")])
    if isinstance(current, (int, float)) and not isinstance(current, bool):
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                if path.endswith("labels_per_class"):
                    return value
                raise ConfigError([(path, f"expected a number, got {value!r}")]) from None
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError([(path, f"expected a number, got {value!r}")])
        if isinstance(current, int) and not path.endswith("labels_per_class"):
            if isinstance(value, float) and not value.is_integer():
                raise ConfigError([(path, f"expected an integer, got {value!r}")])
            return int(value)
        return value if path.endswith("labels_per_class") else float(value)
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = json.loads(value) if value.strip().startswith("[") else [v for v in value.split(",") if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError([(path, f"expected a list, got {value!r}")])
        return tuple(int(v) for v in value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError([(path, f"expected a string, got {value!r}")])
        return value
    return value


def _build_section(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError([(path, "expected an object")])
    default = cls() if cls is not TaskSpec else TaskSpec()
    names = {f.name for f in fields(cls)}
    problems = [(f"{path}.{k}", "unknown key") for k in data if k not in names]
    if problems:
        raise ConfigError(problems)
    kwargs = {}
    for k, v in data.items():
        try:
            kwargs[k] = _coerce(v, getattr(default, k), f"{path}.{k}")
        except ConfigError as exc:
            problems.extend(exc.problems)
    if problems:
        raise ConfigError(problems)
    try:
        return replace(default, **kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError([(path, str(exc))]) from None


def from_dict(doc: dict, require_version: bool = True) -> Tuple[ExperimentConfig, Dict[str, Any]]:
    """Parse a config document. Returns (config, extras) where extras holds out_dir."""
    if not isinstance(doc, dict):
        raise ConfigError([("$", "expected an object")])
    problems = []
    if require_version:
        if "schema_version" not in doc:
            problems.append(("$.schema_version", "missing mandatory field"))
        elif doc["schema_version"] != SCHEMA_VERSION:
            problems.append(("$.schema_version", f"unsupported version {doc['schema_version']!r}"))
    allowed = set(_SECTIONS) | {"schema_version", "seeds", "preset", "preset_applied", "out_dir"}
    problems.extend((f"$.{k}", "unknown key") for k in doc if k not in allowed)
    if problems:
        raise ConfigError(problems)

    preset = doc.get("preset", "Full")
    if preset not in PRESETS:
        raise ConfigError([("$.preset", f"unknown preset {preset!r}")])
    sections = {}
    for name, cls in _SECTIONS.items():
        try:
            sections[name] = _build_section(cls, doc.get(name, {}), f"$.{name}")
        except ConfigError as exc:
            problems.extend(exc.problems)
    seeds = doc.get("seeds", [0])
    if not isinstance(seeds, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        problems.append(("$.seeds", "expected a list of integers"))
    if problems:
        raise ConfigError(problems)
    cfg = ExperimentConfig(seeds=tuple(seeds), preset=preset, **sections)
    if not doc.get("preset_applied", False):
        cfg = apply_overrides(cfg, [f"{k}={json.dumps(v)}" for k, v in PRESETS[preset].items()])
    return cfg.validate(), {"out_dir": doc.get("out_dir")}


def load(path) -> Tuple[ExperimentConfig, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise ConfigError([("$", f"config file {path} not found")])
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([("$", f"invalid JSON: {exc}")]) from None
    return from_dict(doc)


def apply_overrides(cfg: ExperimentConfig, overrides: List[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` strings. Unknown keys are errors."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError([("$", f"override {item!r} is not KEY=VALUE")])
        key, raw = item.split("=", 1)
        key = key.strip()
        path = f"$.{key}"
        if key == "seeds":
            cfg = replace(cfg, seeds=_coerce(raw, cfg.seeds, path))
            continue
        if key == "preset":
            if raw not in PRESETS:
                raise ConfigError([(path, f"unknown preset {raw!r}")])
            cfg = replace(cfg, preset=raw)
            cfg = apply_overrides(cfg, [f"{k}={json.dumps(v)}" for k, v in PRESETS[raw].items()])
            continue
        parts = key.split(".")
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigError([(path, "unknown key")])
        section, name = parts
        current = getattr(cfg, section)
        if name not in {f.name for f in fields(current)}:
            raise ConfigError([(path, "unknown key")])
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        value = _coerce(value, getattr(current, name), path)
        try:
            cfg = replace(cfg, **{section: replace(current, **{name: value})})
        except (ValueError, TypeError) as exc:
            raise ConfigError([(path, str(exc))]) from None
    return cfg


def to_document(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Resolved config as a file document; presets are already folded in."""
    doc = {"schema_version": SCHEMA_VERSION}
    d = cfg.to_dict()
    doc.update(d)
    doc["preset_applied"] = True
    if out_dir is not None:
        doc["out_dir"] = str(out_dir)
    return doc
