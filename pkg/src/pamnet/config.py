"""Experiment configuration and the flat ``key=value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import CorruptionSpec, SplitSpec, SynthSpec
from .engine import ConfigError
from .model import ModelConfig
from .training import LossConfig, OptimConfig

# default cycle length per public benchmark (steps per dominant period)
CYCLE_LENGTHS = {
    "ETTh1": 24,
    "ETTh2": 24,
    "ETTm1": 96,
    "ETTm2": 96,
    "ECL": 168,
    "Traffic": 168,
    "Weather": 144,
    "Solar": 144,
    "PEMS03": 288,
    "PEMS04": 288,
    "PEMS07": 288,
    "PEMS08": 288,
}


def default_cycle_length(dataset: str) -> int:
    try:
        return CYCLE_LENGTHS[dataset]
    except KeyError:
        raise KeyError(f"unknown dataset {dataset!r}; known: {', '.join(CYCLE_LENGTHS)}") from None


@dataclass
class ExperimentConfig:
    csv: Optional[str] = None
    dataset: Optional[str] = None
    synth: SynthSpec = field(default_factory=SynthSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    corrupt: CorruptionSpec = field(default_factory=CorruptionSpec)
    seeds: list = field(default_factory=lambda: [0])
    ablation: str = "full"
    target_channel: Optional[str] = None
    output_dir: str = "runs/default"
    standardize: bool = True
    raw_units: bool = False


# section prefix -> (attribute, aliases for field names)
_SECTIONS = {
    "model": (
        "model",
        {
            "L": "lookback",
            "H": "horizon",
            "N": "channels",
            "d": "embed_dim",
            "c": "cycle_len",
            "dropout": "dropout_rate",
            "eps": "norm_eps",
        },
    ),
    "loss": ("loss", {}),
    "optim": ("optim", {"lr": "learning_rate", "epochs": "max_epochs"}),
    "corrupt": ("corrupt", {}),
    "synth": ("synth", {"c": "cycle_len", "depth": "drift_depth", "noise": "noise_std", "k": "drift_cycles"}),
}


def _coerce(raw: str, current, ftype):
    raw = raw.strip()
    kind = type(current) if current is not None else None
    tname = str(ftype)
    if isinstance(current, bool) or tname == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, (tuple, list)) or "tuple" in tname or "Sequence" in tname:
        return tuple(float(x) for x in raw.split(",") if x.strip())
    if kind is int or tname == "int":
        return int(raw)
    if kind is float or tname == "float":
        return float(raw)
    if raw.lower() in ("none", ""):
        return None
    return raw


def _set(obj, key: str, raw: str, aliases: dict):
    name = aliases.get(key, key)
    fields = {f.name: f for f in dataclasses.fields(obj)}
    if name not in fields:
        raise ConfigError(f"unknown config key {key!r} for {type(obj).__name__}")
    value = _coerce(raw, getattr(obj, name), fields[name].type)
    return dataclasses.replace(obj, **{name: value})


def parse_config(text: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Parse ``key=value`` lines (``#`` comments allowed) on top of ``base``."""
    cfg = base or ExperimentConfig()
    pending_dataset_c = True
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        try:
            cfg = _apply(cfg, key, raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno} ({key}): {exc}") from exc
        if key in ("model.c", "model.cycle_len"):
            pending_dataset_c = False
    if cfg.dataset and pending_dataset_c:
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, cycle_len=default_cycle_length(cfg.dataset)))
    return cfg


def _apply(cfg: ExperimentConfig, key: str, raw: str) -> ExperimentConfig:
    if "." in key:
        section, sub = key.split(".", 1)
        if section == "data":
            if sub == "split":
                parts = [float(x) for x in raw.split(",")]
                return dataclasses.replace(cfg, split=SplitSpec(fractions=tuple(parts)))
            if sub == "split_counts":
                return dataclasses.replace(cfg, split=SplitSpec(counts=tuple(int(x) for x in raw.split(","))))
            if sub in ("csv", "path"):
                return dataclasses.replace(cfg, csv=raw or None)
            if sub == "dataset":
                return dataclasses.replace(cfg, dataset=raw)
            if sub == "standardize":
                return dataclasses.replace(cfg, standardize=_coerce(raw, True, bool))
            if sub == "raw_units":
                return dataclasses.replace(cfg, raw_units=_coerce(raw, True, bool))
            raise ConfigError(f"unknown config key {key!r}")
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        attr, aliases = _SECTIONS[section]
        return dataclasses.replace(cfg, **{attr: _set(getattr(cfg, attr), sub, raw, aliases)})
    if key == "seeds":
        return dataclasses.replace(cfg, seeds=[int(x) for x in raw.split(",") if x.strip()])
    if key == "ablation":
        return dataclasses.replace(cfg, ablation=raw)
    if key == "target_channel":
        return dataclasses.replace(cfg, target_channel=raw or None)
    if key in ("output_dir", "output"):
        return dataclasses.replace(cfg, output_dir=raw)
    raise ConfigError(f"unknown config key {key!r}")


def load_config(path, overrides: Optional[list] = None) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    if overrides:
        text += "\n" + "\n".join(overrides)
    return parse_config(text)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render every knob as ``key=value`` lines, re-parseable by ``parse_config``."""
    lines = []
    if cfg.csv:
        lines.append(f"data.csv={cfg.csv}")
    if cfg.dataset:
        lines.append(f"data.dataset={cfg.dataset}")
    if cfg.split.counts is not None:
        lines.append("data.split_counts=" + ",".join(str(x) for x in cfg.split.counts))
    else:
        lines.append("data.split=" + ",".join(repr(float(x)) for x in cfg.split.fractions))
    lines.append(f"data.standardize={cfg.standardize}")
    lines.append(f"data.raw_units={cfg.raw_units}")
    for section, (attr, _) in _SECTIONS.items():
        obj = getattr(cfg, attr)
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if f.name == "mean_profile" or value is None:
                continue
            if isinstance(value, (tuple, list)):
                value = ",".join(repr(float(x)) for x in value)
            lines.append(f"{section}.{f.name}={value}")
    lines.append("seeds=" + ",".join(str(s) for s in cfg.seeds))
    lines.append(f"ablation={cfg.ablation}")
    if cfg.target_channel:
        lines.append(f"target_channel={cfg.target_channel}")
    lines.append(f"output_dir={cfg.output_dir}")
    return "\n".join(lines) + "\n"
