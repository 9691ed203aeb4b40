"""Flat key-value run configuration.

Config files are plain text: one `key = value` per line, `#` comments,
dotted keys for the model/train/sampler sections, e.g.

    dataset = data/cora
    task = node
    model.n_metacommunities = 8
    train.finetune_epochs = 400
    sampler.enabled = true
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

from .model import ModelConfig
from .training import SamplerConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = ""
    task: str = "node"
    out: str = "runs/out"
    seed: int = 0
    protocol: str = "xu"
    folds: int = 10
    keep_rate: float = 1.0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.task not in ("node", "graph"):
            raise ConfigError("task must be 'node' or 'graph'")
        if self.protocol not in ("xu", "zhang"):
            raise ConfigError("protocol must be 'xu' or 'zhang'")


def _coerce(raw: str, target_type, key: str):
    raw = raw.strip()
    try:
        if target_type is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is str:
            return raw
        # tuples of floats (elbo term weights)
        return tuple(float(p) for p in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "sampler": SamplerConfig}


def build_run_config(raw: dict[str, str], overrides: Optional[dict] = None) -> RunConfig:
    """Assemble a RunConfig from raw strings plus typed CLI overrides."""
    raw = dict(raw)
    top_fields = {f.name: f.type for f in fields(RunConfig)
                  if f.name not in _SECTIONS}
    section_fields = {
        name: {f.name: f.type for f in fields(cls)}
        for name, cls in _SECTIONS.items()
    }

    top_kwargs: dict = {}
    section_kwargs: dict[str, dict] = {name: {} for name in _SECTIONS}
    for key, value in raw.items():
        if "." in key:
            section, sub = key.split(".", 1)
            if section not in _SECTIONS or sub not in section_fields[section]:
                raise ConfigError(f"unknown config key {key!r}")
            ftype = _TYPE_LOOKUP[section_fields[section][sub]]
            section_kwargs[section][sub] = _coerce(value, ftype, key)
        else:
            if key not in top_fields:
                raise ConfigError(f"unknown config key {key!r}")
            top_kwargs[key] = _coerce(value, _TYPE_LOOKUP[top_fields[key]], key)

    # node tasks default to degree-normalized layers, graph tasks to sum
    task = top_kwargs.get("task", "node")
    section_kwargs["model"].setdefault("layer_kind",
                                       "gcn" if task == "node" else "gin")
    try:
        cfg = RunConfig(
            model=ModelConfig(**section_kwargs["model"]),
            train=TrainConfig(**section_kwargs["train"]),
            sampler=SamplerConfig(**section_kwargs["sampler"]),
            **top_kwargs,
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        obj = cfg
        attr = key
        if "." in key:
            section, attr = key.split(".", 1)
            obj = getattr(cfg, section)
        if not hasattr(obj, attr):
            raise ConfigError(f"unknown override {key!r}")
        setattr(obj, attr, value)
    return cfg


def load_run_config(path: str, overrides: Optional[dict] = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    return build_run_config(parse_config_text(text), overrides)


# dataclass field annotations arrive as strings under `from __future__ import
# annotations`, so map the names back to types here
_TYPE_LOOKUP = {
    "str": str,
    "int": int,
    "float": float,
    "bool": bool,
    "tuple[float, float, float]": tuple,
    str: str,
    int: int,
    float: float,
    bool: bool,
}
