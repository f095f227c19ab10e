"""YAML run configuration with strict key checking.

A run file has up to three top-level sections::

    train:      # TrainConfig fields; nested model / grad_noise / relaxation
      task: add
      model: {filters: 24}
    eval:       # EvalSettings fields
      suites: [uniform, carry]
    output: runs/add-binary

Unknown keys and wrongly typed values raise :class:`ConfigError` naming the
file, line and dotted key. :func:`dump_config` writes the fully resolved
document (every default filled in) so a run directory describes itself.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError, ContractViolation
from .model import ModelConfig
from .trainer import GradNoise, RelaxationSchedule, TrainConfig

SUITES = ("uniform", "carry", "structured")


@dataclass
class EvalSettings:
    suites: list[str] = field(default_factory=lambda: ["uniform"])
    lengths: list[int] = field(default_factory=list)
    cases: int = 200
    seed: int = 0
    carry_max_k: int = 20
    carry_cases: int = 200
    carry_digits: int = 0
    structured_base: int = 10
    structured_length: int = 100

    def __post_init__(self):
        bad = [s for s in self.suites if s not in SUITES]
        if bad:
            raise ContractViolation(f"unknown suite {bad[0]!r}; valid suites: {', '.join(SUITES)}")


@dataclass
class RunConfigFile:
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    output: str = ""

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "eval": dataclasses.asdict(self.eval), "output": self.output}


NESTED = {(RunConfigFile, "train"): TrainConfig, (RunConfigFile, "eval"): EvalSettings,
          (TrainConfig, "model"): ModelConfig, (TrainConfig, "grad_noise"): GradNoise,
          (TrainConfig, "relaxation"): RelaxationSchedule}


def _line_index(node, path=(), out=None) -> dict[tuple, int]:
    """Map dotted key paths to 1-based source lines."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            sub = path + (str(key.value),)
            out[sub] = key.start_mark.line + 1
            _line_index(value, sub, out)
    return out


def _check_value(value: Any, default: Any, where: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif default is None:
        # the only optional fields are numbers
        if value is not None:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}: expected a number or null, got {value!r}")
            value = float(value)
    elif isinstance(default, (list, tuple)):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        value = type(default)(value)
    return value


def _build(cls, data: Any, path: tuple, lines: dict, source: str):
    def where(key=None):
        p = path + ((key,) if key else ())
        line = lines.get(p) or lines.get(path)
        loc = f"{source}:{line}" if line else source
        return f"{loc}: {'.'.join(p) or '<root>'}"

    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where()}: expected a mapping, got {type(data).__name__}")
    default = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        key = str(key)
        if key not in names:
            raise ConfigError(f"{where(key)}: unknown key {key!r} (valid: {', '.join(sorted(names))})")
        nested = NESTED.get((cls, key))
        if nested is not None:
            kwargs[key] = _build(nested, value, path + (key,), lines, source)
        else:
            kwargs[key] = _check_value(value, getattr(default, key), where(key))
    try:
        return cls(**kwargs)
    except ContractViolation as exc:
        raise ConfigError(f"{where()}: {exc}") from exc


def parse_config(text: str, source: str = "<config>") -> RunConfigFile:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: invalid YAML: {exc}") from exc
    lines = _line_index(node) if node is not None else {}
    return _build(RunConfigFile, data, (), lines, source)


def load_config(path) -> RunConfigFile:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def dump_config(cfg: RunConfigFile) -> str:
    data = cfg.to_dict()
    data["train"]["model"]["kernel"] = list(data["train"]["model"]["kernel"])
    return yaml.safe_dump(data, sort_keys=True, default_flow_style=False)


def config_from_dict(data: dict) -> RunConfigFile:
    """Inverse of ``RunConfigFile.to_dict`` (used to reload echoed configs)."""
    return _build(RunConfigFile, data, (), {}, "<dict>")


def train_config_from_dict(data: dict) -> TrainConfig:
    return _build(TrainConfig, data, ("train",), {}, "<dict>")
