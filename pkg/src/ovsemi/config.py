"""Flat ``section.key = value`` experiment configuration.

Example::

    # comments start with '#'
    run.preset = semiovs
    data.n_labeled = 12
    train.tau_out = 0.25
    teacher.templates = a photo of a {}. | a bright photo of a {}.
    sweep.grid = 0.0, 0.25, 0.5

Numeric tuples are comma-separated.  String tuples are ``|``-separated when
the value contains a ``|`` and comma-separated otherwise; end a single
template that contains a comma with ``|``.
Unknown sections or keys are rejected.  :func:`dump_config` writes every
field in a fixed order, so the resolved text doubles as a reproducible hash
input.
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data_synth import SceneSpec
from .errors import ConfigError
from .evalkit import SWEEP_AXES
from .ovs_teacher import DEFAULT_TEMPERATURE, DEFAULT_TEMPLATES
from .trainer import TrainConfig

ENV_OUT = "OVSEMI_OUT"
PRESETS = ("baseline", "semiovs", "semiovs-selfteacher")
PROMPT_SUBSETS = ("targets_only", "half", "full")


@dataclass(frozen=True)
class DataConfig:
    n_scenes: int = 300
    n_labeled: int = 12
    protocol: str = "original"
    quality_fraction: float = 0.2
    n_val: int = 100
    n_ood: int = 300
    split_seed: int = 0
    max_pixels: int = 0  # 0 disables the manifest size filter


@dataclass(frozen=True)
class TeacherConfig:
    embedder: str = "oracle"  # oracle | file
    noise: float = 1.0
    dim: int = 32
    similarity: float = 0.8
    text_noise: float = 0.0
    temperature: float = DEFAULT_TEMPERATURE
    seed: int = 0
    prompt_subset: str = "full"
    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    emb_dir: str = ""
    text_table: str = ""


@dataclass(frozen=True)
class SweepConfig:
    axis: str = "tau_out"
    grid: tuple[str, ...] = ("0.0", "0.25", "0.5", "0.75", "0.95")
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class EvalConfig:
    split: str = "val"  # val | train
    target: str = "student"  # student | teacher


@dataclass(frozen=True)
class RunConfig:
    preset: str = "semiovs"
    name: str = ""
    out: str = ""
    # set in written snapshots: every key is explicit, so presets are not re-applied
    resolved: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    scene: SceneSpec = field(default_factory=lambda: SceneSpec(seed=1))
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=4, iters_per_epoch=150))
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    @property
    def run_name(self):
        return self.run.name or self.run.preset

    @property
    def out_root(self) -> Path:
        return Path(self.run.out or os.environ.get(ENV_OUT, "ovsemi_out"))

    def validate(self):
        if self.run.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.run.preset!r}; expected one of {PRESETS}")
        self.scene.validate()
        self.train.validate()
        if self.teacher.prompt_subset not in PROMPT_SUBSETS:
            raise ConfigError(f"teacher.prompt_subset must be one of {PROMPT_SUBSETS}")
        if self.teacher.embedder not in ("oracle", "file"):
            raise ConfigError("teacher.embedder must be 'oracle' or 'file'")
        if self.teacher.temperature <= 0 or self.teacher.noise < 0:
            raise ConfigError("teacher.temperature must be > 0 and teacher.noise >= 0")
        if self.eval.split not in ("val", "train") or self.eval.target not in ("student", "teacher"):
            raise ConfigError("eval.split must be val|train and eval.target student|teacher")
        if self.sweep.axis not in SWEEP_AXES:
            raise ConfigError(f"sweep.axis must be one of {SWEEP_AXES}")
        if not self.sweep.grid or not self.sweep.seeds:
            raise ConfigError("sweep.grid and sweep.seeds must be non-empty")
        if self.data.n_val < 1 or self.data.n_ood < 0:
            raise ConfigError("data.n_val must be >= 1 and data.n_ood >= 0")
        return self


SECTIONS = tuple(f.name for f in fields(ExperimentConfig))

PRESET_OVERRIDES = {
    "baseline": {"train.n_unlabeled_out": "0"},
    "semiovs": {},
    "semiovs-selfteacher": {"train.teacher_source": "self"},
}


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _parse_value(text, tp, key):
    text = text.strip()
    origin = typing.get_origin(tp)
    try:
        if origin is tuple:
            args = typing.get_args(tp)
            elem = args[0]
            # string tuples split on '|' when present so templates may contain commas
            sep = "|" if elem is str and "|" in text else ","
            parts = [p.strip() for p in text.split(sep)] if text else []
            if elem is str:
                parts = [p for p in parts if p]
            vals = tuple(_parse_value(p, elem, key) for p in parts)
            if len(args) == 2 and args[1] is not Ellipsis and len(vals) != 2:
                raise ValueError("expected two values")
            return vals
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}: {exc}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def parse_config_text(text: str, source="<config>") -> dict:
    """Parse into ``{"section.key": raw_value}``; later lines win."""
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def apply_overrides(cfg: ExperimentConfig, raw: dict) -> ExperimentConfig:
    sections = {name: getattr(cfg, name) for name in SECTIONS}
    for key, value in raw.items():
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise ConfigError(f"unknown config key {key!r}")
        types = _field_types(type(sections[section]))
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        sections[section] = replace(sections[section], **{name: _parse_value(value, types[name], key)})
    return ExperimentConfig(**sections)


def resolve_config(source=None, overrides=None) -> ExperimentConfig:
    """Defaults <- config file (or preset name) <- preset keys <- explicit overrides.

    The preset's few keys sit above the file so that one config file can be
    run under every preset; ``overrides`` still win over both.
    """
    file_raw = {}
    if source:
        path = Path(source)
        if path.is_file():
            file_raw = parse_config_text(path.read_text(encoding="utf-8"), str(path))
        elif str(source) in PRESETS:
            file_raw = {"run.preset": str(source)}
        else:
            raise ConfigError(f"config {source!r} is neither a file nor a preset name {PRESETS}")
    overrides = dict(overrides or {})
    preset = overrides.get("run.preset", file_raw.get("run.preset", RunConfig.preset))
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    merged = dict(file_raw)
    snapshot = _parse_value(file_raw.get("run.resolved", "false"), bool, "run.resolved")
    if not snapshot or "run.preset" in overrides:
        merged.update(PRESET_OVERRIDES[preset])
    merged.update(overrides)
    merged["run.preset"] = preset
    return apply_overrides(ExperimentConfig(), merged).validate()


def _format_value(v):
    if isinstance(v, tuple):
        if v and isinstance(v[0], str):
            return " | ".join(v)
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Every field in a fixed order; marked as a resolved snapshot."""
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            value = True if (section, f.name) == ("run", "resolved") else getattr(obj, f.name)
            lines.append(f"{section}.{f.name} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def config_digest(cfg: ExperimentConfig, sections=SECTIONS) -> str:
    """Hash of the resolved text restricted to ``sections`` (output location excluded)."""
    text = "".join(line + "\n" for line in dump_config(cfg).splitlines()
                   if line.split(".", 1)[0] in sections and not line.startswith("run.out "))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
