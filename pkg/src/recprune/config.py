"""Pipeline configuration and its flat ``section.key=value`` file format.

Example::

    # desk defaults
    model.n_layers=8
    prune.k_attn=4
    stage1.lambda=0.8
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Union

from .distill import DistillConfig
from .errors import ContractError, FormatError
from .model import ModelConfig
from .recdata import GeneratorConfig


def _base_train() -> DistillConfig:
    return DistillConfig(lam=0.0)


@dataclass
class PruneSettings:
    calib_b: int = 100
    alpha: float = 0.3
    k_attn: int = 4
    # None -> d_k * (heads - k_attn)
    hidden_keep: Optional[int] = None
    tau: str = "auto"
    # None -> 2 * current d_model
    k_mlp: Optional[int] = None
    k_layer: int = 5
    layer_recompute: bool = True
    raw_recursion: bool = False


@dataclass
class RunSettings:
    seed: int = 0
    out_dir: str = "runs/default"
    data_path: Optional[str] = None
    teacher: str = "previous"
    precision: str = "f64"
    observe_b: int = 100
    observe_position: str = "last"
    eval_k: str = "10,20"
    figures: bool = True


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    prune: PruneSettings = field(default_factory=PruneSettings)
    run: RunSettings = field(default_factory=RunSettings)
    base: DistillConfig = field(default_factory=_base_train)
    stage1: DistillConfig = field(default_factory=DistillConfig)
    stage2: DistillConfig = field(default_factory=DistillConfig)
    stage3: DistillConfig = field(default_factory=DistillConfig)

    SECTIONS = ("model", "data", "prune", "run", "base", "stage1", "stage2", "stage3")

    @property
    def k_list(self) -> tuple[int, ...]:
        return tuple(int(k) for k in self.run.eval_k.split(","))

    def validate(self) -> None:
        if self.run.teacher not in ("previous", "original"):
            raise ContractError(f"run.teacher must be previous|original, got {self.run.teacher!r}")
        if self.run.precision not in ("f64", "f32"):
            raise ContractError("run.precision must be f64|f32")
        if not 0.0 <= self.prune.alpha <= 1.0:
            raise ContractError("prune.alpha outside [0, 1]")
        self.data.validate()
        for name in ("base", "stage1", "stage2", "stage3"):
            getattr(self, name).validate()

    def to_text(self) -> str:
        lines = ["# recprune pipeline config"]
        for section in self.SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                key = "lambda" if f.name == "lam" else f.name
                lines.append(f"{section}.{key}={_fmt(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(raw: str, current, type_hint: str):
    s = raw.strip()
    if s.lower() == "none":
        return None
    hint = str(type_hint)
    if isinstance(current, bool) or "bool" in hint:
        if s.lower() in ("true", "1", "yes"):
            return True
        if s.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {s!r}")
    if isinstance(current, int) or hint in ("int", "Optional[int]"):
        return int(s)
    if isinstance(current, float) or "float" in hint:
        return float(s)
    return s


def apply_overrides(cfg: PipelineConfig, items: dict[str, str]) -> PipelineConfig:
    for key, raw in items.items():
        if "." not in key:
            raise FormatError(f"config key {key!r} lacks a section prefix")
        section, name = key.split(".", 1)
        if section not in PipelineConfig.SECTIONS:
            raise FormatError(f"unknown config section {section!r}")
        obj = getattr(cfg, section)
        attr = "lam" if name == "lambda" else name
        types = {f.name: f.type for f in fields(obj)}
        if attr not in types:
            raise FormatError(f"unknown config key {key!r}")
        try:
            value = _parse_value(raw, getattr(obj, attr), types[attr])
        except ValueError as exc:
            raise FormatError(f"config key {key!r}: {exc}") from None
        if section == "model":
            # rebuild so ModelConfig.__post_init__ re-derives norm_width
            d = obj.to_dict()
            d[attr] = value
            if attr == "d_model" and "model.norm_width" not in items:
                d["norm_width"] = None
            cfg.model = ModelConfig.from_dict(d)
        else:
            setattr(cfg, section, replace(obj, **{attr: value}))
    return cfg


def parse_config_text(text: str, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected key=value")
        k, v = line.split("=", 1)
        items[k.strip()] = v.strip()
    return apply_overrides(base or PipelineConfig(), items)


def load_config(path) -> PipelineConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def derive_seed(seed: int, label: str) -> int:
    """Stable per-purpose seed from the master seed."""
    return zlib.crc32(f"{seed}:{label}".encode()) & 0x7FFFFFFF
