"""INI run configuration.

Sections mirror the package modules. Unknown sections or keys are rejected,
values are coerced to the type of the dataclass field they set, and
``section.key=value`` overrides are applied after the file.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

from .annotation import DEFAULT_TRAIN_FRACTION
from .dfn import DFNConfig
from .encoders import EncoderConfig
from .errors import ConfigTypeError, MissingFile, UnknownKey
from .evaluation import TrainSchedule
from .model import MF2Config, ModelConfig
from .qformer import QFormerConfig


@dataclass
class DataConfig:
    fixture_videos: int = 12
    fixture_frames: int = 4
    au_flip_prob: float = 0.1
    tolerance: float = 0.10
    train_fraction: float = DEFAULT_TRAIN_FRACTION


@dataclass
class AnnotateConfig:
    types: str = "au,emotion,key_au"
    client: str = "mock"
    endpoint_env: str = "MF2_LLM_ENDPOINT"
    max_workers: int = 1


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.05
    warmup_steps: Optional[int] = None
    task: str = "joint"
    # Fine-tuning phase; None reuses the pretraining value.
    finetune_epochs: Optional[int] = None
    finetune_lr: Optional[float] = None
    finetune_task: str = "emotion"

    def schedule(self, seed: int) -> TrainSchedule:
        return TrainSchedule(self.epochs, self.batch_size, self.lr, self.weight_decay, self.warmup_steps, seed, self.task)

    def finetune_schedule(self, seed: int, task: Optional[str] = None) -> TrainSchedule:
        epochs = self.epochs if self.finetune_epochs is None else self.finetune_epochs
        lr = self.lr if self.finetune_lr is None else self.finetune_lr
        return TrainSchedule(epochs, self.batch_size, lr, self.weight_decay, self.warmup_steps, seed,
                             task or self.finetune_task)


@dataclass
class EvalConfig:
    batch_size: int = 64
    variants: str = "all"


SECTIONS = {
    "data": DataConfig,
    "annotate": AnnotateConfig,
    "encoders": EncoderConfig,
    "qformer_emo": QFormerConfig,
    "qformer_au": QFormerConfig,
    "model": ModelConfig,
    "dfn": DFNConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}
RUN_KEYS = {"seed": int, "run_dir": str}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    annotate: AnnotateConfig = field(default_factory=AnnotateConfig)
    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    qformer_emo: QFormerConfig = field(default_factory=QFormerConfig)
    qformer_au: QFormerConfig = field(default_factory=QFormerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    dfn: DFNConfig = field(default_factory=DFNConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    run_dir: Optional[str] = None
    source: str = field(default="", compare=False)

    def mf2_config(self) -> MF2Config:
        return MF2Config(self.encoders, self.qformer_emo, self.qformer_au, self.model)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        return d

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {k: _render(getattr(self, k)) for k in RUN_KEYS}
        for name in SECTIONS:
            cp[name] = {f.name: _render(getattr(getattr(self, name), f.name)) for f in fields(getattr(self, name))
                        if f.init}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ",".join(map(str, v))
    return str(v)


def _field_kind(cls, key: str):
    for f in fields(cls):
        if f.name == key and f.init:
            ann = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
            return ann, f.default
    return None


def _coerce(key: str, raw: str, ann: str, default):
    text = raw.strip()
    optional = "Optional" in ann or default is None
    if optional and text.lower() in ("none", "null", "auto", ""):
        return None
    base = ann.replace("Optional[", "").rstrip("]")
    try:
        if base == "bool" or isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if base == "int" or (isinstance(default, int) and not isinstance(default, bool)):
            return int(text)
        if base == "float" or isinstance(default, float):
            return float(text)
        if base == "tuple" or isinstance(default, tuple):
            return tuple(p.strip() for p in text.split(",") if p.strip())
    except ValueError:
        raise ConfigTypeError(f"{key}: cannot interpret {raw!r} as {base}") from None
    return text


def _parse_pairs(items: dict, key_prefix: str, cls) -> dict:
    out = {}
    for k, raw in items.items():
        kind = _field_kind(cls, k)
        if kind is None:
            raise UnknownKey(f"unknown config key {key_prefix}.{k}")
        out[k] = _coerce(f"{key_prefix}.{k}", raw, *kind)
    return out


def parse_config(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    """Read an INI file (or nothing) and apply ``section.key=value`` overrides."""
    text = ""
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise MissingFile(f"config file not found: {p}")
        text = p.read_text()
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigTypeError(f"unparseable config: {e}") from None
    raw = {s: dict(cp[s]) for s in cp.sections()}
    for ov in overrides:
        if "=" not in ov:
            raise ConfigTypeError(f"override {ov!r} is not key=value")
        key, value = ov.split("=", 1)
        key = key.strip()
        section, _, name = key.rpartition(".")
        raw.setdefault(section or "run", {})[name] = value

    values = {}
    for section, items in raw.items():
        if section == "run":
            for k, v in items.items():
                if k not in RUN_KEYS:
                    raise UnknownKey(f"unknown config key {k}")
                if RUN_KEYS[k] is int:
                    try:
                        values[k] = int(v)
                    except ValueError:
                        raise ConfigTypeError(f"{k}: cannot interpret {v!r} as int") from None
                else:
                    values[k] = None if v.strip().lower() in ("", "none") else v.strip()
            continue
        if section not in SECTIONS:
            raise UnknownKey(f"unknown config section {section}")
        values[section] = SECTIONS[section](**_parse_pairs(items, section, SECTIONS[section]))
    return RunConfig(**values, source=text)
