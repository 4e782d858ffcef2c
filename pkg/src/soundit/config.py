"""Run configuration: nested sections loaded from YAML, with defaults."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .model import SounDiTConfig


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    steps: int = 2000
    dropout: float = 0.1          # per-condition null-substitution probability
    checkpoint_every: int = 500
    log_every: int = 50


@dataclass
class SampleConfig:
    guidance: float = 4.0


@dataclass
class CodecConfig:
    kind: str = "downsample"
    image_size: int = 32
    factor: int = 4


@dataclass
class AblationConfig:
    variants: list[str] = field(default_factory=lambda: ["full", "no_slrcm", "no_s_adaln",
                                                         "no_slrcm_s_adaln"])
    experts: list[int] = field(default_factory=lambda: [2, 4, 6, 8])
    steps: int = 200


@dataclass
class PairingSection:
    clip_seconds: float = 10.0
    frames_per_clip: int = 10
    voice_threshold: float = 0.5
    max_gap_days: float = 365.0


@dataclass
class RunConfig:
    model: SounDiTConfig = field(default_factory=SounDiTConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    pairing: PairingSection = field(default_factory=PairingSection)
    backends: dict = field(default_factory=lambda: {"kind": "toy", "seed": 0})
    encoder_seed: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = copy.deepcopy(d or {})
        sections = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(sections)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        for name, f in sections.items():
            if name not in d:
                continue
            value = d[name]
            default = f.default_factory() if callable(f.default_factory) else f.default
            if name == "model":
                kw[name] = SounDiTConfig.from_dict({**asdict(default), **value})
            elif hasattr(default, "__dataclass_fields__"):
                allowed = {g.name for g in fields(default)}
                bad = set(value) - allowed
                if bad:
                    raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
                kw[name] = type(default)(**{**asdict(default), **value})
            else:
                kw[name] = value
        return cls(**kw)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    data = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    for key, value in (overrides or {}).items():
        section, _, leaf = key.partition(".")
        if leaf:
            data.setdefault(section, {})[leaf] = value
        else:
            data[section] = value
    return RunConfig.from_dict(data)
