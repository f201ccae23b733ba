"""Run configuration, serialized as JSON with a versioned schema."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ValidationError
from .losses import LossWeights
from .model import ModelConfig

SCHEMA = "kamamba-run/v1"

# Loss-term switches for the ablation arms.
ABLATIONS = {
    "baseline": {"cls": True, "change": True, "cl": True, "kat": True},
    "wo_kat": {"cls": True, "change": True, "cl": True, "kat": False},
    "wo_cl": {"cls": True, "change": True, "cl": False, "kat": True},
    "only_cd": {"cls": False, "change": True, "cl": False, "kat": False},
}


@dataclass
class DataConfig:
    n_samples: int = 200
    change_rate: float = 0.5
    primary: float = 0.98  # T* mass on each row's main target
    secondary: float = 0.01
    design_seed: int = 0
    noise: float = 0.1
    split_fractions: tuple = (0.6, 0.2, 0.2)


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-6
    batch_size: int = 128
    epochs: int = 50
    patience: int = 10


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    terms: dict = field(default_factory=lambda: dict(ABLATIONS["baseline"]))
    tau: float = 0.1
    eps: float = 1e-3
    include_diagonal: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["split_fractions"] = list(self.data.split_fractions)
        return {"schema": SCHEMA, **d}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        schema = d.pop("schema", None)
        if schema != SCHEMA:
            raise ValidationError(f"config schema {schema!r}, expected {SCHEMA!r}")
        sub = {"model": ModelConfig, "optim": OptimConfig, "weights": LossWeights, "data": DataConfig}
        kwargs = {}
        known = {f.name for f in fields(cls)}
        for key, value in d.items():
            if key not in known:
                raise ValidationError(f"unknown config field {key!r}")
            if key in sub:
                kwargs[key] = _build(sub[key], value, key)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.data.split_fractions = tuple(cfg.data.split_fractions)
        if set(cfg.terms) != set(ABLATIONS["baseline"]):
            raise ValidationError(f"terms must have keys {sorted(ABLATIONS['baseline'])}")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise ValidationError(f"config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None

    def with_ablation(self, arm: str) -> "RunConfig":
        if arm not in ABLATIONS:
            raise ValidationError(f"unknown ablation arm {arm!r}; choose from {sorted(ABLATIONS)}")
        return RunConfig.from_dict({**self.to_dict(), "terms": dict(ABLATIONS[arm])})


def _build(kind, value, where):
    if not isinstance(value, dict):
        raise ValidationError(f"config section {where!r} must be an object")
    names = {f.name for f in fields(kind)}
    extra = set(value) - names
    if extra:
        raise ValidationError(f"unknown fields in {where!r}: {sorted(extra)}")
    return kind(**value)
