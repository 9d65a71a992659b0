"""Flat ``key = value`` configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .matching import MatchCostConfig


@dataclass
class Config:
    # model
    image_size: int = 128
    num_classes: int = 3
    channels: int = 32
    levels: int = 4
    heads: int = 2
    points: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_ratio: int = 4
    queries: int = 50
    # ablation switches
    opg: bool = True
    opr: bool = True
    ibr: bool = True
    angle_branch: bool = False
    cls_cost: bool = True
    l1_cost: bool = True
    riou_cost: bool = True
    focal_cost: bool = False
    enc_loss: bool = True
    enc_match_k: int = 1
    # loss weights
    lambda_cls: float = 5.0
    lambda_l1: float = 5.0
    lambda_riou: float = 8.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # optimisation
    lr: float = 1e-4
    lr_drop_fraction: float = 0.2
    warmup_steps: int = 0
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    steps: int = 1000
    batch_size: int = 4
    seed: int = 0
    augment: bool = True
    # io
    data: str = ""
    val_count: int = 100
    out: str = "run"
    eval_every: int = 0
    checkpoint_every: int = 0
    score_floor: float = 0.05
    time_limit: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        errors = []
        if self.channels % self.heads:
            errors.append(f"heads ({self.heads}) must divide channels ({self.channels})")
        if self.channels % 4:
            errors.append(f"channels ({self.channels}) must be a multiple of 4")
        if self.levels != 4:
            errors.append(f"the backbone produces exactly 4 levels, got levels={self.levels}")
        if self.image_size % 64:
            errors.append(f"image_size ({self.image_size}) must be divisible by 64")
        if self.opr and not self.opg:
            errors.append("opr refines generated proposals and needs opg enabled")
        for name in ("queries", "steps", "batch_size", "num_classes", "points", "dec_layers", "enc_match_k"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be positive")
        if self.enc_layers < 0 or self.warmup_steps < 0:
            errors.append("enc_layers and warmup_steps must be non-negative")
        for name in ("lambda_cls", "lambda_l1", "lambda_riou", "lr"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be non-negative")
        if errors:
            raise ValueError("invalid config: " + "; ".join(errors))

    @property
    def cost(self) -> MatchCostConfig:
        return MatchCostConfig(
            lambda_cls=self.lambda_cls,
            lambda_l1=self.lambda_l1,
            lambda_riou=self.lambda_riou,
            use_cls=self.cls_cost,
            use_l1=self.l1_cost,
            use_riou=self.riou_cost,
            focal_cost=self.focal_cost,
            alpha=self.focal_alpha,
            gamma=self.focal_gamma,
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{k: _coerce(known[k], v) for k, v in values.items()})


def _coerce(f, value):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    if kind == "bool":
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{f.name}: expected a boolean, got {value!r}")
    if kind == "int":
        try:
            return int(value)
        except ValueError:
            number = float(value)
            if not number.is_integer():
                raise ValueError(f"{f.name}: expected an integer, got {value!r}") from None
            return int(number)
    if kind == "float":
        return float(value)
    return str(value)


def parse_config(text: str) -> Config:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return Config.from_dict(values)


def load_config(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg: Config) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
