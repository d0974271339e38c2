"""Run configuration and its line-oriented ``key = value`` text form."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from pcnet.ops import ConfigurationError

ARCHITECTURES = ("single", "multi")
REPRESENTATIONS = ("self", "mutual", "self+mutual")
OBJECTIVES = ("Lc", "Lc+Lr")


class ConfigError(ConfigurationError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class TrainConfig:
    epochs: int = 100
    lr0: float = 0.01
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lam: float = 1.0
    epsilon: float = 0.05
    P: int = 30
    K: int = 6
    seed: int = 0
    precision: str = "float32"
    # model / objective toggles
    architecture: str = "multi"
    representation: str = "self+mutual"
    objective: str = "Lc+Lr"
    self_attention: bool = True
    eval_eca: bool = False
    mutual_attention: str = "eca"
    freeze_mutual: bool = False
    eca_k: int = 5
    attention_init: str = "zero"
    channels: tuple = (16, 32, 64)
    # pairing
    metric: str = "euclidean"
    strategy: str = "SS"
    pair_mode: str = "both"
    # data
    dataset: str = "synth"
    input_size: int = 64
    train_fraction: float = 0.2
    synth_classes: int = 8
    synth_per_class: int = 150
    augment: bool = True
    rotate_max_deg: float = 30.0
    rotate_mode: str = "uniform"
    hflip: bool = True
    vflip: bool = True
    eval_batch: int = 100
    checkpoint_every: int = 1
    extra: dict = field(default_factory=dict, repr=False, compare=False)

    def validate(self) -> "TrainConfig":
        checks = [
            ("epochs", self.epochs >= 1, "must be >= 1"),
            ("lr0", self.lr0 >= 0, "must be >= 0"),
            ("lr_min", 0 <= self.lr_min <= self.lr0 or self.lr0 == 0, "must lie in [0, lr0]"),
            ("momentum", self.momentum >= 0, "must be >= 0"),
            ("weight_decay", self.weight_decay >= 0, "must be >= 0"),
            ("lambda", self.lam >= 0, "must be >= 0"),
            ("epsilon", self.epsilon >= 0, "must be >= 0"),
            ("P", self.P >= 2, "must be >= 2"),
            ("K", self.K >= 2, "must be >= 2"),
            ("precision", self.precision in ("float32", "float64"), "must be float32 or float64"),
            ("architecture", self.architecture in ARCHITECTURES, f"must be one of {ARCHITECTURES}"),
            ("representation", self.representation in REPRESENTATIONS, f"must be one of {REPRESENTATIONS}"),
            ("objective", self.objective in OBJECTIVES, f"must be one of {OBJECTIVES}"),
            ("mutual_attention", self.mutual_attention in ("eca", "fc"), "must be eca or fc"),
            ("attention_init", self.attention_init in ("zero", "uniform"), "must be zero or uniform"),
            ("eca_k", self.eca_k >= 1 and self.eca_k % 2 == 1, "must be a positive odd integer"),
            ("channels", len(self.channels) >= 1 and all(c >= 1 for c in self.channels), "must be positive"),
            ("metric", self.metric in ("euclidean", "cosine", "random"), "must be euclidean, cosine or random"),
            ("strategy", self.strategy in ("SS", "SD", "SRandom", "RandomRandom"),
             "must be SS, SD, SRandom or RandomRandom"),
            ("pair_mode", self.pair_mode in ("both", "inter"), "must be both or inter"),
            ("input_size", self.input_size >= 1, "must be positive"),
            ("train_fraction", 0 < self.train_fraction < 1, "must lie in (0, 1)"),
            ("synth_classes", 4 <= self.synth_classes <= 16, "must lie in [4, 16]"),
            ("synth_per_class", self.synth_per_class >= 2, "must be >= 2"),
            ("rotate_mode", self.rotate_mode in ("uniform", "fixed"), "must be uniform or fixed"),
            ("eval_batch", self.eval_batch >= 1, "must be >= 1"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, msg)
        return self

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "extra":
                continue
            lines.append(f"{_key(f.name)} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _key(name: str) -> str:
    return "lambda" if name == "lam" else name


def _field_name(key: str) -> str:
    return "lam" if key == "lambda" else key


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def coerce(key: str, raw) -> object:
    name = _field_name(key)
    if name not in _FIELDS or name == "extra":
        raise ConfigError(key, "unknown configuration key")
    default = _FIELDS[name].default
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(key, f"cannot parse value {raw!r}") from None
    return raw


def parse_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Keys starting with ``_`` are kept verbatim."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {stripped!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        values[key] = value
    return values


def from_mapping(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    cfg = dataclasses.replace(base) if base is not None else TrainConfig()
    extra = dict(cfg.extra)
    for key, raw in values.items():
        if key.startswith("_"):
            extra[key] = raw
            continue
        setattr(cfg, _field_name(key), coerce(key, raw))
    cfg.extra = extra
    return cfg.validate()


def load_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return from_mapping(parse_text(fh.read()))
