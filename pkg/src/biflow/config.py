"""Experiment configuration: a flat ``key = value`` file with validation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .data import DATASETS
from .inverse import GuidanceSpec
from .reverse import NORM_MODES, STRATEGIES


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "two_moons"
    data_size: int = 8192
    patch: int = 2
    seed: int = 0
    dtype: str = "float32"
    # forward flow
    blocks: int = 4
    layers: int = 2
    width: int = 32
    heads: int = 1
    class_tokens: int = 1
    clip_range: float | None = 1.0
    sigma: float = 0.3
    lr: float = 1e-3
    epochs: int = 60
    batch: int = 256
    warmup_steps: int = 100
    ema_decay: float = 0.9999
    label_drop: float = 0.1
    # reverse model
    strategy: str = "hidden_align"
    metric: str = "mse"
    p: float = 2.0
    c_hat: float = 1e-3
    w_max: float = 0.0
    wd_max: float = 0.0
    proj_heads: bool = True
    denoise_block: bool = True
    trajectory_norm: str = "normalized"
    rev_steps: int = 1500
    rev_lr: float = 1e-3
    rev_batch: int = 128
    rev_width: int = 32
    rev_layers: int = 1
    rev_ema_decay: float = 0.999
    # inference-time guidance
    cfg_scale: float = 0.0
    cfg_schedule: str = "const"
    cfg_space: str = "param"
    cfg_mode: str = "online"
    denoise_scale: float = 0.0
    denoise: str = "score"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        sizes = ("data_size", "patch", "blocks", "layers", "width", "heads", "class_tokens",
                 "epochs", "batch", "rev_steps", "rev_batch", "rev_width", "rev_layers")
        for k in sizes:
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")
        for k in ("ema_decay", "label_drop", "rev_ema_decay"):
            if not 0.0 <= getattr(self, k) <= 1.0:
                raise ConfigError(f"{k} must lie in [0, 1]")
        for k in ("sigma", "p", "w_max", "wd_max", "cfg_scale", "denoise_scale", "warmup_steps"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be >= 0")
        for k in ("lr", "rev_lr", "c_hat"):
            if getattr(self, k) <= 0:
                raise ConfigError(f"{k} must be > 0")
        if self.clip_range is not None and self.clip_range <= 0:
            raise ConfigError("clip_range must be > 0 (or none)")
        choices = {"dataset": DATASETS, "strategy": STRATEGIES, "trajectory_norm": NORM_MODES,
                   "dtype": ("float32", "float64"), "cfg_schedule": ("linear", "const", "constant"),
                   "cfg_space": ("param", "parameter", "pixel"), "cfg_mode": ("online", "offline"),
                   "denoise": ("score", "none")}
        for k, allowed in choices.items():
            if getattr(self, k) not in allowed:
                raise ConfigError(f"{k} must be one of {', '.join(allowed)}; got {getattr(self, k)!r}")

    def guidance(self) -> GuidanceSpec:
        return GuidanceSpec(self.cfg_scale, self.cfg_schedule, self.cfg_space, self.cfg_mode,
                            self.denoise_scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown keys: {', '.join(sorted(extra))}")
        return cls(**d)

    def replace(self, **kw) -> ExperimentConfig:
        d = self.to_dict()
        d.update(kw)
        return ExperimentConfig.from_dict(d)

    def dumps(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if v is None:
                v = "none"
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def coerce_value(key: str, raw: str):
    kind = FIELD_TYPES[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE | _FALSE:
                return low in _TRUE
            raise ValueError
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "float | None":
            return None if raw.lower() == "none" else float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = coerce_value(key, raw)
    return ExperimentConfig(**values)


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path) as f:
        return parse_config(f.read())
