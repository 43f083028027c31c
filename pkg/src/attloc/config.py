"""``key=value`` run configuration files (``#`` starts a comment)."""

from dataclasses import dataclass, fields, replace

from .model import Mode
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_float(text):
    return None if text.strip().lower() in ("", "none", "off") else float(text)


@dataclass
class RunConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    clip_norm: float | None = None
    mode: str = "attloc"
    snr_db: float = 10.0
    manifest: str | None = None
    val_manifest: str | None = None
    out: str | None = None
    log: str | None = None

    def __post_init__(self):
        if self.mode not in ("baseline", "attloc"):
            raise ConfigError(f"mode must be 'baseline' or 'attloc', got {self.mode!r}")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self):
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: getattr(self, k) for k in names})

    @property
    def model_mode(self):
        return Mode(self.mode)


_PARSERS = {
    "epochs": int, "batch_size": int, "learning_rate": float, "beta1": float, "beta2": float,
    "adam_eps": float, "seed": int, "shuffle": _bool, "clip_norm": _optional_float,
    "mode": str.strip, "snr_db": float, "manifest": str.strip, "val_manifest": str.strip,
    "out": str.strip, "log": str.strip,
}


def parse_config_text(text, base=None):
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return with_overrides(base or RunConfig(), values)


def load_config(path, base=None):
    with open(path) as f:
        return parse_config_text(f.read(), base)


def with_overrides(cfg, overrides):
    unknown = set(overrides) - set(_PARSERS)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)}")
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
