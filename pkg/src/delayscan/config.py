"""Plain-text ``section.key = value`` run configuration.

Unknown keys are rejected. Every run echoes the effective values to
``resolved.cfg``, which can be fed back to reproduce the run.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .exceptions import ConfigError
from .trainer import TrainConfig

# config key -> TrainConfig field
_TRAIN_KEYS = {
    "schedule.T": "T",
    "schedule.beta_start": "beta_start",
    "schedule.beta_end": "beta_end",
    "schedule.sigma_mode": "sigma_mode",
    "model.stages": "stages",
    "model.base_channels": "base_channels",
    "model.channel_multipliers": "channel_multipliers",
    "model.n_res": "n_res",
    "model.n_trans": "n_trans",
    "model.time_dim": "time_dim",
    "model.heads": "heads",
    "model.embed_mode": "embed_mode",
    "model.use_transformer": "use_transformer",
    "trainer.use_delay_time": "use_delay_time",
    "trainer.epochs": "epochs",
    "trainer.max_steps": "max_steps",
    "trainer.batch_size": "batch_size",
    "trainer.learning_rate": "learning_rate",
    "trainer.beta1": "beta1",
    "trainer.beta2": "beta2",
    "trainer.adam_eps": "adam_eps",
    "trainer.seed": "seed",
    "trainer.dtype": "dtype",
    "trainer.checkpoint_every": "checkpoint_every",
}
_TRAIN_DEFAULTS = {f.name: f.default for f in fields(TrainConfig)}

DEFAULTS: dict[str, object] = {key: _TRAIN_DEFAULTS[name] for key, name in _TRAIN_KEYS.items()}
DEFAULTS.update({
    "phantom.count": 200,
    "phantom.size": 32,
    "phantom.td_lo": 60,
    "phantom.td_hi": 120,
    "phantom.eta": 0.02,
    "phantom.seed": 0,
    "sample.seed": 0,
    "metric.peak": 1.0,
    "metric.ffd_features": 64,
    "audit.size": 8,
    "audit.coords": 12,
    "audit.seed": 0,
    "ablation.grid": "components",
    "ablation.seeds": (0, 1, 2),
})
ALIASES = {"embed_mode": "model.embed_mode"}


def _parse(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            cfg.set(ALIASES.get(key, key), raw)
        cfg.train_config()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        return cls.from_text(Path(path).read_text())

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(key, value) if isinstance(value, str) else value

    def __getitem__(self, key):
        return self.values[key]

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{name: self.values[key] for key, name in _TRAIN_KEYS.items()})

    def resolved_text(self) -> str:
        return "".join(f"{k}={_format(self.values[k])}\n" for k in DEFAULTS)

    def write_resolved(self, directory) -> Path:
        path = Path(directory) / "resolved.cfg"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.resolved_text())
        return path
