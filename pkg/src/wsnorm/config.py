"""Experiment configuration as a flat, sectioned key-value file (INI)."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field

from .models import ModelSpec
from .train import TrainConfig

__all__ = ["DataConfig", "RunConfig", "ExperimentConfig", "ConfigError"]


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dataset: str = "synth"  # synth | cifar10
    path: str = ""
    n_train: int = 2000
    n_val: int = 1000
    image_size: int = 16
    noise: float = 2.0
    classes: int = 10


@dataclass
class RunConfig:
    command: str = "train"
    run_id: str = "run"
    output_dir: str = ""
    seed: int = 0
    precision: int = 32
    checkpoint_every: int = 1


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: dict = field(default_factory=dict)

    _SECTIONS = ("run", "data", "model", "train")

    # -- (de)serialization -------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for sec in self._SECTIONS:
            obj = getattr(self, sec)
            cp[sec] = {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if self.experiment:
            cp["experiment"] = {k: _fmt(v) for k, v in self.experiment.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_ini())

    @classmethod
    def from_ini(cls, text: str) -> ExperimentConfig:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unparseable config: {exc}") from exc
        cfg = cls()
        for sec in cp.sections():
            if sec == "experiment":
                cfg.experiment = dict(cp[sec])
                continue
            if sec not in cls._SECTIONS:
                raise ConfigError(f"unknown config section [{sec}]")
            cfg.update(sec, dict(cp[sec]))
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.from_ini(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def update(self, section: str, values: dict) -> None:
        """Set fields of ``section`` from strings or typed values, validating names."""
        obj = getattr(self, section)
        types = {f.name: f for f in dataclasses.fields(obj)}
        kwargs = dataclasses.asdict(obj)
        for key, raw in values.items():
            if raw is None:
                continue
            if key not in types:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            kwargs[key] = _coerce(raw, kwargs[key], types[key])
        try:
            setattr(self, section, type(obj)(**kwargs))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [{section}] settings: {exc}") from exc


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if v is None:
        return ""
    return str(v)


def _coerce(raw, current, f: dataclasses.Field):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    typ = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    try:
        if "tuple" in typ or isinstance(current, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
        if "bool" in typ or isinstance(current, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if text == "" and "None" in typ:
            return None
        if "float" in typ:
            return float(text)
        if "int" in typ:
            return int(text)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {f.name}") from None
    return text
