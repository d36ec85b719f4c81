"""Run configuration: flat ``section.key=value`` files with typed defaults."""

from __future__ import annotations

from pathlib import Path

from .energy import DEFAULT_RATE
from .events import SynthConfig, read_key_values
from .model import ModelConfig
from .rng import derive_seed
from .snn import LifParams
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _opt_int(text: str):
    return None if text.lower() in ("", "none") else int(text)


DEFAULTS: dict[str, tuple[type | object, object]] = {
    "seed": (int, 0),
    "threads": (int, 1),
    "synth.places": (int, 20),
    "synth.traverses": (int, 2),
    "synth.width": (int, 32),
    "synth.height": (int, 32),
    "synth.events_per_place": (int, 64),
    "synth.noise_rate": (float, 0.1),
    "synth.interval": (float, 0.25),
    "data.db_traverse": (int, 0),
    "data.query_traverse": (int, 1),
    "repr.steps": (int, 4),
    "repr.eta_ms": (float, 50.0),
    "repr.smlp_hidden": (int, 32),
    "model.scale": (float, 0.125),
    "model.cda_hidden": (int, 64),
    "model.v_threshold": (float, 1.0),
    "model.decay": (float, 0.5),
    "model.alpha": (float, 2.0),
    "train.margin": (float, 0.1),
    "train.negatives": (int, 5),
    "train.lr": (float, 0.001),
    "train.batch": (int, 2),
    "train.cache_batch": (int, 100),
    "train.r_pos": (float, 15.0),
    "train.r_neg": (float, 75.0),
    "train.epochs": (int, 1),
    "train.max_steps": (_opt_int, None),
    "train.optimizer": (str, "sgd"),
    "train.momentum": (float, 0.9),
    "train.negative_pool": (int, 1000),
    "train.checkpoint_every": (int, 0),
    "train.validate_every": (int, 0),
    "eval.phi": (float, 75.0),
    "eval.phi_sweep": (_floats, (15.0, 30.0, 45.0, 60.0, 75.0)),
    "energy.mode": (str, "snn-measured"),
    "energy.rate": (float, DEFAULT_RATE),
}


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return "none" if value is None else str(value)


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = {k: default for k, (_, default) in DEFAULTS.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        parse = DEFAULTS[key][0]
        if isinstance(value, str):
            try:
                value = parse(value)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        self.values[key] = value

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        values = {}
        if path is not None:
            try:
                values = read_key_values(path)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        cfg = cls(values)
        for k, v in (overrides or {}).items():
            if v is not None:
                cfg.set(k, v)
        return cfg

    def dump(self) -> str:
        return "".join(f"{k}={_format(self.values[k])}\n" for k in sorted(self.values))

    def echo(self, out_dir) -> None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "config.txt").write_text(self.dump())

    def component_seed(self, label: str) -> int:
        return derive_seed(self["seed"], label)

    def synth(self) -> SynthConfig:
        return SynthConfig(
            n_places=self["synth.places"], traverses=self["synth.traverses"],
            resolution=(self["synth.width"], self["synth.height"]),
            events_per_place=self["synth.events_per_place"], noise_rate=self["synth.noise_rate"],
            seed=self["seed"], interval=self["synth.interval"],
        )

    def model(self) -> ModelConfig:
        try:
            lif = LifParams(self["model.v_threshold"], self["model.decay"], self["model.alpha"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return ModelConfig(
            steps=self["repr.steps"], scale=self["model.scale"], smlp_hidden=self["repr.smlp_hidden"],
            cda_hidden=self["model.cda_hidden"], eta=self["repr.eta_ms"] / 1000.0, lif=lif,
            seed=self.component_seed("model") % (2**31),
        )

    def train(self) -> TrainConfig:
        try:
            return TrainConfig(
                margin=self["train.margin"], negatives=self["train.negatives"], lr=self["train.lr"],
                batch=self["train.batch"], cache_batch=self["train.cache_batch"], r_pos=self["train.r_pos"],
                r_neg=self["train.r_neg"], epochs=self["train.epochs"], max_steps=self["train.max_steps"],
                seed=self.component_seed("train") % (2**31), optimizer=self["train.optimizer"],
                momentum=self["train.momentum"], negative_pool=self["train.negative_pool"],
                checkpoint_every=self["train.checkpoint_every"], validate_every=self["train.validate_every"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
