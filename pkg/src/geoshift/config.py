"""Flat ``key = value`` experiment configuration.

One line per key, ``#`` starts a comment. Every key has a default; unknown
keys are rejected. Values given on the command line (``--set key=value``)
override the file, which overrides the defaults.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .adapt import AdaptConfig
from .augment import DEFAULT_PROBS, KINDS
from .dataset import SPLIT_NAMES, GeneratorConfig
from .ensemble import DEFAULT_GROUPS, WeightSearchConfig
from .errors import ConfigError
from .metrics import DEFAULT_THRESHOLD
from .model import ModelConfig
from .optimize import TrainConfig


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_gen, _train, _adapt, _search = GeneratorConfig(), TrainConfig(), AdaptConfig(), WeightSearchConfig()

# key -> (parser, default)
SCHEMA: dict = {
    "seed": (int, 0),
    "gen.height": (int, _gen.height),
    "gen.width": (int, _gen.width),
    "gen.channels": (int, _gen.channels),
    "gen.num_classes": (int, _gen.num_classes),
    **{f"gen.size.{name}": (int, _gen.sizes[name]) for name in SPLIT_NAMES},
    "gen.prior_high": (float, _gen.prior_high),
    "gen.prior_low": (float, _gen.prior_low),
    "gen.prior_shared": (float, _gen.prior_shared),
    "gen.hidden_mix": (float, _gen.hidden_mix),
    "gen.prototype_sigma": (float, _gen.prototype_sigma),
    "gen.prototype_amplitude": (float, _gen.prototype_amplitude),
    "gen.background_level": (float, _gen.background_level),
    "gen.background_sigma": (float, _gen.background_sigma),
    "gen.ring_min_radius": (float, _gen.ring_min_radius),
    "gen.ring_width": (_floats, tuple(_gen.ring_width)),
    "gen.ring_levels": (int, _gen.ring_levels),
    "gen.max_offset": (float, _gen.max_offset),
    "gen.zoom": (_floats, tuple(_gen.zoom)),
    "gen.delta": (float, _gen.delta),
    "gen.allow_empty": (_bool, _gen.allow_empty),
    "model.hidden_dims": (_ints, (64, 32)),
    "model.dropout_p": (float, 0.3),
    "model.bn_momentum": (float, 0.1),
    "model.bn_epsilon": (float, 1e-5),
    "train.batch_size": (int, _train.batch_size),
    "train.max_epochs": (int, _train.max_epochs),
    "train.lr": (float, _train.lr),
    "train.early_stop_patience": (int, _train.early_stop_patience),
    "train.min_lr": (float, _train.min_lr),
    "train.plateau_factor": (float, _train.plateau_factor),
    "train.plateau_patience": (int, _train.plateau_patience),
    "train.plateau_cooldown": (int, _train.plateau_cooldown),
    "adapt.alphas": (_floats, (0.0, 0.5, 0.9)),
    "adapt.k": (int, _adapt.k),
    "adapt.epochs": (int, _adapt.epochs),
    "adapt.batches_per_epoch": (int, _adapt.batches_per_epoch),
    "adapt.batch_size": (int, _adapt.batch_size),
    "adapt.lr": (float, _adapt.lr),
    "adapt.reinit_head": (_bool, _adapt.reinit_head),
    "adapt.use_augmentations": (_bool, _adapt.use_augmentations),
    "adapt.augment_source": (_bool, _adapt.augment_source),
    "adapt.recompute_bn": (_bool, _adapt.recompute_bn),
    "adapt.bn_batches": (int, _adapt.bn_batches),
    **{f"aug.{kind}.prob": (float, DEFAULT_PROBS[kind]) for kind in KINDS},
    "ensemble.step": (float, _search.step),
    "ensemble.epsilon": (float, _search.epsilon),
    "ensemble.stage1_split": (str, "target_eval"),
    "ensemble.local_split": (str, "source_val"),
    **{f"ensemble.weight.{name}": (float, w) for name, _, w in DEFAULT_GROUPS},
    "metrics.threshold": (float, DEFAULT_THRESHOLD),
}


class ExperimentConfig:
    """Typed view over the flat key space; ``cfg["train.lr"]``."""

    def __init__(self, values: dict | None = None):
        self.values = {key: default for key, (_, default) in SCHEMA.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key: str, value):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[key][0]
        if isinstance(value, str):
            try:
                value = parser(value.strip())
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        self.values[key] = value

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def text(self) -> str:
        """Canonical form: every key, sorted, one ``key = value`` per line."""
        return "".join(f"{key} = {_fmt(self.values[key])}\n" for key in sorted(self.values))

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()[:16]

    # builders

    def generator(self) -> GeneratorConfig:
        g = lambda k: self[f"gen.{k}"]  # noqa: E731
        cfg = GeneratorConfig(
            height=g("height"),
            width=g("width"),
            channels=g("channels"),
            num_classes=g("num_classes"),
            sizes={name: self[f"gen.size.{name}"] for name in SPLIT_NAMES},
            prior_high=g("prior_high"),
            prior_low=g("prior_low"),
            prior_shared=g("prior_shared"),
            hidden_mix=g("hidden_mix"),
            prototype_sigma=g("prototype_sigma"),
            prototype_amplitude=g("prototype_amplitude"),
            background_level=g("background_level"),
            background_sigma=g("background_sigma"),
            ring_min_radius=g("ring_min_radius"),
            ring_width=tuple(g("ring_width")),
            ring_levels=g("ring_levels"),
            max_offset=g("max_offset"),
            zoom=tuple(g("zoom")),
            delta=g("delta"),
            allow_empty=g("allow_empty"),
            seed=self["seed"],
        )
        if len(cfg.ring_width) != 2 or len(cfg.zoom) != 2:
            raise ConfigError("gen.ring_width and gen.zoom take two comma-separated values")
        return cfg

    def model(self, input_dim: int, num_classes: int) -> ModelConfig:
        return ModelConfig(
            input_dim=input_dim,
            num_classes=num_classes,
            hidden_dims=tuple(self["model.hidden_dims"]),
            dropout_p=self["model.dropout_p"],
            bn_momentum=self["model.bn_momentum"],
            bn_epsilon=self["model.bn_epsilon"],
        )

    def train(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self["train.batch_size"],
            max_epochs=self["train.max_epochs"],
            seed=self["seed"],
            lr=self["train.lr"],
            early_stop_patience=self["train.early_stop_patience"],
            min_lr=self["train.min_lr"],
            plateau_factor=self["train.plateau_factor"],
            plateau_patience=self["train.plateau_patience"],
            plateau_cooldown=self["train.plateau_cooldown"],
            threshold=self["metrics.threshold"],
        )

    def adapt(self, alpha: float) -> AdaptConfig:
        a = lambda k: self[f"adapt.{k}"]  # noqa: E731
        return AdaptConfig(
            alpha=alpha,
            k=a("k"),
            epochs=a("epochs"),
            batches_per_epoch=a("batches_per_epoch"),
            batch_size=a("batch_size"),
            lr=a("lr"),
            reinit_head=a("reinit_head"),
            use_augmentations=a("use_augmentations"),
            augment_source=a("augment_source"),
            recompute_bn=a("recompute_bn"),
            bn_batches=a("bn_batches"),
            threshold=self["metrics.threshold"],
            seed=self["seed"],
            aug_probs={kind: self[f"aug.{kind}.prob"] for kind in KINDS},
        )

    def search(self) -> WeightSearchConfig:
        return WeightSearchConfig(self["ensemble.step"], self["ensemble.epsilon"], self["metrics.threshold"])


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides=None) -> ExperimentConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (a key -> text dict)."""
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        for key, value in parse_config_text(path.read_text()).items():
            cfg.set(key, value)
    for key, value in (overrides or {}).items():
        cfg.set(key, value)
    return cfg
