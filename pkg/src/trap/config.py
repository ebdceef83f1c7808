"""Experiment configuration files.

The format is one ``key = value`` per line with dotted section prefixes::

    experiment.seed = 0
    dataset.test_images = data/mnist5k/test-images-idx3-ubyte.gz
    models.src.arch = cnn3
    attack.preset = mi_fgsm, trap
    attack.range.dx = -30, 30

``#`` starts a comment. Lists are comma separated. Unknown keys are
errors. Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from trap import affine, attacks, evaluation, zoo


class ConfigError(ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        where = f"{path or '<config>'}:{line}: " if line else ""
        super().__init__(where + message)


def _bool(text):
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(conv):
    def parse(text):
        return [conv(v.strip()) for v in text.split(",") if v.strip()]

    return parse


def _pair(text):
    values = _list(float)(text)
    if len(values) != 2:
        raise ValueError(f"expected 'lower, upper', got {text!r}")
    return tuple(values)


def _int_or_float(text):
    value = float(text)
    return int(value) if value.is_integer() else value


@dataclass
class ModelSection:
    name: str
    arch: str = "cnn3"
    seed: int | None = None
    epochs: int = 6
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 32
    checkpoint: str | None = None


@dataclass
class ExperimentConfig:
    path: Path | None = None
    text: str = ""
    seed: int = 0
    name: str = "experiment"
    # dataset
    train_images: Path | None = None
    train_labels: Path | None = None
    test_images: Path | None = None
    test_labels: Path | None = None
    num_classes: int = 10
    num_items: int = 1000
    # models
    models: dict = field(default_factory=dict)
    # attack
    presets: list = field(default_factory=lambda: ["trap"])
    source: str | None = None
    attack: attacks.AttackConfig = field(default_factory=attacks.AttackConfig)
    attack_seed: int | None = None
    chunk_size: int = 100
    # eval
    targets: list = field(default_factory=list)
    subtract_benign: bool = True
    noise_levels: list = field(default_factory=lambda: list(evaluation.NOISE_LEVELS))
    blur_levels: list = field(default_factory=lambda: list(evaluation.BLUR_LEVELS))
    destruction_model: str | None = None
    rfd_layers: list | None = None
    # sweep
    sweep_axis: str | None = None
    sweep_values: list = field(default_factory=list)
    # report
    out_dir: Path = Path("runs/experiment")
    emit_plots: bool = False

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


_SCALARS = {
    "experiment.seed": ("seed", int),
    "experiment.name": ("name", str),
    "dataset.train_images": ("train_images", Path),
    "dataset.train_labels": ("train_labels", Path),
    "dataset.test_images": ("test_images", Path),
    "dataset.test_labels": ("test_labels", Path),
    "dataset.num_classes": ("num_classes", int),
    "dataset.num_items": ("num_items", int),
    "attack.preset": ("presets", _list(str)),
    "attack.source": ("source", str),
    "attack.seed": ("attack_seed", int),
    "attack.chunk_size": ("chunk_size", int),
    "eval.targets": ("targets", _list(str)),
    "eval.subtract_benign": ("subtract_benign", _bool),
    "eval.noise_levels": ("noise_levels", _list(float)),
    "eval.blur_levels": ("blur_levels", _list(float)),
    "eval.destruction_model": ("destruction_model", str),
    "eval.rfd_layers": ("rfd_layers", _list(str)),
    "sweep.axis": ("sweep_axis", str),
    "sweep.values": ("sweep_values", _list(str)),
    "report.out_dir": ("out_dir", Path),
    "report.emit_plots": ("emit_plots", _bool),
}

_ATTACK_FIELDS = {
    "epsilon_255": _int_or_float,
    "T": int,
    "t1": int,
    "mu": float,
    "p": float,
    "beta": float,
    "gamma": float,
    "tap": str,
    "transform_enabled": _bool,
    "per_batch_transform": _bool,
    "order": lambda s: tuple(_list(str)(s)),
}

_MODEL_FIELDS = {
    "arch": str,
    "seed": int,
    "epochs": int,
    "lr": float,
    "momentum": float,
    "batch_size": int,
    "checkpoint": str,
}

_MODEL_KEY = re.compile(r"^models\.([A-Za-z0-9_\-]+)\.([a-z_]+)$")
_RANGE_KEY = re.compile(r"^attack\.range\.([a-z]+)$")
SWEEP_AXES = ("layer", "T", "preset", "beta", "p")
_PATH_FIELDS = ("train_images", "train_labels", "test_images", "test_labels", "out_dir")


def parse_config(text: str, path=None, base_dir=None) -> ExperimentConfig:
    cfg = ExperimentConfig(path=Path(path) if path else None, text=text)
    base_dir = Path(base_dir) if base_dir else (Path(path).parent if path else Path("."))
    attack_kwargs, ranges = {}, {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, path)
        key, value = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"duplicate key {key!r}", lineno, path)
        seen.add(key)
        try:
            if key in _SCALARS:
                attr, conv = _SCALARS[key]
                setattr(cfg, attr, conv(value))
            elif key.startswith("attack.") and key[7:] in _ATTACK_FIELDS:
                attack_kwargs[key[7:]] = _ATTACK_FIELDS[key[7:]](value)
            elif m := _RANGE_KEY.match(key):
                if m.group(1) not in affine.RangeTable.__dataclass_fields__:
                    raise KeyError(key)
                ranges[m.group(1)] = _pair(value)
            elif m := _MODEL_KEY.match(key):
                name, attr = m.groups()
                if attr not in _MODEL_FIELDS:
                    raise KeyError(key)
                model = cfg.models.setdefault(name, ModelSection(name))
                setattr(model, attr, _MODEL_FIELDS[attr](value))
            else:
                raise KeyError(key)
        except KeyError:
            raise ConfigError(f"unknown key {key!r}", lineno, path) from None
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno, path) from None

    for attr in _PATH_FIELDS:
        value = getattr(cfg, attr)
        if value is not None and not value.is_absolute():
            setattr(cfg, attr, base_dir / value)
    for model in cfg.models.values():
        if model.arch not in zoo.ARCHITECTURES:
            raise ConfigError(f"models.{model.name}.arch: unknown architecture {model.arch!r}")
    try:
        cfg.attack = attacks.AttackConfig(ranges=replace(affine.DEFAULT_RANGES, **ranges), **attack_kwargs)
    except ValueError as exc:
        raise ConfigError(f"attack section: {exc}") from None
    for name in cfg.presets:
        if name not in attacks.PRESETS:
            raise ConfigError(f"attack.preset: unknown preset {name!r}")
    if cfg.sweep_axis is not None and cfg.sweep_axis not in SWEEP_AXES:
        raise ConfigError(f"sweep.axis must be one of {SWEEP_AXES}, got {cfg.sweep_axis!r}")
    for ref in [cfg.source, cfg.destruction_model, *cfg.targets]:
        if ref is not None and ref not in cfg.models:
            raise ConfigError(f"model {ref!r} is referenced but not defined under models.*")
    for attr in ("train_images", "train_labels", "test_images", "test_labels"):
        value = getattr(cfg, attr)
        if value is not None and not value.exists():
            raise ConfigError(f"dataset.{attr}: file {value} does not exist")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), path=path)


def with_overrides(cfg: ExperimentConfig, seed=None, out_dir=None) -> ExperimentConfig:
    updates = {}
    if seed is not None:
        updates["seed"] = int(seed)
    if out_dir is not None:
        updates["out_dir"] = Path(out_dir)
    return replace(cfg, **updates)

