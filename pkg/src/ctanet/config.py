"""Run configuration: flat dotted keys, file parsing, presets, hashing.

A run is fully described by `model.*`, `train.*` and `data.*` keys. Every
key has a default; unknown keys are rejected by name. Precedence is
preset < config file < command-line overrides. The effective config can
be echoed to text and re-parsed to reproduce the run exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .data import AugmentFlags, DatasetSpec
from .errors import ConfigError
from .model import ModelConfig, paper_config, tiny_config
from .train import TrainConfig


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.data.validate()
        dataset_classes = {"cifar10": 10, "cifar100": 100}.get(self.data.kind, self.data.synth_classes)
        if self.model.num_classes != dataset_classes:
            raise ConfigError(
                f"model.num_classes={self.model.num_classes} but data provides {dataset_classes} classes")
        if self.data.target_size != self.model.image_size:
            raise ConfigError(
                f"data.target_size={self.data.target_size} != model.image_size={self.model.image_size}")
        return self


# -- value codecs ----------------------------------------------------------

def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_opt_int(s: str):
    v = s.strip().lower()
    return None if v in ("none", "") else int(s)


def _parse_scales(s: str) -> tuple:
    v = s.strip().lower()
    if v in ("none", ""):
        return ()
    return tuple(int(x) for x in v.replace("+", ",").split(",") if x.strip())


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v) if v else "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key -> (section getter, attribute, parser)
_KEYS = {}


def _register(section, prefix, fields):
    for name, parser in fields:
        _KEYS[f"{prefix}.{name}"] = (section, name, parser)


_register(lambda r: r.model, "model", [
    ("image_size", int), ("patch_size", int), ("embed_dim", int), ("depth", int),
    ("heads", int), ("mlp_ratio", int), ("attention_kind", str), ("rrcv_variant", str),
    ("kernel_scales", _parse_scales), ("kv_reduction", int), ("num_classes", int),
    ("use_class_token", _parse_bool), ("rrcv_channels", _parse_opt_int),
    ("baseline_dim", _parse_opt_int),
])
_register(lambda r: r.train, "train", [
    ("epochs", int), ("batch_size", int), ("lr", float), ("beta1", float),
    ("beta2", float), ("eps", float), ("weight_decay", float), ("warmup_epochs", int),
    ("seed", int), ("dtype", str),
])
_register(lambda r: r.data, "data", [
    ("kind", str), ("root", str), ("split", str), ("subset", _parse_opt_int),
    ("val_subset", _parse_opt_int), ("target_size", int), ("seed", int),
    ("synth_classes", int), ("synth_size", int),
])
_register(lambda r: r.data.augment, "data.aug", [
    ("crop", _parse_bool), ("flip", _parse_bool), ("rotate", _parse_bool),
    ("jitter", _parse_bool), ("rotate_deg", float), ("jitter_lo", float),
    ("jitter_hi", float),
])

# the file key `data.subset` maps onto DatasetSpec.subset_size
_ATTR_ALIASES = {("data", "subset"): "subset_size"}


def _attr_for(key: str):
    section, name, parser = _KEYS[key]
    prefix = key.rsplit(".", 1)[0]
    attr = _ATTR_ALIASES.get((prefix, name), name)
    return section, attr, parser


def set_key(run: RunConfig, key: str, value: str) -> None:
    if key not in _KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    section, attr, parser = _attr_for(key)
    try:
        setattr(section(run), attr, parser(value))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None


def get_key(run: RunConfig, key: str):
    section, attr, _ = _attr_for(key)
    return getattr(section(run), attr)


def all_keys():
    return sorted(_KEYS)


def effective_text(run: RunConfig) -> str:
    """All keys as `key = value` lines; parsing this text recreates the run."""
    return "".join(f"{k} = {_fmt(get_key(run, k))}\n" for k in all_keys())


def config_hash(run: RunConfig) -> str:
    return hashlib.sha256(effective_text(run).encode()).hexdigest()[:12]


def parse_config_text(text: str):
    """key=value lines; '#' starts a comment; returns ordered (key, value) pairs."""
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def apply_config_file(run: RunConfig, path: str) -> None:
    with open(path) as fh:
        text = fh.read()
    for key, value in parse_config_text(text):
        set_key(run, key, value)


def preset_run_config(preset: str = "tiny") -> RunConfig:
    """Named starting points. tiny: 32px desk scale; paper: 224px full shape."""
    if preset == "tiny":
        run = RunConfig(model=tiny_config())
        run.train.epochs = 20
        run.data = DatasetSpec(kind="synthetic", target_size=32)
    elif preset == "paper":
        run = RunConfig(model=paper_config())
        run.train.epochs = 20
        run.data = DatasetSpec(kind="cifar10", target_size=224)
        run.data.augment = AugmentFlags(crop=True, flip=True, rotate=True, jitter=True)
    else:
        raise ConfigError(f"unknown preset {preset!r} (expected tiny or paper)")
    return run
