"""Flat experiment configuration: `key = value` lines with dotted keys.

The file grammar is one assignment per line, `#` starts a comment, blank
lines are skipped. CLI `--set key=value` pairs override file keys. Unknown
keys are rejected so typos fail loudly instead of silently using defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .attacks import AttackConfig
from .models import ModelSpec
from .optim import LrSchedule


class ConfigError(Exception):
    """Invalid configuration file, key, or value."""


OPTIMIZER_KINDS = ("msgd", "mgnc", "sngm", "engm", "fengm", "a-engm", "n-engm")
FAST_KINDS = ("a-engm", "n-engm")
DATASET_KINDS = ("synthetic-blobs", "synthetic-moons", "idx-dir", "cifar-bin-dir")

# key -> (default, parser); None default means "derived elsewhere"
_SCHEMA = {
    "model.kind": ("mlp", str),
    "model.layers": ((784, 128, 64, 10), "int_list"),
    "model.input_shape": (None, "int_list"),
    "model.num_classes": (10, int),
    "dataset.kind": ("synthetic-blobs", str),
    "dataset.path": (None, str),
    "dataset.noise": (0.05, float),
    "dataset.train_n": (4000, int),
    "dataset.val_n": (1000, int),
    "dataset.test_n": (1000, int),
    "attack.norm": ("linf", str),
    "attack.epsilon": (8.0 / 255.0, float),
    "attack.steps": (10, int),
    "attack.step_size": (2.0 / 255.0, float),
    "attack.loss": ("cross_entropy", str),
    "attack.random_start": (True, "bool"),
    "optimizer.kind": ("msgd", str),
    "optimizer.alpha": (None, float),
    "optimizer.beta": (0.9, float),
    "optimizer.weight_decay": (5e-4, float),
    "optimizer.lr": (0.1, float),
    "optimizer.decay_epochs": ((25, 32), "int_list"),
    "optimizer.decay_factor": (0.1, float),
    "fast.beta_gamma": (0.7, float),
    "fast.tau": (50, int),
    "epochs": (40, int),
    "batch_size": (128, int),
    "seed": (0, int),
    "probe_n": (1000, int),
    "out_dir": ("runs/out", str),
    "threads": (1, int),
}

DEFAULT_ALPHA = {"msgd": 5.0, "mgnc": 25.0, "sngm": 5.0, "engm": 5.0,
                 "fengm": 5.0, "a-engm": 5.0, "n-engm": 0.5}


def _parse_value(key, text, parser):
    text = text.strip()
    try:
        if parser is str:
            return text
        if parser is int:
            return int(text)
        if parser is float:
            return float(text)
        if parser == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if parser == "int_list":
            return tuple(int(v) for v in text.split(",") if v.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc
    raise ConfigError(f"no parser for key {key}")


def parse_config_text(text, source="<config>"):
    """Raw key -> typed value dict from config file text."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', "
                              f"got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, value, _SCHEMA[key][1])
    return out


def parse_overrides(pairs):
    """Typed dict from CLI `--set key=value` strings."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must be key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r} in override")
        out[key] = _parse_value(key, value, _SCHEMA[key][1])
    return out


@dataclass
class TrainConfig:
    model: ModelSpec
    dataset_kind: str
    dataset_path: str | None
    dataset_noise: float
    train_n: int
    val_n: int
    test_n: int
    attack: AttackConfig
    opt_kind: str
    alpha: float
    beta: float
    weight_decay: float
    schedule: LrSchedule
    beta_gamma: float
    tau: int
    epochs: int
    batch_size: int
    seed: int
    probe_n: int
    out_dir: str
    threads: int = 1
    raw: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.val_n < 0:
            raise ConfigError(f"dataset.val_n must be >= 0, got {self.val_n}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")

    @property
    def naive(self):
        return self.opt_kind == "n-engm"


def build_config(values):
    """TrainConfig from a merged key/value dict (file + overrides)."""
    merged = {key: default for key, (default, _) in _SCHEMA.items()}
    merged.update(values)

    kind = merged["model.kind"]
    layers = merged["model.layers"]
    input_shape = merged["model.input_shape"]
    if input_shape is None:
        if kind == "mlp":
            input_shape = (layers[0],)
        else:
            raise ConfigError("convnet models need an explicit model.input_shape")
    try:
        model = ModelSpec(kind=kind, layers=layers, input_shape=input_shape,
                          num_classes=merged["model.num_classes"])
    except ValueError as exc:
        raise ConfigError(f"bad model spec: {exc}") from exc

    if merged["dataset.kind"] not in DATASET_KINDS:
        raise ConfigError(f"unknown dataset.kind {merged['dataset.kind']!r}; "
                          f"expected one of {DATASET_KINDS}")
    if merged["dataset.kind"] in ("idx-dir", "cifar-bin-dir") \
            and not merged["dataset.path"]:
        raise ConfigError(f"dataset.kind {merged['dataset.kind']} needs dataset.path")

    try:
        attack = AttackConfig(norm=merged["attack.norm"],
                              epsilon=merged["attack.epsilon"],
                              steps=merged["attack.steps"],
                              step_size=merged["attack.step_size"],
                              loss=merged["attack.loss"],
                              random_start=merged["attack.random_start"])
    except ValueError as exc:
        raise ConfigError(f"bad attack config: {exc}") from exc

    opt_kind = merged["optimizer.kind"]
    if opt_kind not in OPTIMIZER_KINDS:
        raise ConfigError(f"unknown optimizer.kind {opt_kind!r}; "
                          f"expected one of {OPTIMIZER_KINDS}")
    alpha = merged["optimizer.alpha"]
    if alpha is None:
        alpha = DEFAULT_ALPHA[opt_kind]
    try:
        schedule = LrSchedule(initial=merged["optimizer.lr"],
                              decay_epochs=merged["optimizer.decay_epochs"],
                              decay_factor=merged["optimizer.decay_factor"])
    except ValueError as exc:
        raise ConfigError(f"bad learning-rate schedule: {exc}") from exc

    return TrainConfig(
        model=model,
        dataset_kind=merged["dataset.kind"],
        dataset_path=merged["dataset.path"],
        dataset_noise=merged["dataset.noise"],
        train_n=merged["dataset.train_n"],
        val_n=merged["dataset.val_n"],
        test_n=merged["dataset.test_n"],
        attack=attack,
        opt_kind=opt_kind,
        alpha=alpha,
        beta=merged["optimizer.beta"],
        weight_decay=merged["optimizer.weight_decay"],
        schedule=schedule,
        beta_gamma=merged["fast.beta_gamma"],
        tau=merged["fast.tau"],
        epochs=merged["epochs"],
        batch_size=merged["batch_size"],
        seed=merged["seed"],
        probe_n=merged["probe_n"],
        out_dir=merged["out_dir"],
        threads=merged["threads"],
        raw=dict(merged),
    )


def load_config(path, overrides=()):
    """Parse a config file, apply overrides, and build the typed config."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = parse_config_text(text, source=str(path))
    values.update(parse_overrides(overrides))
    return build_config(values)


def config_with(cfg, updates):
    """New TrainConfig with raw (dotted) keys updated; used by sweeps."""
    values = dict(cfg.raw)
    for key, value in updates.items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = value
    return build_config(values)
