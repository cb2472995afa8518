"""Experiment configuration: one YAML document, overridable from the CLI.

Schema (all keys optional; ``capgan config`` prints the effective values)::

    seed: 0                      # master seed; pretrain.seed / gan.seed are derived from it
    output_dir: runs/default     # relative paths resolve against $CAPGAN_OUTPUT_ROOT
    init: cvae                   # cvae (weight transfer) | random (no pre-training)
    dataset:
      kind: synthetic            # synthetic | mnist | fashion_mnist | cifar10 | image_dir
      train_images, train_labels, test_images, test_labels   # IDX paths
      train_files, test_files    # CIFAR-10 batch file lists
      root, channels             # image_dir
      resize: [32, 32]
      synthetic_per_class, synthetic_test_per_class, num_classes
    imbalance: {majority_class: 0, rate: 10}
    pretrain:  {strategy, epochs, learning_rate, adam_beta1, batch_size, latent_dim, ...}
    gan:       {lr_generator, lr_discriminator, gp_weight, train_ratio, batch_size, epochs, ...}
    model:     {label_dim: 16}
    embedder: pixel              # pixel | classifier
    classifier: {epochs, learning_rate, batch_size, embedding_dim, channels}
    samples_per_class: 1000
    ssim_pairs_per_class: 1000
    strict_grid: false         # true: reject hyperparameters outside the tuned grid
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import re

import yaml

from ..errors import ConfigError
from ..gan import GanConfig
from ..metrics import ClassifierConfig
from ..pretrain import PretrainConfig, derive_seed

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "CAPGAN_OUTPUT_ROOT"


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot, e.g. ``5e-05``."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                |\.[0-9_]+(?:[eE][-+][0-9]+)?
                |[-+]?\.(?:inf|Inf|INF)
                |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


def _yaml_load(text):
    return yaml.load(text, Loader=_Loader)

# the grid the reference hyperparameters were tuned over
TUNED_GRID = {
    ("pretrain", "learning_rate"): (0.0006, 0.0007, 0.0008, 0.001, 0.0005),
    ("pretrain", "epochs"): (30, 40, 50),
    ("pretrain", "adam_beta1"): (0.5, 0.6, 0.7, 0.8),
    ("gan", "lr_generator"): (0.00005, 0.0001, 0.0002, 0.0005, 0.0008, 0.0013, 0.0015,
                              0.001, 0.002),
    ("gan", "lr_discriminator"): (0.00005, 0.0001, 0.0008, 0.0013, 0.0015, 0.0002, 0.002),
    ("gan", "gp_weight"): (5, 10),
    ("gan", "train_ratio"): (2, 3, 4, 5, 6, 7, 8, 10),
    ("gan", "batch_size"): (32, 64, 128, 256),
    ("pretrain", "batch_size"): (32, 64, 128, 256),
    ("pretrain", "latent_dim"): (64, 128, 256, 512),
}
IMBALANCE_RATES = (5, 10, 20, 50, 100)
DATASET_KINDS = ("synthetic", "mnist", "fashion_mnist", "cifar10", "image_dir")


@dataclass
class DatasetSpec:
    kind: str = "synthetic"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_files: list = field(default_factory=list)
    test_files: list = field(default_factory=list)
    root: str | None = None
    channels: int = 1
    resize: list | None = field(default_factory=lambda: [32, 32])
    num_classes: int = 10
    synthetic_per_class: int = 200
    synthetic_test_per_class: int = 100
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")


@dataclass
class ImbalanceSpec:
    majority_class: int = 0
    rate: float = 10.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    init: str = "cvae"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    imbalance: ImbalanceSpec = field(default_factory=ImbalanceSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    model: dict = field(default_factory=lambda: {"label_dim": 16})
    embedder: str = "pixel"
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    samples_per_class: int = 1000
    ssim_pairs_per_class: int = 1000
    strict_grid: bool = False

    def __post_init__(self):
        if self.init not in ("cvae", "random"):
            raise ConfigError("init must be 'cvae' or 'random'")
        if self.embedder not in ("pixel", "classifier"):
            raise ConfigError("embedder must be 'pixel' or 'classifier'")
        if self.samples_per_class < 2:
            raise ConfigError("samples_per_class must be >= 2")
        if self.imbalance.rate < 1:
            raise ConfigError("imbalance rate must be >= 1")
        self.check_grid()

    # -- validation ---------------------------------------------------------
    def grid_deviations(self) -> list[str]:
        out = []
        for (section, key), allowed in TUNED_GRID.items():
            value = getattr(getattr(self, section), key)
            if not any(abs(float(value) - a) < 1e-12 for a in allowed):
                out.append(f"{section}.{key}={value} (tuned grid: {list(allowed)})")
        if float(self.imbalance.rate) not in IMBALANCE_RATES:
            out.append(f"imbalance.rate={self.imbalance.rate} (benchmark rates: "
                       f"{list(IMBALANCE_RATES)})")
        return out

    def check_grid(self) -> None:
        dev = self.grid_deviations()
        if dev and self.strict_grid:
            raise ConfigError("hyperparameters outside the tuned grid: " + "; ".join(dev))
        for d in dev:
            log.debug("outside tuned grid: %s", d)

    # -- seeds and identity --------------------------------------------------
    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pretrain"]["channels"] = list(self.pretrain.channels)
        d["pretrain"]["loss_weights"] = list(self.pretrain.loss_weights)
        d["classifier"]["channels"] = list(self.classifier.channels)
        return d

    def digest(self, keys=None) -> str:
        """Hash of the config (or of the top-level ``keys``), output_dir excluded."""
        d = self.to_dict()
        d.pop("output_dir")
        if keys is not None:
            d = {k: d[k] for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def output_path(self) -> Path:
        p = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not p.is_absolute():
            p = Path(root) / p
        return p

    # -- construction ---------------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "dataset" in kw:
                kw["dataset"] = DatasetSpec(**kw["dataset"])
            if "imbalance" in kw:
                kw["imbalance"] = ImbalanceSpec(**kw["imbalance"])
            if "pretrain" in kw:
                kw["pretrain"] = PretrainConfig(**kw["pretrain"])
            if "gan" in kw:
                kw["gan"] = GanConfig(**kw["gan"])
            if "classifier" in kw:
                c = dict(kw["classifier"])
                if "channels" in c:
                    c["channels"] = tuple(c["channels"])
                kw["classifier"] = ClassifierConfig(**c)
            cfg = cls(**kw)
        except TypeError as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path=None, overrides=()) -> "ExperimentConfig":
        d = {}
        if path is not None:
            try:
                d = _yaml_load(Path(path).read_text()) or {}
            except (OSError, yaml.YAMLError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for item in overrides:
            apply_override(d, item)
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        for key, value in changes.items():
            apply_override(d, f"{key}={json.dumps(value)}" if not isinstance(value, str)
                           else f"{key}={value}")
        return ExperimentConfig.from_dict(d)


def apply_override(d: dict, item: str) -> None:
    """Apply ``a.b.c=value`` to nested dict ``d``; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = _yaml_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw!r}") from exc
    parts = key.strip().split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = value


def desk_config(seed: int = 0, output_dir: str = "runs/desk", **overrides) -> ExperimentConfig:
    """Small CPU-sized experiment on synthetic glyphs resized 28 -> 32."""
    d = {
        "seed": seed,
        "output_dir": output_dir,
        "dataset": {"kind": "synthetic", "synthetic_per_class": 1000,
                    "synthetic_test_per_class": 100, "resize": [32, 32]},
        "imbalance": {"majority_class": 0, "rate": 10},
        "pretrain": {"strategy": "ros", "epochs": 3, "learning_rate": 0.001,
                     "batch_size": 64, "latent_dim": 16, "channels": [16, 32, 64]},
        "gan": {"epochs": 5, "train_ratio": 5, "batch_size": 64, "gp_weight": 10,
                "lr_generator": 0.0002, "lr_discriminator": 0.0002, "data_mode": "ros"},
        "model": {"label_dim": 64},
        "classifier": {"epochs": 3},
        "samples_per_class": 200,
        "ssim_pairs_per_class": 200,
    }
    for k, v in overrides.items():
        apply_override(d, f"{k}={json.dumps(v)}")
    return ExperimentConfig.from_dict(d)
