"""Experiment configuration: a plain-text sectioned key=value document."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field

from .errors import ParameterError

REGIMES = ("stl", "mtl_joint", "mtl_random_labels", "meta_mtl")
DATA_KINDS = ("idx", "dset", "blobs")


@dataclass
class ExperimentConfig:
    # [experiment]
    name: str = "experiment"
    regime: str = "stl"
    arch: str = "toy_dense"
    hidden: int = 32
    seed: int = 0
    out_dir: str = "runs"

    # [data]
    data_kind: str = "blobs"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_path: str = ""
    test_path: str = ""
    blobs_k: int = 4
    blobs_per_cluster: int = 50
    blobs_d: int = 8
    blobs_spread: float = 0.5
    test_fraction: float = 0.3
    val_fraction: float = 0.0
    label_fraction: float = 1.0
    use_unlabeled_for_embedding: bool = False

    # [tasks]
    task_count: int = 4
    k: int = 0  # 0 means "use the main task's class count"
    transform: str = "random_scaling"

    # [autoencoder]
    latent_dim: int = 32
    ae_epochs: int = 20
    ae_batch_size: int = 64
    ae_learning_rate: float = 0.05
    ae_momentum: float = 0.9

    # [train]
    alpha: float = 0.01
    beta: float = 0.01
    episodes: int = 1000
    batch_size: int = 32
    tasks_per_episode: int = 4
    meta_order: int = 2
    hvp_mode: str = "exact"
    eval_every: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ParameterError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.data_kind not in DATA_KINDS:
            raise ParameterError(
                f"data kind must be one of {DATA_KINDS}, got {self.data_kind!r}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ParameterError("label_fraction must be in (0, 1]")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ParameterError("val_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


_SECTION_FIELDS = {
    "experiment": ("name", "regime", "arch", "hidden", "seed", "out_dir"),
    "data": ("data_kind", "train_images", "train_labels", "test_images",
             "test_labels", "train_path", "test_path", "blobs_k",
             "blobs_per_cluster", "blobs_d", "blobs_spread", "test_fraction",
             "val_fraction", "label_fraction", "use_unlabeled_for_embedding"),
    "tasks": ("task_count", "k", "transform"),
    "autoencoder": ("latent_dim", "ae_epochs", "ae_batch_size",
                    "ae_learning_rate", "ae_momentum"),
    "train": ("alpha", "beta", "episodes", "batch_size", "tasks_per_episode",
              "meta_order", "hvp_mode", "eval_every"),
}

_KEY_ALIASES = {
    ("data", "kind"): "data_kind",
    ("tasks", "count"): "task_count",
    ("autoencoder", "epochs"): "ae_epochs",
    ("autoencoder", "batch_size"): "ae_batch_size",
    ("autoencoder", "learning_rate"): "ae_learning_rate",
    ("autoencoder", "momentum"): "ae_momentum",
}


def _convert(value: str, target_type):
    if target_type is bool:
        low = value.strip().lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ParameterError(f"cannot parse boolean from {value!r}")
    return target_type(value)


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    with open(path) as f:
        parser.read_file(f)
    defaults = ExperimentConfig()
    values: dict = {}
    for section in parser.sections():
        if section not in _SECTION_FIELDS:
            raise ParameterError(f"unknown config section [{section}]")
        allowed = _SECTION_FIELDS[section]
        for key, raw in parser.items(section):
            name = _KEY_ALIASES.get((section, key), key)
            if name not in allowed:
                raise ParameterError(
                    f"unknown key {key!r} in config section [{section}]")
            values[name] = _convert(raw, type(getattr(defaults, name)))
    return ExperimentConfig(**values)


def save_config(path, config: ExperimentConfig) -> None:
    """Write the resolved configuration back out in canonical section order."""
    parser = configparser.ConfigParser()
    for section, names in _SECTION_FIELDS.items():
        parser[section] = {}
        for name in names:
            parser[section][name] = str(getattr(config, name))
    with open(path, "w") as f:
        parser.write(f)
