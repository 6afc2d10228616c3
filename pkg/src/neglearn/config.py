"""Experiment configuration: a flat, sectioned, human-editable key-value
file (INI dialect). Every key has a documented default; unknown keys are
rejected so typos fail loudly. parse(serialize(config)) == config.

The `desk` profile keeps runs small enough for a commodity CPU
(32x32 images, 20 epochs, batch 128); `full` is the paper-scale regime
(64x64 RGB, 100 epochs, batch 256). Profile defaults fill only keys the
file leaves unset, and the resolved config is echoed with every value
explicit, so a run can be reproduced from its echo alone.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Union

from .datasets import (
    DatasetSplit,
    load_mnist_idx,
    make_leave_one_digit_out_split,
    make_synthetic_patch_dataset,
)
from .trainer import TrainingConfig

DATASET_SOURCES = ("mnist", "synthetic")
PROFILES = ("desk", "full")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    source: str = "synthetic"
    images_path: str = ""
    labels_path: str = ""
    anomaly_digit: int = 0
    abnormal_ratio: float = 0.1
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    channels: int = 3
    image_size: int = 64
    n_normal: int = 1000
    n_abnormal: int = 100
    oversize: bool = False


@dataclass
class ModelSection:
    latent_dim: int = 128


@dataclass
class TrainingSection:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    negative_mode: str = "naive"
    negative_weight: float = 1.0
    phase_schedule: str = "interleaved"
    grad_clip_norm: float = 5.0
    select_best_by: str = "val_auc"


@dataclass
class EvalSection:
    n_bins: int = 50
    plots: bool = False


@dataclass
class RunSection:
    output_dir: str = "runs/experiment"
    seed: int = 0
    profile: str = "desk"


# profile defaults fill keys the config file leaves unset;
# channels/image_size depend on the dataset source
_PROFILE_DEFAULTS = {
    "desk": {
        "training": {"epochs": 20, "batch_size": 128},
        "dataset": {
            "mnist": {"channels": 1, "image_size": 32},
            "synthetic": {"channels": 3, "image_size": 32},
        },
    },
    "full": {
        "training": {"epochs": 100, "batch_size": 256},
        "dataset": {
            "mnist": {"channels": 3, "image_size": 64},
            "synthetic": {"channels": 3, "image_size": 64},
        },
    },
}


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def _sections(self) -> dict[str, object]:
        return {
            "dataset": self.dataset,
            "model": self.model,
            "training": self.training,
            "eval": self.eval,
            "run": self.run,
        }

    def validate(self) -> None:
        if self.dataset.source not in DATASET_SOURCES:
            raise ConfigError(
                f"dataset.source must be one of {DATASET_SOURCES}, "
                f"got {self.dataset.source!r}"
            )
        if self.run.profile not in PROFILES:
            raise ConfigError(
                f"run.profile must be one of {PROFILES}, got {self.run.profile!r}"
            )
        # TrainingConfig owns the detailed training-field validation
        self.training_config()

    # -- parsing ----------------------------------------------------------

    @classmethod
    def parse(cls, text: str, origin: str = "<config>") -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text, source=origin)
        except configparser.Error as exc:
            raise ConfigError(f"{origin}: {exc}") from exc

        config = cls()
        sections = config._sections()
        seen: dict[str, set[str]] = {}
        for section_name in parser.sections():
            if section_name not in sections:
                raise ConfigError(f"{origin}: unknown section [{section_name}]")
            section = sections[section_name]
            known = {f.name: f for f in fields(section)}
            seen[section_name] = set()
            for key, raw in parser.items(section_name):
                if key not in known:
                    raise ConfigError(
                        f"{origin}: unknown key {key!r} in section [{section_name}]"
                    )
                setattr(section, key, _coerce(raw, known[key].type, section_name, key))
                seen[section_name].add(key)

        _apply_profile_defaults(config, seen)
        config.validate()
        return config

    @classmethod
    def from_file(
        cls,
        path: Union[str, Path],
        seed: int | None = None,
        out: str | None = None,
        profile: str | None = None,
    ) -> "ExperimentConfig":
        """Parse a config file; flags override the file's run section."""
        text = Path(path).read_text()
        if profile is not None:
            # profile must be fixed before profile defaults are applied
            text = _override_key(text, "run", "profile", profile)
        config = cls.parse(text, origin=str(path))
        if seed is not None:
            config.run.seed = int(seed)
        if out is not None:
            config.run.output_dir = str(out)
        return config

    # -- serialization -----------------------------------------------------

    def serialize(self) -> str:
        parser = configparser.ConfigParser()
        for name, section in self._sections().items():
            parser[name] = {
                f.name: _format_value(getattr(section, f.name)) for f in fields(section)
            }
        buffer = io.StringIO()
        parser.write(buffer)
        return buffer.getvalue()

    def to_file(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.serialize())

    # -- realization -------------------------------------------------------

    def build_split(self) -> DatasetSplit:
        ds = self.dataset
        if ds.source == "mnist":
            if not ds.images_path or not ds.labels_path:
                raise ConfigError(
                    "dataset.images_path and dataset.labels_path are required "
                    "when dataset.source = mnist"
                )
            samples = load_mnist_idx(ds.images_path, ds.labels_path)
            return make_leave_one_digit_out_split(
                samples,
                anomaly_digit=ds.anomaly_digit,
                train_fraction=ds.train_fraction,
                abnormal_ratio=ds.abnormal_ratio,
                seed=self.run.seed,
                val_fraction=ds.val_fraction,
            )
        return make_synthetic_patch_dataset(
            n_normal=ds.n_normal,
            n_abnormal=ds.n_abnormal,
            oversize=ds.oversize,
            seed=self.run.seed,
        )

    def training_config(self, checkpoint_dir: str | None = None) -> TrainingConfig:
        t = self.training
        return TrainingConfig(
            epochs=t.epochs,
            batch_size=t.batch_size,
            learning_rate=t.learning_rate,
            adam_beta1=t.adam_beta1,
            adam_beta2=t.adam_beta2,
            adam_epsilon=t.adam_epsilon,
            negative_mode=t.negative_mode,
            negative_weight=t.negative_weight,
            phase_schedule=t.phase_schedule,
            grad_clip_norm=t.grad_clip_norm,
            latent_dim=self.model.latent_dim,
            input_shape=(
                self.dataset.channels,
                self.dataset.image_size,
                self.dataset.image_size,
            ),
            seed=self.run.seed,
            checkpoint_dir=checkpoint_dir,
            select_best_by=t.select_best_by,
        )


def _coerce(raw: str, annotation, section: str, key: str):
    raw = raw.strip()
    type_name = annotation if isinstance(annotation, str) else annotation.__name__
    try:
        if type_name == "bool":
            lowered = raw.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{key}: {exc}") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _apply_profile_defaults(config: ExperimentConfig, seen: dict[str, set[str]]) -> None:
    profile = config.run.profile
    if profile not in _PROFILE_DEFAULTS:
        return  # validate() reports the bad profile name
    table = _PROFILE_DEFAULTS[profile]
    for key, value in table["training"].items():
        if key not in seen.get("training", set()):
            setattr(config.training, key, value)
    source = config.dataset.source
    for key, value in table["dataset"].get(source, {}).items():
        if key not in seen.get("dataset", set()):
            setattr(config.dataset, key, value)


def _override_key(text: str, section: str, key: str, value: str) -> str:
    """Rewrite one key inside the raw INI text, adding section/key if absent."""
    parser = configparser.ConfigParser()
    parser.read_string(text)
    if not parser.has_section(section):
        parser.add_section(section)
    parser[section][key] = value
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()
