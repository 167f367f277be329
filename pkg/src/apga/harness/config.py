"""Versioned JSON experiment configs, validated through OmegaConf structured schemas."""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple, Union

import torch.nn as nn
from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from apga.build_apga import build_apga, build_classifier
from apga.data import SyntheticSpec
from apga.errors import ConfigError
from apga.trainer import AUGMENTATIONS, TrainConfig
from apga.utils.checkpoint import load_module_tensors, load_tensors

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DATASET_SOURCES = ("synthetic", "folder")


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    # folder source only
    path: Optional[str] = None
    image_size: int = 32
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)


@dataclass
class ExportConfig:
    masks: bool = True
    plots: bool = True
    num_masks: int = 8


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    name: str = "apga"
    output_dir: str = "runs"
    seeds: List[int] = field(default_factory=lambda: [0])
    augmentations: List[str] = field(default_factory=lambda: ["apga"])
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    export: ExportConfig = field(default_factory=ExportConfig)

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}, expected {SCHEMA_VERSION}")
        if self.dataset.source not in DATASET_SOURCES:
            raise ConfigError(f"dataset.source should be one of {DATASET_SOURCES}, not {self.dataset.source}")
        if self.dataset.source == "folder" and not self.dataset.path:
            raise ConfigError("dataset.path is required for a folder dataset")
        if self.dataset.source == "synthetic":
            self.dataset.synthetic.validate()
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds {self.seeds}")
        bad = [a for a in self.augmentations if a not in AUGMENTATIONS]
        if bad or not self.augmentations:
            raise ConfigError(f"augmentations must be a non-empty subset of {AUGMENTATIONS}, got {self.augmentations}")
        self.train.validate()
        return self

    def for_run(self, augmentation: str, seed: int) -> "ExperimentConfig":
        """The single-run config stored as a run directory's config.json."""
        return replace(
            self,
            seeds=[seed],
            augmentations=[augmentation],
            train=replace(self.train, seed=seed, augmentation=augmentation),
        )


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("experiment config must be a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}, expected {SCHEMA_VERSION}")
    try:
        merged = OmegaConf.merge(OmegaConf.structured(ExperimentConfig), data)
        cfg = OmegaConf.to_object(merged)
    except OmegaConfBaseException as e:
        raise ConfigError(f"invalid experiment config: {e}") from None
    return cfg.validate()


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return OmegaConf.to_container(OmegaConf.structured(cfg))


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    cfg = config_from_dict(data)
    logger.debug("loaded experiment config %s", path)
    return cfg


def save_experiment_config(cfg: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n", encoding="utf8")
    return path


# ----------------------------------------------------------------------------
# Run directories: config.json + metrics.csv + checkpoints/
# ----------------------------------------------------------------------------
def run_checkpoint(run_dir: Union[str, Path]) -> Path:
    ckpt_dir = Path(run_dir) / "checkpoints"
    for name in ("final.apga", "last.apga"):
        if (ckpt_dir / name).exists():
            return ckpt_dir / name
    raise FileNotFoundError(f"No checkpoint found in {ckpt_dir}")


def load_run_models(run_dir: Union[str, Path]) -> Tuple[ExperimentConfig, nn.Module, nn.Module]:
    """(config, classifier, policy) of a run directory, models in eval mode."""
    run_dir = Path(run_dir)
    cfg = load_experiment_config(run_dir / "config.json")
    tensors = load_tensors(run_checkpoint(run_dir))
    num_classes = int(tensors["state.num_classes"][0])
    classifier, policy = build_apga(cfg.train.model_config, num_classes, cfg.train.seed, cfg.train.precision)
    load_module_tensors(classifier, tensors, "classifier")
    load_module_tensors(policy, tensors, "policy")
    return cfg, classifier.eval(), policy.eval()


def load_reference_classifier(run_dir: Union[str, Path], cfg: ExperimentConfig, num_classes: int) -> nn.Module:
    """The no-augmentation classifier used for Grad-CAM: the configured checkpoint or the run's pretrained snapshot."""
    ckpt = cfg.train.gradcam_checkpoint or Path(run_dir) / "checkpoints" / "pretrained.apga"
    return build_classifier(cfg.train.model_config, num_classes, cfg.train.seed, cfg.train.precision, ckpt_path=str(ckpt))
