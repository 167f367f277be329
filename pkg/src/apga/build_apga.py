import logging
from threading import Lock
from typing import List, Optional, Tuple

import torch
from hydra import compose
from hydra.utils import instantiate
from omegaconf import OmegaConf

from apga.utils.checkpoint import load_module_tensors, load_tensors
from apga.utils.misc import derive_seed, resolve_dtype

DEFAULT_MODEL_CONFIG = "configs/models/reference.yaml"

# GlobalHydra is a process-wide singleton; seeds may be built from worker threads
_compose_lock = Lock()


def _compose_model_cfg(config_file, hydra_overrides):
    with _compose_lock:
        cfg = compose(config_name=config_file, overrides=hydra_overrides)
    OmegaConf.resolve(cfg)
    return cfg


def build_apga(
    config_file: str = DEFAULT_MODEL_CONFIG,
    num_classes: int = 2,
    seed: int = 0,
    precision: str = "fp32",
    ckpt_path: Optional[str] = None,
    hydra_overrides_extra: List[str] = [],
) -> Tuple[torch.nn.Module, torch.nn.Module]:
    """Build the (classifier, policy) pair described by a hydra model config."""
    hydra_overrides = [
        f"++model.classifier.num_classes={num_classes}",
        f"++model.classifier.seed={derive_seed(seed, 'classifier') % 2**31}",
        f"++model.policy.seed={derive_seed(seed, 'policy') % 2**31}",
    ]
    hydra_overrides.extend(hydra_overrides_extra)

    # Read config and init model
    cfg = _compose_model_cfg(config_file, hydra_overrides)
    classifier = instantiate(cfg.model.classifier, _recursive_=True)
    policy = instantiate(cfg.model.policy, _recursive_=True)
    dtype = resolve_dtype(precision)
    classifier, policy = classifier.to(dtype), policy.to(dtype)
    if ckpt_path is not None:
        _load_checkpoint(classifier, ckpt_path, "classifier")
        _load_checkpoint(policy, ckpt_path, "policy")
    return classifier, policy


def build_classifier(
    config_file: str = DEFAULT_MODEL_CONFIG,
    num_classes: int = 2,
    seed: int = 0,
    precision: str = "fp32",
    ckpt_path: Optional[str] = None,
    hydra_overrides_extra: List[str] = [],
) -> torch.nn.Module:
    classifier, _ = build_apga(
        config_file, num_classes, seed, precision, hydra_overrides_extra=hydra_overrides_extra
    )
    if ckpt_path is not None:
        _load_checkpoint(classifier, ckpt_path, "classifier")
    classifier.eval()
    return classifier


def _load_checkpoint(model, ckpt_path, prefix):
    if ckpt_path is not None:
        tensors = load_tensors(ckpt_path)
        load_module_tensors(model, tensors, prefix)
        logging.info("Loaded %s from %s", prefix, ckpt_path)
