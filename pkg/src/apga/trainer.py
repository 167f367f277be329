"""
trainer.py
----
Joint training of the classifier M_c and the mask policy M_p.

Main features
----
• pretrain_classifier: plain cross-entropy training of M_c for a fixed number of epochs.
• apga_step: one joint step (classifier update, adversarial policy update, aiding-mask update).
• augment_step: the same cadence for the none / cutout / gradcam comparison modes.
• run: pretrain + T steps with periodic validation, metrics CSV and resumable checkpoints.

All randomness is derived from (seed, purpose, counter), so a run resumed
from a checkpoint replays exactly what the uninterrupted run would have done.
"""

import copy
import json
import logging
import math
import platform
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Union

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from apga.baselines import CutoutAugmenter, CutoutConfig, GradCamAugmenter
from apga.build_apga import DEFAULT_MODEL_CONFIG, build_apga, build_classifier
from apga.data import Dataset, ImageBatch, Split, batch_indices, make_batch
from apga.errors import ConfigError, NumericError
from apga.harness.metrics_log import MetricsLog
from apga.masking import adversarial_mask, aiding_mask, apply_mask
from apga.modeling.core import AdamState, adam_step, backward, forward_classifier, forward_policy, named_params
from apga.objective import RewardBaseline, adversarial_reward, class_loss, policy_loss, update_baseline
from apga.utils.checkpoint import load_module_tensors, load_tensors, module_tensors, save_tensors
from apga.utils.misc import PrefetchLoader, derive_seed, param_digest, resolve_dtype

logger = logging.getLogger(__name__)

AUGMENTATIONS = ("apga", "none", "cutout", "gradcam")


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 25
    lr_classifier: float = 1e-4
    lr_policy: float = 1e-4
    pretrain_lr: float = 1e-3
    baseline_decay: float = 0.5
    lambda_zeros: float = 0.1
    pretrain_epochs: int = 5
    seed: int = 0
    precision: str = "fp32"
    augmentation: str = "apga"
    use_baseline: bool = True
    eval_interval: int = 50
    eval_batch_size: int = 100
    # steps between last.apga writes, 0 writes it only when the loop stops
    checkpoint_interval: int = 50
    verify_isolation: bool = False
    progress: bool = True
    # batches queued by the prefetch thread, 0 disables it
    prefetch: int = 2
    model_config: str = DEFAULT_MODEL_CONFIG
    gradcam_checkpoint: Optional[str] = None
    cutout_min_fraction: float = 0.1
    cutout_max_fraction: float = 0.5
    cutout_patches: int = 1

    def validate(self) -> "TrainConfig":
        if self.steps <= 0:
            raise ConfigError(f"steps must be > 0, got {self.steps}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be > 0, got {self.batch_size}")
        for name in ("lr_classifier", "lr_policy", "pretrain_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.lambda_zeros < 0:
            raise ConfigError(f"lambda_zeros must be >= 0, got {self.lambda_zeros}")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ConfigError(f"baseline_decay must be in [0, 1), got {self.baseline_decay}")
        if self.pretrain_epochs < 0:
            raise ConfigError("pretrain_epochs must be >= 0")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigError(f"augmentation should be one of {AUGMENTATIONS}, not {self.augmentation}")
        if self.eval_interval <= 0 or self.eval_batch_size <= 0:
            raise ConfigError("eval_interval and eval_batch_size must be > 0")
        if self.checkpoint_interval < 0 or self.prefetch < 0:
            raise ConfigError("checkpoint_interval and prefetch must be >= 0")
        try:
            resolve_dtype(self.precision)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        self.cutout_config()
        return self

    def cutout_config(self) -> CutoutConfig:
        return CutoutConfig(self.cutout_min_fraction, self.cutout_max_fraction, self.cutout_patches)


@dataclass
class StepMetrics:
    step: int
    L_original: float
    L_adversarial: float = math.nan
    R_t: float = math.nan
    b_t: float = math.nan
    mean_policy_prob: float = math.nan
    aid_keep_fraction: float = math.nan
    val_accuracy: Optional[float] = None

    def to_row(self) -> dict:
        row = asdict(self)
        if row["val_accuracy"] is None:
            row["val_accuracy"] = math.nan
        return row


@dataclass
class TrainState:
    config: TrainConfig
    classifier: nn.Module
    policy: nn.Module
    adam_c: AdamState
    adam_p: AdamState
    adam_pretrain: AdamState
    baseline: RewardBaseline
    num_classes: int
    step: int = 0
    pretrained: bool = False
    # frozen no-augmentation classifier for the gradcam mode
    reference: Optional[nn.Module] = None
    checkpoint_dir: Optional[Path] = None
    pretrain_losses: List[float] = field(default_factory=list)
    metrics: List[StepMetrics] = field(default_factory=list)

    @property
    def dtype(self) -> torch.dtype:
        return resolve_dtype(self.config.precision)


def build_state(config: TrainConfig, num_classes: int = 2) -> TrainState:
    """Fresh models, optimizers and baseline for `config`."""
    config.validate()
    classifier, policy = build_apga(config.model_config, num_classes, config.seed, config.precision)
    pc, pp = named_params(classifier), named_params(policy)
    reference = None
    if config.augmentation == "gradcam" and config.gradcam_checkpoint:
        reference = build_classifier(
            config.model_config, num_classes, config.seed, config.precision, ckpt_path=config.gradcam_checkpoint
        )
    return TrainState(
        config=config,
        classifier=classifier,
        policy=policy,
        adam_c=AdamState.create(pc, config.lr_classifier),
        adam_p=AdamState.create(pp, config.lr_policy),
        adam_pretrain=AdamState.create(pc, config.pretrain_lr),
        baseline=RewardBaseline(decay=config.baseline_decay),
        num_classes=num_classes,
        reference=reference,
    )


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------
def save_state(state: TrainState, path: Union[str, Path]) -> Path:
    tensors = {}
    tensors.update(module_tensors(state.classifier, "classifier"))
    tensors.update(module_tensors(state.policy, "policy"))
    tensors.update(state.adam_c.tensors("adam_c"))
    tensors.update(state.adam_p.tensors("adam_p"))
    tensors.update(state.adam_pretrain.tensors("adam_pretrain"))
    if state.reference is not None:
        tensors.update(module_tensors(state.reference, "reference"))
    tensors["baseline.decay"] = np.array([state.baseline.decay], dtype=np.float64)
    tensors["baseline.value"] = np.array([state.baseline.value], dtype=np.float64)
    tensors["baseline.initialized"] = np.array([state.baseline.initialized], dtype=np.uint8)
    tensors["state.step"] = np.array([state.step], dtype=np.int64)
    tensors["state.pretrained"] = np.array([state.pretrained], dtype=np.uint8)
    tensors["state.num_classes"] = np.array([state.num_classes], dtype=np.int64)
    path = save_tensors(path, tensors)
    logger.debug("saved state at step %d to %s", state.step, path)
    return path


def load_state(state: TrainState, path: Union[str, Path]) -> TrainState:
    """Restore a checkpoint written by `save_state` into a state built from the same config."""
    tensors = load_tensors(path)
    if int(tensors["state.num_classes"][0]) != state.num_classes:
        raise ConfigError(
            f"{path} was trained with {int(tensors['state.num_classes'][0])} classes, not {state.num_classes}"
        )
    load_module_tensors(state.classifier, tensors, "classifier")
    load_module_tensors(state.policy, tensors, "policy")
    state.adam_c.load_tensors(tensors, "adam_c")
    state.adam_p.load_tensors(tensors, "adam_p")
    state.adam_pretrain.load_tensors(tensors, "adam_pretrain")
    if any(k.startswith("reference.") for k in tensors):
        state.reference = copy.deepcopy(state.classifier)
        load_module_tensors(state.reference, tensors, "reference")
    state.baseline = RewardBaseline(
        decay=float(tensors["baseline.decay"][0]),
        value=float(tensors["baseline.value"][0]),
        initialized=bool(tensors["baseline.initialized"][0]),
    )
    state.step = int(tensors["state.step"][0])
    state.pretrained = bool(tensors["state.pretrained"][0])
    logger.info("resumed from %s at step %d", path, state.step)
    return state


@contextmanager
def _diagnose_on_failure(state: TrainState):
    """Write diagnostic.apga next to the checkpoints before a NumericError propagates."""
    try:
        yield
    except NumericError as e:
        if state.checkpoint_dir is not None:
            path = save_state(state, Path(state.checkpoint_dir) / "diagnostic.apga")
            logger.error("non-finite value in %s at step %d, state written to %s", e.name, state.step, path)
        raise


def _finite(loss: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(loss):
        raise NumericError(f"{name} is not finite ({float(loss)})", name=name)
    return loss


def _classifier_update(state: TrainState, batch: ImageBatch, adam: AdamState, name: str) -> float:
    pc = named_params(state.classifier)
    policy_digest = param_digest(state.policy) if state.config.verify_isolation else None
    loss = _finite(class_loss(forward_classifier(state.classifier, batch), batch.labels), name)
    adam_step(pc, backward(loss, pc), adam)
    if policy_digest is not None and param_digest(state.policy) != policy_digest:
        raise RuntimeError(f"policy parameters changed during the {name} classifier update")
    return float(loss.detach())


# ----------------------------------------------------------------------------
# Training steps
# ----------------------------------------------------------------------------
def pretrain_classifier(state: TrainState, data: Union[Dataset, Split], epochs: Optional[int] = None) -> TrainState:
    """
    Desc:
        Train M_c on the original images only. "To convergence" is a fixed
        number of epochs; the mean batch loss of each epoch is appended to
        `state.pretrain_losses`.
    Parameters:
        data : dataset (its train split is used) or a split
        epochs : defaults to config.pretrain_epochs
    """
    split = data.split("train") if isinstance(data, Dataset) else data
    cfg = state.config
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    seed = derive_seed(cfg.seed, "pretrain")
    with _diagnose_on_failure(state):
        for epoch in range(epochs):
            losses = [
                _classifier_update(state, make_batch(split, idx, state.dtype), state.adam_pretrain, "pretrain")
                for idx in batch_indices(len(split), cfg.batch_size, seed, epoch)
            ]
            state.pretrain_losses.append(float(np.mean(losses)))
            logger.info("pretrain epoch %d/%d loss %.4f", epoch + 1, epochs, state.pretrain_losses[-1])
    return state


def apga_step(state: TrainState, batch: ImageBatch) -> StepMetrics:
    """
    One joint step on `batch`, updating `state` in place:

    1. classifier update on the original images
    2. reward R_t = L(M_c(A_adv * x)) - L(M_c(x)) with A_adv = (P < 0.5), both
       losses from the freshly updated classifier, then the policy update on
       bce(P, A_adv) * (R_t - b_t) + bce(P, 0) * lambda_zeros
    3. classifier update on the aiding-masked images A_aid * x, A_aid = (P' > 0.5)
       where P' is the output of the updated policy

    The classifier is frozen during step 2 and the policy during 1 and 3.
    """
    cfg = state.config
    with _diagnose_on_failure(state):
        _classifier_update(state, batch, state.adam_c, "original")

        with torch.no_grad():
            L_original = _finite(class_loss(forward_classifier(state.classifier, batch), batch.labels), "L_original")
        P = forward_policy(state.policy, batch)
        A_adv = adversarial_mask(P)
        with torch.no_grad():
            L_adversarial = _finite(
                class_loss(forward_classifier(state.classifier, apply_mask(batch, A_adv)), batch.labels),
                "L_adversarial",
            )
        R_t = adversarial_reward(L_adversarial, L_original)
        state.baseline = update_baseline(state.baseline, R_t)
        b_t = state.baseline.value if cfg.use_baseline else 0.0
        terms = policy_loss(P, A_adv, R_t, b_t, cfg.lambda_zeros)

        pp = named_params(state.policy)
        classifier_digest = param_digest(state.classifier) if cfg.verify_isolation else None
        adam_step(pp, backward(terms.total, pp), state.adam_p)
        if classifier_digest is not None and param_digest(state.classifier) != classifier_digest:
            raise RuntimeError("classifier parameters changed during the policy update")

        with torch.no_grad():
            A_aid = aiding_mask(forward_policy(state.policy, batch))
        _classifier_update(state, apply_mask(batch, A_aid), state.adam_c, "aiding")

    metrics = StepMetrics(
        step=state.step,
        L_original=float(L_original),
        L_adversarial=float(L_adversarial),
        R_t=R_t,
        b_t=state.baseline.value,
        mean_policy_prob=float(P.detach().mean()),
        aid_keep_fraction=A_aid.keep_fraction(),
    )
    state.step += 1
    return metrics


def augment_step(
    state: TrainState, batch: ImageBatch, augmenter: Optional[Callable[[ImageBatch, int], ImageBatch]]
) -> StepMetrics:
    """Classifier update on the batch, then (unless `augmenter` is None) on its augmented copy."""
    with _diagnose_on_failure(state):
        L_original = _classifier_update(state, batch, state.adam_c, "original")
        if augmenter is not None:
            _classifier_update(state, augmenter(batch, state.step), state.adam_c, "augmented")
    metrics = StepMetrics(step=state.step, L_original=L_original)
    state.step += 1
    return metrics


@torch.no_grad()
def evaluate(classifier: nn.Module, split: Split, batch_size: int = 100, dtype: Optional[torch.dtype] = None) -> float:
    """Accuracy on `split`; argmax ties resolve to the lower class index."""
    if len(split) == 0:
        return math.nan
    dtype = dtype or next(classifier.parameters()).dtype
    correct = 0
    for idx in torch.arange(len(split)).split(batch_size):
        batch = make_batch(split, idx, dtype)
        pred = forward_classifier(classifier, batch).argmax(dim=1)
        correct += int((pred == batch.labels).sum())
    return correct / len(split)


def make_augmenter(state: TrainState) -> Optional[Callable[[ImageBatch, int], ImageBatch]]:
    cfg = state.config
    if cfg.augmentation == "cutout":
        return CutoutAugmenter(cfg.cutout_config(), seed=derive_seed(cfg.seed, "cutout"))
    if cfg.augmentation == "gradcam":
        if state.reference is None:
            raise ConfigError("gradcam augmentation needs a pretrained reference classifier")
        return GradCamAugmenter(state.reference)
    return None


def _step_batches(split: Split, cfg: TrainConfig, start: int, end: int, dtype: torch.dtype) -> Iterator[ImageBatch]:
    per_epoch = math.ceil(len(split) / cfg.batch_size)
    seed = derive_seed(cfg.seed, "train")
    epoch, order = None, None
    for t in range(start, end):
        e, i = divmod(t, per_epoch)
        if e != epoch:
            epoch, order = e, batch_indices(len(split), cfg.batch_size, seed, e)
        yield make_batch(split, order[i], dtype)


def _step_boundary(state: TrainState) -> tuple:
    # parameters only move through the Adam counters, so equal tuples mean an untouched state
    return state.step, state.adam_c.step, state.adam_p.step, state.baseline


def _write_run_meta(run_dir: Path, state: TrainState, **extra) -> None:
    meta = {
        "seed": state.config.seed,
        "augmentation": state.config.augmentation,
        "precision": state.config.precision,
        "torch_version": torch.__version__,
        "python_version": platform.python_version(),
        "num_threads": torch.get_num_threads(),
        "step": state.step,
    }
    meta.update(extra)
    path = run_dir / "run.json"
    if path.exists():
        meta = {**json.loads(path.read_text(encoding="utf8")), **meta}
    path.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf8")


def run(
    config: TrainConfig,
    dataset: Dataset,
    run_dir: Optional[Union[str, Path]] = None,
    resume: bool = False,
    stop_after: Optional[int] = None,
) -> TrainState:
    """
    Desc:
        Pretrain, then train for config.steps steps (or until step `stop_after`).
        With a run_dir: metrics.csv gets one row per step, checkpoints/ holds
        pretrained.apga, last.apga and final.apga, run.json the run metadata.
    Parameters:
        resume : continue from run_dir/checkpoints/last.apga when it exists
    Example:
        state = run(TrainConfig(steps=100), generate(SyntheticSpec()), "runs/apga_seed0")
    """
    config.validate()
    train, val = dataset.split("train"), dataset.split("val")
    state = build_state(config, dataset.num_classes)

    metrics_log = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        state.checkpoint_dir = run_dir / "checkpoints"
        state.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        last = state.checkpoint_dir / "last.apga"
        resumed = resume and last.exists()
        if resumed:
            load_state(state, last)
        metrics_log = MetricsLog(run_dir / "metrics.csv", resume_step=state.step if resumed else None)
        _write_run_meta(run_dir, state, started=time.strftime("%Y-%m-%dT%H:%M:%S"))

    if not state.pretrained:
        pretrain_classifier(state, train)
        state.pretrained = True
        if config.augmentation == "gradcam" and state.reference is None:
            state.reference = copy.deepcopy(state.classifier).eval()
        if state.checkpoint_dir is not None:
            save_state(state, state.checkpoint_dir / "pretrained.apga")
        logger.info("pretrained classifier: val accuracy %.4f", evaluate(state.classifier, val, config.eval_batch_size))

    augmenter = make_augmenter(state) if config.augmentation != "apga" else None
    end = config.steps if stop_after is None else min(config.steps, stop_after)
    source = _step_batches(train, config, state.step, end, state.dtype)
    loader = PrefetchLoader(source, depth=config.prefetch) if config.prefetch else source

    stream = iter(loader)
    boundary = _step_boundary(state)
    try:
        for batch in tqdm(stream, total=max(end - state.step, 0), disable=not config.progress, desc="train"):
            if config.augmentation == "apga":
                metrics = apga_step(state, batch)
            else:
                metrics = augment_step(state, batch, augmenter)
            if state.step % config.eval_interval == 0 or state.step == config.steps:
                metrics.val_accuracy = evaluate(state.classifier, val, config.eval_batch_size)
                logger.info("step %d val accuracy %.4f", state.step, metrics.val_accuracy)
            state.metrics.append(metrics)
            if metrics_log is not None:
                metrics_log.append(metrics.to_row())
            if state.checkpoint_dir is not None and config.checkpoint_interval and state.step % config.checkpoint_interval == 0:
                save_state(state, state.checkpoint_dir / "last.apga")
            boundary = _step_boundary(state)
    except BaseException:
        # a step that already applied an update cannot be replayed from here
        if state.checkpoint_dir is not None and _step_boundary(state) == boundary:
            save_state(state, state.checkpoint_dir / "last.apga")
            logger.warning("interrupted at step %d, state written to last.apga", state.step)
        elif state.checkpoint_dir is not None:
            logger.warning("interrupted inside step %d, last.apga left as it was", state.step)
        raise
    finally:
        if hasattr(stream, "close"):
            stream.close()

    if state.checkpoint_dir is not None:
        save_state(state, state.checkpoint_dir / "last.apga")
        if state.step == config.steps:
            save_state(state, state.checkpoint_dir / "final.apga")
        _write_run_meta(run_dir, state, finished=time.strftime("%Y-%m-%dT%H:%M:%S"))
    return state
