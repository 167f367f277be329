"""
data.py
----
Datasets for joint classifier / mask-policy training.

Main features
----
• generate: synthetic stripe-texture task with ground-truth ROI masks.
• load_folder / save_dataset: image-folder layout (images/, labels.csv, roi/, spec.json).
• batches: per-epoch seeded batch order.
• rule_oracle: reference labeler that reads only the ROI pixels.

ROI masks live on `Dataset.roi`, never on `Split`; the training path only
ever receives `Split` / `ImageBatch` objects.
"""

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from PIL import Image

from apga.errors import ConfigError, EmptyDatasetError, UnsupportedError
from apga.utils.misc import make_generator

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SPLIT_RATIOS = (0.60, 0.25, 0.15)


@dataclass
class ImageBatch:
    """State s_t: B x 1 x H x W images in [0, 1] and their class labels."""

    images: torch.Tensor
    labels: torch.Tensor
    ids: Tuple[str, ...] = ()

    def __len__(self) -> int:
        return self.images.shape[0]

    def to(self, dtype: torch.dtype) -> "ImageBatch":
        return ImageBatch(self.images.to(dtype), self.labels, self.ids)


@dataclass
class SyntheticSpec:
    image_size: int = 32
    num_classes: int = 2
    roi_shape: str = "disc"
    # radius (disc) or half side (square), pixels
    roi_size_min: int = 5
    roi_size_max: int = 8
    roi_intensity: float = 1.0
    stripe_period: int = 4
    distractor_count: int = 2
    distractor_size_min: int = 3
    distractor_size_max: int = 5
    distractor_intensity: float = 0.5
    noise_sigma: float = 0.05
    n_train: int = 200
    n_val: int = 100
    n_test: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.n_train <= 0 or self.n_val <= 0 or self.n_test < 0:
            raise EmptyDatasetError(
                f"sample counts must be positive (train={self.n_train}, val={self.n_val}, test={self.n_test})"
            )
        if self.roi_shape not in ("disc", "square"):
            raise ConfigError(f"roi_shape should be disc/square, not {self.roi_shape}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not 1 <= self.roi_size_min <= self.roi_size_max:
            raise ConfigError("need 1 <= roi_size_min <= roi_size_max")
        if 2 * self.roi_size_max + 1 > self.image_size:
            raise ConfigError("ROI does not fit in the image")
        if not 1 <= self.distractor_size_min <= self.distractor_size_max:
            raise ConfigError("need 1 <= distractor_size_min <= distractor_size_max")
        if self.stripe_period < 2:
            raise ConfigError("stripe_period must be >= 2")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass
class Sample:
    id: str
    image: np.ndarray
    label: int
    roi_mask: Optional[np.ndarray] = None


@dataclass
class Split:
    images: np.ndarray  # N x H x W float32 in [0, 1]
    labels: np.ndarray  # N int64
    ids: List[str]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Dataset:
    splits: Dict[str, Split]
    # evaluation-only ground truth, keyed like `splits`
    roi: Optional[Dict[str, np.ndarray]] = None
    spec: Optional[dict] = None
    num_classes: int = 2

    def split(self, name: str) -> Split:
        if name not in self.splits or len(self.splits[name]) == 0:
            raise EmptyDatasetError(f"split '{name}' is empty")
        return self.splits[name]

    @property
    def has_roi(self) -> bool:
        return self.roi is not None

    def roi_masks(self, name: str) -> np.ndarray:
        if self.roi is None:
            raise UnsupportedError("dataset has no ground-truth ROI masks")
        return self.roi[name]

    def samples(self, name: str) -> Iterator[Sample]:
        sp = self.split(name)
        roi = self.roi[name] if self.roi is not None else None
        for i, sid in enumerate(sp.ids):
            yield Sample(sid, sp.images[i], int(sp.labels[i]), None if roi is None else roi[i])


# ----------------------------------------------------------------------------
# Synthetic task
# ----------------------------------------------------------------------------
def class_angle(label: int, num_classes: int) -> float:
    """Direction (radians, mod pi) along which the stripes of `label` vary. Class 0 = horizontal stripes."""
    return (math.pi / 2 + math.pi * label / num_classes) % math.pi


def _stripes(size: int, angle: float, period: int, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    u = xx * math.cos(angle) + yy * math.sin(angle)
    return (np.sin(2 * math.pi * u / period + phase) > 0).astype(np.float64)


def _region(size: int, cx: int, cy: int, r: int, shape: str) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "disc":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    return (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)


def _render(spec: SyntheticSpec, label: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    s = spec.image_size
    r = int(rng.integers(spec.roi_size_min, spec.roi_size_max + 1))
    cx, cy = (int(v) for v in rng.integers(r, s - r, size=2))
    roi = _region(s, cx, cy, r, spec.roi_shape)
    # one pixel of clearance between the ROI and any distractor
    keep_out = _region(s, cx, cy, r + 1, spec.roi_shape)

    img = np.zeros((s, s))
    roi_tex = _stripes(s, class_angle(label, spec.num_classes), spec.stripe_period, rng.uniform(0, 2 * math.pi))
    img[roi] = spec.roi_intensity * roi_tex[roi]

    for _ in range(spec.distractor_count):
        d = int(rng.integers(spec.distractor_size_min, spec.distractor_size_max + 1))
        dx, dy = (int(v) for v in rng.integers(0, s, size=2))
        fake = int(rng.integers(0, spec.num_classes))
        tex = _stripes(s, class_angle(fake, spec.num_classes), spec.stripe_period, rng.uniform(0, 2 * math.pi))
        patch = _region(s, dx, dy, d, "square") & ~keep_out
        img[patch] = spec.distractor_intensity * tex[patch]

    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), roi.astype(np.uint8)


def generate(spec: SyntheticSpec) -> Dataset:
    """Draw train/val/test splits deterministically from `spec.seed`."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    splits, rois = {}, {}
    for name, n in zip(SPLITS, (spec.n_train, spec.n_val, spec.n_test)):
        labels = rng.permutation(np.arange(n) % spec.num_classes).astype(np.int64)
        images = np.zeros((n, spec.image_size, spec.image_size), dtype=np.float32)
        masks = np.zeros((n, spec.image_size, spec.image_size), dtype=np.uint8)
        for i in range(n):
            images[i], masks[i] = _render(spec, int(labels[i]), rng)
        splits[name] = Split(images, labels, [f"{name}_{i:05d}" for i in range(n)])
        rois[name] = masks
    logger.info(
        "generated synthetic dataset: %s",
        {k: len(v) for k, v in splits.items()},
    )
    return Dataset(splits, rois, asdict(spec), spec.num_classes)


def rule_oracle(image: np.ndarray, roi_mask: np.ndarray, num_classes: int = 2) -> Optional[int]:
    """
    Label an image from the pixels inside its ROI only.

    The dominant gradient orientation inside the ROI (structure tensor over
    pixel pairs that both lie in the ROI) is snapped to the nearest class
    angle. Returns None when the ROI carries no texture.
    """
    img = np.asarray(image, dtype=np.float64)
    roi = np.asarray(roi_mask).astype(bool)
    inner = roi[:-1, :-1] & roi[1:, :-1] & roi[:-1, 1:]
    dx = (img[:-1, 1:] - img[:-1, :-1])[inner]
    dy = (img[1:, :-1] - img[:-1, :-1])[inner]
    jxx, jyy, jxy = float(dx @ dx), float(dy @ dy), float(dx @ dy)
    if jxx + jyy < 1e-12:
        return None
    theta = 0.5 * math.atan2(2 * jxy, jxx - jyy) % math.pi

    def dist(label):
        d = (theta - class_angle(label, num_classes)) % math.pi
        return min(d, math.pi - d)

    return min(range(num_classes), key=dist)


# ----------------------------------------------------------------------------
# Folder layout
# ----------------------------------------------------------------------------
def _hash_key(name: str) -> str:
    return hashlib.sha256(name.encode("utf8")).hexdigest()


def split_quotas(n: int, ratios: Sequence[float] = SPLIT_RATIOS) -> List[int]:
    """Largest-remainder apportionment of n items over `ratios`."""
    raw = [n * r for r in ratios]
    quotas = [math.floor(v) for v in raw]
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - quotas[i]), i))
    for i in order[: n - sum(quotas)]:
        quotas[i] += 1
    return quotas


def assign_splits(filenames: Sequence[str], ratios: Sequence[float] = SPLIT_RATIOS) -> Dict[str, str]:
    """Deterministic train/val/test assignment by sha256 order of the filename."""
    ordered = sorted(filenames, key=_hash_key)
    out, start = {}, 0
    for name, q in zip(SPLITS, split_quotas(len(ordered), ratios)):
        for fn in ordered[start : start + q]:
            out[fn] = name
        start += q
    return out


def _read_gray(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif im.mode == "L":
                arr = np.asarray(im, dtype=np.float64) / 255.0
            else:
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise
    except Exception as e:
        raise ValueError(f"Unreadable image: {path} ({e})") from e
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def _resize(arr: np.ndarray, size: int, resample) -> np.ndarray:
    if arr.shape == (size, size):
        return arr
    im = Image.fromarray(arr.astype(np.float32), mode="F")
    return np.asarray(im.resize((size, size), resample=resample), dtype=np.float32)


def load_folder(path: Union[str, Path], image_size: int = 32) -> Dataset:
    """
    Load `path/labels.csv` (filename,label[,split]) and `path/images/*`.
    Rows without a split are assigned 60/25/15 by filename hash.
    `path/roi/*` (same filenames) is loaded as ground truth when present.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"Dataset directory not found: {root}")
    csv_path = root / "labels.csv"
    if not csv_path.exists():
        raise FileNotFoundError(f"labels.csv not found: {csv_path}")
    try:
        df = pd.read_csv(csv_path, dtype={"filename": str, "split": str})
    except pd.errors.EmptyDataError:
        df = pd.DataFrame(columns=["filename", "label"])
    if len(df) == 0:
        raise EmptyDatasetError(f"{csv_path} has no rows")
    if not {"filename", "label"} <= set(df.columns):
        raise ValueError(f"{csv_path} needs filename,label columns, got {list(df.columns)}")

    if "split" not in df.columns:
        df["split"] = None
    unassigned = df["split"].isna()
    hashed = assign_splits(df.loc[unassigned, "filename"].tolist())
    df.loc[unassigned, "split"] = df.loc[unassigned, "filename"].map(hashed)
    bad = set(df["split"]) - set(SPLITS)
    if bad:
        raise ValueError(f"{csv_path}: unknown split names {sorted(bad)}")

    roi_dir = root / "roi"
    has_roi = roi_dir.is_dir()
    splits, rois = {}, {}
    for name in SPLITS:
        rows = df[df["split"] == name]
        images, masks = [], []
        for fn in rows["filename"]:
            img_path = root / "images" / fn
            if not img_path.exists():
                raise FileNotFoundError(f"Image listed in labels.csv not found: {img_path}")
            images.append(_resize(_read_gray(img_path), image_size, Image.BILINEAR))
            if has_roi:
                roi_path = roi_dir / fn
                if not roi_path.exists():
                    raise FileNotFoundError(f"ROI mask not found: {roi_path}")
                masks.append((_resize(_read_gray(roi_path), image_size, Image.NEAREST) > 0.5).astype(np.uint8))
        shape = (0, image_size, image_size)
        splits[name] = Split(
            np.stack(images) if images else np.zeros(shape, np.float32),
            rows["label"].to_numpy(dtype=np.int64),
            [str(Path(fn).stem) for fn in rows["filename"]],
        )
        rois[name] = np.stack(masks) if masks else np.zeros(shape, np.uint8)

    spec = None
    if (root / "spec.json").exists():
        spec = json.loads((root / "spec.json").read_text(encoding="utf8"))
    labels = df["label"].astype(int)
    num_classes = int(spec["num_classes"]) if spec and "num_classes" in spec else max(2, int(labels.max()) + 1)
    logger.info("loaded %s: %s", root, {k: len(v) for k, v in splits.items()})
    return Dataset(splits, rois if has_roi else None, spec, num_classes)


def save_dataset(dataset: Dataset, root: Union[str, Path]) -> Path:
    """Write images as 16-bit PNG, ROI masks as 8-bit PNG, labels.csv and spec.json."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    if dataset.has_roi:
        (root / "roi").mkdir(exist_ok=True)
    rows = []
    for name, sp in dataset.splits.items():
        for i, sid in enumerate(sp.ids):
            fn = f"{sid}.png"
            px = np.round(sp.images[i].astype(np.float64) * 65535.0).astype(np.uint16)
            Image.fromarray(px).save(root / "images" / fn)
            if dataset.has_roi:
                Image.fromarray(dataset.roi[name][i].astype(np.uint8) * 255).save(root / "roi" / fn)
            rows.append({"filename": fn, "label": int(sp.labels[i]), "split": name})
    pd.DataFrame(rows, columns=["filename", "label", "split"]).to_csv(root / "labels.csv", index=False)
    if dataset.spec is not None:
        (root / "spec.json").write_text(json.dumps(dataset.spec, indent=2, sort_keys=True), encoding="utf8")
    return root


# ----------------------------------------------------------------------------
# Batching
# ----------------------------------------------------------------------------
def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> List[torch.Tensor]:
    if batch_size <= 0:
        raise ValueError(f"batch_size must be > 0, got {batch_size}")
    perm = torch.randperm(n, generator=make_generator(seed, "epoch", epoch))
    return list(torch.split(perm, batch_size))


def make_batch(split: Split, idx: torch.Tensor, dtype: torch.dtype = torch.float32) -> ImageBatch:
    idx_np = idx.numpy()
    images = torch.from_numpy(split.images[idx_np]).unsqueeze(1).to(dtype)
    labels = torch.from_numpy(split.labels[idx_np])
    return ImageBatch(images, labels, tuple(split.ids[i] for i in idx_np))


def batches(
    dataset: Union[Dataset, Split],
    split: str = "train",
    batch_size: int = 25,
    seed: int = 0,
    epoch: int = 0,
    dtype: torch.dtype = torch.float32,
) -> List[ImageBatch]:
    """Ordered batches of one epoch; the permutation depends only on (seed, epoch). The last batch may be short."""
    sp = dataset.split(split) if isinstance(dataset, Dataset) else dataset
    if len(sp) == 0:
        raise EmptyDatasetError(f"split '{split}' is empty")
    return [make_batch(sp, idx, dtype) for idx in batch_indices(len(sp), batch_size, seed, epoch)]
