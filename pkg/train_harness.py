#!/usr/bin/env python3
"""
🧠 Train Harness - desk-scale supervised training and evaluation

Simplified DeiT-style recipe: AdamW with decoupled weight decay, linear
warmup into cosine decay, label smoothing, horizontal flip and pad-crop
augmentation. Datasets are small synthetic surrogates stored in the VIGD
binary format.
"""

import logging
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import psutil

from model_zoo import Model, forward, save_model, set_drop_path_rate
from tensor_core import (
    GradTape,
    Mode,
    Parameter,
    Tensor,
    backward,
    log_softmax,
    mul,
    sum_,
)
from vig_errors import (
    ConfigError,
    DatasetFormatError,
    DimensionError,
    DivergenceError,
    NonFiniteError,
    TargetIndexError,
)

logger = logging.getLogger(__name__)

NORM_MEAN = 0.5
NORM_STD = 0.5

# --------------------------------------------------------------------------
# Dataset
# --------------------------------------------------------------------------

DATASET_MAGIC = b"VIGD"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sBIHHBH")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DimensionError(f"images must be (n, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DimensionError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise TargetIndexError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def resolution(self) -> Tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, self.split)

    def normalized(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        images = self.images if indices is None else self.images[np.asarray(indices)]
        return (images.astype(np.float32) / 255.0 - NORM_MEAN) / NORM_STD


def write_dataset(dataset: Dataset, path: Union[str, Path]) -> None:
    n, height, width, channels = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, height, width, channels, dataset.num_classes))
        for image, label in zip(dataset.images, dataset.labels):
            fh.write(image.tobytes(order="C"))
            fh.write(struct.pack("<H", int(label)))
    logger.info(f"💾 Wrote {n} {height}×{width} samples to {path}")


def read_dataset(path: Union[str, Path], split: str = "train") -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: file too short for a VIGD header")
    magic, version, n, height, width, channels, num_classes = _HEADER.unpack_from(raw, 0)
    if magic != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    pixels = height * width * channels
    record = np.dtype([("pixels", np.uint8, (pixels,)), ("label", "<u2")])
    expected = _HEADER.size + n * record.itemsize
    if len(raw) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    records = np.frombuffer(raw, dtype=record, count=n, offset=_HEADER.size)
    images = records["pixels"].reshape(n, height, width, channels)
    try:
        return Dataset(images.copy(), records["label"].astype(np.int64), num_classes, split)
    except TargetIndexError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc


# --------------------------------------------------------------------------
# Synthetic shapes
# --------------------------------------------------------------------------

SHAPE_NAMES = ("disk", "square", "triangle", "plus", "ring", "diamond", "x", "frame", "ell", "crescent")


def _shape_mask(label: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    radius = np.sqrt(u * u + v * v)
    box = np.maximum(au, av)
    if label == 0:
        return radius <= 1.0
    if label == 1:
        return box <= 0.8
    if label == 2:
        return (v >= -0.8) & (v <= 0.8) & (au <= (v + 0.8) * 0.55)
    if label == 3:
        return ((au <= 0.25) & (av <= 0.9)) | ((av <= 0.25) & (au <= 0.9))
    if label == 4:
        return (radius >= 0.55) & (radius <= 1.0)
    if label == 5:
        return au + av <= 1.0
    if label == 6:
        return ((np.abs(u - v) <= 0.3) | (np.abs(u + v) <= 0.3)) & (box <= 0.85)
    if label == 7:
        return (box <= 0.85) & (box >= 0.55)
    if label == 8:
        return (((u >= -0.8) & (u <= -0.3)) & (av <= 0.8)) | (((v >= 0.3) & (v <= 0.8)) & (au <= 0.8))
    return (radius <= 1.0) & ((u - 0.45) ** 2 + v * v > 0.49)


def synth_shapes(n: int, resolution: int = 32, num_classes: int = 10, seed: int = 0,
                 split: str = "train") -> Dataset:
    """Stratified images of class-distinct figures at random position, scale and colors."""
    if not 1 <= num_classes <= len(SHAPE_NAMES):
        raise ConfigError(f"between 1 and {len(SHAPE_NAMES)} classes are available", field="classes")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    ys, xs = np.mgrid[0:resolution, 0:resolution].astype(np.float64) + 0.5
    images = np.empty((n, resolution, resolution, 3), dtype=np.uint8)

    for i, label in enumerate(labels):
        scale = rng.uniform(0.22, 0.38) * resolution
        cx, cy = rng.uniform(scale, resolution - scale, size=2)
        fg = rng.integers(0, 256, size=3)
        bg = rng.integers(0, 256, size=3)
        while np.abs(fg - bg).mean() < 60:
            bg = rng.integers(0, 256, size=3)
        mask = _shape_mask(int(label), (xs - cx) / scale, (ys - cy) / scale)
        canvas = np.where(mask[..., None], fg, bg).astype(np.float64)
        canvas += rng.normal(0.0, 8.0, size=canvas.shape)
        images[i] = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)

    return Dataset(images, labels, num_classes, split)


def augment(batch: np.ndarray, rng: np.random.Generator, flip: bool = True, padding: int = 4) -> np.ndarray:
    """Random horizontal flip and zero-pad random crop on normalized images (B, H, W, C)."""
    out = batch.copy()
    if flip:
        flips = rng.random(len(out)) < 0.5
        out[flips] = out[flips, :, ::-1]
    if padding > 0:
        _, height, width, _ = out.shape
        padded = np.pad(out, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        offsets = rng.integers(0, 2 * padding + 1, size=(len(out), 2))
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, dy:dy + height, dx:dx + width]
    return out


# --------------------------------------------------------------------------
# Recipe
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Recipe for `train`. `drop_path_rate` of None keeps the rates the model was built with."""

    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    warmup_epochs: int = 1
    weight_decay: float = 0.05
    label_smoothing: float = 0.1
    drop_path_rate: Optional[float] = None
    seed: int = 0
    flip: bool = True
    crop_padding: int = 4
    serial: bool = False
    checkpoint_path: Optional[str] = None
    history_path: Optional[str] = None

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("must be ≥ 1", field="epochs")
        if self.batch_size < 2:
            raise ConfigError("batch norm needs at least 2 samples per batch", field="batch_size")
        if self.lr < 0:
            raise ConfigError("must be ≥ 0", field="lr")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("must lie in [0, epochs]", field="warmup_epochs")
        if self.weight_decay < 0:
            raise ConfigError("must be ≥ 0", field="weight_decay")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("must lie in [0, 1)", field="label_smoothing")
        if self.drop_path_rate is not None and not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError("must lie in [0, 1)", field="drop_path_rate")
        if self.crop_padding < 0:
            raise ConfigError("must be ≥ 0", field="crop_padding")

    @classmethod
    def imagenet_recipe(cls, size: str = "ti") -> Dict[str, object]:
        """Reference ImageNet settings; heavy augmentations and EMA are not run by this harness."""
        drop_path = {"ti": 0.1, "s": 0.1, "m": 0.1, "b": 0.3}
        if size not in drop_path:
            raise ConfigError(f"unknown model size {size!r}", field="size")
        return {
            "epochs": 300, "optimizer": "AdamW", "batch_size": 1024, "lr": 1e-3,
            "schedule": "cosine", "warmup_epochs": 20, "weight_decay": 0.05,
            "label_smoothing": 0.1, "drop_path_rate": drop_path[size],
            "rand_augment": "rand-m9-mstd0.5-inc1", "mixup": 0.8, "cutmix": 1.0,
            "random_erasing": 0.25, "repeated_augment": True, "ema_decay": 0.99996,
        }


def label_smoothing_ce(logits: Tensor, targets: Sequence[int], epsilon: float = 0.1) -> Tensor:
    """Mean cross-entropy against (1 − ε)·one_hot + ε/C."""
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError(f"label smoothing must lie in [0, 1), got {epsilon}", field="label_smoothing")
    targets = np.asarray(targets, dtype=np.int64)
    batch, classes = logits.shape
    if targets.shape != (batch,):
        raise DimensionError(f"{batch} logit rows but {targets.shape} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise TargetIndexError(f"targets must lie in [0, {classes})")
    smoothed = np.full((batch, classes), epsilon / classes)
    smoothed[np.arange(batch), targets] += 1.0 - epsilon
    weights = Tensor(-smoothed / batch, logits.dtype)
    return sum_(mul(log_softmax(logits), weights))


NO_DECAY_SUFFIXES = (".bias", ".scale", ".shift", "pos_embed", ".eps")


def default_no_decay(names: Iterable[str]) -> List[str]:
    return [name for name in names if name.endswith(NO_DECAY_SUFFIXES)]


@dataclass
class AdamWState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Dict[str, Parameter], grads: Dict[str, np.ndarray], state: AdamWState,
               lr: float, weight_decay: float = 0.05, betas: Tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8, no_decay: Iterable[str] = ()) -> AdamWState:
    """One AdamW update; decay is multiplicative and applied before the adaptive step."""
    beta1, beta2 = betas
    skip_decay = set(no_decay)
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for name, param in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        if grad.shape != param.shape:
            raise DimensionError(f"{name}: gradient {grad.shape} vs parameter {param.shape}")
        value = param.value.data.astype(np.float64)
        if weight_decay and name not in skip_decay:
            value = value * (1.0 - lr * weight_decay)
        m = beta1 * state.m.get(name, 0.0) + (1.0 - beta1) * grad
        v = beta2 * state.v.get(name, 0.0) + (1.0 - beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        value = value - lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        param.value = Tensor(value, param.dtype)
    return state


def cosine_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def topk_accuracy(logits: np.ndarray, targets: Sequence[int]) -> Tuple[float, float]:
    """(top-1, top-5); equal logits rank the lower class index first."""
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if len(targets) == 0:
        return 0.0, 0.0
    ranks = np.argsort(-logits, axis=1, kind="stable")
    top = min(5, logits.shape[1])
    top1 = float(np.mean(ranks[:, 0] == targets))
    top5 = float(np.mean(np.any(ranks[:, :top] == targets[:, None], axis=1)))
    return top1, top5


def predict(model: Model, dataset: Dataset, batch_size: int = 128) -> np.ndarray:
    chunks = []
    for start in range(0, len(dataset), batch_size):
        indices = np.arange(start, min(start + batch_size, len(dataset)))
        chunks.append(forward(model, dataset.normalized(indices), Mode.EVAL).data)
    if not chunks:
        return np.zeros((0, model.cfg.num_classes))
    return np.concatenate(chunks, axis=0)


def evaluate(model: Model, dataset: Dataset, batch_size: int = 128) -> Tuple[float, float]:
    return topk_accuracy(predict(model, dataset, batch_size), dataset.labels)


def linear_baseline_accuracy(train_set: Dataset, val_set: Dataset, ridge: float = 1.0) -> float:
    """Val top-1 of a ridge-regression classifier on normalized raw pixels."""
    def features(ds: Dataset) -> np.ndarray:
        flat = ds.normalized().reshape(len(ds), -1).astype(np.float64)
        return np.hstack([flat, np.ones((len(ds), 1))])

    x = features(train_set)
    targets = np.eye(train_set.num_classes)[train_set.labels]
    gram = x.T @ x + ridge * np.eye(x.shape[1])
    weights = np.linalg.solve(gram, x.T @ targets)
    scores = features(val_set) @ weights
    return float(np.mean(np.argmax(scores, axis=1) == val_set.labels))


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

HISTORY_COLUMNS = ["epoch", "train_loss", "val_top1", "val_top5", "lr"]
MAX_NONFINITE_STEPS = 3


@dataclass
class TrainResult:
    """`best_top1` is the val top-1 of the kept epoch; NaN when no val set was given."""

    history: pd.DataFrame
    best_top1: float
    best_epoch: int
    checkpoint: Optional[str] = None


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= 2]


def _prepare(dataset: Dataset, indices: np.ndarray, cfg: TrainConfig, seed: Tuple[int, int, int]):
    rng = np.random.default_rng(seed)
    images = augment(dataset.normalized(indices), rng, cfg.flip, cfg.crop_padding)
    return images, dataset.labels[indices]


def _batch_stream(dataset: Dataset, batches: List[np.ndarray], cfg: TrainConfig, epoch: int,
                  serial: bool) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Augmented batches; outside serial mode the next batch is prepared on a worker thread."""
    seeds = [(cfg.seed, epoch, i) for i in range(len(batches))]
    if serial:
        for indices, seed in zip(batches, seeds):
            yield _prepare(dataset, indices, cfg, seed)
        return
    with ThreadPoolExecutor(max_workers=1, thread_name_prefix="vig-prefetch") as pool:
        pending = pool.submit(_prepare, dataset, batches[0], cfg, seeds[0]) if batches else None
        for i in range(len(batches)):
            current = pending.result()
            if i + 1 < len(batches):
                pending = pool.submit(_prepare, dataset, batches[i + 1], cfg, seeds[i + 1])
            yield current


def train(model: Model, train_set: Dataset, val_set: Optional[Dataset], cfg: TrainConfig) -> TrainResult:
    cfg.validate()
    expected = tuple(model.cfg.image_size) + (model.cfg.in_channels,)
    for ds in (train_set, val_set):
        if ds is not None and tuple(ds.resolution) != expected:
            raise DimensionError(f"{ds.split} images are {ds.resolution}, model expects {expected}")
    if train_set.num_classes > model.cfg.num_classes:
        raise ConfigError(f"dataset has {train_set.num_classes} classes, model only {model.cfg.num_classes}",
                          field="num_classes")

    if cfg.drop_path_rate is not None:
        set_drop_path_rate(model, cfg.drop_path_rate)
    params = model.named_parameters()
    no_decay = default_no_decay(params)
    optimizer = AdamWState()
    order_rng = np.random.default_rng(cfg.seed)
    model.rng = np.random.default_rng(cfg.seed + 1)
    process = psutil.Process()

    steps_per_epoch = max(1, len(_batches(len(train_set), cfg.batch_size, np.random.default_rng(0))))
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = cfg.warmup_epochs * steps_per_epoch

    history: List[dict] = []
    best_score, best_top1, best_epoch, checkpoint = -math.inf, float("nan"), 0, None
    criterion = "val top-1" if val_set is not None else "train loss"
    step, bad_steps = 0, 0
    logger.info(f"🚀 Training {model.cfg.name or model.cfg.kind} for {cfg.epochs} epochs, "
                f"{len(train_set)} samples, {len(params)} parameter tensors")

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        losses = []
        lr = cosine_lr(step, total_steps, warmup_steps, cfg.lr)
        batches = _batches(len(train_set), cfg.batch_size, order_rng)
        for images, labels in _batch_stream(train_set, batches, cfg, epoch, cfg.serial):
            lr = cosine_lr(step, total_steps, warmup_steps, cfg.lr)
            step += 1
            running_stats = {name: arr.copy() for name, arr in model.named_buffers().items()}
            try:
                with GradTape() as tape:
                    tape.watch_parameters(params)
                    logits = forward(model, images, Mode.TRAIN)
                    loss = label_smoothing_ce(logits, labels, cfg.label_smoothing)
                grads = backward(loss, tape)
            except NonFiniteError as exc:
                model.load_buffers(running_stats)
                bad_steps += 1
                logger.warning(f"⚠️ Non-finite step {step} ({bad_steps}/{MAX_NONFINITE_STEPS}): {exc}")
                if bad_steps >= MAX_NONFINITE_STEPS:
                    raise DivergenceError(
                        f"loss was non-finite for {MAX_NONFINITE_STEPS} consecutive steps (epoch {epoch}, step {step})"
                    ) from exc
                continue
            bad_steps = 0
            adamw_step(params, grads, optimizer, lr, cfg.weight_decay, no_decay=no_decay)
            losses.append(loss.item())

        val_top1, val_top5 = evaluate(model, val_set) if val_set is not None else (float("nan"), float("nan"))
        train_loss = float(np.mean(losses)) if losses else float("nan")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_top1": val_top1,
                        "val_top5": val_top5, "lr": lr})
        rss_mb = process.memory_info().rss / 1e6
        logger.info(f"📊 epoch {epoch}/{cfg.epochs} loss={train_loss:.4f} top1={val_top1:.3f} "
                    f"top5={val_top5:.3f} lr={lr:.2e} time={time.perf_counter() - started:.1f}s rss={rss_mb:.0f}MB")

        score = val_top1 if val_set is not None else -train_loss
        if score > best_score or epoch == 1:
            best_score, best_top1, best_epoch = score, val_top1, epoch
            if cfg.checkpoint_path:
                save_model(model, cfg.checkpoint_path)
                checkpoint = cfg.checkpoint_path

    frame = pd.DataFrame(history, columns=HISTORY_COLUMNS)
    if cfg.history_path:
        frame.to_csv(cfg.history_path, index=False)
    best = best_top1 if val_set is not None else -best_score
    logger.info(f"✅ Training finished: best {criterion} {best:.4f} at epoch {best_epoch}")
    return TrainResult(frame, best_top1, best_epoch, checkpoint)
