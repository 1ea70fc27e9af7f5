"""Momentum SGD with cosine decay over randomly sampled, flipped patches."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import save_checkpoint
from .inference import plan_windows, predict_tile
from .metrics import evaluate_maps
from .network import GANet
from .objective import total_loss
from .raster import (
    IGNORE_VALUE,
    ClassWeights,
    GeoRaster,
    augment,
    compute_class_weights,
    normalize_height,
    optical_stats,
    sample_patch,
)
from .syncbn import set_replicas, sync_batch_norm_reduce  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


class NumericalAbort(RuntimeError):
    def __init__(self, message, batch_ids=()):
        super().__init__(message)
        self.batch_ids = list(batch_ids)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr_init: float = 0.01
    lr_min: float = 0.00002
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lam: float = 1.0
    seed: int = 0
    steps_per_epoch: int | None = None
    patch_size: int = 320
    val_stride: int | None = None
    val_erosion: float = 3
    use_class_weights: bool = True

    def __post_init__(self):
        if self.lr_init <= 0 or self.lr_min <= 0 or self.lr_min > self.lr_init:
            raise ValueError(f"need 0 < lr_min <= lr_init, got {self.lr_min}, {self.lr_init}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """CPU profile for the synthetic benchmark: 64 px patches, 500 steps."""
        base = dict(epochs=5, steps_per_epoch=100, batch_size=4, patch_size=64, lr_init=0.05, val_stride=32)
        base.update(overrides)
        return cls(**base)


def cosine_lr(step: int, total_steps: int, lr_init: float = 0.01, lr_min: float = 0.00002) -> float:
    if total_steps < 1:
        raise ScheduleError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ScheduleError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return lr_init
    if step == total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_init - lr_min) * (1 + math.cos(math.pi * step / total_steps))


def default_steps_per_epoch(tiles: Sequence[GeoRaster], batch_size: int, patch_size: int) -> int:
    pixels = sum(t.shape[0] * t.shape[1] for t in tiles)
    return max(1, math.ceil(pixels / (batch_size * patch_size ** 2)))


@dataclass
class TrainingData:
    """Height-normalised training and validation tiles plus derived constants."""

    train: list[GeoRaster]
    val: list[GeoRaster] = field(default_factory=list)
    num_classes: int = 0
    ignore_value: int = IGNORE_VALUE
    class_weights: ClassWeights | None = None
    normalization: tuple[np.ndarray, np.ndarray] | None = None

    @classmethod
    def prepare(cls, train, val=(), num_classes=None, ignore_value=IGNORE_VALUE) -> "TrainingData":
        if not train:
            raise ValueError("training split is empty")
        train = [normalize_height(t) for t in train]
        val = [normalize_height(t) for t in val]
        weights = compute_class_weights(train, ignore_value, num_classes)
        return cls(train, val, len(weights), ignore_value, weights, optical_stats(train))


def sample_batch(data: TrainingData, batch_size: int, patch_size: int, rng: np.random.Generator):
    """Random tile, random crop, random flips; returns tensors and (tile, origin) ids."""
    mean, std = data.normalization
    images, labels, heights, ids = [], [], [], []
    for _ in range(batch_size):
        tile = data.train[int(rng.integers(len(data.train)))]
        p = augment(sample_patch(tile, patch_size, rng), rng)
        images.append((p.image - mean) / std)
        labels.append(p.labels)
        heights.append(p.height)
        ids.append((p.source_tile_id, p.origin))
    x = torch.from_numpy(np.stack(images).transpose(0, 3, 1, 2).astype(np.float32))
    y = torch.from_numpy(np.stack(labels))
    h = torch.from_numpy(np.stack(heights).astype(np.float32))
    return x, y, h, ids


def parameter_groups(net: nn.Module, weight_decay: float) -> list[dict]:
    """Decay conv weights only; BN affine parameters and biases are exempt."""
    decay, exempt = [], []
    for p in net.parameters():
        if p.requires_grad:
            (exempt if p.ndim <= 1 else decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": exempt, "weight_decay": 0.0}]


def make_optimizer(net: nn.Module, config: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        parameter_groups(net, config.weight_decay), lr=config.lr_init, momentum=config.momentum
    )


def replica_loss(pred, y, h, weights, lam, ignore_value, replicas):
    """Mean of per-replica losses, as gradient averaging over replicas would give."""
    if replicas == 1:
        return total_loss(pred, y, h, weights, lam, ignore_value)
    parts = []
    for logit, hp, ys, hs in zip(pred.seg_logits.chunk(replicas), pred.height.chunk(replicas),
                                 y.chunk(replicas), h.chunk(replicas)):
        parts.append(total_loss(type(pred)(logit, hp), ys, hs, weights, lam, ignore_value))
    seg = sum(p.seg_loss for p in parts) / replicas
    hl = sum(p.height_loss for p in parts) / replicas
    return type(parts[0])(seg, hl, lam, seg + lam * hl)


def train_step(network, optimizer, batch, lr, weights=None, lam=1.0, ignore_value=IGNORE_VALUE, replicas=1):
    """One forward/backward/update at learning rate ``lr``; returns the LossBreakdown."""
    x, y, h = batch
    for g in optimizer.param_groups:
        g["lr"] = lr
    network.train()
    loss = replica_loss(network(x), y, h, weights, lam, ignore_value, replicas)
    if not torch.isfinite(loss.total):
        raise NumericalAbort(f"non-finite loss {loss.as_floats()}")
    optimizer.zero_grad(set_to_none=True)
    loss.total.backward()
    optimizer.step()
    return loss


def validate(net: GANet, data: TrainingData, config: TrainConfig) -> dict:
    stride = config.val_stride or config.patch_size // 2
    pairs, l1 = [], []
    for tile in data.val:
        plan = plan_windows(tile.shape, config.patch_size, stride)
        field_ = predict_tile(net, tile, plan, data.normalization)
        pairs.append((field_.label_map(), tile.labels))
        l1.append(float(np.abs(field_.height - tile.height).mean()))
    report = evaluate_maps(pairs, data.num_classes, config.val_erosion, data.ignore_value)
    return {"val_oa": report.overall_accuracy, "val_avg_f1": report.average_f1, "val_height_l1": float(np.mean(l1))}


@dataclass
class TrainResult:
    network: GANet
    records: list[dict]
    last_checkpoint: Path | None
    best_checkpoint: Path | None
    best_score: float | None
    validation: list[dict]


def train(
    network: GANet,
    data: TrainingData,
    config: TrainConfig,
    replicas: int = 1,
    out_dir=None,
    log_path=None,
) -> TrainResult:
    """Optimise ``network`` in place; checkpoints each epoch and on best validation F1."""
    if not data.train:
        raise ValueError("training split is empty")
    if replicas < 1 or config.batch_size % replicas:
        raise ValueError(f"batch size {config.batch_size} must split evenly over {replicas} replicas")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    set_replicas(network, replicas)
    weights = data.class_weights if config.use_class_weights else None
    optimizer = make_optimizer(network, config)
    steps = config.steps_per_epoch or default_steps_per_epoch(data.train, config.batch_size, config.patch_size)
    total = config.epochs * steps
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = log_path or out_dir / "metrics.jsonl"
    log_file = open(log_path, "w") if log_path is not None else None
    extra = {"train_config": asdict(config), "replicas": replicas}

    records, validation = [], []
    best_score, best_path, last_path = None, None, None
    start = time.perf_counter()
    step = 0
    try:
        for epoch in range(config.epochs):
            network.train()
            for _ in range(steps):
                lr = cosine_lr(step, total, config.lr_init, config.lr_min)
                x, y, h, ids = sample_batch(data, config.batch_size, config.patch_size, rng)
                try:
                    loss = train_step(network, optimizer, (x, y, h), lr, weights, config.lam,
                                      data.ignore_value, replicas)
                except NumericalAbort as exc:
                    raise NumericalAbort(f"step {step}: {exc}", ids) from None
                rec = {"step": step, "epoch": epoch, "lr": lr, **loss.as_floats(),
                       "wall_time": round(time.perf_counter() - start, 3)}
                records.append(rec)
                if log_file is not None:
                    log_file.write(json.dumps(rec) + "\n")
                step += 1
            if out_dir is not None:
                last_path = save_checkpoint(out_dir / "checkpoint_last.pt", network, data.normalization,
                                            optimizer, step, extra)
            if data.val:
                scores = {"epoch": epoch, "step": step, **validate(network, data, config)}
                validation.append(scores)
                log.info("epoch %d: %s", epoch, scores)
                if log_file is not None:
                    log_file.write(json.dumps({"validation": scores}) + "\n")
                if best_score is None or scores["val_avg_f1"] > best_score:
                    best_score = scores["val_avg_f1"]
                    if out_dir is not None:
                        best_path = save_checkpoint(out_dir / "checkpoint_best.pt", network, data.normalization,
                                                    optimizer, step, {**extra, "validation": scores})
    finally:
        if log_file is not None:
            log_file.close()
        set_replicas(network, 1)
    network.eval()
    return TrainResult(network, records, last_path, best_path, best_score, validation)
