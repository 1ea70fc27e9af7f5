"""Multi-task loss: class-weighted cross-entropy plus a lambda-scaled L1 height term."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .raster import IGNORE_VALUE, ClassWeights


class EmptyLossError(ValueError):
    pass


@dataclass
class LossBreakdown:
    seg_loss: torch.Tensor
    height_loss: torch.Tensor
    lam: float
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {
            "seg_loss": float(self.seg_loss.detach()),
            "height_loss": float(self.height_loss.detach()),
            "lambda": float(self.lam),
            "total": float(self.total.detach()),
        }


def _weights_tensor(weights, like: torch.Tensor) -> torch.Tensor:
    if isinstance(weights, ClassWeights):
        weights = weights.weights
    if isinstance(weights, torch.Tensor):
        return weights.to(dtype=like.dtype, device=like.device)
    return torch.as_tensor(np.asarray(weights), dtype=like.dtype, device=like.device)


def weighted_cross_entropy(
    logits: torch.Tensor,
    labels: torch.Tensor,
    weights=None,
    ignore_value: int = IGNORE_VALUE,
) -> torch.Tensor:
    """Mean over non-ignored pixels of ``-w[label] * log softmax(logits)[label]``.

    ``logits`` is ``B x K x H x W`` (or ``K x H x W``); ``labels`` matches
    without the class axis. Note the mean divides by the pixel count, not by
    the sum of weights.
    """
    if logits.dim() == 3:
        logits, labels = logits[None], labels[None]
    labels = labels.long()
    valid = labels != ignore_value
    if not bool(valid.any()):
        raise EmptyLossError("every pixel is ignored; cross-entropy is undefined")
    k = logits.shape[1]
    bad = valid & ((labels < 0) | (labels >= k))
    if bool(bad.any()):
        raise ValueError(f"labels outside [0, {k - 1}] and not equal to ignore value {ignore_value}")
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    logp = F.log_softmax(logits, dim=1).gather(1, safe[:, None])[:, 0]
    nll = -logp
    if weights is not None:
        nll = nll * _weights_tensor(weights, logits)[safe]
    return nll[valid].mean()


def height_l1(predicted: torch.Tensor, target: torch.Tensor, valid_mask: torch.Tensor | None = None) -> torch.Tensor:
    if predicted.shape != target.shape:
        raise ValueError(f"height shapes differ: {tuple(predicted.shape)} vs {tuple(target.shape)}")
    err = (predicted - target).abs()
    if valid_mask is None:
        if err.numel() == 0:
            raise EmptyLossError("empty height map")
        return err.mean()
    if not bool(valid_mask.any()):
        raise EmptyLossError("height valid mask is empty")
    return err[valid_mask].mean()


def total_loss(
    pred,
    labels: torch.Tensor,
    height_target: torch.Tensor,
    weights=None,
    lam: float = 1.0,
    ignore_value: int = IGNORE_VALUE,
    height_mask: torch.Tensor | None = None,
) -> LossBreakdown:
    """``seg + lam * height`` for a :class:`~ganet.network.DualPrediction`."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    seg = weighted_cross_entropy(pred.seg_logits, labels, weights, ignore_value)
    h = height_l1(pred.height, height_target.to(pred.height.dtype), height_mask)
    return LossBreakdown(seg, h, lam, seg + lam * h)
