"""Batch-norm moment pooling across data-parallel replicas."""
from __future__ import annotations

from typing import Sequence

import torch
from torch import nn


def sync_batch_norm_reduce(replica_stats: Sequence[tuple]):
    """Pool per-replica ``(mean, var, count)`` into moments of the concatenated batch.

    ``var`` is the biased (population) variance. Works on floats, numpy arrays
    or tensors alike, and stays differentiable for tensors.
    """
    if not replica_stats:
        raise ValueError("need at least one replica")
    if any(n <= 0 for _, _, n in replica_stats):
        raise ValueError("replica counts must be positive")
    total = sum(n for _, _, n in replica_stats)
    mean = sum(m * n for m, _, n in replica_stats) / total
    var = sum((v + (m - mean) ** 2) * n for m, v, n in replica_stats) / total
    return mean, var


class SyncBatchNorm2d(nn.BatchNorm2d):
    """BatchNorm whose training statistics are pooled over ``replicas`` equal batch shards.

    Replicas are simulated inside one process: the batch is split along dim 0,
    each shard reports its own moments and the pooled moments normalise every
    shard, as a synchronised layer would across devices.
    """

    replicas: int = 1

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.replicas <= 1:
            return super().forward(x)
        shards = x.chunk(self.replicas, dim=0)
        stats = []
        for s in shards:
            n = s.shape[0] * s.shape[2] * s.shape[3]
            m = s.mean(dim=(0, 2, 3))
            v = s.var(dim=(0, 2, 3), unbiased=False)
            stats.append((m, v, n))
        mean, var = sync_batch_norm_reduce(stats)
        count = sum(n for _, _, n in stats)
        if self.track_running_stats:
            with torch.no_grad():
                mom = self.momentum if self.momentum is not None else 0.1
                self.running_mean.mul_(1 - mom).add_(mom * mean)
                self.running_var.mul_(1 - mom).add_(mom * var * count / max(count - 1, 1))
                self.num_batches_tracked.add_(1)
        # explicit affine form: the pooled moments must stay in the autograd graph
        y = (x - mean[None, :, None, None]) * torch.rsqrt(var + self.eps)[None, :, None, None]
        if self.affine:
            y = y * self.weight[None, :, None, None] + self.bias[None, :, None, None]
        return y


def set_replicas(module: nn.Module, replicas: int) -> None:
    for m in module.modules():
        if isinstance(m, SyncBatchNorm2d):
            m.replicas = replicas
