"""Versioned checkpoint container for GANet weights and run state."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .network import GANet, NetworkConfig

FORMAT = "ganet-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, network: GANet, normalization=None, optimizer=None, global_step: int = 0, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "config": network.config.to_dict(),
        "state_dict": network.state_dict(),
        "global_step": int(global_step),
    }
    if normalization is not None:
        mean, std = normalization
        payload["normalization"] = {"mean": np.asarray(mean).tolist(), "std": np.asarray(std).tolist()}
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    if extra:
        payload["extra"] = extra
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a GANet checkpoint")
    if payload.get("version", 0) > VERSION:
        raise CheckpointError(f"{path} has version {payload['version']}, this build reads <= {VERSION}")
    return payload


def load_checkpoint(path) -> tuple[GANet, tuple[np.ndarray, np.ndarray] | None, dict]:
    """Rebuild the network in eval mode; returns (network, normalization, raw payload)."""
    payload = read_checkpoint(path)
    net = GANet(NetworkConfig(**payload["config"]))
    net.load_state_dict(payload["state_dict"])
    net.eval()
    norm = payload.get("normalization")
    normalization = None
    if norm is not None:
        normalization = (np.asarray(norm["mean"], np.float32), np.asarray(norm["std"], np.float32))
    return net, normalization, payload
