"""Sliding-window prediction over full tiles, with multi-scale averaging."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .raster import GeoRaster, PatchSizeError, encode_labels

DEFAULT_SCALES = (0.8, 1.0, 1.2)
DEFAULT_STRIDE = 32


class PlanMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class StitchPlan:
    windows: tuple[tuple[int, int, int], ...]  # (row, col, size)
    tile_extent: tuple[int, int]
    stride: int


@dataclass
class ProbabilityField:
    probs: np.ndarray  # H x W x K
    height: np.ndarray  # H x W
    coverage: np.ndarray  # H x W
    finalized: bool = False

    def finalize(self) -> "ProbabilityField":
        if self.finalized:
            return self
        if (self.coverage < 1).any():
            raise PlanMismatchError("some pixels were never covered by a window")
        cov = self.coverage.astype(np.float64)
        return ProbabilityField(self.probs / cov[..., None], self.height / cov, self.coverage, True)

    def label_map(self) -> np.ndarray:
        return self.finalize().probs.argmax(axis=-1)


def _axis_starts(extent: int, patch: int, stride: int) -> list[int]:
    # a stride wider than the patch would leave gaps between windows
    starts = list(range(0, extent - patch + 1, min(stride, patch)))
    if starts[-1] + patch < extent:
        starts.append(extent - patch)
    return starts


def plan_windows(tile_extent, patch_size: int, stride: int = DEFAULT_STRIDE) -> StitchPlan:
    """Regular windows every ``stride`` pixels plus an edge-aligned closing window per axis."""
    if isinstance(tile_extent, int):
        tile_extent = (tile_extent, tile_extent)
    h, w = (int(v) for v in tile_extent)
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if patch_size < 1 or patch_size > min(h, w):
        raise PatchSizeError(f"patch {patch_size} does not fit tile extent {(h, w)}")
    rows = _axis_starts(h, patch_size, stride)
    cols = _axis_starts(w, patch_size, stride)
    return StitchPlan(tuple((r, c, patch_size) for r in rows for c in cols), (h, w), stride)


def _as_image(tile, normalization) -> np.ndarray:
    image = tile.optical if isinstance(tile, GeoRaster) else np.asarray(tile)
    image = image.astype(np.float32)
    if image.ndim == 2:
        image = image[..., None]
    if normalization is not None:
        mean, std = normalization
        image = (image - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)
    return image


def _run(network, batch: torch.Tensor):
    out = network(batch)
    logits, height = out[0], out[1]
    return torch.softmax(logits, dim=1), height


@torch.no_grad()
def predict_image(network: Callable, image: np.ndarray, plan: StitchPlan, batch_size: int = 8) -> ProbabilityField:
    """Accumulate window softmax outputs over an already-normalised H x W x C image."""
    h, w = image.shape[:2]
    if tuple(plan.tile_extent) != (h, w):
        raise PlanMismatchError(f"plan extent {plan.tile_extent} does not match tile {(h, w)}")
    if isinstance(network, torch.nn.Module):
        network.eval()
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))
    probs = None
    height = np.zeros((h, w), dtype=np.float64)
    coverage = np.zeros((h, w), dtype=np.int64)
    for start in range(0, len(plan.windows), batch_size):
        chunk = plan.windows[start:start + batch_size]
        batch = torch.stack([x[:, r:r + s, c:c + s] for r, c, s in chunk])
        p, hgt = _run(network, batch)
        p = p.double().numpy()
        hgt = hgt.double().numpy()
        if probs is None:
            probs = np.zeros((h, w, p.shape[1]), dtype=np.float64)
        for (r, c, s), pi, hi in zip(chunk, p, hgt):
            probs[r:r + s, c:c + s] += pi.transpose(1, 2, 0)
            height[r:r + s, c:c + s] += hi
            coverage[r:r + s, c:c + s] += 1
    return ProbabilityField(probs, height, coverage).finalize()


def predict_tile(network, tile, plan: StitchPlan, normalization=None, batch_size: int = 8) -> ProbabilityField:
    return predict_image(network, _as_image(tile, normalization), plan, batch_size)


def _resize(arr: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of an H x W x C array."""
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return out[0].numpy().transpose(1, 2, 0)


def multiscale_predict(
    network,
    tile,
    scales: Sequence[float] = DEFAULT_SCALES,
    patch_size: int = 320,
    stride: int = DEFAULT_STRIDE,
    normalization=None,
    batch_size: int = 8,
) -> ProbabilityField:
    """Equal-weight average of single-scale fields, each resampled back to native size."""
    if not scales:
        raise ValueError("need at least one scale")
    image = _as_image(tile, normalization)
    h, w = image.shape[:2]
    probs = height = None
    for s in scales:
        if s == 1.0 and min(h, w) >= patch_size:
            scaled = image
        else:
            sh, sw = max(1, int(round(h * s))), max(1, int(round(w * s)))
            scaled = image if (sh, sw) == (h, w) else _resize(image, (sh, sw))
        sh, sw = scaled.shape[:2]
        ph, pw = max(sh, patch_size), max(sw, patch_size)
        if (ph, pw) != (sh, sw):
            scaled = np.pad(scaled, ((0, ph - sh), (0, pw - sw), (0, 0)), mode="reflect" if min(sh, sw) > 1 else "edge")
        field = predict_image(network, scaled, plan_windows((ph, pw), patch_size, stride), batch_size)
        p = field.probs[:sh, :sw]
        hgt = field.height[:sh, :sw]
        if (sh, sw) != (h, w):
            p = _resize(p, (h, w))
            hgt = _resize(hgt[..., None], (h, w))[..., 0]
        probs = p if probs is None else probs + p
        height = hgt if height is None else height + hgt
    n = len(scales)
    return ProbabilityField(probs / n, height / n, np.full((h, w), n, dtype=np.int64), True)


def write_prediction(field: ProbabilityField, out_dir, tile_id: str, color_map, save_probs: bool = False) -> dict:
    """Colour label map, 16-bit height raster and optionally the class probabilities."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    field = field.finalize()
    paths = {"label": out_dir / f"{tile_id}_label.png", "height": out_dir / f"{tile_id}_height.png"}
    Image.fromarray(encode_labels(field.label_map(), color_map)).save(paths["label"])
    h16 = np.round(np.clip(field.height, 0.0, 1.0) * 65535).astype(np.uint16)
    Image.fromarray(h16).save(paths["height"])
    if save_probs:
        paths["probs"] = out_dir / f"{tile_id}_probs.npy"
        np.save(paths["probs"], field.probs.astype(np.float32))
    return paths
