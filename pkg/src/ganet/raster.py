"""Tile ingestion, patch sampling and the synthetic height-disambiguation set."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml
from PIL import Image

OPTICAL = "optical"
HEIGHT = "height"
LABEL = "label"
ROLES = (OPTICAL, HEIGHT, LABEL)

IGNORE_VALUE = 255


class RasterError(ValueError):
    """Base class for malformed raster input."""


class DimensionError(RasterError):
    pass


class DecodeError(RasterError):
    pass


class RoleError(RasterError):
    pass


class PatchSizeError(RasterError):
    pass


class WeightError(RasterError):
    pass


@dataclass(frozen=True)
class ColorClass:
    name: str
    color: tuple[int, int, int]
    class_id: int


# ISPRS 2D labeling contest colour code. Clutter is the last class so that
# dropping it leaves ids 0..4 contiguous.
ISPRS_COLOR_MAP: tuple[ColorClass, ...] = (
    ColorClass("impervious", (255, 255, 255), 0),
    ColorClass("building", (0, 0, 255), 1),
    ColorClass("low_vegetation", (0, 255, 255), 2),
    ColorClass("tree", (0, 255, 0), 3),
    ColorClass("car", (255, 255, 0), 4),
    ColorClass("clutter", (255, 0, 0), 5),
)

SYNTHETIC_COLOR_MAP: tuple[ColorClass, ...] = (
    ColorClass("flat_a", (255, 255, 255), 0),
    ColorClass("raised_a", (0, 0, 255), 1),
    ColorClass("flat_b", (0, 255, 255), 2),
    ColorClass("raised_b", (0, 255, 0), 3),
    ColorClass("shadow", (0, 0, 0), IGNORE_VALUE),
)


def isprs_color_map(exclude_clutter: bool = True) -> tuple[ColorClass, ...]:
    if not exclude_clutter:
        return ISPRS_COLOR_MAP
    return tuple(
        replace(c, class_id=IGNORE_VALUE) if c.name == "clutter" else c
        for c in ISPRS_COLOR_MAP
    )


def num_classes_of(color_map: Sequence[ColorClass], ignore_value: int = IGNORE_VALUE) -> int:
    return len({c.class_id for c in color_map if c.class_id != ignore_value})


@dataclass
class GeoRaster:
    """An H x W x C tile whose channels each carry one role.

    ``pixels`` is float32 so optical, height and label planes can share one
    array; label channels hold integral values.
    """

    pixels: np.ndarray
    channel_roles: list[str]
    ground_resolution: float | None = None
    tile_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[..., None]
        if self.pixels.ndim != 3:
            raise DimensionError(f"pixels must be H x W x C, got shape {self.pixels.shape}")
        h, w, c = self.pixels.shape
        if min(h, w, c) < 1:
            raise DimensionError(f"empty raster of shape {self.pixels.shape}")
        if len(self.channel_roles) != c:
            raise RoleError(f"{c} channels but {len(self.channel_roles)} roles")
        bad = [r for r in self.channel_roles if r not in ROLES]
        if bad:
            raise RoleError(f"unknown channel roles {bad}; expected one of {ROLES}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def _indices(self, role: str) -> list[int]:
        return [i for i, r in enumerate(self.channel_roles) if r == role]

    def has(self, role: str) -> bool:
        return bool(self._indices(role))

    @property
    def optical(self) -> np.ndarray:
        return self.pixels[..., self._indices(OPTICAL)]

    @property
    def height(self) -> np.ndarray:
        idx = self._indices(HEIGHT)
        if not idx:
            raise RoleError(f"tile {self.tile_id!r} has no height channel")
        return self.pixels[..., idx[0]]

    @property
    def labels(self) -> np.ndarray:
        idx = self._indices(LABEL)
        if not idx:
            raise RoleError(f"tile {self.tile_id!r} has no label channel")
        return self.pixels[..., idx[0]].astype(np.int64)


@dataclass
class PatchSample:
    image: np.ndarray  # H_p x W_p x C_in
    labels: np.ndarray  # H_p x W_p
    height: np.ndarray  # H_p x W_p
    source_tile_id: str
    origin: tuple[int, int]


@dataclass(frozen=True)
class ClassWeights:
    weights: np.ndarray

    def __len__(self):
        return len(self.weights)


# ---------------------------------------------------------------------------
# colour coding

def encode_labels(labels: np.ndarray, color_map: Sequence[ColorClass]) -> np.ndarray:
    """Class-id map -> H x W x 3 uint8 colour image."""
    out = np.zeros(labels.shape + (3,), dtype=np.uint8)
    done = np.zeros(labels.shape, dtype=bool)
    for c in color_map:
        sel = (labels == c.class_id) & ~done
        out[sel] = c.color
        done |= sel
    if not done.all():
        missing = sorted(set(np.unique(labels[~done]).tolist()))
        raise DecodeError(f"class ids {missing} have no colour in the colour map")
    return out


def decode_labels(rgb: np.ndarray, color_map: Sequence[ColorClass]) -> np.ndarray:
    """H x W x 3 colour image -> class-id map. Unknown colours raise."""
    rgb = np.asarray(rgb)[..., :3].astype(np.int64)
    key = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
    out = np.full(key.shape, -1, dtype=np.int64)
    for c in color_map:
        r, g, b = c.color
        out[key == ((r << 16) | (g << 8) | b)] = c.class_id
    if (out < 0).any():
        k = int(key[out < 0][0])
        color = ((k >> 16) & 255, (k >> 8) & 255, k & 255)
        raise DecodeError(f"label colour {color} not in colour map")
    return out


# ---------------------------------------------------------------------------
# loading

def _read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with Image.open(path) as im:
        return np.asarray(im)


def load_tile(
    optical_path,
    dsm_path=None,
    label_path=None,
    color_map: Sequence[ColorClass] = ISPRS_COLOR_MAP,
    ground_resolution: float | None = None,
    tile_id: str | None = None,
) -> GeoRaster:
    """Stack optical bands, raw DSM and decoded labels into one GeoRaster."""
    optical = _read_image(optical_path).astype(np.float32)
    if optical.ndim == 2:
        optical = optical[..., None]
    h, w = optical.shape[:2]
    planes = [optical]
    roles = [OPTICAL] * optical.shape[2]

    if dsm_path is not None:
        dsm = _read_image(dsm_path).astype(np.float32)
        if dsm.ndim == 3:
            dsm = dsm[..., 0]
        if dsm.shape != (h, w):
            raise DimensionError(f"DSM {dsm.shape} does not match optical {(h, w)}")
        planes.append(dsm[..., None])
        roles.append(HEIGHT)

    if label_path is not None:
        raw = _read_image(label_path)
        if raw.shape[:2] != (h, w):
            raise DimensionError(f"labels {raw.shape[:2]} do not match optical {(h, w)}")
        labels = decode_labels(raw, color_map) if raw.ndim == 3 else raw.astype(np.int64)
        planes.append(labels[..., None].astype(np.float32))
        roles.append(LABEL)

    return GeoRaster(
        pixels=np.concatenate(planes, axis=2),
        channel_roles=roles,
        ground_resolution=ground_resolution,
        tile_id=tile_id if tile_id is not None else Path(optical_path).stem,
    )


def normalize_height(raster: GeoRaster) -> GeoRaster:
    """Per-tile min-max scaling of the height channel to [0, 1].

    A constant-height tile maps to zeros.
    """
    idx = raster._indices(HEIGHT)
    if not idx:
        raise RoleError(f"tile {raster.tile_id!r} has no height channel")
    pixels = raster.pixels.copy()
    for i in idx:
        h = pixels[..., i].astype(np.float64)
        lo, hi = h.min(), h.max()
        pixels[..., i] = 0.0 if hi <= lo else (h - lo) / (hi - lo)
    return replace(raster, pixels=pixels)


# ---------------------------------------------------------------------------
# patches

def _crop(raster: GeoRaster, row: int, col: int, size: int) -> PatchSample:
    block = raster.pixels[row:row + size, col:col + size]
    h, w = block.shape[:2]
    labels = (
        block[..., raster._indices(LABEL)[0]].astype(np.int64)
        if raster.has(LABEL) else np.full((h, w), IGNORE_VALUE, dtype=np.int64)
    )
    height = (
        block[..., raster._indices(HEIGHT)[0]].copy()
        if raster.has(HEIGHT) else np.zeros((h, w), dtype=np.float32)
    )
    return PatchSample(
        image=block[..., raster._indices(OPTICAL)].copy(),
        labels=labels,
        height=height,
        source_tile_id=raster.tile_id,
        origin=(row, col),
    )


def sample_patch(raster: GeoRaster, patch_size: int, rng: np.random.Generator) -> PatchSample:
    """Crop a square patch whose top-left corner is uniform over all valid positions."""
    h, w = raster.shape
    if patch_size > min(h, w) or patch_size < 1:
        raise PatchSizeError(f"patch size {patch_size} does not fit tile of extent {(h, w)}")
    row = int(rng.integers(0, h - patch_size + 1))
    col = int(rng.integers(0, w - patch_size + 1))
    return _crop(raster, row, col, patch_size)


def flip_patch(patch: PatchSample, horizontal: bool, vertical: bool) -> PatchSample:
    image, labels, height = patch.image, patch.labels, patch.height
    if horizontal:
        image, labels, height = image[:, ::-1], labels[:, ::-1], height[:, ::-1]
    if vertical:
        image, labels, height = image[::-1], labels[::-1], height[::-1]
    return replace(
        patch,
        image=np.ascontiguousarray(image),
        labels=np.ascontiguousarray(labels),
        height=np.ascontiguousarray(height),
    )


def augment(patch: PatchSample, rng: np.random.Generator) -> PatchSample:
    """Independent horizontal and vertical flips, each with probability 0.5."""
    horizontal, vertical = rng.random(2) < 0.5
    return flip_patch(patch, bool(horizontal), bool(vertical))


# ---------------------------------------------------------------------------
# class balance

def class_counts(label_rasters: Iterable, num_classes: int, ignore_value: int = IGNORE_VALUE) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for r in label_rasters:
        labels = r.labels if isinstance(r, GeoRaster) else np.asarray(r)
        labels = labels[labels != ignore_value]
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise WeightError(f"label ids outside [0, {num_classes - 1}]")
        counts += np.bincount(labels.ravel(), minlength=num_classes)
    return counts


def compute_class_weights(
    label_rasters: Sequence,
    ignore_value: int = IGNORE_VALUE,
    num_classes: int | None = None,
) -> ClassWeights:
    """Inverse-frequency weights scaled so that sum_c freq[c] * w[c] == 1."""
    if num_classes is None:
        seen = set()
        for r in label_rasters:
            labels = r.labels if isinstance(r, GeoRaster) else np.asarray(r)
            seen.update(np.unique(labels[labels != ignore_value]).tolist())
        num_classes = int(max(seen)) + 1 if seen else 0
    counts = class_counts(label_rasters, num_classes, ignore_value)
    absent = np.flatnonzero(counts == 0).tolist()
    if num_classes == 0 or absent:
        raise WeightError(f"classes with zero labelled pixels: {absent}")
    freq = counts / counts.sum()
    # 1/freq has freq-weighted mean K, so divide by K
    return ClassWeights(weights=1.0 / (freq * num_classes))


# ---------------------------------------------------------------------------
# optical normalisation

def optical_stats(rasters: Sequence[GeoRaster]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of the optical bands over a split."""
    total = None
    sq = None
    n = 0
    for r in rasters:
        x = r.optical.reshape(-1, r.optical.shape[-1]).astype(np.float64)
        total = x.sum(0) if total is None else total + x.sum(0)
        sq = (x ** 2).sum(0) if sq is None else sq + (x ** 2).sum(0)
        n += x.shape[0]
    mean = total / n
    std = np.sqrt(np.maximum(sq / n - mean ** 2, 0.0))
    std[std == 0] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


# ---------------------------------------------------------------------------
# synthetic benchmark

SYNTH_BASE_ELEVATION = 250.0
SYNTH_COLORS = np.array([[150.0, 110.0, 90.0], [70.0, 140.0, 80.0]], dtype=np.float32)
SYNTH_NOISE = 18.0
SHADOW_FACTOR = 0.35
SHADOW_PER_METER = 0.5
SHADOW_MODE = "halo"
SYNTH_BLOCKS = (2, 4)  # per 64 x 64 area
SYNTH_BLOCK_SIZE = (8, 24)


def _synthetic_tile(tile_size: int, rng: np.random.Generator, tile_id: str) -> GeoRaster:
    """One tile of the equal-appearance / different-height benchmark.

    Ground is a patchwork of flat classes 0 and 2. Raised blocks of classes
    1 and 3 reuse the appearance of 0 and 2 respectively and are told apart
    only by the dark rim of shadow around them, whose width grows with block
    height ("halo" mode; "directional" casts it towards the lower right
    instead). Shadow pixels are labelled ignore.
    """
    s = tile_size
    labels = np.zeros((s, s), dtype=np.int64)
    # ground patchwork: vertical strips of random width
    col = 0
    kind = int(rng.integers(2))
    while col < s:
        width = int(rng.integers(s // 6, s // 2))
        labels[:, col:col + width] = 2 * kind
        kind = 1 - kind
        col += width

    elevation = np.zeros((s, s), dtype=np.float64)
    raised = np.zeros((s, s), dtype=bool)
    n_blocks = int(rng.integers(SYNTH_BLOCKS[0], SYNTH_BLOCKS[1] + 1)) * max(1, (s * s) // (64 * 64))
    lo, hi = SYNTH_BLOCK_SIZE
    blocks = []
    for _ in range(n_blocks):
        bh, bw = rng.integers(lo, hi, size=2)
        r0 = int(rng.integers(0, s - bh))
        c0 = int(rng.integers(0, s - bw))
        appearance = int(rng.integers(2))
        height = float(rng.uniform(6.0, 20.0))
        labels[r0:r0 + bh, c0:c0 + bw] = 2 * appearance + 1
        elevation[r0:r0 + bh, c0:c0 + bw] = height
        raised[r0:r0 + bh, c0:c0 + bw] = True
        blocks.append((r0, c0, int(bh), int(bw), height))

    shadow = np.zeros((s, s), dtype=bool)
    for r0, c0, bh, bw, height in blocks:
        off = max(1, int(round(height * SHADOW_PER_METER)))
        if SHADOW_MODE == "halo":
            shadow[max(0, r0 - off):r0 + bh + off, max(0, c0 - off):c0 + bw + off] = True
        else:
            shadow[r0 + off:r0 + bh + off, c0 + off:c0 + bw + off] = True
    shadow &= ~raised

    appearance_id = (labels // 2) % 2
    base = SYNTH_COLORS[appearance_id]
    pixels = base + rng.normal(0.0, SYNTH_NOISE, size=base.shape)
    pixels[shadow] *= SHADOW_FACTOR
    optical = np.clip(pixels, 0, 255).round().astype(np.float32)

    labels[shadow] = IGNORE_VALUE
    dsm = (SYNTH_BASE_ELEVATION + elevation).astype(np.float32)
    stacked = np.concatenate(
        [optical, dsm[..., None], labels[..., None].astype(np.float32)], axis=2
    )
    return GeoRaster(stacked, [OPTICAL] * 3 + [HEIGHT, LABEL], 0.09, tile_id)


def generate_synthetic_dataset(num_tiles: int, tile_size: int, rng: np.random.Generator) -> list[GeoRaster]:
    """Tiles with K=4 classes where pairs (0, 1) and (2, 3) look identical but differ in height.

    Heights are raw (unnormalised) DSM values; labels and heights are exact.
    """
    if tile_size < 64:
        raise PatchSizeError(f"synthetic tiles must be at least 64 pixels, got {tile_size}")
    return [_synthetic_tile(tile_size, rng, f"synth_{i:04d}") for i in range(num_tiles)]


# ---------------------------------------------------------------------------
# on-disk dataset layout

MANIFEST_NAME = "dataset.yaml"


def color_map_to_records(color_map: Sequence[ColorClass]) -> list[dict]:
    return [{"name": c.name, "color": list(c.color), "id": c.class_id} for c in color_map]


def color_map_from_records(records) -> tuple[ColorClass, ...]:
    return tuple(ColorClass(r["name"], tuple(int(v) for v in r["color"]), int(r["id"])) for r in records)


@dataclass
class DatasetManifest:
    root: Path
    splits: dict[str, list[str]]
    image_pattern: str
    dsm_pattern: str | None
    label_pattern: str | None
    color_map: tuple[ColorClass, ...]
    ignore_value: int = IGNORE_VALUE
    ground_resolution: float | None = None

    @property
    def num_classes(self) -> int:
        return num_classes_of(self.color_map, self.ignore_value)

    def paths(self, tile_id: str) -> tuple[Path, Path | None, Path | None]:
        def fmt(p):
            return None if p is None else self.root / p.format(id=tile_id)
        return fmt(self.image_pattern), fmt(self.dsm_pattern), fmt(self.label_pattern)

    def load(self, tile_id: str, with_labels: bool = True) -> GeoRaster:
        image, dsm, label = self.paths(tile_id)
        return load_tile(
            image, dsm, label if with_labels else None, self.color_map,
            ground_resolution=self.ground_resolution, tile_id=tile_id,
        )

    def load_split(self, split: str, with_labels: bool = True) -> list[GeoRaster]:
        if split not in self.splits:
            raise KeyError(f"split {split!r} not in manifest; have {sorted(self.splits)}")
        return [self.load(t, with_labels) for t in self.splits[split]]

    def to_dict(self) -> dict:
        return {
            "splits": self.splits,
            "paths": {"image": self.image_pattern, "dsm": self.dsm_pattern, "label": self.label_pattern},
            "color_map": color_map_to_records(self.color_map),
            "ignore_value": self.ignore_value,
            "ground_resolution": self.ground_resolution,
        }

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise FileNotFoundError(f"dataset manifest not found: {path}")
        d = yaml.safe_load(path.read_text())
        paths = d.get("paths", {})
        cmap = color_map_from_records(d["color_map"]) if "color_map" in d else isprs_color_map()
        return cls(
            root=path.parent,
            splits={k: [str(t) for t in v] for k, v in d["splits"].items()},
            image_pattern=paths["image"],
            dsm_pattern=paths.get("dsm"),
            label_pattern=paths.get("label"),
            color_map=cmap,
            ignore_value=int(d.get("ignore_value", IGNORE_VALUE)),
            ground_resolution=d.get("ground_resolution"),
        )


def write_tile(raster: GeoRaster, manifest: DatasetManifest) -> None:
    """Write a tile in the manifest layout: 8-bit optical, float32 DSM TIFF, colour labels."""
    image, dsm, label = manifest.paths(raster.tile_id)
    for path in (image, dsm, label):
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
    optical = np.clip(raster.optical, 0, 255).astype(np.uint8)
    Image.fromarray(optical if optical.shape[2] > 1 else optical[..., 0]).save(image)
    if dsm is not None and raster.has(HEIGHT):
        Image.fromarray(raster.height.astype(np.float32)).save(dsm)
    if label is not None and raster.has(LABEL):
        Image.fromarray(encode_labels(raster.labels, manifest.color_map)).save(label)
