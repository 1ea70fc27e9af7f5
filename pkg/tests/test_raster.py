import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy import stats

from ganet.raster import (
    HEIGHT,
    IGNORE_VALUE,
    ISPRS_COLOR_MAP,
    LABEL,
    OPTICAL,
    SYNTHETIC_COLOR_MAP,
    DatasetManifest,
    DecodeError,
    DimensionError,
    GeoRaster,
    PatchSizeError,
    RoleError,
    WeightError,
    augment,
    compute_class_weights,
    decode_labels,
    encode_labels,
    flip_patch,
    generate_synthetic_dataset,
    isprs_color_map,
    load_tile,
    normalize_height,
    sample_patch,
    write_tile,
)


def make_raster(h, w, heights=None, labels=None):
    planes = [np.random.default_rng(0).uniform(0, 255, (h, w, 3))]
    roles = [OPTICAL] * 3
    if heights is not None:
        planes.append(np.asarray(heights, np.float32).reshape(h, w, 1))
        roles.append(HEIGHT)
    if labels is not None:
        planes.append(np.asarray(labels, np.float32).reshape(h, w, 1))
        roles.append(LABEL)
    return GeoRaster(np.concatenate(planes, 2).astype(np.float32), roles)


class FixedRng:
    """Stands in for a Generator when a test must force the flip branches."""

    def __init__(self, draws):
        self.draws = np.asarray(draws, float)

    def random(self, n):
        return self.draws[:n]


# ----------------------------------------------------------------- loading

def test_load_minimal_optical(tmp_path):
    Image.fromarray(np.array([[[10, 20, 30]]], np.uint8)).save(tmp_path / "a.png")
    r = load_tile(tmp_path / "a.png")
    assert r.pixels.shape == (1, 1, 3)
    assert r.channel_roles == [OPTICAL] * 3


def test_load_full_tile_and_constant_label(tmp_path):
    rgb = np.random.default_rng(1).integers(0, 255, (6, 5, 3), dtype=np.uint8)
    Image.fromarray(rgb).save(tmp_path / "img.png")
    Image.fromarray(np.full((6, 5), 261.5, np.float32)).save(tmp_path / "dsm.tif")
    Image.fromarray(np.tile(np.array([0, 0, 255], np.uint8), (6, 5, 1))).save(tmp_path / "lab.png")
    r = load_tile(tmp_path / "img.png", tmp_path / "dsm.tif", tmp_path / "lab.png", ISPRS_COLOR_MAP)
    assert r.channel_roles == [OPTICAL] * 3 + [HEIGHT, LABEL]
    np.testing.assert_array_equal(r.optical, rgb)
    assert np.all(r.height == np.float32(261.5))
    assert np.all(r.labels == 1)


def test_load_reports_dimension_mismatch(tmp_path):
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "img.png")
    Image.fromarray(np.zeros((4, 5), np.float32)).save(tmp_path / "dsm.tif")
    with pytest.raises(DimensionError):
        load_tile(tmp_path / "img.png", tmp_path / "dsm.tif")


def test_unknown_label_color_names_color(tmp_path):
    Image.fromarray(np.zeros((2, 2, 3), np.uint8)).save(tmp_path / "img.png")
    lab = np.zeros((2, 2, 3), np.uint8)
    lab[:] = (12, 34, 56)
    Image.fromarray(lab).save(tmp_path / "lab.png")
    with pytest.raises(DecodeError, match=r"\(12, 34, 56\)"):
        load_tile(tmp_path / "img.png", label_path=tmp_path / "lab.png")


@pytest.mark.parametrize("cmap", [ISPRS_COLOR_MAP, isprs_color_map(True), SYNTHETIC_COLOR_MAP])
def test_color_round_trip(cmap):
    ids = np.array(sorted({c.class_id for c in cmap}))
    labels = np.resize(ids, (5, 7))
    assert np.array_equal(decode_labels(encode_labels(labels, cmap), cmap), labels)


def test_clutter_excluded_maps_to_ignore():
    cmap = isprs_color_map(exclude_clutter=True)
    rgb = np.array([[[255, 0, 0], [255, 255, 0]]], np.uint8)
    assert decode_labels(rgb, cmap).tolist() == [[IGNORE_VALUE, 4]]


def test_roles_validated():
    with pytest.raises(RoleError):
        GeoRaster(np.zeros((2, 2, 2), np.float32), [OPTICAL])
    with pytest.raises(DimensionError):
        GeoRaster(np.zeros((0, 2, 1), np.float32), [OPTICAL])


# ----------------------------------------------------------- normalisation

def test_normalize_height_examples():
    r = normalize_height(make_raster(1, 3, [240.0, 250.0, 260.0]))
    np.testing.assert_allclose(r.height.ravel(), [0.0, 0.5, 1.0])
    r = normalize_height(make_raster(2, 2, [2, 3, 5, 7]))
    np.testing.assert_allclose(r.height.ravel(), [0.0, 0.2, 0.6, 1.0], atol=1e-7)
    r = normalize_height(make_raster(2, 2, [4.0] * 4))
    assert np.all(r.height == 0.0)


def test_normalize_height_requires_height():
    with pytest.raises(RoleError):
        normalize_height(make_raster(2, 2))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4), st.floats(-500, 500))
def test_normalize_height_range_and_shift_invariance(values, shift):
    # rasters are float32: a spread far below the shifted values' resolution cannot survive the shift
    spread = np.ptp(values)
    assume(spread == 0 or spread > 1e-2)
    a = normalize_height(make_raster(2, 2, values)).height
    b = normalize_height(make_raster(2, 2, np.asarray(values) + shift)).height
    assert a.min() >= 0 and a.max() <= 1
    # float32 storage rounds each value by up to half an ulp of the largest magnitude
    mag = max(np.abs(values).max(), np.abs(np.asarray(values) + shift).max())
    tol = 1e-6 if spread == 0 else 1e-6 + 4 * np.finfo(np.float32).eps * mag / spread
    np.testing.assert_allclose(a, b, atol=tol)


# ----------------------------------------------------------------- patches

def test_exact_fit_patch_at_origin():
    for size in (320, 512):
        r = GeoRaster(np.zeros((size, size, 3), np.float32), [OPTICAL] * 3)
        assert sample_patch(r, size, np.random.default_rng(0)).origin == (0, 0)


def test_patch_too_large():
    with pytest.raises(PatchSizeError):
        sample_patch(make_raster(8, 8), 9, np.random.default_rng(0))


def test_patch_origins_uniform():
    rng = np.random.default_rng(42)
    valid = 2500 - 320 + 1
    r = GeoRaster(np.zeros((2500, 2500, 1), np.float32), [OPTICAL])
    rows = np.array([sample_patch(r, 320, rng).origin[0] for _ in range(100_000)])
    assert rows.min() >= 0 and rows.max() <= 2180
    counts = np.bincount(rows * 20 // valid, minlength=20)
    assert stats.chisquare(counts).pvalue > 0.001


def test_patch_never_reads_outside():
    # sentinel padding around an inner tile: a crop of the inner tile must not see it
    inner = np.ones((20, 30, 1), np.float32)
    r = GeoRaster(inner, [OPTICAL])
    rng = np.random.default_rng(0)
    for _ in range(500):
        p = sample_patch(r, 7, rng)
        assert p.image.shape == (7, 7, 1)
        row, col = p.origin
        assert 0 <= row <= 13 and 0 <= col <= 23


def test_patch_channels_congruent():
    h, w = 12, 10
    labels = np.arange(h * w).reshape(h, w) % 4
    heights = np.arange(h * w, dtype=np.float32).reshape(h, w)
    r = make_raster(h, w, heights, labels)
    p = sample_patch(r, 5, np.random.default_rng(3))
    row, col = p.origin
    np.testing.assert_array_equal(p.labels, labels[row:row + 5, col:col + 5])
    np.testing.assert_array_equal(p.height, heights[row:row + 5, col:col + 5])
    np.testing.assert_array_equal(p.image, r.optical[row:row + 5, col:col + 5])


def patch_fixture():
    r = make_raster(6, 6, np.arange(36, dtype=np.float32), np.arange(36) % 3)
    return sample_patch(r, 4, np.random.default_rng(0))


def test_augment_branches():
    p = patch_fixture()
    same = augment(p, FixedRng([0.9, 0.9]))
    for a in ("image", "labels", "height"):
        np.testing.assert_array_equal(getattr(same, a), getattr(p, a))
    both = augment(p, FixedRng([0.1, 0.1]))
    np.testing.assert_array_equal(both.labels, np.rot90(p.labels, 2))
    np.testing.assert_array_equal(both.height, np.rot90(p.height, 2))
    np.testing.assert_array_equal(both.image, np.rot90(p.image, 2, axes=(0, 1)))
    back = augment(both, FixedRng([0.1, 0.1]))
    np.testing.assert_array_equal(back.image, p.image)


def test_augment_keeps_alignment():
    p = patch_fixture()
    for hv in [(True, False), (False, True), (True, True)]:
        q = flip_patch(p, *hv)
        # labels and heights were built from the same index grid
        np.testing.assert_array_equal(q.labels, q.height.astype(int) % 3)
    # the check is sensitive: flipping labels alone breaks it
    assert not np.array_equal(p.labels[:, ::-1], p.height.astype(int) % 3)


def test_augment_flip_rates():
    p = patch_fixture()
    rng = np.random.default_rng(0)
    hits = np.zeros(2)
    n = 4000
    for _ in range(n):
        q = augment(p, rng)
        which = [hv for hv in [(h, v) for h in (0, 1) for v in (0, 1)]
                 if np.array_equal(q.height, flip_patch(p, bool(hv[0]), bool(hv[1])).height)]
        assert len(which) == 1
        hits += which[0]
    np.testing.assert_allclose(hits / n, 0.5, atol=0.03)


# ------------------------------------------------------------- class weights

def test_class_weights_examples():
    eq = compute_class_weights([np.array([0, 1, 0, 1])])
    np.testing.assert_allclose(eq.weights, [1.0, 1.0])
    w = compute_class_weights([np.array([0] * 90 + [1] * 10)])
    np.testing.assert_allclose(w.weights, [5 / 9, 5.0])
    assert compute_class_weights([np.zeros(7, int)]).weights.tolist() == [1.0]


def test_class_weights_ignore_and_normalisation():
    labels = np.array([0, 0, 0, 1, 2, 2, 255, 255])
    w = compute_class_weights([labels], 255)
    freq = np.array([3, 1, 2]) / 6
    assert (freq * w.weights).sum() == pytest.approx(1.0)
    assert np.all(w.weights > 0)


def test_class_weights_missing_class():
    with pytest.raises(WeightError, match=r"\[1\]"):
        compute_class_weights([np.array([0, 2, 2])], num_classes=3)


# --------------------------------------------------------------- synthetic

def test_synthetic_count_and_shape():
    tiles = generate_synthetic_dataset(5, 64, np.random.default_rng(0))
    assert len(tiles) == 5
    assert all(t.shape == (64, 64) for t in tiles)
    with pytest.raises(PatchSizeError):
        generate_synthetic_dataset(1, 32, np.random.default_rng(0))


def test_synthetic_raised_classes_are_higher():
    for t in generate_synthetic_dataset(4, 96, np.random.default_rng(1)):
        lab, h = t.labels, t.height
        raised = np.isin(lab, [1, 3])
        flat = np.isin(lab, [0, 2])
        assert raised.any() and flat.any()
        assert h[raised].min() > h[flat].max()


def test_synthetic_pairs_share_appearance():
    tiles = generate_synthetic_dataset(12, 128, np.random.default_rng(2))
    rng = np.random.default_rng(0)
    for flat, raised in [(0, 1), (2, 3)]:
        for band in range(3):
            a = np.concatenate([t.optical[..., band][t.labels == flat] for t in tiles])
            b = np.concatenate([t.optical[..., band][t.labels == raised] for t in tiles])
            a = rng.choice(a, 10_000, replace=False)
            b = rng.choice(b, min(10_000, b.size), replace=False)
            assert stats.ks_2samp(a, b).pvalue > 0.01


def test_synthetic_deterministic():
    a = generate_synthetic_dataset(2, 64, np.random.default_rng(9))
    b = generate_synthetic_dataset(2, 64, np.random.default_rng(9))
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))


def test_manifest_round_trip(tmp_path):
    tiles = generate_synthetic_dataset(3, 64, np.random.default_rng(0))
    m = DatasetManifest(tmp_path, {"train": ["synth_0000", "synth_0001"], "test": ["synth_0002"]},
                        "tiles/{id}_image.png", "tiles/{id}_dsm.tif", "tiles/{id}_label.png", SYNTHETIC_COLOR_MAP)
    for t in tiles:
        write_tile(t, m)
    m.save()
    m2 = DatasetManifest.read(tmp_path)
    assert m2.num_classes == 4
    back = m2.load_split("test")[0]
    np.testing.assert_array_equal(back.labels, tiles[2].labels)
    np.testing.assert_array_equal(back.height, tiles[2].height)
    np.testing.assert_array_equal(back.optical, tiles[2].optical)
