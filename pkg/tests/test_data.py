import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from crackseg.data import (Dataset, Sample, batches, gen_synthetic, load_dataset,
                           load_image_grayscale, resize_bilinear, save_dataset, split, to_uint8)
from crackseg.errors import ConfigError, DataError

from oracles import resize_half_pixel


def write_rgb(path, rgb):
    Image.fromarray(np.array([[rgb]], dtype=np.uint8), mode="RGB").save(path)


def make_ds(n, size=4, prefix="s"):
    rng = np.random.default_rng(n)
    return Dataset([Sample(rng.uniform(0, 1, (size, size)).astype(np.float32),
                           np.zeros((size, size), np.float32), f"{prefix}{i:03d}") for i in range(n)])


# ------------------------------------------------------------------ loading

def test_white_and_red_luminance(tmp_path):
    write_rgb(tmp_path / "w.png", (255, 255, 255))
    write_rgb(tmp_path / "r.png", (255, 0, 0))
    assert load_image_grayscale(tmp_path / "w.png")[0, 0] == pytest.approx(1.0, abs=1e-6)
    assert load_image_grayscale(tmp_path / "r.png")[0, 0] == pytest.approx(0.299, abs=1e-6)


def test_gray_png_and_pgm_scale_by_255(tmp_path):
    arr = np.full((2, 3), 128, np.uint8)
    Image.fromarray(arr, mode="L").save(tmp_path / "g.png")
    Image.fromarray(arr, mode="L").save(tmp_path / "g.pgm")
    for name in ("g.png", "g.pgm"):
        grid = load_image_grayscale(tmp_path / name)
        assert grid.shape == (2, 3) and grid.dtype == np.float32
        np.testing.assert_allclose(grid, 128 / 255, atol=1e-7)


def test_sixteen_bit_png_scales_by_65535(tmp_path):
    arr = np.full((2, 2), 65535 // 2, np.uint16)
    Image.fromarray(arr).save(tmp_path / "d.png")
    np.testing.assert_allclose(load_image_grayscale(tmp_path / "d.png"), 32767 / 65535, atol=1e-6)


def test_unsupported_and_corrupt_files(tmp_path):
    Image.fromarray(np.zeros((2, 2), np.uint8), mode="L").save(tmp_path / "x.bmp")
    with pytest.raises(DataError, match="format"):
        load_image_grayscale(tmp_path / "x.bmp")
    (tmp_path / "bad.png").write_bytes(b"\x89PNG not really")
    with pytest.raises(DataError, match="bad.png"):
        load_image_grayscale(tmp_path / "bad.png")
    with pytest.raises(DataError, match="missing.png"):
        load_image_grayscale(tmp_path / "missing.png")


# ------------------------------------------------------------------ resize

def test_resize_same_size_is_identity():
    g = np.random.default_rng(0).uniform(0, 1, (5, 7))
    np.testing.assert_allclose(resize_bilinear(g, 5, 7), g, atol=1e-6)


def test_resize_constant_grid():
    np.testing.assert_allclose(resize_bilinear(np.full((3, 4), 0.3), 9, 2), 0.3, atol=1e-6)


def test_resize_half_pixel_fixture():
    g = np.array([[0.0, 1.0], [0.0, 1.0]])
    out = resize_bilinear(g, 2, 4)
    np.testing.assert_allclose(out, resize_half_pixel(g, 2, 4), atol=1e-6)
    # centres at -0.25, 0.25, 0.75, 1.25 in source columns, clamped
    np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0], atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 6), st.integers(2, 6)),
                  elements=st.floats(0, 1)),
       st.integers(1, 9), st.integers(1, 9))
def test_resize_matches_oracle_and_stays_in_range(g, oh, ow):
    out = resize_bilinear(g, oh, ow)
    np.testing.assert_allclose(out, resize_half_pixel(g, oh, ow), atol=1e-6)
    assert out.min() >= g.min() - 1e-6 and out.max() <= g.max() + 1e-6


def test_resize_errors():
    with pytest.raises(DataError):
        resize_bilinear(np.ones((4, 4)), 0, 3)
    with pytest.raises(DataError):
        resize_bilinear(np.ones((1, 4)), 2, 2)


# --------------------------------------------------------- dataset on disk

def test_load_dataset_sorted_by_stem(tmp_path):
    ds = gen_synthetic(3, size=16, seed=1)
    save_dataset(Dataset(list(reversed(ds.samples))), tmp_path)
    loaded = load_dataset(tmp_path, size=16)
    assert loaded.ids == ["00000", "00001", "00002"]
    for a, b in zip(loaded, ds):
        np.testing.assert_allclose(a.image, b.image, atol=0.5 / 255 + 1e-6)
        np.testing.assert_array_equal(a.mask, b.mask)


def test_missing_mask_names_the_stem(tmp_path):
    save_dataset(gen_synthetic(2, size=16), tmp_path)
    (tmp_path / "masks" / "00001.png").unlink()
    with pytest.raises(DataError, match="00001"):
        load_dataset(tmp_path, size=16)


def test_empty_directory_rejected(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    with pytest.raises(DataError):
        load_dataset(tmp_path)


def test_resized_masks_stay_continuous(tmp_path):
    ds = gen_synthetic(1, size=64, seed=3)
    save_dataset(ds, tmp_path)
    mask = load_dataset(tmp_path, size=24)[0].mask
    assert mask.min() == 0.0 and mask.max() <= 1.0
    assert ((mask > 0) & (mask < 1)).any()


def test_preprocessing_idempotent_on_gray_128(tmp_path):
    rng = np.random.default_rng(4)
    img = rng.integers(0, 256, (128, 128)).astype(np.uint8)
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    Image.fromarray(img, mode="L").save(tmp_path / "images" / "a.pgm")
    Image.fromarray(img, mode="L").save(tmp_path / "masks" / "a.png")
    s = load_dataset(tmp_path, size=128)[0]
    np.testing.assert_allclose(s.image, img / 255.0, atol=1e-6)


def test_to_uint8_rounds_half_up():
    assert to_uint8(np.array([0.0, 0.5 / 255, 1.5 / 255, 1.0])).tolist() == [0, 1, 2, 255]


# --------------------------------------------------------------- types

def test_sample_invariants():
    with pytest.raises(DataError):
        Sample(np.zeros((2, 2)), np.zeros((2, 3)), "a")
    with pytest.raises(DataError):
        Sample(np.full((2, 2), 1.5), np.zeros((2, 2)), "a")


def test_dataset_rejects_duplicate_ids():
    s = make_ds(1)[0]
    with pytest.raises(DataError):
        Dataset([s, s])


# ------------------------------------------------------------- split

def test_split_all_train():
    tr, va, te = split(make_ds(7), (1, 0, 0), seed=0)
    assert (len(tr), len(va), len(te)) == (7, 0, 0)


def test_split_is_deterministic():
    ds = make_ds(20)
    a = [d.ids for d in split(ds, seed=5)]
    b = [d.ids for d in split(ds, seed=5)]
    assert a == b and a != [d.ids for d in split(ds, seed=6)]


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 60), st.integers(0, 10_000),
       st.tuples(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8)))
def test_split_partitions_ids(n, seed, weights):
    ratios = tuple(w / sum(weights) for w in weights)
    ds = make_ds(n)
    parts = split(ds, ratios, seed)
    ids = [set(p.ids) for p in parts]
    assert set.union(*ids) == set(ds.ids)
    assert sum(len(s) for s in ids) == n
    assert parts[0].split == "train" and parts[2].split == "test"


def test_split_errors():
    with pytest.raises(ConfigError):
        split(make_ds(5), (0.5, 0.5, 0.5))
    with pytest.raises(DataError):
        split(make_ds(2), (0.4, 0.3, 0.3))


def test_analog_split_sizes():
    sizes = [len(p) for p in split(make_ds(64), (0.75, 0.125, 0.125), seed=0)]
    assert sizes == [48, 8, 8]


# ------------------------------------------------------------- batches

def test_batch_sizes():
    assert [len(b.ids) for b in batches(make_ds(10), 4, seed=0)] == [4, 4, 2]
    assert batches(Dataset([]), 4) == []
    with pytest.raises(ConfigError):
        batches(make_ds(3), 0)


def test_batch_order_per_epoch():
    ds = make_ds(16)
    e0 = [i for b in batches(ds, 4, seed=3, epoch=0) for i in b.ids]
    e1 = [i for b in batches(ds, 4, seed=3, epoch=1) for i in b.ids]
    assert e0 == [i for b in batches(ds, 4, seed=3, epoch=0) for i in b.ids]
    assert e0 != e1


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 12), st.integers(0, 1000), st.integers(0, 50))
def test_batches_cover_each_id_once(n, bs, seed, epoch):
    ds = make_ds(n, size=2)
    got = batches(ds, bs, seed, epoch)
    ids = [i for b in got for i in b.ids]
    assert sorted(ids) == sorted(ds.ids)
    for b in got:
        assert b.images.shape == (len(b.ids), 1, 2, 2) == b.masks.shape


# ----------------------------------------------------------- synthetic

def test_synthetic_empty():
    assert len(gen_synthetic(0)) == 0


def test_synthetic_is_deterministic():
    a, b = gen_synthetic(4, 32, seed=9), gen_synthetic(4, 32, seed=9)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()
    assert gen_synthetic(1, 32, seed=10)[0].image.tobytes() != a[0].image.tobytes()


def test_synthetic_sample_depends_only_on_seed_and_index():
    assert gen_synthetic(5, 32, seed=2)[3].image.tobytes() == gen_synthetic(4, 32, seed=2)[3].image.tobytes()


def test_synthetic_mask_fraction_and_intensity_bounds():
    # bounds measured over 400 samples before being frozen here
    for s in gen_synthetic(100, 64, seed=0):
        assert set(np.unique(s.mask)) <= {0.0, 1.0}
        frac = s.mask.mean()
        assert 0.005 < frac < 0.15
        on, off = s.image[s.mask > 0], s.image[s.mask == 0]
        assert on.max() <= 0.2 and off.min() >= 0.5
        assert abs(off.mean() - 0.7) < 0.1 and abs(on.mean() - 0.15) < 0.02


def test_synthetic_validation():
    with pytest.raises(ConfigError):
        gen_synthetic(-1)
    with pytest.raises(ConfigError):
        gen_synthetic(1, size=4)
