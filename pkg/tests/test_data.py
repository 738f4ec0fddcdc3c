import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from attnconv.data import (
    IMAGENET, AugmentationPolicy, BatchLoader, DatasetError, DatasetIndex, NormalizationStats, augment,
    batches, denormalize, hflip, index_dataset, load_image, normalize, sample_erase_box, sample_rng, write_ppm,
)
from conftest import make_tree


# -- indexing -------------------------------------------------------------------


def test_fixture_tree_counts(fixture_tree):
    idx = index_dataset(fixture_tree, "training")
    assert len(idx) == 6
    assert idx.class_counts() == [3, 3]
    assert idx.class_names == ["a", "b"]
    assert sum(idx.class_counts()) == len(idx)


def test_index_is_order_stable(fixture_tree):
    a, b = index_dataset(fixture_tree, "training"), index_dataset(fixture_tree, "training")
    assert a.entries == b.entries


def test_explicit_class_order(fixture_tree):
    idx = index_dataset(fixture_tree, "training", class_names=["b", "a"])
    assert idx.labels[0] == 0 and idx.entries[0][0].parent.name == "b"


def test_missing_split_and_class(fixture_tree):
    with pytest.raises(DatasetError, match="validation"):
        index_dataset(fixture_tree, "validation")
    with pytest.raises(DatasetError, match="zzz"):
        index_dataset(fixture_tree, "training", class_names=["a", "zzz"])


def test_empty_file_skipped(fixture_tree):
    (fixture_tree / "training" / "a" / "999.ppm").write_bytes(b"")
    idx = index_dataset(fixture_tree, "training")
    assert len(idx) == 6 and idx.skipped == 1


# -- decoding -------------------------------------------------------------------


def test_ppm_passthrough(tmp_path):
    img = np.zeros((3, 4, 4), np.float32)
    img[0, 0, 0] = 1.0
    write_ppm(tmp_path / "x.ppm", img)
    out = load_image(tmp_path / "x.ppm", 4)
    assert out.shape == (3, 4, 4) and out.dtype == np.float32
    np.testing.assert_array_equal(out[:, 0, 0], [1, 0, 0])


def test_checkerboard_upscale(tmp_path):
    board = np.array([[0, 1], [1, 0]], np.float32)
    write_ppm(tmp_path / "c.ppm", np.stack([board] * 3))
    out = load_image(tmp_path / "c.ppm", 4)[0]
    assert out[0, 0] == 0.0 and out[3, 3] == 0.0
    assert out[0, 3] == 1.0 and out[3, 0] == 1.0
    inner = out[1:3, 1:3]
    assert np.all((inner > 0) & (inner < 1))
    # half-pixel bilinear: the 4 interior samples sit a quarter pixel from the centre
    np.testing.assert_allclose(out[1, 1], 0.375, atol=1e-6)


@pytest.mark.parametrize("src", [3, 17, 64])
def test_solid_color_any_size(tmp_path, src):
    Image.new("RGB", (src, src + 5), (51, 102, 204)).save(tmp_path / "s.png")
    out = load_image(tmp_path / "s.png", 8)
    np.testing.assert_allclose(out, np.array([51, 102, 204])[:, None, None] / 255 * np.ones((3, 8, 8)), atol=1e-6)


def test_grayscale_replicated(tmp_path):
    Image.new("L", (5, 5), 128).save(tmp_path / "g.png")
    out = load_image(tmp_path / "g.png", 5)
    assert out.shape == (3, 5, 5)
    np.testing.assert_allclose(out, 128 / 255, atol=1e-6)


def test_undecodable_names_path(tmp_path):
    bad = tmp_path / "bad.jpg"
    bad.write_bytes(b"not an image")
    with pytest.raises(DatasetError, match="bad.jpg"):
        load_image(bad, 8)


# -- normalization --------------------------------------------------------------


def test_normalize_mean_gives_zero():
    t = np.broadcast_to(np.array(IMAGENET.mean, np.float32)[:, None, None], (3, 4, 4)).copy()
    np.testing.assert_allclose(normalize(t), 0.0, atol=1e-7)


def test_identity_stats(rng):
    t = rng.random((3, 5, 5)).astype(np.float32)
    np.testing.assert_array_equal(normalize(t, NormalizationStats((0, 0, 0), (1, 1, 1))), t)


def test_round_trip(rng):
    t = rng.random((2, 3, 5, 5)).astype(np.float32)
    np.testing.assert_allclose(denormalize(normalize(t)), t, atol=1e-6)


def test_stats_validation():
    with pytest.raises(ValueError):
        NormalizationStats((0, 0, 0), (1, 0, 1))


# -- augmentation ---------------------------------------------------------------


def test_identity_policy(rng):
    img = rng.random((3, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(augment(img, AugmentationPolicy.identity(), sample_rng(0, 0, 0)), img)


def test_forced_flip_twice_is_identity(rng):
    img = rng.random((3, 8, 8)).astype(np.float32)
    only_flip = AugmentationPolicy(0.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    once = augment(img, only_flip, sample_rng(0, 0, 1))
    np.testing.assert_array_equal(once, hflip(img))
    np.testing.assert_array_equal(augment(once, only_flip, sample_rng(0, 0, 1)), img)


def test_erase_area_bounds():
    policy = AugmentationPolicy()
    lo, hi = policy.erase_area
    g = np.random.default_rng(0)
    fractions = []
    for _ in range(1000):
        box = sample_erase_box(g, 64, 64, policy)
        assert box is not None
        top, left, eh, ew = box
        assert 0 <= top and top + eh <= 64 and 0 <= left and left + ew <= 64
        fractions.append(eh * ew / 64 ** 2)
    assert lo <= min(fractions) and max(fractions) <= hi


def test_forced_erase_fills_with_mean(rng):
    img = rng.random((3, 32, 32)).astype(np.float32) * 0.01
    only_erase = AugmentationPolicy(0.0, 0.0, 0.0, 0.0, 0.0, 1.0)
    out = augment(img, only_erase, sample_rng(3, 0, 0))
    changed = np.any(out != img, axis=0)
    frac = changed.mean()
    assert 0.02 <= frac <= 0.2
    np.testing.assert_allclose(out[:, changed], np.array(IMAGENET.mean)[:, None] * np.ones((3, changed.sum())),
                               atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**16), st.integers(0, 50))
def test_augment_shape_range_and_determinism(seed, index):
    img = np.random.default_rng(seed).random((3, 16, 16)).astype(np.float32)
    policy = AugmentationPolicy(erase_prob=0.5)
    a = augment(img, policy, sample_rng(seed, 1, index))
    b = augment(img, policy, sample_rng(seed, 1, index))
    assert a.shape == img.shape and np.all(np.isfinite(a))
    assert a.min() >= 0 and a.max() <= 1
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("bad", [dict(hflip_prob=1.5), dict(erase_area=(0.3, 0.1)), dict(rotation_degrees=np.inf),
                                 dict(erase_fill="noise")])
def test_policy_validation(bad):
    with pytest.raises(ValueError):
        AugmentationPolicy(**bad)


# -- batching -------------------------------------------------------------------


def test_batch_count_full_dataset():
    assert len(batches(DatasetIndex.synthetic(9866), 16)) == 617


def test_partial_batch(fixture_tree):
    idx = index_dataset(make_tree(fixture_tree.parent / "ten", per_class=5), "training")
    loader = batches(idx, 32, size=8)
    out = list(loader)
    assert len(loader) == 1 and len(out) == 1
    x, y = out[0]
    assert x.shape == (10, 3, 8, 8) and y.shape == (10,)


def test_shuffle_seeding():
    idx = DatasetIndex.synthetic(500)
    a = BatchLoader(idx, 16, shuffle=True, seed=3).order()
    assert np.array_equal(a, BatchLoader(idx, 16, shuffle=True, seed=3).order())
    assert not np.array_equal(a, BatchLoader(idx, 16, shuffle=True, seed=4).order())
    assert not np.array_equal(a, BatchLoader(idx, 16, shuffle=True, seed=3, epoch=1).order())
    assert sorted(a) == list(range(500))


def test_empty_index_rejected():
    with pytest.raises(DatasetError):
        batches(DatasetIndex.synthetic(0), 4)


def test_augmentation_independent_of_batching_and_workers(fixture_tree):
    idx = index_dataset(fixture_tree, "training")
    kw = dict(size=8, shuffle=True, seed=5, epoch=2, policy=AugmentationPolicy())
    a = BatchLoader(idx, 4, workers=1, **kw)
    b = BatchLoader(idx, 2, workers=3, **kw)
    ref = {i: a.sample(i) for i in range(len(idx))}
    got = np.concatenate([x for x, _ in b])
    order = b.order()
    for row, i in zip(got, order):
        np.testing.assert_array_equal(row, ref[int(i)])
