import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vluu.data import (FullDataset, PartialDataset, PartialLabel, instance_normalize,
                       load_dataset, read_pgm, sample_tuple, save_dataset, write_pgm)
from vluu.errors import DataError


def _partial(j, n, k=3, size=6, seed=0, channels=1):
    rng = np.random.default_rng([seed, j])
    images = rng.uniform(0, 1, (n, channels, size, size))
    masks = rng.integers(0, 2, (n, size, size))
    return PartialDataset(j, images, masks, source=f"src{j}", num_classes=k)


def test_normalize_worked_example():
    out = instance_normalize(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    np.testing.assert_allclose(out.ravel(), [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4)


def test_normalize_constant_image_is_zero():
    assert np.all(instance_normalize(np.full((1, 3, 3), 7.0)) == 0)


def test_normalize_identity_on_standardized_input():
    x = instance_normalize(np.random.default_rng(0).standard_normal((2, 5, 5)))
    np.testing.assert_allclose(instance_normalize(x), x, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 6), st.integers(2, 6)),
              elements=st.floats(-1e3, 1e3)))
def test_normalize_statistics(x):
    if np.ptp(x) < 1e-3:
        return
    out = instance_normalize(x)
    assert abs(out.mean()) < 1e-6
    assert abs(out.std() - 1) < 1e-4


def test_partial_label_validation():
    with pytest.raises(DataError):
        PartialLabel(1, np.array([[0, 2]]))
    with pytest.raises(DataError):
        PartialLabel(0, np.zeros((2, 2)))


def test_dataset_validation():
    with pytest.raises(DataError):
        PartialDataset(1, np.zeros((0, 1, 4, 4)), np.zeros((0, 4, 4)))
    with pytest.raises(DataError):
        PartialDataset(4, np.zeros((1, 1, 4, 4)), np.zeros((1, 4, 4)), num_classes=3)
    with pytest.raises(DataError):
        FullDataset(np.zeros((1, 1, 2, 2)), np.full((1, 2, 2), 4), num_classes=3)


def test_sample_tuple_singletons_give_the_unique_tuple():
    ds = [_partial(j, 1) for j in (1, 2, 3)]
    tup = sample_tuple(ds, np.random.default_rng(0))
    assert [lab.class_index for _, lab in tup] == [1, 2, 3]
    for d, (im, lab) in zip(ds, tup):
        assert im is not None and np.array_equal(im, d.images[0])
        assert np.array_equal(lab.mask, d.masks[0])


def _index_of(d, image):
    return next(i for i in range(len(d)) if np.array_equal(d.images[i], image))


def test_sample_tuple_reaches_all_125_combinations():
    ds = [_partial(j, 5) for j in (1, 2, 3)]
    rng = np.random.default_rng(1)
    seen = set()
    for _ in range(3000):
        seen.add(tuple(_index_of(d, im) for d, (im, _) in zip(ds, sample_tuple(ds, rng))))
    assert len(seen) == 125


def test_sample_tuple_is_reproducible():
    ds = [_partial(j, 5) for j in (1, 2)]
    a = [sample_tuple(ds, np.random.default_rng(3)) for _ in range(1)]
    b = [sample_tuple(ds, np.random.default_rng(3)) for _ in range(1)]
    for (ia, _), (ib, _) in zip(a[0], b[0]):
        assert np.array_equal(ia, ib)


def test_sample_tuple_marginals_are_uniform():
    d = _partial(1, 4)
    rng = np.random.default_rng(2)
    counts = Counter(_index_of(d, sample_tuple([d], rng)[0][0]) for _ in range(100_000))
    for i in range(4):
        assert abs(counts[i] / 100_000 - 0.25) < 0.01


def test_sample_tuple_rejects_unordered():
    with pytest.raises(DataError):
        sample_tuple([_partial(2, 2), _partial(1, 2)], np.random.default_rng(0))


def test_pgm_round_trip_with_comment(tmp_path):
    pixels = np.random.default_rng(0).integers(0, 256, (5, 7)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", pixels)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), pixels)
    raw = (tmp_path / "a.pgm").read_bytes()
    (tmp_path / "b.pgm").write_bytes(raw.replace(b"P5\n", b"P5\n# made by hand\n", 1))
    assert np.array_equal(read_pgm(tmp_path / "b.pgm"), pixels)


def test_pgm_rejects_other_formats(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
    with pytest.raises(DataError):
        read_pgm(tmp_path / "x.pgm")


@pytest.mark.parametrize("channels", [1, 3])
def test_partial_round_trip(tmp_path, channels):
    d = _partial(2, 4, channels=channels)
    save_dataset(d, tmp_path, config={"seed": 5})
    back = load_dataset(tmp_path)
    assert isinstance(back, PartialDataset)
    assert back.class_index == 2 and back.source == "src2" and back.num_classes == 3
    assert np.array_equal(back.masks, d.masks)
    for a, b in zip(back.images, d.images):
        # quantization to 8 bits is affine up to rounding; normalization removes the affine part
        np.testing.assert_allclose(a, instance_normalize(b), atol=0.02)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"] == {"seed": 5}
    # a second save of the loaded data reproduces the manifest and masks exactly
    save_dataset(back, tmp_path / "again", config={"seed": 5})
    assert json.loads((tmp_path / "again" / "manifest.json").read_text()) == manifest
    assert np.array_equal(load_dataset(tmp_path / "again").masks, d.masks)


def test_full_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    d = FullDataset(rng.uniform(size=(3, 1, 5, 5)), rng.integers(0, 4, (3, 5, 5)), 3, "test")
    save_dataset(d, tmp_path)
    back = load_dataset(tmp_path)
    assert isinstance(back, FullDataset)
    assert np.array_equal(back.labels, d.labels)


def test_partial_mask_stored_as_class_id(tmp_path):
    d = _partial(3, 1)
    save_dataset(d, tmp_path)
    assert set(np.unique(read_pgm(tmp_path / "mask_0000.pgm"))) <= {0, 3}


def test_malformed_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(DataError, match="malformed"):
        load_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text(json.dumps({"k": 3}))
    with pytest.raises(DataError, match="missing keys"):
        load_dataset(tmp_path)
    with pytest.raises(DataError):
        load_dataset(tmp_path / "nowhere")


def test_size_mismatch(tmp_path):
    save_dataset(_partial(1, 2), tmp_path)
    write_pgm(tmp_path / "mask_0001.pgm", np.zeros((3, 3), np.uint8))
    with pytest.raises(DataError, match="size"):
        load_dataset(tmp_path)


def test_out_of_range_class_id(tmp_path):
    save_dataset(_partial(1, 2), tmp_path)
    bad = np.zeros((6, 6), np.uint8)
    bad[0, 0] = 9
    write_pgm(tmp_path / "mask_0000.pgm", bad)
    with pytest.raises(DataError, match="outside"):
        load_dataset(tmp_path)


def test_partial_mask_with_foreign_class(tmp_path):
    save_dataset(_partial(1, 2), tmp_path)
    bad = np.zeros((6, 6), np.uint8)
    bad[0, 0] = 2
    write_pgm(tmp_path / "mask_0000.pgm", bad)
    with pytest.raises(DataError, match="other ids"):
        load_dataset(tmp_path)
