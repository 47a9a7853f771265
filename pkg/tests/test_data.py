import itertools

import numpy as np
import pytest
from PIL import Image

from dcn.data import (
    DatasetSplit,
    format_split_manifest,
    load_directory_dataset,
    make_synthetic_dataset,
    read_split_manifest,
    split_classes,
    split_sizes,
    write_split_manifest,
)


def _write_image_tree(root, classes=3, per_class=10, size=12, seed=0):
    rng = np.random.default_rng(seed)
    for c in range(classes):
        d = root / f"cls{c}"
        d.mkdir(parents=True)
        for k in range(per_class):
            arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
            ext = "png" if k % 2 == 0 else "jpg"
            Image.fromarray(arr).save(d / f"img{k:02d}.{ext}")


def test_load_directory_counts(tmp_path):
    _write_image_tree(tmp_path)
    ds = load_directory_dataset(tmp_path, image_size=8)
    assert len(ds) == 30
    assert ds.num_classes == 3
    assert ds.images.shape == (30, 3, 8, 8)
    assert ds.class_names == ["cls0", "cls1", "cls2"]


def test_load_directory_is_stable(tmp_path):
    _write_image_tree(tmp_path)
    a = load_directory_dataset(tmp_path, 8)
    b = load_directory_dataset(tmp_path, 8)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.source_ids == b.source_ids
    np.testing.assert_array_equal(a.images, b.images)


def test_load_directory_is_mean_centred(tmp_path):
    _write_image_tree(tmp_path)
    ds = load_directory_dataset(tmp_path, 8)
    assert np.all(np.abs(ds.images.astype(np.float64).mean(axis=(0, 2, 3))) < 1e-5)


def test_load_directory_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_directory_dataset(tmp_path / "missing", 8)
    with pytest.raises(ValueError, match="no class folders"):
        load_directory_dataset(tmp_path, 8)
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError, match="no images"):
        load_directory_dataset(tmp_path, 8)


def test_load_directory_reports_bad_file(tmp_path):
    _write_image_tree(tmp_path, classes=2, per_class=2)
    (tmp_path / "cls1" / "broken.png").write_bytes(b"not an image")
    with pytest.raises(ValueError, match="broken.png"):
        load_directory_dataset(tmp_path, 8)


def test_synthetic_difficulty_zero_identical_within_class():
    ds = make_synthetic_dataset(10, 20, 32, 0.0, seed=1)
    assert len(ds) == 200
    for c in range(10):
        imgs = ds.images[ds.indices_by_class[c]]
        assert np.all(imgs == imgs[0])


def test_synthetic_is_bit_identical():
    a = make_synthetic_dataset(10, 20, 32, 0.3, seed=1)
    b = make_synthetic_dataset(10, 20, 32, 0.3, seed=1)
    assert a.images.tobytes() == b.images.tobytes()


def test_synthetic_within_class_closer_than_between():
    ds = make_synthetic_dataset(10, 20, 32, 0.3, seed=1)
    flat = ds.images.reshape(len(ds), -1).astype(np.float64)
    within, between = [], []
    for i, j in itertools.combinations(range(len(ds)), 2):
        d = np.linalg.norm(flat[i] - flat[j])
        (within if ds.labels[i] == ds.labels[j] else between).append(d)
    assert np.mean(within) < np.mean(between)


def test_synthetic_rejects_bad_counts():
    with pytest.raises(ValueError):
        make_synthetic_dataset(1, 20, 32, 0.1, 0)
    with pytest.raises(ValueError):
        make_synthetic_dataset(5, 0, 32, 0.1, 0)


@pytest.mark.parametrize(
    "n, fractions, expected",
    [
        (100, (0.64, 0.16, 0.20), [64, 16, 20]),
        (10, (0.8, 0.1, 0.1), [8, 1, 1]),
        (20, (0.4, 0.1, 0.5), [8, 2, 10]),
        (7, (0.5, 0.25, 0.25), [3, 2, 2]),
    ],
)
def test_split_sizes(n, fractions, expected):
    assert split_sizes(n, fractions) == expected


def test_split_classes_disjoint_and_deterministic():
    a = split_classes(100, (0.64, 0.16, 0.2), seed=3)
    b = split_classes(100, (0.64, 0.16, 0.2), seed=3)
    assert a == b
    assert (len(a.meta_train), len(a.meta_val), len(a.meta_test)) == (64, 16, 20)
    assert not set(a.meta_train) & set(a.meta_val)
    assert not set(a.meta_val) & set(a.meta_test)
    assert not set(a.meta_train) & set(a.meta_test)
    assert set(a.meta_train) | set(a.meta_val) | set(a.meta_test) == set(range(100))


def test_split_rejects_empty_part():
    with pytest.raises(ValueError, match="empty split"):
        split_classes(3, (0.9, 0.05, 0.05), seed=0)
    with pytest.raises(ValueError, match="sum to 1"):
        split_classes(10, (0.5, 0.2, 0.2), seed=0)


def test_split_requires_disjoint_sets():
    with pytest.raises(ValueError):
        DatasetSplit((0, 1), (1,), (2,))


def test_manifest_round_trip_is_bit_exact(tmp_path):
    names = [f"n{i:02d}" for i in range(12)]
    split = split_classes(12, (0.5, 0.25, 0.25), seed=4)
    p = tmp_path / "split.txt"
    write_split_manifest(split, names, p)
    back = read_split_manifest(p, names)
    assert back == split
    assert format_split_manifest(back, names) == p.read_text()
    assert p.read_text().startswith("[meta_train]\n")


def test_recentered_uses_given_classes_only():
    ds = make_synthetic_dataset(6, 4, 8, 0.2, seed=0)
    cen = ds.recentered([0, 1])
    sub = cen.images[np.isin(cen.labels, [0, 1])].astype(np.float64)
    assert np.all(np.abs(sub.mean(axis=(0, 2, 3))) < 1e-5)
    # adding back the stored mean recovers the raw pixels
    raw_a = ds.images + ds.channel_mean[None, :, None, None]
    raw_b = cen.images + cen.channel_mean[None, :, None, None]
    np.testing.assert_allclose(raw_a, raw_b, atol=1e-6)
