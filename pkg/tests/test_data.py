import struct

import numpy as np
import pytest

from saprlab.data import SHAPE_KINDS, generate_synthetic_dataset, load_idx_dataset, resize_nearest, write_idx
from saprlab.errors import ConfigError, FormatError


def test_counts_and_balance():
    ds = generate_synthetic_dataset(num_classes=8, per_class=128, seed=0)
    assert len(ds) == 1024
    assert np.bincount(ds.labels).tolist() == [128] * 8
    assert ds.images.shape == (1024, 3, 32, 32)


def test_split_is_stratified_and_disjoint():
    ds = generate_synthetic_dataset(num_classes=4, per_class=20, seed=1)
    assert len(ds.train) + len(ds.test) == 80
    assert np.bincount(ds.test.labels).tolist() == [5] * 4


def test_same_seed_is_byte_identical():
    a = generate_synthetic_dataset(num_classes=3, per_class=10, seed=5)
    b = generate_synthetic_dataset(num_classes=3, per_class=10, seed=5)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    c = generate_synthetic_dataset(num_classes=3, per_class=10, seed=6)
    assert a.images.tobytes() != c.images.tobytes()


def test_pixels_are_integers_in_range():
    ds = generate_synthetic_dataset(num_classes=len(SHAPE_KINDS), per_class=4, seed=2)
    assert ds.images.min() >= 0 and ds.images.max() <= 255
    assert np.array_equal(ds.images, np.rint(ds.images))


@pytest.mark.parametrize("kwargs", [{"num_classes": 1}, {"num_classes": 14}, {"per_class": 0},
                                    {"contrast": (90.0, 40.0)}])
def test_invalid_arguments(kwargs):
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(**kwargs)


# -- IDX ----------------------------------------------------------------------


def _hand_built_fixture(tmp_path):
    # 4 images of 2x2; pixel (i, r, c) = 10*i + 2*r + c
    pixels = bytes(10 * i + 2 * r + c for i in range(4) for r in range(2) for c in range(2))
    images = struct.pack(">IIII", 0x00000803, 4, 2, 2) + pixels
    labels = struct.pack(">II", 0x00000801, 4) + bytes([3, 0, 2, 1])
    (tmp_path / "img.idx").write_bytes(images)
    (tmp_path / "lbl.idx").write_bytes(labels)
    return tmp_path / "img.idx", tmp_path / "lbl.idx"


def test_hand_built_idx_fixture(tmp_path):
    img, lbl = _hand_built_fixture(tmp_path)
    ds = load_idx_dataset(img, lbl, image_size=2, channels=1, test_fraction=0.0)
    assert ds.labels.tolist() == [3, 0, 2, 1]
    assert ds.images.shape == (4, 1, 2, 2)
    assert ds.images[2, 0].tolist() == [[20.0, 21.0], [22.0, 23.0]]
    assert ds.num_classes == 4


def test_idx_is_resized_and_channels_replicated(tmp_path):
    img, lbl = _hand_built_fixture(tmp_path)
    ds = load_idx_dataset(img, lbl, image_size=4, channels=3, test_fraction=0.0)
    assert ds.images.shape == (4, 3, 4, 4)
    assert ds.images[1, 2].tolist() == [[10, 10, 11, 11], [10, 10, 11, 11], [12, 12, 13, 13], [12, 12, 13, 13]]
    assert np.array_equal(ds.images[:, 0], ds.images[:, 1])


def test_write_idx_round_trip(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, size=(5, 7, 7), dtype=np.uint8)
    write_idx(tmp_path / "i", arr)
    write_idx(tmp_path / "l", np.arange(5, dtype=np.uint8))
    ds = load_idx_dataset(tmp_path / "i", tmp_path / "l", image_size=7, channels=1, test_fraction=0.0)
    assert np.array_equal(ds.images[:, 0], arr)


def test_wrong_magic(tmp_path):
    _, lbl = _hand_built_fixture(tmp_path)
    with pytest.raises(FormatError) as err:
        load_idx_dataset(lbl, lbl)
    assert err.value.offset == 0


def test_empty_file(tmp_path):
    (tmp_path / "empty").write_bytes(b"")
    _, lbl = _hand_built_fixture(tmp_path)
    with pytest.raises(FormatError):
        load_idx_dataset(tmp_path / "empty", lbl)


def test_truncated_payload_reports_offset(tmp_path):
    img, lbl = _hand_built_fixture(tmp_path)
    raw = img.read_bytes()
    img.write_bytes(raw[:-3])
    with pytest.raises(FormatError) as err:
        load_idx_dataset(img, lbl)
    assert err.value.offset == len(raw) - 3
    assert "byte" in str(err.value)


def test_resize_nearest_identity():
    x = np.arange(16.0).reshape(1, 4, 4)
    assert np.array_equal(resize_nearest(x, 4), x)
    assert resize_nearest(x, 2).tolist() == [[[0.0, 2.0], [8.0, 10.0]]]
