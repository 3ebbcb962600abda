import struct

import numpy as np
import pytest

from krawdetect.errors import (
    ConsistencyError,
    FormatError,
    RangeError,
    TruncationError,
)
from krawdetect.image_io import (
    Dataset,
    Image,
    LabeledExample,
    load_idx_pair,
    load_pgm,
    rgb_to_gray,
    save_idx_pair,
    save_pgm,
)


def write_idx_pair(tmp_path, pixels, labels, rows=4, cols=4,
                   image_magic=2051, label_magic=2049, header_count=None,
                   truncate=0):
    count = len(labels) if header_count is None else header_count
    images_path = tmp_path / "images-idx3-ubyte"
    labels_path = tmp_path / "labels-idx1-ubyte"
    payload = struct.pack(">iiii", image_magic, count, rows, cols) + bytes(pixels)
    if truncate:
        payload = payload[:-truncate]
    images_path.write_bytes(payload)
    labels_path.write_bytes(struct.pack(">ii", label_magic, len(labels)) + bytes(labels))
    return str(images_path), str(labels_path)


def test_load_idx_pair_hand_assembled(tmp_path):
    # Two 4x4 images: first alternates 0/255, second counts upward.
    first = [0, 255] * 8
    second = list(range(16))
    ip, lp = write_idx_pair(tmp_path, first + second, [3, 7])
    ds = load_idx_pair(ip, lp)
    assert len(ds) == 2
    assert ds.width == 4 and ds.height == 4
    np.testing.assert_array_equal(ds.examples[0].image.pixels[:2], [0.0, 1.0])
    np.testing.assert_allclose(ds.examples[1].image.pixels,
                               np.arange(16) / 255.0)
    assert [ex.label for ex in ds.examples] == [3, 7]


def test_load_idx_wrong_magic(tmp_path):
    ip, lp = write_idx_pair(tmp_path, [0] * 16, [1], image_magic=2049)
    with pytest.raises(FormatError):
        load_idx_pair(ip, lp)


def test_load_idx_count_mismatch(tmp_path):
    ip, lp = write_idx_pair(tmp_path, [0] * 48, [1, 2], header_count=3)
    with pytest.raises(ConsistencyError):
        load_idx_pair(ip, lp)


def test_load_idx_truncated_payload(tmp_path):
    ip, lp = write_idx_pair(tmp_path, [0] * 32, [1, 2], truncate=5)
    with pytest.raises(TruncationError):
        load_idx_pair(ip, lp)


def test_idx_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(3)
    ip, lp = write_idx_pair(tmp_path, list(rng.integers(0, 256, 64)), [1, 2, 3, 4])
    ds = load_idx_pair(ip, lp)
    out_i = str(tmp_path / "out-images")
    out_l = str(tmp_path / "out-labels")
    save_idx_pair(ds, out_i, out_l)
    again = load_idx_pair(out_i, out_l)
    for a, b in zip(ds.examples, again.examples):
        np.testing.assert_array_equal(a.image.pixels, b.image.pixels)
        assert a.label == b.label


def test_loading_is_deterministic(tmp_path):
    ip, lp = write_idx_pair(tmp_path, list(range(16)) * 2, [0, 1])
    a = load_idx_pair(ip, lp)
    b = load_idx_pair(ip, lp)
    for x, y in zip(a.examples, b.examples):
        np.testing.assert_array_equal(x.image.pixels, y.image.pixels)


def test_loaded_pixels_in_unit_interval(tmp_path):
    ip, lp = write_idx_pair(tmp_path, list(range(240, 256)) + [0] * 16, [1, 2])
    ds = load_idx_pair(ip, lp)
    for ex in ds.examples:
        assert ex.image.is_content()
        assert ex.image.pixels.max() <= 1.0


def test_load_pgm(tmp_path):
    path = tmp_path / "img.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
    img = load_pgm(str(path))
    np.testing.assert_allclose(img.pixels, [0.0, 128 / 255, 1.0, 64 / 255])


def test_load_pgm_rejects_ascii_variant(tmp_path):
    path = tmp_path / "img.pgm"
    path.write_bytes(b"P2\n2 2\n255\n0 1 2 3\n")
    with pytest.raises(FormatError):
        load_pgm(str(path))


@pytest.mark.parametrize("maxval", [0, 65535])
def test_load_pgm_rejects_bad_maxval(tmp_path, maxval):
    path = tmp_path / "img.pgm"
    path.write_bytes(f"P5\n2 2\n{maxval}\n".encode() + bytes(4))
    with pytest.raises(RangeError):
        load_pgm(str(path))


def test_load_pgm_scales_by_maxval(tmp_path):
    path = tmp_path / "img.pgm"
    path.write_bytes(b"P5\n# comment\n2 2\n100\n" + bytes([0, 50, 100, 25]))
    img = load_pgm(str(path))
    np.testing.assert_allclose(img.pixels, [0.0, 0.5, 1.0, 0.25])


def test_pgm_round_trip(tmp_path):
    img = Image(width=3, height=2, pixels=np.array([0, 51, 102, 153, 204, 255]) / 255.0)
    path = str(tmp_path / "out.pgm")
    save_pgm(img, path)
    again = load_pgm(path)
    np.testing.assert_array_equal(img.pixels, again.pixels)


def test_rgb_to_gray():
    assert rgb_to_gray(0.0, 0.0, 0.0) == 0.0
    assert rgb_to_gray(1.0, 1.0, 1.0) == pytest.approx(1.0)
    assert rgb_to_gray(0.5, 0.5, 0.5) == pytest.approx(0.5)
    with pytest.raises(RangeError):
        rgb_to_gray(1.5, 0.0, 0.0)


def test_image_validation():
    with pytest.raises(RangeError):
        Image(width=1, height=4, pixels=np.zeros(4))
    with pytest.raises(RangeError):
        Image(width=2, height=2, pixels=np.zeros(5))
    with pytest.raises(RangeError):
        Image(width=2, height=2, pixels=np.array([0.0, 0.5, 2.0, 0.1]))
    # Signed perturbation rasters are allowed up to magnitude 1.
    Image(width=2, height=2, pixels=np.array([-1.0, 1.0, -0.5, 0.0]))


def test_dataset_validation():
    img = Image(width=2, height=2, pixels=np.zeros(4))
    with pytest.raises(RangeError):
        Dataset([LabeledExample(img, 5)], num_classes=2)
    other = Image(width=3, height=2, pixels=np.zeros(6))
    with pytest.raises(ConsistencyError):
        Dataset([LabeledExample(img, 0), LabeledExample(other, 1)], num_classes=2)
