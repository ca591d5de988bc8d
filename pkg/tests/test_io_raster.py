import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from labelfuse.errors import FormatError, InvalidInputError
from labelfuse.io.raster import (read_color_image, read_depth_image, read_label_image, read_normal_image,
                                 write_color_image, write_depth_image, write_label_image, write_normal_image)


def test_depth_millimetres_to_metres(tmp_path):
    raw = np.array([[1000, 0], [1, 65535]], np.uint16)
    cv2.imwrite(str(tmp_path / "d.png"), raw)
    d = read_depth_image(tmp_path / "d.png")
    assert d[0, 0] == 1.0 and d[0, 1] == 0.0
    assert d[1, 0] == 0.001 and d[1, 1] == 65.535


def test_depth_rejects_8_bit(tmp_path):
    cv2.imwrite(str(tmp_path / "d8.png"), np.full((4, 4), 7, np.uint8))
    with pytest.raises(FormatError):
        read_depth_image(tmp_path / "d8.png")


def test_depth_rejects_multichannel(tmp_path):
    cv2.imwrite(str(tmp_path / "d3.png"), np.zeros((4, 4, 3), np.uint16))
    with pytest.raises(FormatError):
        read_depth_image(tmp_path / "d3.png")


@settings(max_examples=20, deadline=None)
@given(hnp.arrays(np.uint16, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_depth_round_trip(tmp_path_factory, mm):
    path = tmp_path_factory.mktemp("d") / "d.png"
    write_depth_image(mm / 1000.0, path)
    assert np.array_equal(cv2.imread(str(path), cv2.IMREAD_UNCHANGED), mm)
    assert np.array_equal(read_depth_image(path), mm / 1000.0)


def test_depth_out_of_range_rejected(tmp_path):
    with pytest.raises(InvalidInputError):
        write_depth_image(np.full((2, 2), 70.0), tmp_path / "x.png")


def test_label_values(tmp_path):
    cv2.imwrite(str(tmp_path / "l8.png"), np.array([[3, 0]], np.uint8))
    lab = read_label_image(tmp_path / "l8.png")
    assert lab.dtype == np.uint16 and lab.tolist() == [[3, 0]]


@settings(max_examples=20, deadline=None)
@given(hnp.arrays(np.uint16, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_label_round_trip(tmp_path_factory, lab):
    path = tmp_path_factory.mktemp("l") / "l.png"
    write_label_image(lab, path)
    assert np.array_equal(read_label_image(path), lab)


def test_label_rejects_multichannel(tmp_path):
    cv2.imwrite(str(tmp_path / "l3.png"), np.zeros((4, 4, 3), np.uint8))
    with pytest.raises(FormatError):
        read_label_image(tmp_path / "l3.png")


def test_color_round_trip_keeps_rgb_order(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (5, 7, 3)).astype(np.uint8)
    img[0, 0] = (255, 0, 0)
    write_color_image(img, tmp_path / "c.png")
    assert np.array_equal(read_color_image(tmp_path / "c.png"), img)
    # on disk the first pixel is stored blue-green-red
    assert cv2.imread(str(tmp_path / "c.png"))[0, 0].tolist() == [0, 0, 255]


def test_normal_round_trip(tmp_path):
    n = np.zeros((3, 4, 3))
    n[..., 2] = -1.0
    write_normal_image(n, tmp_path / "n.npy")
    assert np.array_equal(read_normal_image(tmp_path / "n.npy"), n)


def test_missing_and_garbage_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_depth_image(tmp_path / "nope.png")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(FormatError):
        read_label_image(tmp_path / "junk.png")
