import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labelfuse.errors import InvalidInputError, ParseError, UnsupportedModelError
from labelfuse.geometry import Intrinsics, LabeledPointCloud, RigidPose
from labelfuse.io.sfm import (SfmModel, SfmView, format_sfm_cameras, format_sfm_images, format_sfm_points3d,
                              parse_sfm_cameras, parse_sfm_images, parse_sfm_points3d, quaternion_to_rotation,
                              read_sfm_model, rotation_to_quaternion, write_sfm_model)

CAMERAS = """\
# Camera list with one line of data per camera:
#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]
1 PINHOLE 640 480 500 500 320 240

2 SIMPLE_PINHOLE 640 480 500 320 240
"""

IMAGES = """\
# Image list with two lines of data per image:
1 1 0 0 0 0 0 0 1 a.png
10.0 20.0 -1

2 0.7071067811865476 0 0 0.7071067811865476 1 2 3 2 b c.png

"""


def test_pinhole_and_simple_pinhole():
    cams = parse_sfm_cameras(CAMERAS)
    assert cams[1] == Intrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
    assert cams[2].fx == cams[2].fy == 500.0


def test_unsupported_camera_model_named():
    with pytest.raises(UnsupportedModelError) as err:
        parse_sfm_cameras("# c\n1 RADIAL 640 480 500 320 240 0.1 0.2\n", "cameras.txt")
    assert "RADIAL" in str(err.value)
    assert err.value.line == 2


@pytest.mark.parametrize("text,line", [
    ("1 PINHOLE 640 480 500 500 320\n", 1),
    ("\n\n1 PINHOLE 640 x 500 500 320 240\n", 3),
    ("1 PINHOLE\n", 1),
    ("1 PINHOLE 640 480 500 500 700 240\n", 1),
])
def test_malformed_camera_line_numbers(text, line):
    with pytest.raises(ParseError) as err:
        parse_sfm_cameras(text, "cams")
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_images_identity_and_quarter_turn():
    views = parse_sfm_images(IMAGES)
    assert views[1].pose.allclose(RigidPose(), atol=0)
    assert views[1].name == "a.png" and views[1].camera_id == 1
    r = views[2].pose.rotation
    assert np.abs(r @ [1, 0, 0] - [0, 1, 0]).max() < 1e-9
    assert np.array_equal(views[2].pose.translation, [1, 2, 3])
    assert views[2].name == "b c.png"


def test_images_non_unit_quaternion():
    with pytest.raises(ParseError) as err:
        parse_sfm_images("# x\n1 1.01 0 0 0 0 0 0 1 a.png\n\n")
    assert err.value.line == 2


def test_images_tolerates_tiny_quaternion_error():
    views = parse_sfm_images("1 1.0005 0 0 0 0 0 0 1 a.png\n\n")
    assert views[1].pose.allclose(RigidPose(), atol=1e-12)


def test_images_missing_second_line():
    with pytest.raises(ParseError) as err:
        parse_sfm_images("1 1 0 0 0 0 0 0 1 a.png\n2 1 0 0 0 0 0 0 1 b.png\n")
    assert err.value.line == 2


def test_images_round_trip_10_random_quaternions():
    rng = np.random.default_rng(0)
    views = {}
    for i in range(10):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        views[i + 1] = SfmView(RigidPose(quaternion_to_rotation(*q), rng.normal(size=3)), 1, f"img{i}.png")
    back = parse_sfm_images(format_sfm_images(views))
    assert sorted(back) == sorted(views)
    for i in views:
        assert np.abs(back[i].pose.rotation - views[i].pose.rotation).max() < 1e-9
        assert np.abs(back[i].pose.translation - views[i].pose.translation).max() < 1e-9
        assert back[i].name == views[i].name


@settings(max_examples=50)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1))
def test_quaternion_conversion_inverse(q):
    q = np.array(q) / np.linalg.norm(q)
    r = quaternion_to_rotation(*q)
    back = rotation_to_quaternion(r)
    assert back[0] >= 0
    assert np.allclose(back, q if q[0] >= 0 else -q, atol=1e-9) or np.isclose(q[0], 0, atol=1e-9)
    assert np.abs(quaternion_to_rotation(*back) - r).max() < 1e-9


def test_points3d_examples():
    assert len(parse_sfm_points3d("# only a comment\n")) == 0
    cloud = parse_sfm_points3d("7 1 2 3 255 0 0 0.5\n")
    assert np.array_equal(cloud.positions, [[1, 2, 3]])
    assert np.array_equal(cloud.colors, [[255, 0, 0]])
    assert np.array_equal(cloud.labels, [0])


def test_points3d_with_track_and_errors():
    cloud = parse_sfm_points3d("1 0 0 0 1 2 3 0.1 4 5 6 7\n")
    assert len(cloud) == 1
    with pytest.raises(ParseError) as err:
        parse_sfm_points3d("1 0 0 0 1 2 3 0.1\n2 0 0 zero 1 2 3 0.1\n")
    assert err.value.line == 2
    with pytest.raises(ParseError):
        parse_sfm_points3d("1 0 0 0 1 2 3 0.1 4\n")


def test_points3d_round_trip_100_points():
    rng = np.random.default_rng(1)
    cloud = LabeledPointCloud(rng.normal(size=(100, 3)), colors=rng.integers(0, 256, (100, 3)))
    back = parse_sfm_points3d(format_sfm_points3d(cloud))
    assert np.array_equal(back.positions, cloud.positions)
    assert np.array_equal(back.colors, cloud.colors)


def test_cameras_round_trip():
    cams = {3: Intrinsics(512.25, 498.5, 319.75, 241.125, 640, 480), 1: Intrinsics(1.5, 2.5, 0.5, 0.5, 1, 1)}
    assert parse_sfm_cameras(format_sfm_cameras(cams)) == cams


def test_model_rejects_unknown_camera_reference():
    with pytest.raises(InvalidInputError):
        SfmModel({1: Intrinsics(1.0, 1.0, 0.5, 0.5, 1, 1)}, {1: SfmView(RigidPose(), 2, "x.png")})


def test_model_directory_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    k = Intrinsics(300.0, 300.0, 160.0, 120.0, 320, 240)
    views = {i: SfmView(RigidPose(quaternion_to_rotation(*(q / np.linalg.norm(q))), rng.normal(size=3)), 1,
                        f"color_{i:06d}.png") for i, q in enumerate(rng.normal(size=(4, 4)), 1)}
    pts = LabeledPointCloud(rng.normal(size=(5, 3)), colors=rng.integers(0, 256, (5, 3)))
    write_sfm_model(SfmModel({1: k}, views, pts), tmp_path)
    back = read_sfm_model(tmp_path)
    assert back.cameras == {1: k}
    for i in views:
        assert back.views[i].pose.allclose(views[i].pose, atol=1e-9)
    assert np.array_equal(back.sparse_points.positions, pts.positions)


def test_model_errors_report_file(tmp_path):
    (tmp_path / "cameras.txt").write_text("1 PINHOLE 640 480 500 500 320 240\n")
    (tmp_path / "images.txt").write_text("1 1 0 0 0 0 0 0 1 a.png\n")
    with pytest.raises(ParseError) as err:
        read_sfm_model(tmp_path)
    assert "images.txt" in str(err.value) and "line 1" in str(err.value)
