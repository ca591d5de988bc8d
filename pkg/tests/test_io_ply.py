import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from labelfuse.errors import FormatError, ParseError
from labelfuse.geometry import LabeledPointCloud
from labelfuse.io.ply import PALETTE, format_labeled_ply, read_labeled_ply, read_ply, write_labeled_ply
from labelfuse.tsdf import LabeledMesh

PALETTE_LINES = [
    "comment palette 0 128 128 128", "comment palette 1 230 25 75", "comment palette 2 60 180 75",
    "comment palette 3 255 225 25", "comment palette 4 0 130 200", "comment palette 5 245 130 48",
    "comment palette 6 145 30 180", "comment palette 7 70 240 240", "comment palette 8 240 50 230",
    "comment palette 9 210 245 60", "comment palette 10 250 190 212", "comment palette 11 0 128 128",
    "comment palette 12 220 190 255", "comment palette 13 170 110 40", "comment palette 14 255 250 200",
    "comment palette 15 128 0 0",
]


def golden_header(fmt, n_vertex, n_face=None):
    lines = ["ply", f"format {fmt} 1.0", "comment labelfuse labeled geometry",
             "comment palette: label id mod 16 -> display colour", *PALETTE_LINES,
             f"element vertex {n_vertex}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue",
             "property ushort label"]
    if n_face is not None:
        lines += [f"element face {n_face}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def one_point():
    return LabeledPointCloud([[1.0, -2.5, 0.25]], np.array([5], np.uint16), np.array([[10, 20, 30]]))


def test_golden_one_point_binary():
    expected = golden_header("binary_little_endian", 1) + struct.pack("<fffBBBH", 1.0, -2.5, 0.25, 10, 20, 30, 5)
    assert format_labeled_ply(one_point(), binary=True) == expected


def test_golden_one_point_ascii():
    expected = golden_header("ascii", 1) + b"1 -2.5 0.25 10 20 30 5\n"
    assert format_labeled_ply(one_point()) == expected


def test_golden_mesh_binary():
    mesh = LabeledMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], [[1, 2, 3]] * 3, [4, 4, 4])
    body = b"".join(struct.pack("<fffBBBH", *v, 1, 2, 3, 4) for v in ([0, 0, 0], [1, 0, 0], [0, 1, 0]))
    body += struct.pack("<Biii", 3, 0, 1, 2)
    assert format_labeled_ply(mesh, binary=True) == golden_header("binary_little_endian", 3, 1) + body


def test_palette_is_fixed_and_used_without_colors():
    assert PALETTE.shape == (16, 3)
    cloud = LabeledPointCloud([[0, 0, 0], [1, 1, 1]], np.array([1, 17], np.uint16))
    data = format_labeled_ply(cloud, binary=True)
    payload = data[len(golden_header("binary_little_endian", 2)):]
    rows = [struct.unpack("<fffBBBH", payload[i * 17:(i + 1) * 17]) for i in range(2)]
    assert rows[0][3:6] == tuple(PALETTE[1]) and rows[1][3:6] == tuple(PALETTE[1])


def test_empty_cloud_is_valid(tmp_path):
    path = tmp_path / "empty.ply"
    write_labeled_ply(LabeledPointCloud(np.zeros((0, 3))), path)
    assert b"element vertex 0" in path.read_bytes()
    assert len(read_labeled_ply(path)) == 0


def test_header_declares_ushort_label():
    assert b"property ushort label\n" in format_labeled_ply(one_point())


def random_cloud(seed, n=200):
    rng = np.random.default_rng(seed)
    return LabeledPointCloud(rng.normal(size=(n, 3)), rng.integers(0, 65536, n).astype(np.uint16),
                             rng.integers(0, 256, (n, 3)))


def test_ascii_equals_binary_after_parse(tmp_path):
    cloud = random_cloud(0)
    write_labeled_ply(cloud, tmp_path / "a.ply", binary=False)
    write_labeled_ply(cloud, tmp_path / "b.ply", binary=True)
    a, b = read_labeled_ply(tmp_path / "a.ply"), read_labeled_ply(tmp_path / "b.ply")
    assert a.equals(b)
    assert np.array_equal(a.labels, cloud.labels) and np.array_equal(a.colors, cloud.colors)
    assert np.abs(a.positions - cloud.positions).max() < 1e-6 * max(1.0, np.abs(cloud.positions).max())


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(0, 30), st.just(3)), elements=st.floats(-1e4, 1e4, width=32)),
       st.booleans())
def test_round_trip_is_exact_for_float32(tmp_path_factory, pos, binary):
    n = len(pos)
    rng = np.random.default_rng(n)
    cloud = LabeledPointCloud(pos.astype(np.float64), rng.integers(0, 65536, n), rng.integers(0, 256, (n, 3)))
    path = tmp_path_factory.mktemp("ply") / "c.ply"
    write_labeled_ply(cloud, path, binary=binary)
    back = read_labeled_ply(path)
    assert np.array_equal(back.positions, cloud.positions)
    assert np.array_equal(back.labels, cloud.labels)
    assert np.array_equal(back.colors, cloud.colors)


def test_mesh_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    mesh = LabeledMesh(rng.normal(size=(10, 3)).astype(np.float32), rng.integers(0, 10, (7, 3)),
                       rng.integers(0, 256, (10, 3)), rng.integers(0, 9, 10))
    for binary in (False, True):
        path = tmp_path / f"m{binary}.ply"
        write_labeled_ply(mesh, path, binary=binary)
        back = read_labeled_ply(path)
        assert isinstance(back, LabeledMesh)
        assert np.array_equal(back.triangles, mesh.triangles)
        assert np.array_equal(back.vertices, mesh.vertices)
        assert np.array_equal(back.labels, mesh.labels)


def test_big_endian_read(tmp_path):
    head = golden_header("binary_big_endian", 1)
    path = tmp_path / "be.ply"
    path.write_bytes(head + struct.pack(">fffBBBH", 1.0, 2.0, 3.0, 4, 5, 6, 300))
    cloud = read_labeled_ply(path)
    assert np.array_equal(cloud.positions, [[1, 2, 3]]) and cloud.labels.tolist() == [300]


def test_foreign_ply_without_label(tmp_path):
    path = tmp_path / "plain.ply"
    path.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                     b"property float z\nproperty float nx\nproperty float ny\nproperty float nz\nend_header\n"
                     b"0 0 0 0 0 1\n1 1 1 1 0 0\n")
    cloud = read_ply(path).to_cloud()
    assert cloud.labels.tolist() == [0, 0]
    assert np.array_equal(cloud.normals, [[0, 0, 1], [1, 0, 0]])


@pytest.mark.parametrize("body,line", [
    (b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\nnot_a_number\n", 6),
    (b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1.0\n", 7),
    (b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1.0 2.0\n", 6),
    (b"ply\nformat ascii 2.0x\nend_header\n", 2),
    (b"ply\nformat ascii 1.0\nproperty float x\nend_header\n", 3),
    (b"ply\nformat ascii 1.0\nelement vertex 1\nproperty quad x\nend_header\n", 4),
    (b"ply\nformat ascii 1.0\nbogus\nend_header\n", 3),
    (b"plx\n", 1),
])
def test_malformed_ply_reports_line(tmp_path, body, line):
    path = tmp_path / "bad.ply"
    path.write_bytes(body)
    with pytest.raises(ParseError) as err:
        read_ply(path)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_truncated_binary_payload(tmp_path):
    path = tmp_path / "short.ply"
    path.write_bytes(golden_header("binary_little_endian", 2) + b"\x00" * 17)
    with pytest.raises(ParseError):
        read_ply(path)


def test_non_triangle_faces_rejected(tmp_path):
    path = tmp_path / "quad.ply"
    path.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\n"
                     b"property float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n"
                     b"0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n")
    with pytest.raises(FormatError):
        read_labeled_ply(path)


def test_write_is_atomic_on_failure(tmp_path):
    target = tmp_path / "missing_dir" / "x.ply"
    with pytest.raises(OSError):
        write_labeled_ply(one_point(), target)
    assert not target.parent.exists()
