"""Text sparse-model format: ``cameras.txt``, ``images.txt``, ``points3D.txt``."""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import InvalidInputError, ParseError, UnsupportedModelError
from ..geometry import Intrinsics, LabeledPointCloud, RigidPose


@dataclass
class SfmView:
    pose: RigidPose  # world -> camera
    camera_id: int
    name: str


@dataclass
class SfmModel:
    cameras: Dict[int, Intrinsics] = field(default_factory=dict)
    views: Dict[int, SfmView] = field(default_factory=dict)
    sparse_points: LabeledPointCloud = field(
        default_factory=lambda: LabeledPointCloud(np.zeros((0, 3)), colors=np.zeros((0, 3))))

    def __post_init__(self):
        for image_id, view in self.views.items():
            if view.camera_id not in self.cameras:
                raise InvalidInputError(f"image {image_id} references unknown camera {view.camera_id}")


def _lines(stream):
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    for lineno, raw in enumerate(stream, 1):
        yield lineno, raw.rstrip("\r\n")


def _content(stream):
    for lineno, line in _lines(stream):
        s = line.strip()
        if s and not s.startswith("#"):
            yield lineno, s


def parse_sfm_cameras(stream, source=None):
    cameras = {}
    for lineno, line in _content(stream):
        tok = line.split()
        if len(tok) < 4:
            raise ParseError("expected CAMERA_ID MODEL WIDTH HEIGHT PARAMS...", lineno, source)
        try:
            cam_id, model = int(tok[0]), tok[1]
            width, height = int(tok[2]), int(tok[3])
            params = [float(x) for x in tok[4:]]
        except ValueError as exc:
            raise ParseError(str(exc), lineno, source) from exc
        if model == "PINHOLE":
            if len(params) != 4:
                raise ParseError("PINHOLE takes 4 parameters: fx fy cx cy", lineno, source)
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise ParseError("SIMPLE_PINHOLE takes 3 parameters: f cx cy", lineno, source)
            fx = fy = params[0]
            cx, cy = params[1:]
        else:
            raise UnsupportedModelError(model, lineno, source)
        try:
            cameras[cam_id] = Intrinsics(fx, fy, cx, cy, width, height)
        except InvalidInputError as exc:
            raise ParseError(str(exc), lineno, source) from exc
    return cameras


def quaternion_to_rotation(qw, qx, qy, qz):
    """Rotation matrix from a unit quaternion in scalar-first order."""
    return np.array([
        [1 - 2 * qy * qy - 2 * qz * qz, 2 * qx * qy - 2 * qw * qz, 2 * qz * qx + 2 * qw * qy],
        [2 * qx * qy + 2 * qw * qz, 1 - 2 * qx * qx - 2 * qz * qz, 2 * qy * qz - 2 * qw * qx],
        [2 * qz * qx - 2 * qw * qy, 2 * qy * qz + 2 * qw * qx, 1 - 2 * qx * qx - 2 * qy * qy],
    ])


def rotation_to_quaternion(r):
    """Scalar-first unit quaternion with non-negative ``qw``."""
    x, y, z, w = Rotation.from_matrix(r).as_quat()
    q = np.array([w, x, y, z])
    return -q if q[0] < 0 else q


def _is_points2d(line):
    """True for an empty line or a list of (X, Y, POINT3D_ID) triples."""
    tok = line.split()
    if len(tok) % 3:
        return False
    try:
        [float(t) for t in tok]
    except ValueError:
        return False
    return True


def parse_sfm_images(stream, source=None):
    views = {}
    lines = iter(_lines(stream))
    for lineno, line in lines:
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tok = s.split()
        if len(tok) < 10:
            raise ParseError("expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME", lineno, source)
        try:
            image_id = int(tok[0])
            q = np.array([float(x) for x in tok[1:5]])
            t = np.array([float(x) for x in tok[5:8]])
            cam_id = int(tok[8])
        except ValueError as exc:
            raise ParseError(str(exc), lineno, source) from exc
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-3:
            raise ParseError(f"quaternion norm {norm:.6g} is not unit", lineno, source)
        q /= norm
        points = next(lines, None)
        if points is None:
            raise ParseError(f"image {image_id} is missing its 2-D point line", lineno, source)
        if not _is_points2d(points[1]):
            raise ParseError(f"expected the 2-D point list of image {image_id}", points[0], source)
        views[image_id] = SfmView(RigidPose(quaternion_to_rotation(*q), t), cam_id, " ".join(tok[9:]))
    return views


def parse_sfm_points3d(stream, source=None):
    pos, col = [], []
    for lineno, line in _content(stream):
        tok = line.split()
        if len(tok) < 8 or (len(tok) - 8) % 2:
            raise ParseError("expected POINT3D_ID X Y Z R G B ERROR [IMAGE_ID POINT2D_IDX]...",
                             lineno, source)
        try:
            int(tok[0])
            xyz = [float(x) for x in tok[1:4]]
            rgb = [int(x) for x in tok[4:7]]
            float(tok[7])
        except ValueError as exc:
            raise ParseError(str(exc), lineno, source) from exc
        if min(rgb) < 0 or max(rgb) > 255:
            raise ParseError("colour channel outside [0, 255]", lineno, source)
        pos.append(xyz)
        col.append(rgb)
    return LabeledPointCloud(np.array(pos, dtype=np.float64).reshape(-1, 3),
                             colors=np.array(col, dtype=np.uint8).reshape(-1, 3))


def format_sfm_cameras(cameras):
    out = ["# Camera list with one line of data per camera:",
           "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]"]
    for cam_id in sorted(cameras):
        k = cameras[cam_id]
        out.append(f"{cam_id} PINHOLE {k.width} {k.height} {k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r}")
    return "\n".join(out) + "\n"


def format_sfm_images(views):
    out = ["# Image list with two lines of data per image:",
           "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
           "#   POINTS2D[] as (X, Y, POINT3D_ID)"]
    for image_id in sorted(views):
        v = views[image_id]
        q = rotation_to_quaternion(v.pose.rotation)
        vals = " ".join(repr(float(x)) for x in (*q, *v.pose.translation))
        out.append(f"{image_id} {vals} {v.camera_id} {v.name}")
        out.append("")
    return "\n".join(out) + "\n"


def format_sfm_points3d(cloud):
    out = ["# 3D point list with one line of data per point:",
           "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)"]
    colors = cloud.colors if cloud.colors is not None else np.zeros((len(cloud), 3), np.uint8)
    for i, (p, c) in enumerate(zip(cloud.positions, colors), 1):
        xyz = " ".join(repr(float(v)) for v in p)
        out.append(f"{i} {xyz} {int(c[0])} {int(c[1])} {int(c[2])} 0.0")
    return "\n".join(out) + "\n"


def read_sfm_model(directory) -> SfmModel:
    def load(name, parser, required=True):
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            if required:
                raise FileNotFoundError(path)
            return None
        with open(path, "r") as fh:
            return parser(fh, path)

    cameras = load("cameras.txt", parse_sfm_cameras)
    views = load("images.txt", parse_sfm_images)
    points = load("points3D.txt", parse_sfm_points3d, required=False)
    model = SfmModel(cameras, views)
    if points is not None:
        model.sparse_points = points
    return model


def write_sfm_model(model: SfmModel, directory):
    os.makedirs(directory, exist_ok=True)
    for name, text in (("cameras.txt", format_sfm_cameras(model.cameras)),
                       ("images.txt", format_sfm_images(model.views)),
                       ("points3D.txt", format_sfm_points3d(model.sparse_points))):
        with open(os.path.join(directory, name), "w") as fh:
            fh.write(text)
