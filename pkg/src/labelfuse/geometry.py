"""Pinhole cameras, rigid transforms, image validation and labeled point clouds."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import BehindCameraError, InvalidInputError

WORLD_TO_CAM = "world->cam"
CAM_TO_WORLD = "cam->world"

_ORTHO_REPAIR_LIMIT = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError(f"bad image size {self.width}x{self.height}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidInputError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def subsampled(self, step):
        """Intrinsics of ``image[::step, ::step]``."""
        w = -(-self.width // step)
        h = -(-self.height // step)
        return Intrinsics(self.fx / step, self.fy / step, self.cx / step, self.cy / step, w, h)


def _nearest_rotation(m):
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


class RigidPose:
    """A rigid transform ``x -> R x + t``.

    Which frames it connects is up to the caller. SfM views store world->camera.
    Trajectories and fragment poses store camera->world. Rotations that are
    off by less than 1e-6 get snapped to the nearest rotation. Larger defects
    are rejected.
    """

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation=None, translation=None):
        r = np.eye(3) if rotation is None else np.array(rotation, dtype=np.float64)
        t = np.zeros(3) if translation is None else np.array(translation, dtype=np.float64).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise InvalidInputError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidInputError("pose contains non-finite values")
        defect = max(np.abs(r.T @ r - np.eye(3)).max(), abs(np.linalg.det(r) - 1.0))
        if defect > 1e-9:
            if defect >= _ORTHO_REPAIR_LIMIT:
                raise InvalidInputError(f"rotation is not orthonormal (defect {defect:.3g})")
            r = _nearest_rotation(r)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def __setattr__(self, name, value):
        raise AttributeError("RigidPose is immutable")

    def __reduce__(self):
        return (RigidPose, (self.rotation, self.translation))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self):
        return RigidPose(self.rotation.T, -self.rotation.T @ self.translation)

    def __matmul__(self, other):
        if isinstance(other, RigidPose):
            return RigidPose(self.rotation @ other.rotation,
                             self.rotation @ other.translation + self.translation)
        return self.apply(other)

    def apply(self, points):
        """Apply to a 3-vector or an (N, 3) array."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def center(self):
        """Origin of the source frame expressed in the target frame."""
        return self.translation.copy()

    def allclose(self, other, atol=1e-9):
        return (np.allclose(self.rotation, other.rotation, atol=atol)
                and np.allclose(self.translation, other.translation, atol=atol))

    def __repr__(self):
        return f"RigidPose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def rotation_angle(r):
    """Geodesic angle of a rotation matrix in radians."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rotation_about(axis, angle):
    """Rodrigues rotation matrix for ``angle`` radians about ``axis``."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def exp_se3(xi):
    """Pose from a twist ``(wx, wy, wz, tx, ty, tz)``; translation part is taken literally."""
    w = np.asarray(xi[:3], dtype=np.float64)
    theta = np.linalg.norm(w)
    r = np.eye(3) if theta < 1e-15 else rotation_about(w, theta)
    return RigidPose(r, xi[3:])


# --------------------------------------------------------------------- images

def check_depth(depth, name="depth"):
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2 or d.size == 0:
        raise InvalidInputError(f"{name} must be a non-empty 2-D array")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise InvalidInputError(f"{name} must be finite and non-negative (0 marks invalid)")
    return d


def check_labels(labels, name="labels"):
    a = np.asarray(labels)
    if a.ndim != 2:
        raise InvalidInputError(f"{name} must be a 2-D label image")
    if a.dtype != np.uint16:
        if a.size and (a.min() < 0 or a.max() > 65535 or not np.all(a == np.round(a))):
            raise InvalidInputError(f"{name} values must be integers in [0, 65535]")
        a = a.astype(np.uint16)
    return a


def check_color(color, name="color"):
    a = np.asarray(color)
    if a.ndim != 3 or a.shape[2] != 3 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInputError(f"{name} must be an HxWx3 image")
    if a.dtype != np.uint8:
        if a.min() < 0 or a.max() > 255:
            raise InvalidInputError(f"{name} values must be in [0, 255]")
        a = a.astype(np.uint8)
    return a


def check_normals(normals, name="normals"):
    a = np.asarray(normals, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise InvalidInputError(f"{name} must be an HxWx3 normal image")
    n = np.linalg.norm(a, axis=2)
    valid = n > 0
    if np.any(np.abs(n[valid] - 1.0) > 1e-6):
        raise InvalidInputError(f"{name}: valid normals must have unit length")
    return a


def check_same_shape(*images):
    shapes = {np.shape(im)[:2] for im in images if im is not None}
    if len(shapes) > 1:
        raise InvalidInputError(f"image dimensions differ: {sorted(shapes)}")


# ----------------------------------------------------------------- projection

def backproject_pixel(u, v, d, k: Intrinsics):
    if not d > 0:
        raise InvalidInputError(f"depth must be positive, got {d}")
    if not (0 <= u <= k.width - 1 and 0 <= v <= k.height - 1):
        raise InvalidInputError(f"pixel ({u}, {v}) outside {k.width}x{k.height} image")
    return np.array([d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d])


def project_point(p, k: Intrinsics):
    x, y, z = (float(c) for c in p)
    if not z > 0:
        raise BehindCameraError(f"point {tuple(p)} is not in front of the camera")
    return (k.fx * x / z + k.cx, k.fy * y / z + k.cy, z)


def project_points(points, k: Intrinsics):
    """Vectorised projection; rows with z <= 0 get NaN pixel coordinates."""
    p = np.asarray(points, dtype=np.float64)
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z > 0, k.fx * p[:, 0] / z + k.cx, np.nan)
        v = np.where(z > 0, k.fy * p[:, 1] / z + k.cy, np.nan)
    return u, v, z


def pixel_rays(k: Intrinsics):
    """Camera-frame direction with z=1 for every pixel, shape (H, W, 3)."""
    v, u = np.mgrid[0:k.height, 0:k.width].astype(np.float64)
    return np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)


def depth_to_points(depth, k: Intrinsics):
    """Camera-frame points for all pixels (H, W, 3); invalid pixels are zero."""
    return pixel_rays(k) * depth[..., None]


def transform_point(pose: RigidPose, p, direction=WORLD_TO_CAM):
    if direction == WORLD_TO_CAM:
        return pose.apply(p)
    if direction == CAM_TO_WORLD:
        return (np.asarray(p, dtype=np.float64) - pose.translation) @ pose.rotation
    raise InvalidInputError(f"unknown direction {direction!r}")


@dataclass
class RGBDFrame:
    color: np.ndarray
    depth: np.ndarray
    intrinsics: Intrinsics

    def __post_init__(self):
        self.color = check_color(self.color)
        self.depth = check_depth(self.depth)
        check_same_shape(self.color, self.depth)
        if self.depth.shape != self.intrinsics.shape:
            raise InvalidInputError("raster size does not match intrinsics")


@dataclass
class MASKDFrame:
    """A label image paired with the depth image it was segmented on."""
    labels: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        self.labels = check_labels(self.labels)
        self.depth = check_depth(self.depth)
        check_same_shape(self.labels, self.depth)


# ----------------------------------------------------------------- point cloud

@dataclass
class LabeledPointCloud:
    positions: np.ndarray
    labels: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if self.labels is None:
            self.labels = np.zeros(n, dtype=np.uint16)
        else:
            self.labels = np.asarray(self.labels).astype(np.uint16).reshape(-1)
        if self.colors is not None:
            self.colors = np.asarray(self.colors).astype(np.uint8).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        for name in ("labels", "colors", "normals"):
            a = getattr(self, name)
            if a is not None and len(a) != n:
                raise InvalidInputError(f"{name} has {len(a)} entries for {n} points")
        if self.normals is not None and n:
            # all-zero rows mark invalid normals
            length = np.linalg.norm(self.normals, axis=1)
            if np.any((length > 0) & (np.abs(length - 1.0) > 1e-6)):
                raise InvalidInputError("normals must be unit length (or zero for invalid)")

    def __len__(self):
        return len(self.positions)

    def select(self, mask):
        return LabeledPointCloud(
            self.positions[mask], self.labels[mask],
            None if self.colors is None else self.colors[mask],
            None if self.normals is None else self.normals[mask])

    def transformed(self, pose: RigidPose):
        return LabeledPointCloud(
            pose.apply(self.positions), self.labels.copy(),
            None if self.colors is None else self.colors.copy(),
            None if self.normals is None else self.normals @ pose.rotation.T)

    @classmethod
    def concatenate(cls, clouds):
        clouds = list(clouds)
        if not clouds:
            return cls(np.zeros((0, 3)))
        has_c = all(c.colors is not None for c in clouds)
        has_n = all(c.normals is not None for c in clouds)
        return cls(np.concatenate([c.positions for c in clouds]),
                   np.concatenate([c.labels for c in clouds]),
                   np.concatenate([c.colors for c in clouds]) if has_c else None,
                   np.concatenate([c.normals for c in clouds]) if has_n else None)

    def equals(self, other):
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b)
        return (same(self.positions, other.positions) and same(self.labels, other.labels)
                and same(self.colors, other.colors) and same(self.normals, other.normals))


def depth_to_cloud(depth, k: Intrinsics, pose: Optional[RigidPose] = None,
                   color=None, labels=None) -> LabeledPointCloud:
    """Lift every pixel with positive depth into the world frame.

    ``pose`` is world->camera (identity when omitted).
    """
    depth = check_depth(depth)
    if color is not None:
        color = check_color(color)
    if labels is not None:
        labels = check_labels(labels)
    check_same_shape(depth, color, labels)
    if depth.shape != k.shape:
        raise InvalidInputError(f"depth is {depth.shape[::-1]} but intrinsics say {k.width}x{k.height}")
    valid = depth > 0
    pts = depth_to_points(depth, k)[valid]
    if pose is not None:
        pts = transform_point(pose, pts, CAM_TO_WORLD)
    return LabeledPointCloud(
        pts,
        labels[valid] if labels is not None else None,
        color[valid] if color is not None else None)


def estimate_normals(cloud, neighbors=30, viewpoint=(0.0, 0.0, 0.0)):
    """Per-point PCA normals oriented toward ``viewpoint``.

    Returns an (N, 3) array. Rows whose neighbourhood has rank < 2 are all zeros.
    """
    pts = cloud.positions if isinstance(cloud, LabeledPointCloud) else np.asarray(cloud, float)
    n = len(pts)
    if neighbors < 3:
        raise InvalidInputError("need at least 3 neighbours for a normal")
    if n < neighbors:
        raise InvalidInputError(f"cloud has {n} points, fewer than neighbours={neighbors}")
    _, idx = cKDTree(pts).query(pts, k=neighbors)
    nb = pts[idx]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb) / neighbors
    w, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0].copy()
    scale = np.maximum(w[:, 2], 1e-300)
    degenerate = (w[:, 1] <= 1e-10 * scale) | (w[:, 2] <= 0)
    to_view = np.asarray(viewpoint, dtype=np.float64) - pts
    flip = np.einsum("ij,ij->i", normals, to_view) < 0
    normals[flip] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[degenerate] = 0.0
    return normals


def _voxel_index(points, voxel):
    """Dense 0..m-1 voxel ids, ordered lexicographically by integer voxel key."""
    keys = np.floor(points / voxel).astype(np.int64)
    keys -= keys.min(axis=0)
    span = keys.max(axis=0) + 1
    if np.prod(span.astype(np.float64)) < 2.0 ** 62:
        flat = (keys[:, 0] * span[1] + keys[:, 1]) * span[2] + keys[:, 2]
        return np.unique(flat, return_inverse=True)[1].reshape(-1)
    return np.unique(keys, axis=0, return_inverse=True)[1].reshape(-1)


def voxel_downsample(cloud: LabeledPointCloud, voxel):
    """Centroid per occupied voxel; label is the majority in the voxel (ties to lower id)."""
    if not voxel > 0:
        raise InvalidInputError("voxel size must be positive")
    if len(cloud) == 0:
        return LabeledPointCloud(np.zeros((0, 3)), colors=None if cloud.colors is None else np.zeros((0, 3)))
    inv = _voxel_index(cloud.positions, voxel)
    counts = np.bincount(inv)
    m = len(counts)
    pos = np.stack([np.bincount(inv, cloud.positions[:, i], m) for i in range(3)], axis=1)
    pos /= counts[:, None]
    colors = None
    if cloud.colors is not None:
        c = np.stack([np.bincount(inv, cloud.colors[:, i].astype(np.float64), m) for i in range(3)], axis=1)
        colors = np.round(c / counts[:, None]).astype(np.uint8)
    # majority label: sort by (voxel, label) and take the longest run per voxel
    order = np.lexsort((cloud.labels, inv))
    vi, lab = inv[order], cloud.labels[order]
    pair_start = np.r_[True, (vi[1:] != vi[:-1]) | (lab[1:] != lab[:-1])]
    starts = np.flatnonzero(pair_start)
    run_len = np.diff(np.r_[starts, len(vi)])
    run_vox, run_lab = vi[starts], lab[starts]
    # stable sort by -length keeps the lowest label first on ties
    pick = np.lexsort((run_lab, -run_len, run_vox))
    first = np.r_[True, run_vox[pick][1:] != run_vox[pick][:-1]]
    labels = np.zeros(m, dtype=np.uint16)
    labels[run_vox[pick][first]] = run_lab[pick][first]
    return LabeledPointCloud(pos, labels, colors)
