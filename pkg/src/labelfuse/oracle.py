"""Analytic labeled scenes: exact ray casting, signed distances and evaluation.

Everything here is closed-form so it can serve as ground truth for the
reconstruction code paths.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import InvalidInputError, ParseError
from .geometry import Intrinsics, LabeledPointCloud, RigidPose, pixel_rays


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise InvalidInputError("sphere radius must be positive")

    def distance(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def intersect(self, origin, dirs):
        oc = origin - np.asarray(self.center)
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = dirs @ oc
        c = oc @ oc - self.radius ** 2
        disc = b * b - a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / a
        t1 = (-b + sq) / a
        t = np.where(t0 > 0, t0, t1)
        return np.where(hit & (t > 0), t, np.inf)

    def normal(self, p):
        n = p - np.asarray(self.center)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def bounding_sphere(self):
        return np.asarray(self.center, dtype=float), self.radius

    def sample(self, n, rng):
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return np.asarray(self.center) + self.radius * v


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple

    def __post_init__(self):
        if min(self.half_extents) <= 0:
            raise InvalidInputError("box half-extents must be positive")

    def distance(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def intersect(self, origin, dirs):
        c, h = np.asarray(self.center), np.asarray(self.half_extents)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t_lo = (c - h - origin) * inv
            t_hi = (c + h - origin) * inv
        t_lo = np.where(np.isnan(t_lo), -np.inf, t_lo)
        t_hi = np.where(np.isnan(t_hi), np.inf, t_hi)
        tmin = np.minimum(t_lo, t_hi).max(axis=1)
        tmax = np.maximum(t_lo, t_hi).min(axis=1)
        t = np.where(tmin > 0, tmin, tmax)
        return np.where((tmax >= tmin) & (t > 0), t, np.inf)

    def normal(self, p):
        q = (p - np.asarray(self.center)) / np.asarray(self.half_extents)
        axis = np.abs(q).argmax(axis=-1)
        n = np.zeros_like(p)
        n[np.arange(len(p)), axis] = np.sign(q[np.arange(len(p)), axis])
        return n

    def bounding_sphere(self):
        return np.asarray(self.center, dtype=float), float(np.linalg.norm(self.half_extents))

    def sample(self, n, rng):
        h = np.asarray(self.half_extents, dtype=float)
        areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]] * 2)
        face = rng.choice(6, size=n, p=areas / areas.sum())
        p = rng.uniform(-1, 1, size=(n, 3))
        axis = face % 3
        p[np.arange(n), axis] = np.where(face < 3, 1.0, -1.0)
        return np.asarray(self.center) + p * h


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal_vector: tuple

    def __post_init__(self):
        n = np.asarray(self.normal_vector, dtype=float)
        if np.linalg.norm(n) == 0:
            raise InvalidInputError("plane normal must be nonzero")
        object.__setattr__(self, "normal_vector", tuple(n / np.linalg.norm(n)))

    def distance(self, p):
        return (p - np.asarray(self.point)) @ np.asarray(self.normal_vector)

    def intersect(self, origin, dirs):
        n = np.asarray(self.normal_vector)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((np.asarray(self.point) - origin) @ n) / denom
        return np.where(np.isfinite(t) & (t > 0), t, np.inf)

    def normal(self, p):
        return np.broadcast_to(np.asarray(self.normal_vector), p.shape).copy()

    def bounding_sphere(self):
        return None

    def sample(self, n, rng):
        raise InvalidInputError("cannot sample an unbounded plane")


@dataclass(frozen=True)
class Primitive:
    shape: object
    color: tuple
    label: int
    checker: Optional[float] = None

    def __post_init__(self):
        if not 1 <= int(self.label) <= 65535:
            raise InvalidInputError("primitive labels must be nonzero uint16 ids")


@dataclass
class Scene:
    primitives: List[Primitive] = field(default_factory=list)

    def __post_init__(self):
        labels = [p.label for p in self.primitives]
        if len(set(labels)) != len(labels):
            raise InvalidInputError("primitive labels must be distinct")

    @property
    def labels(self):
        return [p.label for p in self.primitives]

    def diameter(self):
        """Largest distance between two points of the bounded primitives."""
        bs = [p.shape.bounding_sphere() for p in self.primitives]
        bs = [b for b in bs if b is not None]
        best = 0.0
        for i, (ci, ri) in enumerate(bs):
            best = max(best, 2 * ri)
            for cj, rj in bs[i + 1:]:
                best = max(best, float(np.linalg.norm(ci - cj)) + ri + rj)
        return best


@dataclass(frozen=True)
class Trajectory:
    """Ordered camera->world poses."""
    poses: tuple

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def __iter__(self):
        return iter(self.poses)


def two_sphere_scene(checker=None):
    """The standard fixture: radii 0.4 m and 0.25 m with labels 1 and 2."""
    return Scene([
        Primitive(Sphere((0.0, 0.0, 0.0), 0.4), (200, 60, 50), 1, checker),
        Primitive(Sphere((0.7, 0.0, 0.0), 0.25), (40, 90, 210), 2, checker),
    ])


# ----------------------------------------------------------------- ray casting

def _shade(prim, hits):
    base = np.asarray(prim.color, dtype=np.float64)
    out = np.broadcast_to(base, hits.shape).copy()
    if prim.checker:
        parity = np.floor(hits / prim.checker).astype(np.int64).sum(axis=1) % 2 == 1
        out[parity] *= 0.45
    return np.round(out).astype(np.uint8)


def cast_rays(scene: Scene, origin, dirs):
    """Nearest hit parameter and primitive index (-1 on miss) for each ray."""
    best_t = np.full(len(dirs), np.inf)
    best_i = np.full(len(dirs), -1)
    for i, prim in enumerate(scene.primitives):
        t = prim.shape.intersect(origin, dirs)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_i[closer] = i
    return best_t, best_i


def render_frame(scene: Scene, k: Intrinsics, pose: RigidPose, depth_noise=0.0, rng=None,
                 with_normals=False):
    """Ray-cast colour, z-depth and labels for a camera->world ``pose``.

    Misses get depth 0 and label 0. Set ``depth_noise`` (metres, std-dev) to
    perturb valid depths with Gaussian noise drawn from ``rng``.
    """
    rays = pixel_rays(k).reshape(-1, 3)
    dirs = rays @ pose.rotation.T
    origin = pose.translation
    t, idx = cast_rays(scene, origin, dirs)
    hit = idx >= 0
    depth = np.where(hit, t, 0.0)
    labels = np.zeros(len(t), dtype=np.uint16)
    color = np.zeros((len(t), 3), dtype=np.uint8)
    normals = np.zeros((len(t), 3)) if with_normals else None
    pts = origin + dirs * np.where(hit, t, 0.0)[:, None]
    for i, prim in enumerate(scene.primitives):
        sel = idx == i
        if not sel.any():
            continue
        labels[sel] = prim.label
        color[sel] = _shade(prim, pts[sel])
        if with_normals:
            n = prim.shape.normal(pts[sel])
            n_cam = n @ pose.rotation
            facing = n_cam[:, 2] > 0
            n_cam[facing] *= -1
            normals[sel] = n_cam
    if depth_noise:
        if rng is None:
            rng = np.random.default_rng(0)
        noise = rng.normal(0.0, depth_noise, size=depth.shape)
        depth = np.where(hit, np.maximum(depth + noise, 1e-6), 0.0)
    h, w = k.shape
    out = (color.reshape(h, w, 3), depth.reshape(h, w), labels.reshape(h, w))
    if with_normals:
        out = out + (normals.reshape(h, w, 3),)
    return out


def visible_from(scene: Scene, k: Intrinsics, pose: RigidPose, points, tol=1e-6):
    """True where a world point projects into the image and is not occluded."""
    p_cam = (points - pose.translation) @ pose.rotation
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * p_cam[:, 0] / z + k.cx
        v = k.fy * p_cam[:, 1] / z + k.cy
    inside = (z > 0) & (u >= -0.5) & (u < k.width - 0.5) & (v >= -0.5) & (v < k.height - 0.5)
    dirs = points - pose.translation
    t, _ = cast_rays(scene, pose.translation, dirs)
    return inside & (t >= 1.0 - tol)


def sdf(scene: Scene, p):
    """Signed distance to the union of primitives and the label of the closest one.

    Accepts a single 3-vector or an (N, 3) array.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    if not scene.primitives:
        d = np.full(len(pts), np.inf)
        lab = np.zeros(len(pts), dtype=np.uint16)
    else:
        dists = np.stack([prim.shape.distance(pts) for prim in scene.primitives], axis=1)
        arg = dists.argmin(axis=1)
        d = dists[np.arange(len(pts)), arg]
        lab = np.asarray(scene.labels, dtype=np.uint16)[arg]
    if single:
        return float(d[0]), int(lab[0])
    return d, lab


def sample_surface(scene: Scene, n_per_primitive, rng=None, exposed_only=True):
    """Points drawn on bounded primitive surfaces, with their labels.

    With ``exposed_only`` samples buried inside another primitive are dropped.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    pts, labs = [], []
    for prim in scene.primitives:
        if prim.shape.bounding_sphere() is None:
            continue
        p = prim.shape.sample(n_per_primitive, rng)
        if exposed_only:
            d, _ = sdf(scene, p)
            p = p[d > -1e-9]
        pts.append(p)
        labs.append(np.full(len(p), prim.label, dtype=np.uint16))
    if not pts:
        return LabeledPointCloud(np.zeros((0, 3)))
    return LabeledPointCloud(np.concatenate(pts), np.concatenate(labs))


# -------------------------------------------------------------- trajectories

def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera->world pose at ``eye`` looking at ``target`` (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    up = np.asarray(up, dtype=np.float64)
    if np.linalg.norm(np.cross(f, up)) < 1e-6:
        up = np.array([0.0, 1.0, 0.0]) if abs(f[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(f, up)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    return RigidPose(np.column_stack([x, y, f]), eye)


def orbit_trajectory(center, radius, n, elevation=0.0, start=0.0, up=(0.0, 0.0, 1.0)):
    """``n`` cameras evenly spaced on a horizontal circle, all looking at ``center``.

    ``elevation`` and ``start`` are in degrees.
    """
    if n < 1 or not radius > 0:
        raise InvalidInputError("orbit needs n >= 1 and a positive radius")
    c = np.asarray(center, dtype=np.float64)
    el = math.radians(elevation)
    poses = []
    for i in range(n):
        a = math.radians(start) + 2 * math.pi * i / n
        eye = c + radius * np.array([math.cos(el) * math.cos(a), math.cos(el) * math.sin(a), math.sin(el)])
        poses.append(look_at(eye, c, up))
    return Trajectory(tuple(poses))


# ----------------------------------------------------------------- evaluation

@dataclass
class EvaluationReport:
    surface_rms: float
    iou: dict
    unlabeled_fraction: float
    count: int

    def as_dict(self):
        return {"surface_rms": self.surface_rms,
                "iou": {str(k): v for k, v in sorted(self.iou.items())},
                "unlabeled_fraction": self.unlabeled_fraction,
                "count": self.count}


def evaluate(pred, scene: Scene) -> EvaluationReport:
    """Surface RMS of |sdf| and per-label IoU against nearest-primitive labels.

    ``pred`` is anything with ``positions``/``vertices`` and ``labels``.
    """
    pts = getattr(pred, "positions", None)
    if pts is None:
        pts = pred.vertices
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(pred.labels).reshape(-1)
    if len(pts) == 0:
        return EvaluationReport(0.0, {lab: 0.0 for lab in scene.labels}, 0.0, 0)
    d, truth = sdf(scene, pts)
    iou = {}
    for lab in scene.labels:
        p, t = labels == lab, truth == lab
        union = np.count_nonzero(p | t)
        iou[lab] = float(np.count_nonzero(p & t) / union) if union else 1.0
    return EvaluationReport(float(np.sqrt(np.mean(d ** 2))), iou,
                            float(np.mean(labels == 0)), len(pts))


# ----------------------------------------------------------------- scene files

@dataclass
class SceneConfig:
    scene: Scene
    intrinsics: Intrinsics
    orbit_center: tuple
    orbit_radius: float
    elevation: float
    start: float = 0.0

    def trajectory(self, n):
        return orbit_trajectory(self.orbit_center, self.orbit_radius, n, self.elevation, self.start)


TWO_SPHERES_CFG = """\
# Two labeled spheres, the default evaluation fixture.
sphere 0 0 0 0.4        200 60 50   1
sphere 0.7 0 0 0.25     40 90 210   2
camera 320 240 300 300 160 120
orbit 0.35 0 0 2.0 0
"""


def parse_scene(text, source=None) -> SceneConfig:
    """Parse a scene file.

    Lines (``#`` comments allowed)::

        sphere CX CY CZ R            RED GREEN BLUE LABEL [checker=CELL]
        box CX CY CZ HX HY HZ        RED GREEN BLUE LABEL [checker=CELL]
        plane PX PY PZ NX NY NZ      RED GREEN BLUE LABEL [checker=CELL]
        camera WIDTH HEIGHT FX FY CX CY
        orbit CX CY CZ RADIUS ELEVATION_DEG [START_DEG]
    """
    arity = {"sphere": 4, "box": 6, "plane": 6}
    prims, camera, orbit = [], None, None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kind, args = tok[0], tok[1:]
        try:
            if kind in arity:
                checker = None
                if args and args[-1].startswith("checker="):
                    checker = float(args.pop()[len("checker="):])
                n = arity[kind]
                if len(args) != n + 4:
                    raise ParseError(f"{kind} expects {n + 4} values, got {len(args)}", lineno, source)
                geo = [float(a) for a in args[:n]]
                color = tuple(int(a) for a in args[n:n + 3])
                label = int(args[n + 3])
                if kind == "sphere":
                    shape = Sphere(tuple(geo[:3]), geo[3])
                elif kind == "box":
                    shape = Box(tuple(geo[:3]), tuple(geo[3:]))
                else:
                    shape = Plane(tuple(geo[:3]), tuple(geo[3:]))
                prims.append(Primitive(shape, color, label, checker))
            elif kind == "camera":
                if len(args) != 6:
                    raise ParseError("camera expects WIDTH HEIGHT FX FY CX CY", lineno, source)
                w, h = int(args[0]), int(args[1])
                fx, fy, cx, cy = (float(a) for a in args[2:])
                camera = Intrinsics(fx, fy, cx, cy, w, h)
            elif kind == "orbit":
                if len(args) not in (5, 6):
                    raise ParseError("orbit expects CX CY CZ RADIUS ELEVATION [START]", lineno, source)
                orbit = [float(a) for a in args]
            else:
                raise ParseError(f"unknown scene entry {kind!r}", lineno, source)
        except ParseError:
            raise
        except (ValueError, InvalidInputError) as exc:
            raise ParseError(str(exc), lineno, source) from exc
    if camera is None:
        camera = Intrinsics(300.0, 300.0, 160.0, 120.0, 320, 240)
    scene = Scene(prims)
    if orbit is None:
        bounded = [p.shape.bounding_sphere() for p in prims]
        bounded = [b for b in bounded if b is not None]
        center = np.mean([b[0] for b in bounded], axis=0) if bounded else np.zeros(3)
        orbit = [*center, max(2.0, 1.5 * scene.diameter()), 0.0]
    start = orbit[5] if len(orbit) == 6 else 0.0
    return SceneConfig(scene, camera, tuple(orbit[:3]), orbit[3], orbit[4], start)


def load_scene(path) -> SceneConfig:
    """Load a scene file; the bare name ``two-spheres`` selects the built-in fixture."""
    import os
    if str(path) in ("two-spheres", "two-spheres.cfg") and not os.path.exists(str(path)):
        return parse_scene(TWO_SPHERES_CFG, "two-spheres")
    with open(path, "r") as fh:
        return parse_scene(fh.read(), str(path))
