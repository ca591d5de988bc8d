"""Multi-view depth-map fusion that carries colour and label payloads together."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import InvalidInputError
from .geometry import (CAM_TO_WORLD, Intrinsics, LabeledPointCloud, RigidPose, check_color,
                       check_depth, check_labels, check_normals, check_same_shape, depth_to_points,
                       transform_point)

KEEP_LABELED = "keep-labeled"
KEEP_ALL = "keep-all"


@dataclass
class FusionView:
    """One calibrated view. ``pose`` is world->camera and normals are camera-frame."""
    depth: np.ndarray
    color: np.ndarray
    labels: np.ndarray
    pose: RigidPose
    intrinsics: Intrinsics
    normal: Optional[np.ndarray] = None

    def __post_init__(self):
        self.depth = check_depth(self.depth)
        self.color = check_color(self.color)
        self.labels = check_labels(self.labels)
        if self.normal is not None:
            self.normal = check_normals(self.normal)
        check_same_shape(self.depth, self.color, self.labels, self.normal)
        if self.depth.shape != self.intrinsics.shape:
            raise InvalidInputError("raster size does not match intrinsics")


@dataclass(frozen=True)
class FusionParams:
    min_views: int = 2
    depth_tolerance: float = 0.01
    normal_tolerance: float = 25.0
    reprojection_tolerance: float = 1.0

    def __post_init__(self):
        if self.min_views < 1:
            raise InvalidInputError("min_views must be >= 1")
        if not (self.depth_tolerance > 0 and self.normal_tolerance > 0 and self.reprojection_tolerance > 0):
            raise InvalidInputError("fusion tolerances must be positive")


def select_reconstruction_frames(n_frames, stride):
    """Every ``stride``-th frame index starting at 0."""
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    return list(range(0, n_frames, stride))


def _world_points(view, vs, us):
    d = view.depth[vs, us]
    k = view.intrinsics
    cam = np.stack([(us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones(len(us))], axis=1) * d[:, None]
    return transform_point(view.pose, cam, CAM_TO_WORLD)


def _support(ref, vs, us, x_world, cand, params, cos_tol):
    """Which of the reference pixels a candidate view supports.

    Returns the support mask plus the candidate pixel coordinates and the
    candidate's own back-projection for supported rows.
    """
    k = cand.intrinsics
    p = cand.pose.apply(x_world)
    z = p[:, 2]
    ok = z > 0
    zs = np.where(ok, z, 1.0)
    u = k.fx * p[:, 0] / zs + k.cx
    v = k.fy * p[:, 1] / zs + k.cy
    ui = np.rint(u).astype(np.int64)
    vi = np.rint(v).astype(np.int64)
    ok &= (ui >= 0) & (ui < k.width) & (vi >= 0) & (vi < k.height)
    ui = np.where(ok, ui, 0)
    vi = np.where(ok, vi, 0)
    dc = cand.depth[vi, ui]
    ok &= dc > 0
    ok &= np.abs(dc - zs) <= params.depth_tolerance * zs
    xc = _world_points(cand, vi, ui)
    # forward-backward: the candidate's own surface point must land near the reference pixel
    q = ref.pose.apply(xc)
    qz = np.where(q[:, 2] > 0, q[:, 2], np.nan)
    kr = ref.intrinsics
    with np.errstate(invalid="ignore"):
        err = np.hypot(kr.fx * q[:, 0] / qz + kr.cx - us, kr.fy * q[:, 1] / qz + kr.cy - vs)
        ok &= err <= params.reprojection_tolerance
    if ref.normal is not None and cand.normal is not None:
        nr = ref.normal[vs, us] @ ref.pose.rotation
        nc = cand.normal[vi, ui] @ cand.pose.rotation
        valid_n = (np.abs(nr).sum(axis=1) > 0) & (np.abs(nc).sum(axis=1) > 0)
        ok &= valid_n & (np.einsum("ij,ij->i", nr, nc) >= cos_tol)
    return ok, vi, ui, xc


def check_pixel_consistency(ref: FusionView, pixel, candidates: Sequence[FusionView],
                            params: FusionParams = FusionParams()):
    """Consistency of one reference pixel ``(u, v)``.

    The reference view counts as one supporter. The flag is set when the total
    reaches ``params.min_views``. Returned indices point into ``candidates``.
    """
    u, v = int(pixel[0]), int(pixel[1])
    if not (0 <= u < ref.intrinsics.width and 0 <= v < ref.intrinsics.height) or ref.depth[v, u] <= 0:
        return False, []
    us, vs = np.array([u]), np.array([v])
    x = _world_points(ref, vs, us)
    cos_tol = np.cos(np.radians(params.normal_tolerance))
    supporters = [j for j, c in enumerate(candidates)
                  if _support(ref, vs, us, x, c, params, cos_tol)[0][0]]
    return 1 + len(supporters) >= params.min_views, supporters


def _majority(labels, present, ref_col=0):
    """Row-wise majority over present entries; ties go to the reference column, then the lower id."""
    lab = labels.astype(np.int64)
    eq = (lab[:, :, None] == lab[:, None, :]) & present[:, None, :] & present[:, :, None]
    counts = eq.sum(axis=2)
    top = counts.max(axis=1)
    ref_wins = counts[:, ref_col] == top
    big = np.iinfo(np.int64).max
    lowest = np.where(counts == top[:, None], lab, big).min(axis=1)
    return np.where(ref_wins, lab[:, ref_col], lowest).astype(np.uint16)


def fuse_views(views: Sequence[FusionView], params: FusionParams = FusionParams()) -> LabeledPointCloud:
    """Fuse views into one cloud with aligned colour and label attributes.

    Views are visited in order. A consistent reference pixel emits one point
    unless an earlier reference already consumed it. Position and colour
    average over the supporters, and the label is their majority vote. Both
    payloads come from the same supporter set in the same pass.
    """
    views = list(views)
    if not views:
        raise InvalidInputError("fuse_views needs at least one view")
    cos_tol = np.cos(np.radians(params.normal_tolerance))
    consumed = [np.zeros(v.depth.shape, dtype=bool) for v in views]
    out_pos, out_col, out_lab = [], [], []
    for i, ref in enumerate(views):
        valid = (ref.depth > 0) & ~consumed[i]
        vs, us = np.nonzero(valid)
        if len(vs) == 0:
            continue
        x_ref = transform_point(ref.pose, depth_to_points(ref.depth, ref.intrinsics)[vs, us], CAM_TO_WORLD)
        others = [j for j in range(len(views)) if j != i]
        m = len(vs)
        sup = np.zeros((m, len(others) + 1), dtype=bool)
        sup[:, 0] = True
        pos_sum = x_ref.copy()
        col = np.zeros((m, len(others) + 1, 3))
        col[:, 0] = ref.color[vs, us]
        lab = np.zeros((m, len(others) + 1), dtype=np.uint16)
        lab[:, 0] = ref.labels[vs, us]
        hits = []
        for c, j in enumerate(others, 1):
            ok, vi, ui, xc = _support(ref, vs, us, x_ref, views[j], params, cos_tol)
            sup[:, c] = ok
            pos_sum[ok] += xc[ok]
            col[ok, c] = views[j].color[vi[ok], ui[ok]]
            lab[ok, c] = views[j].labels[vi[ok], ui[ok]]
            hits.append((j, ok, vi, ui))
        count = sup.sum(axis=1)
        keep = count >= params.min_views
        if not keep.any():
            continue
        for j, ok, vi, ui in hits:
            sel = ok & keep
            consumed[j][vi[sel], ui[sel]] = True
        n = count[keep][:, None]
        out_pos.append(pos_sum[keep] / n)
        out_col.append(np.rint(col[keep].sum(axis=1) / n).astype(np.uint8))
        out_lab.append(_majority(lab[keep], sup[keep]))
    if not out_pos:
        return LabeledPointCloud(np.zeros((0, 3)), colors=np.zeros((0, 3), np.uint8))
    return LabeledPointCloud(np.concatenate(out_pos), np.concatenate(out_lab), np.concatenate(out_col))


def filter_labeled_cloud(cloud: LabeledPointCloud, policy=KEEP_LABELED) -> LabeledPointCloud:
    """Drop points that never received a segmentation label (``keep-labeled``)."""
    if policy == KEEP_ALL:
        return cloud
    if policy != KEEP_LABELED:
        raise InvalidInputError(f"unknown filter policy {policy!r}")
    return cloud.select(cloud.labels != 0)
