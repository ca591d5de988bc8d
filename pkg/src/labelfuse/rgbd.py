"""RGBD front half: frame-to-frame odometry, fragment building and fragment registration."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import cv2
import numpy as np
from scipy.spatial import cKDTree

from .errors import (DegenerateFragmentError, InsufficientOverlapError, InvalidInputError,
                     LabelFuseError, PipelineError, RegistrationFailedError)
from .geometry import (Intrinsics, LabeledPointCloud, RGBDFrame, RigidPose, check_labels,
                       depth_to_cloud, depth_to_points, exp_se3, voxel_downsample)
from .registration import (PreprocessedCloud, RegistrationParams, RegistrationResult,
                           preprocess_cloud, refine_multiscale_icp, register_pair_fgr,
                           register_pair_ransac)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OdometryParams:
    levels: tuple = (4, 2, 1)                 # pyramid subsampling steps, coarse first
    max_distance: tuple = (0.2, 0.1, 0.05)    # association gate per level (m)
    max_iterations: int = 20
    tolerance: float = 1e-6
    min_associations: int = 100
    # share of the photometric term in the objective; 0 gives pure point-to-plane
    photometric_weight: float = 0.032
    rcond: float = 1e-3


@dataclass
class Fragment:
    id: int
    pose: RigidPose                 # fragment -> world
    cloud: LabeledPointCloud        # fragment frame
    start: int
    end: int
    frame_poses: List[RigidPose] = field(default_factory=list)  # frame -> fragment

    def __post_init__(self):
        if len(self.cloud) == 0:
            raise DegenerateFragmentError(f"fragment {self.id} has an empty cloud")

    @property
    def frame_range(self):
        return (self.start, self.end)


def normal_map(points):
    """Normals from neighbouring vertices of an organised (H, W, 3) point map; invalid -> 0."""
    h, w, _ = points.shape
    n = np.zeros_like(points)
    valid = points[..., 2] > 0
    dx = points[1:-1, 2:] - points[1:-1, :-2]
    dy = points[2:, 1:-1] - points[:-2, 1:-1]
    c = np.cross(dx, dy)
    ok = (valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1] & valid[1:-1, 1:-1])
    # reject normals across depth jumps
    z = points[1:-1, 1:-1, 2]
    jump = np.maximum(np.abs(dx[..., 2]), np.abs(dy[..., 2])) > 0.05 * np.maximum(z, 1e-9) + 0.02
    norm = np.linalg.norm(c, axis=-1)
    ok &= (norm > 0) & ~jump
    c = c / np.where(norm > 0, norm, 1.0)[..., None]
    flip = np.einsum("...i,...i->...", c, points[1:-1, 1:-1]) > 0
    c[flip] *= -1
    n[1:-1, 1:-1] = np.where(ok[..., None], c, 0.0)
    return n


def _intensity(color):
    return color.astype(np.float64).mean(axis=2) / 255.0


def _pyramid_intensity(color, step):
    gray = _intensity(color)
    if step > 1:
        gray = cv2.GaussianBlur(gray, (0, 0), sigmaX=step / 2.0)
    gray = np.ascontiguousarray(gray[::step, ::step])
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, 1:-1] = (gray[:, 2:] - gray[:, :-2]) / 2.0
    gy[1:-1] = (gray[2:] - gray[:-2]) / 2.0
    return gray, gx, gy


def _bilinear(img, u, v):
    h, w = img.shape
    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2)
    a, b = u - u0, v - v0
    return ((1 - a) * (1 - b) * img[v0, u0] + a * (1 - b) * img[v0, u0 + 1]
            + (1 - a) * b * img[v0 + 1, u0] + a * b * img[v0 + 1, u0 + 1])


def _associate(src_pts, tgt_map, tgt_normals, k: Intrinsics, pose, max_dist):
    """Projective association; returns the source indices kept plus target data."""
    x = pose.apply(src_pts)
    z = x[:, 2]
    zs = np.where(z > 0, z, 1.0)
    uf = k.fx * x[:, 0] / zs + k.cx
    vf = k.fy * x[:, 1] / zs + k.cy
    u, v = np.rint(uf).astype(np.int64), np.rint(vf).astype(np.int64)
    ok = (z > 0) & (uf >= 0) & (uf <= k.width - 1) & (vf >= 0) & (vf <= k.height - 1)
    u, v = np.where(ok, u, 0), np.where(ok, v, 0)
    q = tgt_map[v, u]
    n = tgt_normals[v, u]
    ok &= (q[:, 2] > 0) & (np.abs(n).sum(axis=1) > 0)
    diff = x - q
    ok &= np.einsum("ij,ij->i", diff, diff) <= max_dist ** 2
    idx = np.flatnonzero(ok)
    return idx, x[idx], q[idx], n[idx], uf[idx], vf[idx]


def solve_truncated(jac, r, rcond):
    """Least squares ``jac @ xi = -r`` ignoring directions with tiny singular values."""
    u, s, vt = np.linalg.svd(jac, full_matrices=False)
    keep = s > rcond * s[0] if len(s) and s[0] > 0 else np.zeros_like(s, dtype=bool)
    coef = np.where(keep, (u.T @ -r) / np.where(keep, s, 1.0), 0.0)
    return vt.T @ coef


def rgbd_odometry(target: RGBDFrame, source: RGBDFrame, init: RigidPose = RigidPose(),
                  params: OdometryParams = OdometryParams()) -> RegistrationResult:
    """Source->target motion on a depth pyramid.

    Uses projective data association with point-to-plane residuals, plus an
    intensity residual weighted by ``params.photometric_weight``. Each level
    iterates until the relative RMSE change drops below ``params.tolerance``.
    """
    if target.intrinsics != source.intrinsics:
        raise InvalidInputError("odometry frames must share intrinsics")
    k0 = target.intrinsics
    pose = init
    fit, rmse_geo = 0.0, 0.0
    w_img = np.sqrt(params.photometric_weight)
    w_geo = np.sqrt(1.0 - params.photometric_weight)
    for level, (step, gate) in enumerate(zip(params.levels, params.max_distance)):
        k = k0.subsampled(step)
        tmap = depth_to_points(target.depth[::step, ::step], k)
        tnorm = normal_map(tmap)
        smap = depth_to_points(source.depth[::step, ::step], k)
        svalid = smap[..., 2] > 0
        src = smap[svalid]
        if len(src) == 0:
            raise InsufficientOverlapError("source frame has no valid depth")
        if w_img > 0:
            t_gray, t_gx, t_gy = _pyramid_intensity(target.color, step)
            s_gray = _pyramid_intensity(source.color, step)[0][svalid]
        prev = None
        for it in range(params.max_iterations):
            idx, x, q, n, uf, vf = _associate(src, tmap, tnorm, k, pose, gate)
            if level == 0 and it == 0 and len(idx) < params.min_associations:
                raise InsufficientOverlapError(
                    f"{len(idx)} associated pixels at the coarsest level (< {params.min_associations})")
            if len(idx) < 6:
                break
            r_geo = np.einsum("ij,ij->i", x - q, n)
            rmse_geo = float(np.sqrt(np.mean(r_geo ** 2)))
            fit = len(idx) / len(src)
            jac = [w_geo * np.concatenate([np.cross(x, n), n], axis=1)]
            res = [w_geo * r_geo]
            if w_img > 0:
                r_img = _bilinear(t_gray, uf, vf) - s_gray[idx]
                gx, gy = _bilinear(t_gx, uf, vf), _bilinear(t_gy, uf, vf)
                z = x[:, 2]
                a = np.stack([gx * k.fx / z, gy * k.fy / z,
                              -(gx * k.fx * x[:, 0] + gy * k.fy * x[:, 1]) / z ** 2], axis=1)
                jac.append(w_img * np.concatenate([np.cross(x, a), a], axis=1))
                res.append(w_img * r_img)
            jac, res = np.concatenate(jac), np.concatenate(res)
            total = float(np.sqrt(np.mean(res ** 2)))
            if total == 0.0 or (prev is not None and abs(prev - total) <= params.tolerance * prev):
                break
            prev = total
            pose = exp_se3(solve_truncated(jac, res, params.rcond)) @ pose
    return RegistrationResult(pose, min(max(fit, 0.0), 1.0), rmse_geo)


def make_fragments(frames: Sequence[RGBDFrame], labels: Optional[Sequence] = None,
                   frames_per_fragment=50, params: OdometryParams = OdometryParams()) -> List[Fragment]:
    """Chunk the sequence and chain odometry inside and across chunks.

    The world frame is the first camera. Each fragment's pose is that of its
    first frame, and its cloud holds all of its frames' labeled points in that
    frame.
    """
    if frames_per_fragment < 1:
        raise InvalidInputError("frames_per_fragment must be >= 1")
    if labels is not None and len(labels) != len(frames):
        raise InvalidInputError("frames and labels differ in length")
    if not frames:
        raise InvalidInputError("no frames")
    fragments = []
    world_prev = RigidPose()
    for fid, start in enumerate(range(0, len(frames), frames_per_fragment)):
        end = min(start + frames_per_fragment, len(frames))
        try:
            if start > 0:
                step = rgbd_odometry(frames[start - 1], frames[start], RigidPose(), params)
                world_prev = world_prev @ step.pose
            frag_pose = world_prev
            local = [RigidPose()]
            for t in range(start + 1, end):
                step = rgbd_odometry(frames[t - 1], frames[t], RigidPose(), params)
                local.append(local[-1] @ step.pose)
        except LabelFuseError as exc:
            raise PipelineError(f"fragment {fid} (frames [{start}, {end})): {exc}") from exc
        world_prev = frag_pose @ local[-1]
        clouds = []
        for j, t in enumerate(range(start, end)):
            lab = None if labels is None else check_labels(labels[t])
            f = frames[t]
            clouds.append(depth_to_cloud(f.depth, f.intrinsics, local[j].inverse(), f.color, lab))
        fragments.append(Fragment(fid, frag_pose, LabeledPointCloud.concatenate(clouds), start, end, local))
    return fragments


def preprocess_fragment(frag: Fragment, voxel_down, feature_radius=None,
                        params: Optional[RegistrationParams] = None) -> PreprocessedCloud:
    """Downsample, estimate normals (toward the fragment origin) and compute FPFH."""
    if not voxel_down > 0:
        raise InvalidInputError("voxel_down must be positive")
    if params is None:
        params = RegistrationParams(voxel_down=voxel_down, feature_radius=feature_radius)
    else:
        params = RegistrationParams(**{**params.__dict__, "voxel_down": voxel_down,
                                       "feature_radius": feature_radius or params.feature_radius})
    return preprocess_cloud(frag.cloud, params)


def color_consistent_fitness(src: LabeledPointCloud, dst: LabeledPointCloud, pose: RigidPose,
                             max_distance, color_tolerance=0.1):
    """Share of source points with a target neighbour within ``max_distance`` whose
    mean absolute color difference (on a 0..1 scale) is below ``color_tolerance``."""
    if len(src) == 0 or len(dst) == 0:
        return 0.0
    dist, j = cKDTree(dst.positions).query(pose.apply(src.positions), distance_upper_bound=max_distance)
    ok = np.isfinite(dist)
    if src.colors is not None and dst.colors is not None:
        diff = np.abs(src.colors[ok].astype(np.float64) - dst.colors[j[ok]]).mean(axis=1) / 255.0
        ok[ok] = diff < color_tolerance
    return float(ok.mean())


def register_fragments(fragments: Sequence[Fragment], method="ransac",
                       params: RegistrationParams = RegistrationParams()) -> List[RigidPose]:
    """Aligned fragment poses by chaining adjacent pairwise registrations.

    For each pair the global registration result and the odometry prior are
    both refined with multiscale ICP. The one with the higher fitness is kept,
    and ties go to the prior. Fitness here only counts inliers whose colors
    agree, so symmetric shapes with texture cannot win by sliding onto
    themselves. Untextured clouds reduce to the plain inlier fraction.
    """
    if not fragments:
        raise InvalidInputError("need at least one fragment")
    if method not in ("ransac", "fgr"):
        raise InvalidInputError(f"unknown registration method {method!r}")
    poses = [fragments[0].pose]
    pre = {}

    fine_voxel, fine_dist = params.icp_scales[-1][0], params.icp_scales[-1][1]
    fine = {}

    def fine_cloud(i):
        if i not in fine:
            fine[i] = voxel_downsample(fragments[i].cloud, fine_voxel)
        return fine[i]

    def prep(i):
        if i not in pre:
            pre[i] = preprocess_cloud(fragments[i].cloud, params)
        return pre[i]

    for i in range(len(fragments) - 1):
        dst, src = fragments[i], fragments[i + 1]
        prior = dst.pose.inverse() @ src.pose
        candidates = []
        try:
            glob = (register_pair_ransac if method == "ransac" else register_pair_fgr)(
                prep(i + 1), prep(i), params)
            candidates.append(("global", glob.pose))
        except (RegistrationFailedError, DegenerateFragmentError) as exc:
            log.info("pair (%d, %d): global registration failed: %s", i, i + 1, exc)
        candidates.append(("prior", prior))
        best = None
        for name, init in candidates:
            try:
                res = refine_multiscale_icp(src.cloud, dst.cloud, init, params.icp_scales,
                                            params.normal_neighbors)
            except (InsufficientOverlapError, DegenerateFragmentError) as exc:
                log.info("pair (%d, %d): ICP from %s failed: %s", i, i + 1, name, exc)
                continue
            score = color_consistent_fitness(fine_cloud(i + 1), fine_cloud(i), res.pose, fine_dist)
            log.info("pair (%d, %d): %s candidate fitness %.4f, color-consistent %.4f",
                     i, i + 1, name, res.fitness, score)
            if best is None or score > best[2] or (score == best[2] and name == "prior"):
                best = (name, res, score)
        if best is None or best[2] == 0.0:
            raise PipelineError(f"fragment pair ({i}, {i + 1}) could not be registered")
        log.info("pair (%d, %d): kept %s, fitness %.4f rmse %.5f", i, i + 1, best[0],
                 best[1].fitness, best[1].inlier_rmse)
        poses.append(poses[-1] @ best[1].pose)
    return poses


def absolute_trajectory_error(estimated: Sequence[RigidPose], truth: Sequence[RigidPose]):
    """RMS camera-centre error after the best rigid alignment of the two trajectories."""
    from .registration import kabsch
    a = np.array([p.translation for p in estimated])
    b = np.array([p.translation for p in truth])
    if len(a) != len(b):
        raise InvalidInputError("trajectories differ in length")
    if len(a) >= 3:
        align = kabsch(a, b)
    else:
        align = truth[0] @ estimated[0].inverse()
    return float(np.sqrt(np.mean(np.sum((align.apply(a) - b) ** 2, axis=1))))
