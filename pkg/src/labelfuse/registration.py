"""Point-cloud registration: FPFH features, RANSAC and FGR global alignment,
and multiscale point-to-plane ICP."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientOverlapError, InvalidInputError, RegistrationFailedError
from .geometry import LabeledPointCloud, RigidPose, estimate_normals, exp_se3, voxel_downsample

FPFH_BINS = 11


@dataclass
class RegistrationResult:
    pose: RigidPose  # source -> target
    fitness: float
    inlier_rmse: float

    def __post_init__(self):
        if not 0.0 <= self.fitness <= 1.0:
            raise InvalidInputError(f"fitness {self.fitness} outside [0, 1]")
        if self.inlier_rmse < 0:
            raise InvalidInputError("negative RMSE")


@dataclass
class RegistrationParams:
    voxel_down: float = 0.016
    feature_radius: Optional[float] = None
    normal_neighbors: int = 30
    max_nn: int = 100
    ransac_n: int = 4
    edge_ratio: float = 0.9
    max_correspondence: Optional[float] = None
    max_iterations: int = 100000
    confidence: float = 0.999
    fitness_floor: float = 0.1
    seed: int = 0
    fgr_iterations: int = 64
    min_matches: int = 10
    icp_scales: Optional[Sequence[Tuple[float, float, int]]] = None

    def __post_init__(self):
        if not self.voxel_down > 0:
            raise InvalidInputError("voxel_down must be positive")
        if self.feature_radius is None:
            self.feature_radius = 5 * self.voxel_down
        if self.max_correspondence is None:
            self.max_correspondence = 1.5 * self.voxel_down
        if self.icp_scales is None:
            v = self.voxel_down
            self.icp_scales = [(v, 1.4 * v, 50), (v / 2, 0.7 * v, 30), (v / 4, 0.35 * v, 14)]


@dataclass
class PreprocessedCloud:
    cloud: LabeledPointCloud  # has normals
    features: np.ndarray      # (N, 33)

    @property
    def points(self):
        return self.cloud.positions


# ---------------------------------------------------------------- features

def _pair_features(p1, n1, p2, n2):
    """Darboux-frame angles (f1, f2, f3) for point pairs; rows with no frame are NaN."""
    dp = p2 - p1
    dist = np.linalg.norm(dp, axis=-1)
    safe = np.where(dist > 0, dist, 1.0)
    a1 = np.einsum("...i,...i->...", n1, dp) / safe
    a2 = np.einsum("...i,...i->...", n2, dp) / safe
    swap = np.arccos(np.clip(np.abs(a1), 0, 1)) > np.arccos(np.clip(np.abs(a2), 0, 1))
    u = np.where(swap[..., None], n2, n1)
    nt = np.where(swap[..., None], n1, n2)
    dp = np.where(swap[..., None], -dp, dp)
    f3 = np.where(swap, -a2, a1)
    v = np.cross(dp, u)
    vn = np.linalg.norm(v, axis=-1)
    ok = (dist > 0) & (vn > 0)
    v = v / np.where(vn > 0, vn, 1.0)[..., None]
    w = np.cross(u, v)
    f2 = np.einsum("...i,...i->...", v, nt)
    f1 = np.arctan2(np.einsum("...i,...i->...", w, nt), np.einsum("...i,...i->...", u, nt))
    return f1, f2, f3, ok


def _bin(x, lo, hi):
    b = np.floor(FPFH_BINS * (x - lo) / (hi - lo)).astype(np.int64)
    return np.clip(b, 0, FPFH_BINS - 1)


def compute_fpfh(points, normals, radius, max_nn=100):
    """33-bin FPFH per point, normalised so each row sums to 100.

    Points with no neighbour inside ``radius`` get an all-zero row.
    """
    points = np.asarray(points, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    n = len(points)
    if n == 0:
        return np.zeros((0, 3 * FPFH_BINS))
    k = min(max_nn + 1, n)
    dist, idx = cKDTree(points).query(points, k=k, distance_upper_bound=radius)
    dist, idx = dist.reshape(n, k), idx.reshape(n, k)
    valid = (idx < n) & (idx != np.arange(n)[:, None]) & (dist > 0)
    idx = np.where(valid, idx, 0)

    f1, f2, f3, ok = _pair_features(points[:, None, :], normals[:, None, :], points[idx], normals[idx])
    ok &= valid
    cnt = ok.sum(axis=1)
    spfh = np.zeros((n, 3 * FPFH_BINS))
    rows = np.broadcast_to(np.arange(n)[:, None], ok.shape)[ok]
    incr = (100.0 / np.maximum(cnt, 1))[rows]
    for j, (f, lo, hi) in enumerate(((f1, -math.pi, math.pi), (f2, -1.0, 1.0), (f3, -1.0, 1.0))):
        np.add.at(spfh, (rows, j * FPFH_BINS + _bin(f[ok], lo, hi)), incr)

    wgt = np.where(valid, 1.0 / np.where(valid, dist, 1.0) ** 2, 0.0)
    fpfh = np.einsum("nk,nkb->nb", wgt, spfh[idx])
    for j in range(3):
        sl = slice(j * FPFH_BINS, (j + 1) * FPFH_BINS)
        s = fpfh[:, sl].sum(axis=1, keepdims=True)
        fpfh[:, sl] = np.where(s > 0, fpfh[:, sl] * 100.0 / np.where(s > 0, s, 1.0), 0.0)
    fpfh += spfh
    total = fpfh.sum(axis=1, keepdims=True)
    return np.where(total > 0, fpfh * 100.0 / np.where(total > 0, total, 1.0), 0.0)


def preprocess_cloud(cloud: LabeledPointCloud, params: RegistrationParams, viewpoint=(0.0, 0.0, 0.0)):
    from .errors import DegenerateFragmentError
    down = voxel_downsample(cloud, params.voxel_down)
    if len(down) == 0:
        raise DegenerateFragmentError("cloud is empty after downsampling")
    if len(down) < params.normal_neighbors:
        raise DegenerateFragmentError(
            f"only {len(down)} points after downsampling; need {params.normal_neighbors} for normals")
    down.normals = estimate_normals(down, params.normal_neighbors, viewpoint)
    good = np.abs(down.normals).sum(axis=1) > 0
    down = down.select(good)
    feats = compute_fpfh(down.positions, down.normals, params.feature_radius, params.max_nn)
    return PreprocessedCloud(down, feats)


# ------------------------------------------------------------- estimation

def kabsch(src, dst, weights=None):
    """Least-squares rigid transform mapping ``src`` onto ``dst``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    cs, cd = w @ src, w @ dst
    h = (src - cs).T @ ((dst - cd) * w[:, None])
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidPose(r, cd - r @ cs)


def _kabsch_batch(src, dst):
    """Vectorised Kabsch for (B, n, 3) sample sets; returns (R, t) arrays."""
    cs, cd = src.mean(axis=1), dst.mean(axis=1)
    h = np.einsum("bni,bnj->bij", src - cs[:, None], dst - cd[:, None])
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(np.einsum("bji,bkj->bik", vt, u)))
    d[d == 0] = 1.0
    fix = np.ones((len(src), 3))
    fix[:, 2] = d
    r = np.einsum("bji,bj,bkj->bik", vt, fix, u)
    t = cd - np.einsum("bij,bj->bi", r, cs)
    return r, t


def evaluate_registration(src_points, dst_tree, pose: RigidPose, max_dist):
    """(fitness, inlier RMSE) of ``pose`` applied to ``src_points``."""
    if len(src_points) == 0:
        return 0.0, 0.0
    d, _ = dst_tree.query(pose.apply(src_points), distance_upper_bound=max_dist)
    inl = np.isfinite(d)
    if not inl.any():
        return 0.0, 0.0
    return float(inl.mean()), float(np.sqrt(np.mean(d[inl] ** 2)))


def _feature_matches(src_feat, dst_feat):
    _, j = cKDTree(dst_feat).query(src_feat)
    return np.arange(len(src_feat)), j


def register_pair_ransac(src: PreprocessedCloud, dst: PreprocessedCloud,
                         params: RegistrationParams = RegistrationParams()) -> RegistrationResult:
    """Feature-matched RANSAC with edge-length and distance pruning (seeded)."""
    if len(src.features) < params.ransac_n or len(dst.features) < params.ransac_n:
        raise RegistrationFailedError("not enough features for RANSAC")
    rng = np.random.default_rng(params.seed)
    ci, cj = _feature_matches(src.features, dst.features)
    ps, pd = src.points[ci], dst.points[cj]
    tree = cKDTree(dst.points)
    max_d = params.max_correspondence
    n_corr, m = len(ci), params.ransac_n
    pairs = [(a, b) for a in range(m) for b in range(a + 1, m)]

    best = (-1.0, 0.0, None)      # fitness, rmse, pose
    best_corr = -1
    est_needed = params.max_iterations
    done, batch = 0, 512
    while done < min(params.max_iterations, est_needed):
        nb = min(batch, params.max_iterations - done)
        done += nb
        # distinct indices per sample
        samp = np.stack([rng.choice(n_corr, m, replace=False) for _ in range(nb)])
        s, d = ps[samp], pd[samp]
        ok = np.ones(nb, dtype=bool)
        for a, b in pairs:
            ls = np.linalg.norm(s[:, a] - s[:, b], axis=1)
            ld = np.linalg.norm(d[:, a] - d[:, b], axis=1)
            ok &= (ls >= params.edge_ratio * ld) & (ld >= params.edge_ratio * ls)
        if not ok.any():
            continue
        r, t = _kabsch_batch(s[ok], d[ok])
        moved = np.einsum("bij,bnj->bni", r, s[ok]) + t[:, None]
        ok2 = np.all(np.linalg.norm(moved - d[ok], axis=2) <= max_d, axis=1)
        r, t = r[ok2], t[ok2]
        if len(r) == 0:
            continue
        res = np.linalg.norm(np.einsum("bij,nj->bni", r, ps) + t[:, None] - pd[None], axis=2)
        corr_inl = (res <= max_d).sum(axis=1)
        for h in np.flatnonzero(corr_inl >= best_corr):
            pose = RigidPose(r[h], t[h])
            fit, rmse = evaluate_registration(src.points, tree, pose, max_d)
            if fit > best[0] or (fit == best[0] and rmse < best[1]):
                best = (fit, rmse, pose)
            best_corr = max(best_corr, int(corr_inl[h]))
        w = best_corr / n_corr
        if 0 < w < 1:
            denom = math.log(1.0 - w ** m)
            est_needed = math.ceil(math.log(1.0 - params.confidence) / denom) if denom < 0 else est_needed
        elif w >= 1:
            est_needed = 0
    fit, rmse, pose = best
    if pose is None or fit < params.fitness_floor:
        raise RegistrationFailedError(f"RANSAC fitness {max(fit, 0):.3f} below floor {params.fitness_floor}")
    # least-squares polish on the correspondence inliers
    inl = np.linalg.norm(pose.apply(ps) - pd, axis=1) <= max_d
    if inl.sum() >= 3:
        refit = kabsch(ps[inl], pd[inl])
        f2, r2 = evaluate_registration(src.points, tree, refit, max_d)
        if f2 >= fit:
            fit, rmse, pose = f2, r2, refit
    return RegistrationResult(pose, fit, rmse)


def _tuple_test(ps, pd, i, j, params, trials=None):
    """Keep matches that appear in random triples with consistent edge lengths."""
    rng = np.random.default_rng(params.seed)
    n = len(i)
    trials = 100 * n if trials is None else trials
    tri = rng.integers(0, n, (trials, 3))
    tri = tri[(tri[:, 0] != tri[:, 1]) & (tri[:, 1] != tri[:, 2]) & (tri[:, 0] != tri[:, 2])]
    s, d = ps[i[tri]], pd[j[tri]]
    ok = np.ones(len(tri), dtype=bool)
    for a, b in ((0, 1), (1, 2), (2, 0)):
        ls = np.linalg.norm(s[:, a] - s[:, b], axis=1)
        ld = np.linalg.norm(d[:, a] - d[:, b], axis=1)
        ok &= (ls >= params.edge_ratio * ld) & (ld >= params.edge_ratio * ls)
    keep = np.unique(tri[ok])
    return i[keep], j[keep]


def register_pair_fgr(src: PreprocessedCloud, dst: PreprocessedCloud,
                      params: RegistrationParams = RegistrationParams()) -> RegistrationResult:
    """Fast global registration: reciprocal matches, Geman-McClure IRLS with graduated non-convexity."""
    if len(src.features) == 0 or len(dst.features) == 0:
        raise RegistrationFailedError("no features for FGR")
    _, fwd = cKDTree(dst.features).query(src.features)
    _, bwd = cKDTree(src.features).query(dst.features)
    i = np.flatnonzero(bwd[fwd] == np.arange(len(fwd)))
    j = fwd[i]
    if len(i) < params.min_matches:
        raise RegistrationFailedError(f"only {len(i)} reciprocal matches (< {params.min_matches})")
    i, j = _tuple_test(src.points, dst.points, i, j, params)
    if len(i) < params.min_matches:
        raise RegistrationFailedError(f"only {len(i)} matches survive the tuple test (< {params.min_matches})")
    q, p = src.points[i], dst.points[j]
    # start with the cloud centroids aligned, as the robust kernel width is only a few voxels
    pose = RigidPose(np.eye(3), dst.points.mean(axis=0) - src.points.mean(axis=0))
    v2 = params.voxel_down ** 2
    mu = 4.0 * v2
    for it in range(params.fgr_iterations):
        if it and it % 4 == 0:
            mu = max(mu / 2.0, v2 / 4.0)
        x = pose.apply(q)
        e = x - p
        l = (mu / (mu + np.einsum("ij,ij->i", e, e))) ** 2
        # J of x w.r.t. left twist (w, v): [-[x]_x, I]
        jac = np.zeros((len(x), 3, 6))
        jac[:, 0, 1], jac[:, 0, 2] = x[:, 2], -x[:, 1]
        jac[:, 1, 0], jac[:, 1, 2] = -x[:, 2], x[:, 0]
        jac[:, 2, 0], jac[:, 2, 1] = x[:, 1], -x[:, 0]
        jac[:, :, 3:] = np.eye(3)
        a = np.einsum("n,nki,nkj->ij", l, jac, jac)
        b = -np.einsum("n,nki,nk->i", l, jac, e)
        xi = np.linalg.lstsq(a, b, rcond=None)[0]
        pose = exp_se3(xi) @ pose
    tree = cKDTree(dst.points)
    fit, rmse = evaluate_registration(src.points, tree, pose, params.max_correspondence)
    if fit < params.fitness_floor:
        raise RegistrationFailedError(f"FGR fitness {fit:.3f} below floor {params.fitness_floor}")
    return RegistrationResult(pose, fit, rmse)


# --------------------------------------------------------------------- ICP

def _point_to_plane_step(src, dst, dst_normals, tree, pose, max_dist):
    x = pose.apply(src)
    d, j = tree.query(x, distance_upper_bound=max_dist)
    inl = np.isfinite(d)
    if not inl.any():
        return None, 0.0, 0.0
    x, q, n = x[inl], dst[j[inl]], dst_normals[j[inl]]
    r = np.einsum("ij,ij->i", x - q, n)
    jac = np.concatenate([np.cross(x, n), n], axis=1)
    # weakly constrained directions (e.g. spheres) stay at the current estimate
    u, s, vt = np.linalg.svd(jac, full_matrices=False)
    keep = s > 1e-3 * s[0]
    xi = vt.T @ np.where(keep, (u.T @ -r) / np.where(keep, s, 1.0), 0.0)
    return xi, float(inl.mean()), float(np.sqrt(np.mean(d[inl] ** 2)))


def icp_point_to_plane(src_points, dst_points, dst_normals, init: RigidPose, max_dist, max_iters,
                       tol=1e-6):
    """Point-to-plane ICP that never returns a pose worse than ``init``.

    The result is the lowest-RMSE iterate whose fitness is at least the
    initial fitness.
    """
    tree = cKDTree(dst_points)
    pose = init
    fit0, rmse0 = evaluate_registration(src_points, tree, init, max_dist)
    best = (init, fit0, rmse0)
    prev = (fit0, rmse0)
    for _ in range(max_iters):
        xi, _, _ = _point_to_plane_step(src_points, dst_points, dst_normals, tree, pose, max_dist)
        if xi is None:
            break
        pose = exp_se3(xi) @ pose
        fit, rmse = evaluate_registration(src_points, tree, pose, max_dist)
        if fit >= fit0 and (rmse < best[2] or (rmse == best[2] and fit > best[1])):
            best = (pose, fit, rmse)
        d_fit = abs(fit - prev[0]) / max(prev[0], 1e-12)
        d_rmse = abs(rmse - prev[1]) / max(prev[1], 1e-12)
        prev = (fit, rmse)
        if d_fit < tol and d_rmse < tol:
            break
    return RegistrationResult(*best), RegistrationResult(init, fit0, rmse0)


def refine_multiscale_icp(src: LabeledPointCloud, dst: LabeledPointCloud, init: RigidPose,
                          scales: Sequence[Tuple[float, float, int]], normal_neighbors=30):
    """Coarse-to-fine point-to-plane ICP; each scale starts from the previous result."""
    if not scales:
        raise InvalidInputError("at least one ICP scale is required")
    pose = init
    result = None
    for level, (voxel, max_dist, iters) in enumerate(scales):
        s = voxel_downsample(src, voxel).positions
        dcloud = voxel_downsample(dst, voxel)
        if len(dcloud) < normal_neighbors or len(s) == 0:
            raise InsufficientOverlapError(f"too few points at ICP scale {voxel}")
        normals = estimate_normals(dcloud, normal_neighbors)
        good = np.abs(normals).sum(axis=1) > 0
        d, normals = dcloud.positions[good], normals[good]
        result, initial = icp_point_to_plane(s, d, normals, pose, max_dist, iters)
        if level == 0 and initial.fitness == 0.0 and result.fitness == 0.0:
            raise InsufficientOverlapError(f"no correspondences within {max_dist} at the coarsest scale")
        pose = result.pose
    return result
