"""Block-hashed TSDF volume with a colour channel and a label-histogram channel.

Geometry (tsdf, weight) is shared by both channels, so RGBD and MASKD streams
over the same depth and poses yield identical fields by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from skimage.measure import marching_cubes

from .errors import InvalidInputError
from .geometry import (Intrinsics, LabeledPointCloud, MASKDFrame, RGBDFrame, RigidPose, check_color,
                       check_depth, check_labels, check_same_shape, depth_to_points)

LABEL_SLOTS = 8
COUNT_MAX = np.iinfo(np.uint16).max


@dataclass
class LabeledMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        n = len(self.vertices)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise InvalidInputError("triangle index out of range")
        self.labels = (np.zeros(n, np.uint16) if self.labels is None
                       else np.asarray(self.labels).astype(np.uint16).reshape(-1))
        if self.colors is not None:
            self.colors = np.asarray(self.colors).astype(np.uint8).reshape(-1, 3)
        for name in ("labels", "colors"):
            a = getattr(self, name)
            if a is not None and len(a) != n:
                raise InvalidInputError(f"{name} is not parallel to vertices")

    def __len__(self):
        return len(self.vertices)

    @property
    def positions(self):
        return self.vertices

    def edges(self):
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def euler_characteristic(self):
        used = np.unique(self.triangles)
        return len(used) - len(self.edges()) + len(self.triangles)

    def select_labeled(self):
        """Drop label-0 vertices and every triangle that touches one."""
        return self.select(self.labels != 0)

    def select(self, keep):
        """Sub-mesh on the vertices where ``keep`` is true; triangles need all three."""
        keep = np.asarray(keep, dtype=bool)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[keep] = np.arange(int(keep.sum()))
        tri = self.triangles[keep[self.triangles].all(axis=1)] if len(self.triangles) else self.triangles
        return LabeledMesh(self.vertices[keep], remap[tri],
                           None if self.colors is None else self.colors[keep], self.labels[keep])


class TsdfVolume:
    """Sparse voxel blocks allocated on first touch.

    Voxel ``g`` (global integer index) sits at ``g * voxel_size``. The tsdf is
    stored in units of the truncation distance. Each voxel also carries a
    running-mean colour and a label histogram with ``LABEL_SLOTS`` id slots plus
    a dedicated background counter.
    """

    def __init__(self, voxel_size=0.008, truncation=None, block_edge=16, max_weight=255.0):
        truncation = 4 * voxel_size if truncation is None else truncation
        if not voxel_size > 0:
            raise InvalidInputError("voxel_size must be positive")
        if truncation < voxel_size:
            raise InvalidInputError("truncation must be at least one voxel")
        if block_edge < 1:
            raise InvalidInputError("block_edge must be >= 1")
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self.block_edge = int(block_edge)
        self.max_weight = float(max_weight)
        self._index = {}
        self._coords = np.zeros((0, 3), dtype=np.int64)
        n = self.block_edge ** 3
        self.tsdf = np.zeros((0, n))
        self.weight = np.zeros((0, n))
        self.color = np.zeros((0, n, 3), dtype=np.float32)
        self.hist_ids = np.zeros((0, n, LABEL_SLOTS), dtype=np.uint16)
        self.hist_counts = np.zeros((0, n, LABEL_SLOTS), dtype=np.uint16)
        self.hist_background = np.zeros((0, n), dtype=np.uint16)
        local = np.stack(np.meshgrid(*[np.arange(self.block_edge)] * 3, indexing="ij"), -1)
        self._local = local.reshape(-1, 3)

    # -------------------------------------------------------------- blocks
    @property
    def block_count(self):
        return len(self._index)

    @property
    def block_coords(self):
        return self._coords[: self.block_count].copy()

    @property
    def block_length(self):
        return self.voxel_size * self.block_edge

    def _grow(self, needed):
        cap = len(self.tsdf)
        if needed <= cap:
            return
        new = max(needed, 2 * cap, 16)

        def ext(a):
            out = np.zeros((new,) + a.shape[1:], dtype=a.dtype)
            out[:cap] = a
            return out
        self.tsdf, self.weight, self.color = ext(self.tsdf), ext(self.weight), ext(self.color)
        self.hist_ids, self.hist_counts = ext(self.hist_ids), ext(self.hist_counts)
        self.hist_background = ext(self.hist_background)
        self._coords = ext(self._coords)

    def allocate(self, block_coords):
        """Ensure blocks exist; returns their slot indices."""
        block_coords = np.asarray(block_coords, dtype=np.int64).reshape(-1, 3)
        slots = np.empty(len(block_coords), dtype=np.int64)
        fresh = [i for i, b in enumerate(map(tuple, block_coords)) if b not in self._index]
        self._grow(self.block_count + len(fresh))
        for i, b in enumerate(map(tuple, block_coords)):
            s = self._index.get(b)
            if s is None:
                s = len(self._index)
                self._index[b] = s
                self._coords[s] = b
            slots[i] = s
        return slots

    def allocate_around(self, points):
        """Allocate the blocks containing world ``points``."""
        keys = np.unique(np.floor(np.asarray(points) / self.block_length).astype(np.int64), axis=0)
        return self.allocate(keys)

    def voxel_positions(self, slots):
        """World coordinates of every voxel in the given block slots, (S, n, 3)."""
        g = self._coords[slots][:, None, :] * self.block_edge + self._local[None]
        return g * self.voxel_size

    # ----------------------------------------------------------- integration
    def _band_blocks(self, depth, k, pose):
        valid = depth > 0
        pts = depth_to_points(depth, k)[valid]
        if len(pts) == 0:
            return np.zeros((0, 3), dtype=np.int64)
        rays = pts / pts[:, 2:3]
        n_steps = max(2, int(np.ceil(2 * self.truncation / (0.5 * self.block_length))))
        offsets = np.linspace(-self.truncation, self.truncation, n_steps + 1)
        keys = []
        for off in offsets:
            z = np.maximum(pts[:, 2] + off, 1e-9)
            world = pose.apply(rays * z[:, None])
            keys.append(np.floor(world / self.block_length).astype(np.int64))
        return np.unique(np.concatenate(keys), axis=0)

    def _in_frustum(self, block_keys, k, pose):
        """Drop blocks whose corners all fall on one side of the image (or behind the camera)."""
        if len(block_keys) == 0:
            return block_keys
        corners = np.array([[i, j, l] for i in (0, 1) for j in (0, 1) for l in (0, 1)], dtype=np.float64)
        w = (block_keys[:, None, :] + corners[None]) * self.block_length
        c = (w - pose.translation) @ pose.rotation
        z = c[..., 2]
        behind = np.all(z <= 0, axis=1)
        zs = np.where(z > 0, z, np.nan)
        with np.errstate(invalid="ignore"):
            u = k.fx * c[..., 0] / zs + k.cx
            v = k.fy * c[..., 1] / zs + k.cy
        front = z > 0
        out = (np.all(~front | (u < -0.5), axis=1) | np.all(~front | (u >= k.width - 0.5), axis=1)
               | np.all(~front | (v < -0.5), axis=1) | np.all(~front | (v >= k.height - 0.5), axis=1))
        # blocks straddling the image plane can't be culled by projection alone
        straddle = np.any(z <= 0, axis=1) & np.any(z > 0, axis=1)
        return block_keys[~behind & (~out | straddle)]

    def integrate(self, depth, intrinsics: Intrinsics, pose: RigidPose, color=None, labels=None):
        """Fuse one depth image. ``pose`` is camera->world.

        The traversal and the tsdf/weight update do not depend on which payloads
        are given. ``color`` feeds the colour mean, ``labels`` the histogram.
        """
        depth = check_depth(depth)
        if color is not None:
            color = check_color(color)
        if labels is not None:
            labels = check_labels(labels)
        check_same_shape(depth, color, labels)
        k = intrinsics
        if depth.shape != k.shape:
            raise InvalidInputError("depth size does not match intrinsics")
        keys = self._in_frustum(self._band_blocks(depth, k, pose), k, pose)
        if len(keys) == 0:
            return
        keys = keys[np.lexsort(keys.T[::-1])]
        slots = self.allocate(keys)

        world = self.voxel_positions(slots).reshape(-1, 3)
        cam = (world - pose.translation) @ pose.rotation
        z = cam[:, 2]
        zs = np.where(z > 0, z, 1.0)
        u = np.rint(k.fx * cam[:, 0] / zs + k.cx).astype(np.int64)
        v = np.rint(k.fy * cam[:, 1] / zs + k.cy).astype(np.int64)
        ok = (z > 0) & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
        idx = np.flatnonzero(ok)
        u, v = u[idx], v[idx]
        d = depth[v, u]
        sdf = d - z[idx]
        upd = (d > 0) & (sdf >= -self.truncation)
        idx, u, v, sdf = idx[upd], u[upd], v[upd], sdf[upd]
        if len(idx) == 0:
            return
        n = self.block_edge ** 3
        b = slots[idx // n]
        i = idx % n
        sample = np.minimum(sdf, self.truncation) / self.truncation
        w = self.weight[b, i]
        self.tsdf[b, i] = (self.tsdf[b, i] * w + sample) / (w + 1.0)
        self.weight[b, i] = np.minimum(w + 1.0, self.max_weight)
        if color is not None:
            c = self.color[b, i].astype(np.float64)
            wc = w[:, None]
            self.color[b, i] = ((c * wc + color[v, u]) / (wc + 1.0)).astype(np.float32)
        if labels is not None:
            self._vote(b, i, labels[v, u])

    def _vote(self, b, i, lab):
        bg = lab == 0
        if bg.any():
            cur = self.hist_background[b[bg], i[bg]].astype(np.int64)
            self.hist_background[b[bg], i[bg]] = np.minimum(cur + 1, COUNT_MAX)
        fg = ~bg
        if not fg.any():
            return
        b, i, lab = b[fg], i[fg], lab[fg]
        ids = self.hist_ids[b, i]
        cnt = self.hist_counts[b, i]
        used = cnt > 0
        match = (ids == lab[:, None]) & used
        has = match.any(axis=1)
        empty = ~used
        slot = np.where(has, match.argmax(axis=1),
                        np.where(empty.any(axis=1), empty.argmax(axis=1), cnt.argmin(axis=1)))
        rows = np.arange(len(b))
        new = ~has
        cnt[rows[new], slot[new]] = 0
        ids[rows, slot] = lab
        cnt[rows, slot] = np.minimum(cnt[rows, slot].astype(np.int64) + 1, COUNT_MAX)
        self.hist_ids[b, i] = ids
        self.hist_counts[b, i] = cnt

    # --------------------------------------------------------------- queries
    def _observed(self):
        nb = self.block_count
        n = self.block_edge ** 3
        flat = np.flatnonzero(self.weight[:nb].reshape(-1) > 0)
        return flat // n, flat % n

    def _global_index(self, b, i):
        return self._coords[b] * self.block_edge + self._local[i]

    def argmax_labels(self, b, i):
        """Histogram argmax (background included as id 0); ties go to the lower id."""
        ids = self.hist_ids[b, i].astype(np.int64)
        cnt = self.hist_counts[b, i].astype(np.int64)
        bgc = self.hist_background[b, i].astype(np.int64)
        top = np.maximum(cnt.max(axis=1), bgc)
        cand = np.where((cnt == top[:, None]) & (cnt > 0), ids, np.iinfo(np.int64).max).min(axis=1)
        out = np.where((bgc == top) | (top == 0), 0, cand)
        return out.astype(np.uint16)

    def lookup(self, points):
        """(tsdf, weight) at the voxels nearest to world ``points``; unallocated -> (1, 0)."""
        g = np.rint(np.asarray(points, dtype=np.float64).reshape(-1, 3) / self.voxel_size).astype(np.int64)
        blocks = np.floor_divide(g, self.block_edge)
        local = g - blocks * self.block_edge
        li = (local[:, 0] * self.block_edge + local[:, 1]) * self.block_edge + local[:, 2]
        t = np.ones(len(g))
        w = np.zeros(len(g))
        for r, key in enumerate(map(tuple, blocks)):
            s = self._index.get(key)
            if s is not None:
                t[r], w[r] = self.tsdf[s, li[r]], self.weight[s, li[r]]
        return t, w

    def fields(self):
        """Dense copies of (block coords, tsdf, weight) for comparisons."""
        nb = self.block_count
        return self._coords[:nb].copy(), self.tsdf[:nb].copy(), self.weight[:nb].copy()


# ------------------------------------------------------------ integration API

def integrate_rgbd(volume: TsdfVolume, frame: RGBDFrame, pose: RigidPose):
    """Colour + depth integration; ``pose`` is camera->world."""
    volume.integrate(frame.depth, frame.intrinsics, pose, color=frame.color)


def integrate_maskd(volume: TsdfVolume, frame: MASKDFrame, intrinsics: Intrinsics, pose: RigidPose):
    """Label + depth integration through the same traversal as :func:`integrate_rgbd`."""
    volume.integrate(frame.depth, intrinsics, pose, labels=frame.labels)


def integrate_fragments(volume: TsdfVolume, frames: Sequence[RGBDFrame], masks, fragments, fragment_poses):
    """Integrate every frame at ``fragment_pose @ frame_pose_in_fragment``.

    ``masks`` holds MASKDFrames or plain label images, or is None (color only).
    Each frame updates geometry once and both payload channels, so a MASKD
    depth must equal the RGBD depth of the same frame.
    """
    if len(fragments) != len(fragment_poses):
        raise InvalidInputError("one pose per fragment is required")
    if masks is not None and len(masks) != len(frames):
        raise InvalidInputError("frames and masks differ in length")
    owner = {}
    for fi, frag in enumerate(fragments):
        for j, f in enumerate(range(frag.start, frag.end)):
            owner[f] = (fi, j)
    for f in range(len(frames)):
        if f not in owner:
            raise InvalidInputError(f"frame {f} belongs to no fragment")
    for f, frame in enumerate(frames):
        fi, j = owner[f]
        pose = fragment_poses[fi] @ fragments[fi].frame_poses[j]
        labels = None if masks is None else masks[f]
        if isinstance(labels, MASKDFrame):
            if not np.array_equal(labels.depth, frame.depth):
                raise InvalidInputError(f"frame {f}: mask depth differs from the RGBD depth")
            labels = labels.labels
        volume.integrate(frame.depth, frame.intrinsics, pose, color=frame.color, labels=labels)


# ----------------------------------------------------------------- extraction

def _sorted_lookup(keys_sorted, query):
    pos = np.searchsorted(keys_sorted, query)
    pos = np.minimum(pos, len(keys_sorted) - 1)
    return pos, keys_sorted[pos] == query


def _encode(g, lo, dims):
    g = g - lo
    return (g[:, 0] * dims[1] + g[:, 1]) * dims[2] + g[:, 2]


def extract_point_cloud(volume: TsdfVolume) -> LabeledPointCloud:
    """Zero crossings on voxel edges between two observed voxels."""
    b, i = volume._observed()
    if len(b) == 0:
        return LabeledPointCloud(np.zeros((0, 3)), colors=np.zeros((0, 3), np.uint8))
    g = volume._global_index(b, i)
    lo = g.min(axis=0) - 1
    dims = g.max(axis=0) - lo + 2
    keys = _encode(g, lo, dims)
    order = np.argsort(keys)
    keys, b, i, g = keys[order], b[order], i[order], g[order]
    t = volume.tsdf[b, i]
    col = volume.color[b, i].astype(np.float64)
    lab = volume.argmax_labels(b, i)
    pos, cols, labs = [], [], []
    for axis in range(3):
        step = np.zeros(3, dtype=np.int64)
        step[axis] = 1
        j, found = _sorted_lookup(keys, _encode(g + step, lo, dims))
        a_idx = np.flatnonzero(found)
        b_idx = j[found]
        ta, tb = t[a_idx], t[b_idx]
        cross = (ta >= 0) != (tb >= 0)
        a_idx, b_idx, ta, tb = a_idx[cross], b_idx[cross], ta[cross], tb[cross]
        f = ta / (ta - tb)
        p = (g[a_idx] + f[:, None] * step) * volume.voxel_size
        pos.append(p)
        cols.append(col[a_idx] * (1 - f)[:, None] + col[b_idx] * f[:, None])
        labs.append(np.where(np.abs(ta) <= np.abs(tb), lab[a_idx], lab[b_idx]))
    return LabeledPointCloud(np.concatenate(pos), np.concatenate(labs),
                             np.rint(np.concatenate(cols)).astype(np.uint8))


def _dense(volume):
    b, i = volume._observed()
    g = volume._global_index(b, i)
    lo = g.min(axis=0)
    dims = g.max(axis=0) - lo + 1
    shape = tuple(int(x) for x in dims)
    t = np.ones(shape, dtype=np.float64)
    w = np.zeros(shape, dtype=bool)
    idx = tuple((g - lo).T)
    t[idx] = volume.tsdf[b, i]
    w[idx] = True
    return lo, t, w, b, i, g


def extract_mesh(volume: TsdfVolume) -> LabeledMesh:
    """Marching cubes over cubes whose eight corners are all observed.

    The volume is densified over its observed bounding box, so faces across
    block borders share vertices.
    """
    b, _ = volume._observed()
    if len(b) == 0:
        return LabeledMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64), np.zeros((0, 3), np.uint8))
    lo, t, w, b, i, g = _dense(volume)
    if min(t.shape) < 2:
        return LabeledMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64), np.zeros((0, 3), np.uint8))
    cube = w.copy()
    cube[-1, :, :] = cube[:, -1, :] = cube[:, :, -1] = False
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                if dx or dy or dz:
                    cube[:t.shape[0] - dx, :t.shape[1] - dy, :t.shape[2] - dz] &= \
                        w[dx:, dy:, dz:]
    if not cube.any() or t[w].min() >= 0 or t[w].max() < 0:
        return LabeledMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64), np.zeros((0, 3), np.uint8))
    # skimage keys each cube on its upper corner
    mask = np.zeros_like(cube)
    mask[1:, 1:, 1:] = cube[:-1, :-1, :-1]
    try:
        verts, faces, _, _ = marching_cubes(t, level=0.0, mask=mask, allow_degenerate=False)
    except (ValueError, RuntimeError):
        return LabeledMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64), np.zeros((0, 3), np.uint8))
    verts, faces = _weld(verts, faces)
    # vertex attributes from the two voxel endpoints of the edge each vertex lies on
    a = np.floor(verts).astype(np.int64)
    frac = verts - a
    axis = frac.argmax(axis=1)
    f = frac[np.arange(len(verts)), axis]
    bb = a.copy()
    bb[np.arange(len(verts)), axis] += (f > 0)
    dense_slot = -np.ones(t.shape, dtype=np.int64)
    dense_slot[tuple((g - lo).T)] = np.arange(len(g))
    ia = dense_slot[tuple(a.T)]
    ib = dense_slot[tuple(bb.T)]
    col = volume.color[b, i].astype(np.float64)
    lab = volume.argmax_labels(b, i)
    ta, tb = volume.tsdf[b[ia], i[ia]], volume.tsdf[b[ib], i[ib]]
    colors = col[ia] * (1 - f)[:, None] + col[ib] * f[:, None]
    labels = np.where(np.abs(ta) <= np.abs(tb), lab[ia], lab[ib])
    vertices = (verts + lo) * volume.voxel_size
    return LabeledMesh(vertices, faces.astype(np.int64), np.rint(colors).astype(np.uint8), labels)


def _weld(verts, faces):
    """Merge bit-identical vertices and drop faces that collapse."""
    uniq, inv = np.unique(verts, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    if len(uniq) == len(verts):
        return verts, faces
    faces = inv[faces]
    good = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    return uniq, faces[good]


def extract_voxel_grid(volume: TsdfVolume, threshold=0.5) -> LabeledPointCloud:
    """Observed voxels with ``|tsdf| < threshold`` as a cloud of voxel centres."""
    b, i = volume._observed()
    t = volume.tsdf[b, i]
    keep = np.abs(t) < threshold
    b, i = b[keep], i[keep]
    g = volume._global_index(b, i)
    order = np.lexsort(g.T[::-1])
    b, i, g = b[order], i[order], g[order]
    return LabeledPointCloud(g * volume.voxel_size, volume.argmax_labels(b, i),
                             np.rint(volume.color[b, i]).astype(np.uint8))
