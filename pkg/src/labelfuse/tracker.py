"""Baseline label-mask propagation across an image sequence.

Each label region is moved by the integer translation that best explains the
colours of the new frame. It is then refined pixel by pixel against the
region's colours. Seeds at later frames overwrite the propagated mask, which
is how manual corrections enter the sequence.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .errors import InvalidInputError, NoSeedError
from .geometry import check_color, check_labels, check_same_shape

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrackerConfig:
    search_radius: int = 8
    color_threshold: float = 0.1
    min_area: int = 10

    def __post_init__(self):
        if self.search_radius < 0:
            raise InvalidInputError("search_radius must be >= 0")
        if not 0.0 <= self.color_threshold <= 1.0:
            raise InvalidInputError("color_threshold must lie in [0, 1]")
        if self.min_area < 1:
            raise InvalidInputError("min_area must be >= 1")


def _shift_order(radius):
    """Candidate shifts sorted by squared length, then (dx, dy)."""
    r = np.arange(-radius, radius + 1)
    dx, dy = np.meshgrid(r, r, indexing="ij")
    dx, dy = dx.ravel(), dy.ravel()
    order = np.lexsort((dy, dx, dx * dx + dy * dy))
    return dx[order], dy[order]


def _color_distance(a, b):
    """Mean absolute channel difference scaled to [0, 1]."""
    return np.abs(a.astype(np.float64) - b.astype(np.float64)).mean(axis=-1) / 255.0


def estimate_shift(current, previous, region, radius):
    """Best integer translation (dx, dy) for one region and its agreement score."""
    h, w = region.shape
    ys, xs = np.nonzero(region)
    src = previous[ys, xs]
    best = (-np.inf, 0, 0)
    for dx, dy in zip(*_shift_order(radius)):
        ty, tx = ys + dy, xs + dx
        inb = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
        diff = np.ones(len(ys))
        diff[inb] = _color_distance(current[ty[inb], tx[inb]], src[inb])
        score = 1.0 - diff.mean()
        if score > best[0]:
            best = (score, int(dx), int(dy))
    return best[1], best[2], best[0]


def _refine(current, previous, region, dx, dy, threshold):
    h, w = region.shape
    ys, xs = np.nonzero(region)
    mean = previous[ys, xs].astype(np.float64).mean(axis=0)
    ty, tx = ys + dy, xs + dx
    inb = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
    ys, xs, ty, tx = ys[inb], xs[inb], ty[inb], tx[inb]
    cur = current[ty, tx]
    keep = ((_color_distance(cur, previous[ys, xs]) <= threshold)
            | (_color_distance(cur, mean) <= threshold))
    out = np.zeros_like(region)
    out[ty[keep], tx[keep]] = True
    shifted = np.zeros_like(region)
    shifted[ty, tx] = True
    # one-pixel ring around the shifted region: grow only where the colour is
    # new, i.e. object-like now but not at the source location before
    ring = np.zeros_like(region)
    ring[1:] |= shifted[:-1]
    ring[:-1] |= shifted[1:]
    ring[:, 1:] |= shifted[:, :-1]
    ring[:, :-1] |= shifted[:, 1:]
    ring &= ~shifted
    ry, rx = np.nonzero(ring)
    sy, sx = np.clip(ry - dy, 0, h - 1), np.clip(rx - dx, 0, w - 1)
    grow = ((_color_distance(current[ry, rx], mean) <= threshold)
            & (_color_distance(previous[sy, sx], mean) > threshold))
    out[ry[grow], rx[grow]] = True
    return out


def propagate_mask(current, previous, previous_mask, cfg: TrackerConfig = TrackerConfig(),
                   return_lost=False):
    """Predict the label mask of ``current`` from the previous frame and its mask.

    With ``return_lost`` the ids whose refined area fell below ``cfg.min_area``
    are returned as a second value.
    """
    current = check_color(current, "current")
    previous = check_color(previous, "previous")
    previous_mask = check_labels(previous_mask, "previous_mask")
    check_same_shape(current, previous, previous_mask)
    ids = np.unique(previous_mask)
    ids = ids[ids != 0]
    if len(ids) == 0:
        raise NoSeedError("previous mask has no labeled pixels")

    out = np.zeros_like(previous_mask)
    best = np.full(previous_mask.shape, -np.inf)
    lost = []
    for lab in ids:
        region = previous_mask == lab
        dx, dy, score = estimate_shift(current, previous, region, cfg.search_radius)
        claim = _refine(current, previous, region, dx, dy, cfg.color_threshold)
        if np.count_nonzero(claim) < cfg.min_area:
            lost.append(int(lab))
            continue
        # labels are visited in ascending id order, so ties keep the lower id
        win = claim & (score > best)
        out[win] = lab
        best[win] = score
    for lab in ids:
        if int(lab) not in lost and np.count_nonzero(out == lab) < cfg.min_area:
            out[out == lab] = 0
            lost.append(int(lab))
    if lost:
        log.debug("labels lost: %s", sorted(lost))
    if return_lost:
        return out, sorted(lost)
    return out


def track_sequence(images: Sequence, seed_masks: Dict[int, np.ndarray],
                   cfg: TrackerConfig = TrackerConfig()) -> List[np.ndarray]:
    """Propagate masks through ``images``; ``seed_masks`` must contain frame 0.

    A seed at frame i replaces whatever was propagated into frame i. Once every
    label is lost, frames stay empty until the next seed.
    """
    if 0 not in seed_masks:
        raise NoSeedError("seed_masks must contain frame 0")
    images = [check_color(im, f"image {i}") for i, im in enumerate(images)]
    for i, s in seed_masks.items():
        if not 0 <= i < len(images):
            raise InvalidInputError(f"seed index {i} outside sequence of {len(images)} frames")
        check_same_shape(images[i], s)
    out = []
    for i, img in enumerate(images):
        if i in seed_masks:
            out.append(check_labels(seed_masks[i]).copy())
        elif not out[-1].any():
            out.append(np.zeros_like(out[-1]))
        else:
            out.append(propagate_mask(img, images[i - 1], out[-1], cfg))
    return out
